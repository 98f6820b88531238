"""Exception hierarchy shared by all modules."""


class QWorkError(ValueError):
    """Base class for every error raised by this package."""


class DimensionCapExceeded(QWorkError):
    def __init__(self, dim, cap):
        super().__init__(f"dimension cap exceeded: {dim} > {cap}")
        self.dim = dim
        self.cap = cap


class DimensionMismatch(QWorkError):
    pass


class NotUnitary(QWorkError):
    pass


class InvalidState(QWorkError):
    pass


class DomainError(QWorkError):
    pass


class DivergentError(DomainError):
    pass


class OffLatticeShift(QWorkError):
    pass


class IncompatibleDecomposition(QWorkError):
    pass


class WeightWindowTooSmall(QWorkError):
    pass
