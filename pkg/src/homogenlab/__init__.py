__version__ = '0.1.0'


class SolverFailure(RuntimeError):
    """
    A linear or saddle-point solve did not converge (or the factorization is singular).

    :param message: what failed.
    :param residual: last relative residual, ``None`` when the failure happened before iterating.
    :param stage: which solve failed, e.g. ``"expansion term 3"``.
    """

    def __init__(self, message, residual=None, stage=None):
        super().__init__(message)
        self.residual = residual
        self.stage = stage


class CompatibilityError(ValueError):
    pass


class UnderResolved(ValueError):
    pass


class GeometryError(RuntimeError):
    pass


class NotQuadratic(RuntimeError):
    pass


class NotASolution(ValueError):
    pass


class ConfigError(ValueError):
    pass
