"""Exception hierarchy shared by every module in the package."""


class PosQueryError(Exception):
    """Base class; the CLI turns these into exit code 1."""


class ShapeMismatch(PosQueryError, ValueError):
    pass


class InvalidDimension(PosQueryError, ValueError):
    pass


class InvalidRange(PosQueryError, ValueError):
    pass


class InvalidSize(PosQueryError, ValueError):
    pass


class TimestepOutOfRange(PosQueryError, ValueError):
    pass


class NonMonotonic(PosQueryError, ValueError):
    pass


class DegenerateAnchor(PosQueryError, ValueError):
    pass


class UnsatisfiableCrop(PosQueryError, ValueError):
    pass


class MissingParams(PosQueryError, ValueError):
    pass


class NonFiniteActivation(PosQueryError, FloatingPointError):
    def __init__(self, where, iteration=None, batch_index=None):
        self.where = where
        self.iteration = iteration
        self.batch_index = batch_index
        msg = f"non-finite activation in {where}"
        if iteration is not None:
            msg += f" at iteration {iteration}"
        if batch_index is not None:
            msg += f", batch index {batch_index}"
        super().__init__(msg)


class UntrainedModel(PosQueryError, RuntimeError):
    pass


class VersionMismatch(PosQueryError, ValueError):
    pass


class IoFailure(PosQueryError, OSError):
    pass


class EmptyFolder(PosQueryError, ValueError):
    pass


class DecodeFailure(PosQueryError, ValueError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot decode {self.path}" + (f": {reason}" if reason else ""))


class EmptyAfterFilter(PosQueryError, ValueError):
    def __init__(self, excluded_infinite, excluded_cutoff):
        self.excluded_infinite = excluded_infinite
        self.excluded_cutoff = excluded_cutoff
        super().__init__(
            f"no PSNR values left after filtering "
            f"(excluded_infinite={excluded_infinite}, excluded_cutoff={excluded_cutoff})"
        )


class ConfigError(PosQueryError, ValueError):
    pass
