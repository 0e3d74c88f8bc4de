"""Exception hierarchy shared by all modules."""


class StabError(Exception):
    """Base class for every error raised by this package."""


class OutOfDomain(StabError, ValueError):
    """A point has no image under the camera model (behind camera, zero vector)."""


class DimensionMismatch(StabError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class BundleError(StabError):
    """Raised when a bundle directory cannot be read or fails validation."""


class MissingFile(BundleError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = path


class CorruptHeader(BundleError):
    def __init__(self, fmt, path, detail=""):
        msg = f"corrupt {fmt} header in {path}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.format = fmt
        self.path = path


class NonUnitQuaternion(BundleError, ValueError):
    def __init__(self, index, norm):
        super().__init__(f"camera {index}: quaternion norm {norm!r} is not 1")
        self.index = index


class InvalidBundle(BundleError, ValueError):
    pass


class DegenerateRotation(StabError, ArithmeticError):
    def __init__(self, message, frame=None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame


class TooShort(StabError, ValueError):
    pass


class DegenerateBaseline(StabError, ArithmeticError):
    pass


class InsufficientMatches(StabError, ValueError):
    pass


class DegenerateConfiguration(StabError, ArithmeticError):
    pass


class EmptyAfterFiltering(StabError, ValueError):
    pass


class LengthMismatch(StabError, ValueError):
    pass


class SpecError(StabError, ValueError):
    """Invalid synthetic scene specification."""


class ConfigError(StabError, ValueError):
    """Invalid run configuration."""
