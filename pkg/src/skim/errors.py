"""Exception types shared across the package."""


class SkimError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SkimError):
    """Operands have incompatible or invalid shapes."""


class ContractError(SkimError):
    """A documented precondition of an operation was violated."""


class InputError(SkimError):
    """User-supplied data is malformed or out of range."""


class ConfigError(SkimError):
    """A configuration value is outside its documented range."""


class RegistryError(SkimError):
    """Parameter registry misuse (duplicate or unknown name)."""


class ParseError(SkimError):
    """A file could not be parsed.  Carries the path and byte offset."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path}: byte {self.offset}: {message}")


class CheckpointError(SkimError):
    """Base class for checkpoint load failures."""


class ChecksumError(CheckpointError):
    pass


class FingerprintError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass
