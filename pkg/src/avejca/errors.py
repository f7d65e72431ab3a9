"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """A run configuration is invalid or inconsistent with its inputs."""


class FormatError(ValueError):
    """A binary file failed to parse.

    ``offset`` is the byte offset of the first inconsistency and ``kind`` a
    short machine-readable tag (``bad_magic``, ``truncated``, ...).
    """

    def __init__(self, message: str, offset: int, kind: str):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
        self.kind = kind
