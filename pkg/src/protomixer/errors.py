"""Exception types shared across the package.

The CLI maps these onto exit codes (see ``protomixer.cli``).
"""


class ProtoMixerError(Exception):
    pass


class DimensionError(ProtoMixerError, ValueError):
    """Operand shapes do not agree."""


class ParameterError(ProtoMixerError, ValueError):
    """An argument is outside its allowed range."""


class ConfigError(ProtoMixerError, ValueError):
    pass


class FormatError(ProtoMixerError):
    """A file on disk does not follow the expected byte layout."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DataError(ProtoMixerError):
    """Dataset-level problem: missing file, duplicate slide, mixed widths."""


class StateError(ProtoMixerError, RuntimeError):
    pass


class NonFiniteGradientError(ProtoMixerError, FloatingPointError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"non-finite gradient in parameter block {block!r}")
