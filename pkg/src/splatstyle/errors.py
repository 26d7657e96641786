"""Exception types shared across the package."""


class SplatError(Exception):
    """Base class for all package errors."""


class ShapeError(SplatError):
    """Operands have incompatible shapes."""

    def __init__(self, msg, *shapes):
        if shapes:
            msg = f"{msg}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(msg)


class SizeError(SplatError):
    """A requested count exceeds what the input provides."""


class ParseError(SplatError):
    """A file failed to parse; message names the offending field/element."""


class EmptySelectionError(SplatError):
    """A spatial selection matched nothing."""

    def __init__(self, box):
        self.box = box
        super().__init__(f"no splats inside box min={box.min.tolist()} max={box.max.tolist()}")


class NumericError(SplatError):
    """A non-finite value appeared where finite math was required."""


class ContractError(SplatError):
    """An API precondition was violated by the caller."""


class DomainError(SplatError):
    """A function was evaluated outside its valid domain."""


class VocabularyError(SplatError):
    """Unknown prompt; carries the known vocabulary for error messages."""

    def __init__(self, prompt, vocabulary):
        self.prompt = prompt
        self.vocabulary = list(vocabulary)
        known = "; ".join(repr(p) for p in self.vocabulary)
        super().__init__(f"unknown prompt {prompt!r}; known prompts: {known}")


class ConfigError(SplatError):
    """Invalid configuration value."""


class CheckpointError(SplatError):
    """Missing or malformed checkpoint."""
