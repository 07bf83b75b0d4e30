"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Shapes, widths or settings that do not fit together."""


class InputTooShortError(ConfigError):
    pass


class RangeError(ValueError):
    """An index, digit, tone or label outside its valid range."""


class ContractError(ValueError):
    """An input violates a documented precondition (e.g. rows not summing to 1)."""


class InfeasibleTargetError(ValueError):
    """A CTC target cannot be aligned to the available number of frames."""


class UndefinedMetricError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str, detail: str = ""):
        self.name = name
        msg = f"non-finite gradient in parameter {name!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss. Carries the last good model."""

    def __init__(self, message: str, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history or []


class CheckpointError(IOError):
    pass


class CorpusFormatError(IOError):
    pass
