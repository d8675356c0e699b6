class ActionTimelinesError(Exception):
    """Base class for every error raised by action_timelines"""


class InvalidValueError(ActionTimelinesError, ValueError):
    """A value is non-finite or outside its allowed range"""


class ShapeMismatchError(ActionTimelinesError, ValueError):
    """Two inputs that must agree in length, shape or dimension do not"""


class UnsortedInputError(ActionTimelinesError, ValueError):
    """Predictions were not ordered by descending score where required"""


class ConfigError(ActionTimelinesError):
    """A configuration file or override is malformed"""


class FormatError(ActionTimelinesError):
    """A file does not follow its declared binary or text layout"""

    def __init__(self, path, message: str) -> None:
        self.path = str(path)
        super().__init__("{}: {}".format(self.path, message))


class TruncatedFileError(FormatError):
    """A file ended before its header said it would"""


class DivergenceError(ActionTimelinesError):
    """Training produced a non-finite loss"""

    def __init__(self, batch_id: int, components: dict) -> None:
        self.batch_id = batch_id
        self.components = components
        parts = ", ".join("{}={}".format(k, v) for k, v in components.items())
        super().__init__("non-finite loss at batch {} ({})".format(batch_id, parts))
