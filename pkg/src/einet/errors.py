"""Exception hierarchy.

Every error carries a short ``category`` used by the CLI to print a
categorized one-line message and choose an exit code.
"""


class EINetError(Exception):
    category = "error"


class InvalidValueError(EINetError, ValueError):
    """A tensor would contain NaN or Inf."""

    category = "invalid-value"


class ShapeError(EINetError, ValueError):
    category = "shape"


class MissingGradientError(EINetError, KeyError):
    category = "missing-gradient"

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class GradientCheckError(EINetError):
    category = "gradcheck"


class WeightsError(EINetError, KeyError):
    category = "weights"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class WindowError(EINetError, ValueError):
    category = "window"


class ConfigError(EINetError, ValueError):
    category = "config"


class InputError(EINetError, ValueError):
    category = "input"


class ParseError(EINetError, ValueError):
    category = "parse"


class TaxonomyError(EINetError, ValueError):
    category = "taxonomy"


class PairingError(EINetError, FileNotFoundError):
    category = "pairing"


class LayoutError(EINetError, ValueError):
    category = "layout"


class FormatError(EINetError, ValueError):
    category = "format"


class LengthError(FormatError):
    category = "length"
