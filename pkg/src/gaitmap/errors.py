"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class GaitmapError(Exception):
    """Base class for every error raised by gaitmap."""


class ValidationError(GaitmapError, ValueError):
    """Input violates a documented contract or invariant."""


class ContractError(ValidationError):
    """A function precondition was not met by the caller."""


class DimensionError(ValidationError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValidationError):
    """Invalid or inconsistent configuration."""


class ParseError(ValidationError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DataError(ValidationError):
    """Data is well-formed but unusable (e.g. a joint is never observed)."""


class DegenerateGeometryError(DataError):
    """Zero-length vector where a direction is required."""


class DegeneratePoseError(DataError):
    """Pose collapses to a point (trunk length ~ 0)."""


class SplitError(ValidationError):
    """Subject-disjoint split cannot be formed."""


class LeakageError(ValidationError):
    """Train and test sets share at least one subject."""

    def __init__(self, subjects):
        self.subjects = sorted(subjects)
        names = ", ".join(self.subjects[:10])
        more = "" if len(self.subjects) <= 10 else f" (+{len(self.subjects) - 10} more)"
        super().__init__(
            f"subject overlap between train and test: {names}{more}; "
            "participants must not appear on both sides of a split"
        )


class PromptLookupError(GaitmapError, KeyError):
    """A text prompt has no vector in the embedding provider file."""

    def __str__(self):
        return f"no embedding for prompt {self.args[0]!r}"


class ExplainUnsupportedError(GaitmapError):
    """Attention cannot be remapped for this model configuration."""


class NumericError(GaitmapError, FloatingPointError):
    """A computation produced NaN or Inf."""
