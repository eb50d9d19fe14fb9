"""Exception hierarchy shared by every pipeline stage."""


class ChronoriskError(Exception):
    pass


class InputError(ChronoriskError, ValueError):
    """Malformed raw input (e.g. an empty diagnosis code)."""


class ConfigError(ChronoriskError, ValueError):
    """A configuration value is out of its documented range."""


class CohortError(ChronoriskError):
    pass


class SchemaError(ChronoriskError):
    pass


class LeakageError(ChronoriskError):
    """An observation dated on or after the member's current date reached aggregation."""


class ContractViolation(ChronoriskError, ValueError):
    """A caller broke a documented precondition (shape, window, schema)."""


class DataError(ChronoriskError, ValueError):
    pass


class TrainingError(ChronoriskError):
    pass


class MetricError(ChronoriskError, ValueError):
    pass


class NumericError(ChronoriskError, FloatingPointError):
    pass


class MissingArtifactError(ChronoriskError):
    """An upstream stage has not been run yet."""

    def __init__(self, path, stage):
        self.path = path
        self.stage = stage
        super().__init__(f"missing artifact {path}; run the `{stage}` stage first")
