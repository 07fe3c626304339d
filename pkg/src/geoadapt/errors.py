"""Exception hierarchy; the CLI maps these onto exit codes."""


class GeoAdaptError(Exception):
    exit_code = 2


class ValidationError(GeoAdaptError, ValueError):
    exit_code = 1


class DimensionError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class InsufficientRankError(ValidationError):
    pass


class FrozenError(GeoAdaptError, AttributeError):
    """Raised on any attempt to mutate a frozen generator or extractor."""

    exit_code = 1


class FrozenContractError(GeoAdaptError, RuntimeError):
    """A frozen network's checksum changed during a run."""


class OptimizationError(GeoAdaptError, RuntimeError):
    def __init__(self, message, last_finite=None, index=None):
        super().__init__(message)
        self.last_finite = last_finite
        self.index = index


class TrainingError(GeoAdaptError, RuntimeError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ArtifactIncompatibleError(GeoAdaptError):
    exit_code = 3
