"""Exception types raised across the pipeline."""


class CostAggError(Exception):
    pass


class ValidationError(CostAggError, ValueError):
    """Bad user input: templates, vocabularies, sizes."""


class ShapeError(CostAggError, ValueError):
    pass


class DegenerateVectorError(CostAggError, ValueError):
    """A zero-magnitude vector reached a normalization or cosine."""


class ConfigError(CostAggError, ValueError):
    pass


class ContractError(CostAggError, RuntimeError):
    """A pluggable component broke its interface contract."""


class UndefinedMetricError(CostAggError, ValueError):
    pass


class TrainingDivergedError(CostAggError, RuntimeError):
    pass
