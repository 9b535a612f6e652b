"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its contract."""


class ConfigError(ValueError):
    """A configuration record is invalid or incomplete."""


class TrainingError(RuntimeError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class EstimationUnavailable(RuntimeError):
    """No estimate can be formed from the given data (e.g. an empty sheath band)."""


class CalibrationError(RuntimeError):
    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message if frame is None else f"{message} (frame {frame})")
        self.frame = frame


class MetricUnavailable(RuntimeError):
    """The metric cannot be evaluated on this input (e.g. no trackable ridge)."""
