"""Stabilization of rotational OCT frame streams: NURD estimation and overall-rotation fusion."""
from .correlation import CorrelationConfig, correlation_map, pearson
from .errors import CalibrationError, ConfigError, ContractViolation, EstimationUnavailable, MetricUnavailable, \
    TrainingError
from .frames import BScan, FrameStream, Interp, ScanMode, apply_warp, compose_warps, invert_warp
from .fusion import FusionConfig, Stabilizer, pi_fuse
from .gs import GsConfig, GsEstimator, gs_path, measure_nurd_range
from .metrics import MetricsConfig, enface, local_fluctuation, nurd_mse, precession, stream_std
from .sheath import ReferenceStack, SheathMask, calibrate_reference, match_rotation
from .synth import SynthConfig, distort_stream, expand_range, generate_warp, make_dataset

__version__ = "0.1.0"
