"""Spectral screening of federated gradients against Byzantine clients."""

__version__ = "0.1.0"

from .errors import (DegenerateDistribution, InsufficientClients, InvalidInput,  # noqa: E402
                     NumericalFailure, SentinelError)
from .linalg import (FDSketch, Spectrum, covariance, eigenvalues_sym, fd_sketch,  # noqa: E402
                     fd_update, sketch_spectrum)
from .mp import (KSResult, MPParams, estimate_mp_params, ks_statistic, mp_cdf,  # noqa: E402
                 mp_density, mp_support, tail_anomalies)
from .detector import (DetectionReport, DetectorConfig, LayeredGradients, Regime,  # noqa: E402
                       calibrate_tau_ks, detect, detect_layerwise, identify_byzantine,
                       phase_regime, update_thresholds)
from .aggregators import AggKind, AggregateResult, AggregatorSpec, aggregate  # noqa: E402
from .attacks import AttackContext, AttackKind, AttackSpec, generate  # noqa: E402

__all__ = [n for n in dir() if not n.startswith("_")]
