"""batchcast: probabilistic time-series forecasting with batch-structured
GLS training and conditional-Gaussian forecast calibration."""

__version__ = "0.1.0"

from .backend import BACKEND  # noqa: F401
from .corrmodel import (  # noqa: F401
    ConditionalGaussian,
    CorrelationMix,
    KernelBank,
    MixWeights,
    build_kernel_bank,
    conditional_error_dist,
    mix_correlation,
)
from .data import (  # noqa: F401
    SynthConfig,
    TimeSeriesDataset,
    chronological_split,
    load_dataset,
    make_minibatches,
    standardize,
    synth_ar,
)
from .forecast import ForecastConfig, ForecastResult, rolling_forecast  # noqa: F401
from .linalg import CholFactor, SymMatrix, cholesky, chol_solve, log_det, quad_form  # noqa: F401
from .net import Model, ModelConfig, load_checkpoint, save_checkpoint  # noqa: F401
from .training import TrainConfig, TrainResult, train  # noqa: F401
