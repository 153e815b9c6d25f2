"""Simple Recurrent Unit layers with fused CPU lane kernels."""

from srukit.layer import (
    SruLayerConfig,
    SruLayerParams,
    SruTape,
    compute_U,
    forward_layer,
    fused_recurrence,
    naive_reference_forward,
)
from srukit.grad import SruGradients, backward_fused, fd_gradient_oracle
from srukit.init_calib import alpha_for_bias, h_variance_bounds_check, init_layer, variance_ratio_probe
from srukit.tensor_core import SeededRng, gemm, stable_sigmoid, uniform_fill
from srukit._parallel import get_workers, set_workers

__version__ = "0.1.0"
