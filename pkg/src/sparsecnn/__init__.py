"""Direct sparse convolution kernels, a roofline performance model and a
model-guided pruning controller."""
from .conv import (
    TilingConfig,
    conv_dense_direct,
    conv_dense_lowered,
    conv_sparse_direct,
    conv_sparse_lowered,
    fc_spmdm,
    get_threads,
    im2col,
    set_threads,
)
from .gsl import Action, GslConfig, GslReport, LayerStatus, ReplaySource, gsl_init, gsl_run, gsl_step
from .perf_model import (
    PRESETS,
    LayerClass,
    PlatformProfile,
    SparsityWindow,
    classify_layer,
    layer_cost,
    project_times,
    useful_sparsity_window,
)
from .tensor import LayerSpec, SparseKernelMatrix, Tensor3, Tensor4, densify, sparsify

__version__ = "0.1.0"
