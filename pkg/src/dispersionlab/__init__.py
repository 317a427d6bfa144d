"""dispersionlab: a numerical laboratory for attention dispersion.

Library layout:
  tensor     dense immutable arrays and the core op set
  posenc     rotary embeddings, grids, depthwise positional kernels
  attention  the attention variant family (softmax, linear, focused,
             window, SEMA, MILA) with coefficient extraction
  analysis   dispersion bounds, sweeps, the counterexample, cost models
  ssm        the discrete state-space recursion and its attention form
  autograd   tape-based reverse mode plus gradcheck
  traced     differentiable twins of the attention variants
  model      toy SEMA backbone, receptive-field probes, toy training
  cli        the `dispersion-lab` experiment runner
"""

__version__ = "0.1.0"

from .tensor import (  # noqa: F401
    Tensor,
    broadcast_row,
    cumprod_rows,
    hadamard,
    matmul,
    mean_rows,
    softmax_rows,
)
from .posenc import DepthwiseKernel, GridSpec, lepe, rope_apply  # noqa: F401
from .attention import (  # noqa: F401
    KernelSpec,
    SemaParams,
    WindowSpec,
    focused_attention,
    focused_map,
    generalized_attention,
    homogeneous_mix,
    linear_attention,
    linear_attention_fast,
    mila_attention,
    phi_normalize,
    sema_attention,
    sema_attention_full,
    softmax_attention,
    window_attention,
)
from .analysis import (  # noqa: F401
    BoundSpec,
    BoundedSampler,
    DispersionReport,
    coefficient_bounds,
    complexity_estimate,
    fit_decay_slope,
    measure_dispersion,
    remark_counterexample,
)
from .ssm import (  # noqa: F401
    SsmParams,
    causal_linear_recursive,
    forgetting_horizon,
    mamba_as_attention,
    ssm_closed_form,
    ssm_scan,
)
from .autograd import Tape, backward, gradcheck, leaf  # noqa: F401
from .model import (  # noqa: F401
    ModelConfig,
    SyntheticTask,
    forward,
    init_params,
    parameter_count,
    receptive_field_probe,
    train_toy,
)
