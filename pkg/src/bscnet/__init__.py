"""Binary sparse convolutional networks for 3D point-cloud segmentation.

Sparse tensors and kernel maps, XNOR/popcount binarization, shifted sparse
convolutions, a tape-based autodiff engine, a fused supernet for searching
per-group shift directions, FCN/UNET builders, metrics and cost accounting.
"""
from .binarize import (
    BinaryWeights,
    binarize_activations,
    binarize_weights,
    pack_bits,
    sign,
    unpack_bits,
    xnor_popcount_dot,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .conv import (
    SfscConv,
    conv_transpose,
    sfsc_forward,
    shifted_sparse_conv,
    sparse_conv,
)
from .metrics import CostReport, Metrics, compute_metrics, count_cost, sign_correspondence
from .nets import NetworkSpec, build_network
from .search import (
    DEFAULT_SPACE,
    SearchSpace,
    ShiftConfig,
    SupernetConv,
    confidence_loss,
    derive_architecture,
    design_space_size,
    manual_shift_config,
    random_shift_config,
    relax,
    supernet_forward,
)
from .sparse import (
    KernelOffsets,
    SparseTensor,
    build_kernel_map,
    build_sparse_tensor,
    load_points,
    save_points,
    voxelize,
)
from .synthetic import SceneConfig, generate_scene
from .train import StageConfig, TrainConfig, adam_step, lr_at, run_stage, train_pipeline

__version__ = "0.1.0"
