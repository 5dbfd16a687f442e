"""dynaseg: desk-scale unsupervised semantic segmentation kernels."""

from .aspp import (
    DEFAULT_SCHEDULE,
    AsppParams,
    DilationSchedule,
    aspp_forward,
    attention_aspp_inject,
    dilation_schedule,
    init_aspp_params,
)
from .checkpoint import CheckpointError, ModelState, checkpoint_load, checkpoint_save
from .config import ConfigError, DatasetSpec, TrainConfig, load_config, save_config
from .conv import (
    ConvGeometry,
    GeometryError,
    bilinear_upsample,
    conv2d,
    depthwise_conv2d,
    depthwise_separable_conv,
    output_size,
)
from .data import synth_dataset
from .decoder import (
    PseudoLabelMask,
    cam,
    cam_to_initial_labels,
    decode_masks,
    full_res_logits,
    full_res_probs,
    fuse_masks,
    mask_logits,
    masks_to_full_res,
)
from .encoder import (
    AttentionMap,
    EncoderConfig,
    attention,
    encoder_forward,
    init_encoder_params,
    patchify,
)
from .losses import (
    LossWeights,
    ce_loss,
    cls_loss,
    seg_loss,
    total_loss,
    uncertainty_loss,
)
from .metrics import EvalReport, confusion_matrix, evaluate, hungarian_match, report_from_confusion
from .netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm
from .par import AffinityKernel, ParParams, affinity_kernel, neighbor_set, par_refine
from .tensor import (
    GradTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    TensorError,
    backward,
    grad_check,
    new_tape,
    softmax,
)
from .train import (
    TrainResult,
    ema_update,
    evaluate_model,
    init_model_state,
    make_pseudo_label,
    predict_labels,
    run_training,
    train_step,
)

__version__ = "0.1.0"
