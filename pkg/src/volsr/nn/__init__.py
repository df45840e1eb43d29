"""Minimal reverse-mode autodiff core: tensors, conv kernels, Adam, checkpoints."""

from .checkpoint import (
    CKPT_MAGIC,
    CheckpointError,
    load_checkpoint,
    load_param_store,
    save_checkpoint,
)
from .conv import avgpool3d, conv2d, conv3d, maxpool2d, upsample_nearest3d
from .optim import (
    AdamConfig,
    AdamState,
    ParamStore,
    adam_state_for,
    adam_step,
    fan_in_normal,
)
from .tensor import (
    AutodiffError,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    concat_channels,
    grad_enabled,
    leaky_relu,
    mean_all,
    moveaxis,
    mul,
    neg,
    no_grad,
    reshape,
    sigmoid,
    slice_axis,
    softplus,
    sub,
    sum_all,
)

__all__ = [
    "AutodiffError",
    "Tensor",
    "as_tensor",
    "backward",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "absolute",
    "sum_all",
    "mean_all",
    "reshape",
    "moveaxis",
    "slice_axis",
    "concat_channels",
    "leaky_relu",
    "sigmoid",
    "softplus",
    "conv2d",
    "conv3d",
    "maxpool2d",
    "avgpool3d",
    "upsample_nearest3d",
    "ParamStore",
    "fan_in_normal",
    "AdamConfig",
    "AdamState",
    "adam_state_for",
    "adam_step",
    "CKPT_MAGIC",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "load_param_store",
]
