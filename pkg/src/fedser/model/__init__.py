from .network import (
    ArchConfig,
    Cache,
    ParamSet,
    backward,
    cross_entropy,
    fingerprint,
    forward,
    init_params,
    l2_penalty,
    param_shapes,
    predict_proba,
    softmax_t,
    zeros_like,
)
from .layers import stc_attention_backward, stc_attention_forward
from .optim import AdamState, adam_init, adam_step
from . import serialize

__all__ = [
    "AdamState",
    "ArchConfig",
    "Cache",
    "ParamSet",
    "adam_init",
    "adam_step",
    "backward",
    "cross_entropy",
    "fingerprint",
    "forward",
    "init_params",
    "l2_penalty",
    "param_shapes",
    "predict_proba",
    "serialize",
    "softmax_t",
    "stc_attention_backward",
    "stc_attention_forward",
    "zeros_like",
]
