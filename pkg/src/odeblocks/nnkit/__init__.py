from .layers import (
    DataError,
    ShapeError,
    causal_mask,
    dropout,
    embedding,
    ffn,
    init_attention,
    init_ffn,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    multi_head_attention,
    perplexity,
    softmax_cross_entropy,
)
from .params import ParamStore, grad_check, load_checkpoint, save_checkpoint
from .tensor import Parameter, Tensor, as_tensor, no_grad, sigmoid, softmax

__all__ = [
    "DataError", "ShapeError", "Parameter", "ParamStore", "Tensor",
    "as_tensor", "causal_mask", "dropout", "embedding", "ffn", "grad_check",
    "init_attention", "init_ffn", "init_layer_norm", "init_linear",
    "layer_norm", "linear", "load_checkpoint", "multi_head_attention",
    "no_grad", "perplexity", "save_checkpoint", "sigmoid", "softmax",
    "softmax_cross_entropy",
]
