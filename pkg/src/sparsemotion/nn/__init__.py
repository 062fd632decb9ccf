"""Minimal reverse-mode autodiff and layers (double precision throughout)."""
from .gradcheck import gradcheck, numerical_grad
from .layers import (
    LSTM,
    DecoderLayer,
    EncoderLayer,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerDecoder,
    TransformerEncoder,
    positional_encoding,
    sinusoidal_table,
)
from .optim import ParamStore, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad

__all__ = [
    "LSTM", "DecoderLayer", "EncoderLayer", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "ParamStore", "Tensor", "TransformerDecoder", "TransformerEncoder",
    "adam_step", "clip_grad_norm", "gradcheck", "load_checkpoint", "no_grad", "numerical_grad",
    "positional_encoding", "save_checkpoint", "sinusoidal_table",
]
