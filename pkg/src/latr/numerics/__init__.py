from .nn import (
    MLP,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    mlp_forward,
    self_attention,
    sine_embed,
    sinusoidal_positions,
)
from .optim import AdamW
from .tensor import NumericError, ShapeError, Tensor, UsageError, no_grad

__all__ = [
    "AdamW",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "MultiHeadAttention",
    "NumericError",
    "ShapeError",
    "Tensor",
    "UsageError",
    "mlp_forward",
    "no_grad",
    "self_attention",
    "sine_embed",
    "sinusoidal_positions",
]
