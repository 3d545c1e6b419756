from .core import (
    ConfigError,
    ParamStore,
    Parameter,
    ShapeError,
    default_dtype,
    set_default_dtype,
    tensor,
    using_dtype,
    zeros,
)
from .gradcheck import GradCheckError, grad_check
from .layers import (
    Attention,
    Conv2d,
    DepthwiseConv3d,
    Embedding,
    Gelu,
    LayerNorm,
    Linear,
    NearestUpsample2x,
    attention,
    depthwise_conv3d,
    gelu,
    layer_norm,
    linear,
)
from .blocks import CrossAttentionBlock, FeedForward, SelfAttentionBlock, merge_heads, split_heads
from .optim import Adam

__all__ = [
    "Adam",
    "Attention",
    "ConfigError",
    "Conv2d",
    "CrossAttentionBlock",
    "DepthwiseConv3d",
    "Embedding",
    "FeedForward",
    "Gelu",
    "GradCheckError",
    "LayerNorm",
    "Linear",
    "NearestUpsample2x",
    "ParamStore",
    "Parameter",
    "SelfAttentionBlock",
    "ShapeError",
    "attention",
    "default_dtype",
    "depthwise_conv3d",
    "gelu",
    "grad_check",
    "layer_norm",
    "linear",
    "merge_heads",
    "set_default_dtype",
    "split_heads",
    "tensor",
    "using_dtype",
    "zeros",
]
