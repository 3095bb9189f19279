"""Desk-scale trainable vision-language model with a language-to-vision
feedback loop: a gated MLP maps the LM's image-token hidden states back into
the vision encoder's input and triggers a second, text-conditioned encoding
pass."""

__version__ = "0.1.0"

from .config import ModelConfig, micro_config, reference_7b_config  # noqa: F401
from .tensor import Tensor, backward, no_grad  # noqa: F401
