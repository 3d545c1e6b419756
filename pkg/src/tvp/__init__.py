"""Text-guided video prediction at desk scale.

A trainable stack for predicting the remaining frames of a short clip
from its first reference frames and a textual instruction: an exact
invertible latent codec, a dual-branch query-transformer condition mixer,
a small frozen spatio-temporal UNet with bolt-on adapters, and a
preconditioned continuous-noise diffusion core with two-scale
classifier-free guidance. Everything runs on numpy with hand-written
backward passes.
"""

__version__ = "0.1.0"
