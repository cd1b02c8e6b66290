"""neuroseq: desk-scale contextual sequence-to-sequence neural speech decoding.

A numpy-backed toolkit that decodes synthetic multi-day intracortical
recordings into phoneme and word sequences: convolutional front end,
day-specific calibration (gated hammer/scalpel blend), Transformer
encoder/decoders, a GRU+CTC baseline, two-stage training, candidate
rescoring, held-out-day analysis and scaling-law fits.
"""

__version__ = "0.1.0"

from . import autodiff, gradcheck, metrics, optim  # noqa: F401
from .autodiff import Parameter, Tensor, backward, no_grad  # noqa: F401
