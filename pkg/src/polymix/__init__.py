"""Polynomial sequence mixing with a from-scratch autodiff core.

The package provides, bottom up:

* ``polymix.tensor``, dense tensors plus a reverse-mode tape,
* ``polymix.mixer``, the polynomial mixing kernel, mask algebra and
  streaming state,
* ``polymix.attention``, a multi-head softmax attention reference,
* ``polymix.blocks``, sequence and diffusion transformer blocks built on
  the mixer,
* ``polymix.diffusion``, a desk-scale diffusion / flow-matching trainer
  with samplers and evaluation,
* ``polymix.bench`` / ``polymix.cli``, the measurement harness and the
  ``polymix`` command line tool.
"""

from polymix.tensor import Tensor, Tape

__all__ = ["Tensor", "Tape"]
__version__ = "0.1.0"
