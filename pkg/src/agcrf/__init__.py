"""Attention-gated CRF multi-scale feature fusion at desk scale.

Subpackages split along responsibility lines: ``tensor`` (autodiff engine),
``crf`` (gated mean-field fusion), ``network`` (two-level prediction
hierarchy), ``losses``/``metrics`` (task objectives and evaluation),
``synth`` (deterministic toy datasets), ``agtio`` (tensor/image file
formats), ``oracle`` (brute-force verifiers) and ``cli``.
"""

from . import tensor, oracle  # noqa: F401

__version__ = "0.1.0"
