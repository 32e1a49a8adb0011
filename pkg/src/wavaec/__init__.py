"""Waveform-domain acoustic echo cancellation toolkit.

Subband linear canceller, conformer masking network on a small numpy
autodiff engine, SISNR and proxy-ASR training losses, synthetic echo
mixtures, and the training/evaluation pipeline around them.
"""

__version__ = "0.1.0"
