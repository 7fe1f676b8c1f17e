"""voxlab: a desk-scale end-to-end text-to-waveform synthesis lab.

Everything numerical runs on the package's own reverse-mode autodiff core
(:mod:`voxlab.autodiff`); numpy supplies the array substrate.
"""

__version__ = "0.1.0"
