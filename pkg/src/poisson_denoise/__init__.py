"""Residual CNN denoising of Poisson (shot) noise, written with numpy only.

Modules
-------
imaging
    Grayscale I/O, mirror padding, PSNR.
noise
    Poisson count simulation with reproducible random streams.
vst
    Anscombe transform, its inverses, binning and interpolation.
network
    The residual denoising network, its forward pass and weight files.
training
    Backpropagation, Adam and the patch-based training loop.
evalbench
    PSNR reports, paired comparisons and per-layer introspection.
cli
    The ``poisson-denoise`` command.
"""

from .errors import DenoiseError, DomainError, FormatError, NumericError
from .network import ModelWeights, NetConfig, denoise, forward, init_weights, load_weights, save_weights
from .noise import CountImage, degrade, noise_stream
from .training import TrainConfig, preset, train

__version__ = "0.1.0"

__all__ = [
    "DenoiseError",
    "DomainError",
    "FormatError",
    "NumericError",
    "ModelWeights",
    "NetConfig",
    "denoise",
    "forward",
    "init_weights",
    "load_weights",
    "save_weights",
    "CountImage",
    "degrade",
    "noise_stream",
    "TrainConfig",
    "preset",
    "train",
]
