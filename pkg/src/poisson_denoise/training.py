"""Backpropagation, Adam, patch sampling, the training loop and fine-tuning.

Random streams used by :func:`train` (all derived from ``config.seed`` via
:func:`~poisson_denoise.noise.noise_stream`):

* ``(seed, 0)``    patch positions, image choice and flips
* ``(seed, 1, t)`` Poisson noise for iteration ``t``
* ``(seed, 2)``    weight initialization
* ``(seed, 3, j)`` noise for validation image ``j`` (fixed across snapshots)
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericError
from .imaging import crop_center, psnr
from .network import (
    LINEAR_TAIL,
    ModelWeights,
    NetConfig,
    _col2im,
    _im2col,
    _kernel_from_matrix,
    _kernel_matrix,
    _run_stack,
    binned_features,
    denoise,
    init_weights,
)
from .noise import CountImage, noise_stream, sample_poisson_array
from .vst import anscombe_forward, anscombe_inverse_unbiased, anscombe_inverse_unbiased_grad

log = logging.getLogger(__name__)

# forward im2col matrices are kept for the backward pass below this size
_COLS_CACHE_BYTES = 1 << 30

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainHistory",
    "PRESETS",
    "preset",
    "loss_central_l2",
    "loss_and_grad",
    "backward",
    "adam_init",
    "adam_step",
    "sample_patch",
    "make_batch",
    "train",
    "split_dataset",
    "fine_tune",
]


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.  Defaults reproduce the published protocol."""

    peak: float
    iterations: int = 120_000
    batch: int = 64
    patch_size: int = 128
    crop_margin: int = 21
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    # patches per gradient evaluation; None means the whole batch at once
    chunk: int | None = None
    threads: int = 1
    val_every: int = 500

    def __post_init__(self):
        if not self.peak > 0:
            raise DomainError("peak must be positive")
        if self.patch_size <= 2 * self.crop_margin:
            raise DomainError("patch_size must exceed twice the crop margin")
        if self.iterations < 0 or self.batch < 1:
            raise DomainError("iterations must be >= 0 and batch >= 1")
        if not (self.lr >= 0 and self.epsilon > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("invalid optimizer hyperparameters")
        if self.chunk is not None and self.chunk < 1:
            raise DomainError("chunk must be >= 1")
        if self.threads < 1:
            raise DomainError("threads must be >= 1")


# Desk-scale presets keep the depth but narrow the layers to 8 channels; "paper" keeps the published setup
# and processes each 64-patch batch in chunks of 4 to bound memory.
PRESETS = {
    "paper": dict(chunk=4),
    "small": dict(
        iterations=5000, batch=8, patch_size=64, lr=1e-3, net=NetConfig(depth=20, features=8)
    ),
    "toy": dict(
        iterations=2000, batch=8, patch_size=64, lr=1e-3, net=NetConfig(depth=20, features=8)
    ),
}


def preset(name: str, peak: float, **overrides) -> TrainConfig:
    """Build a :class:`TrainConfig` from a named preset."""
    if name not in PRESETS:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(peak=peak, **kw)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_psnr: list = field(default_factory=list)  # (iteration, mean PSNR dB)

    def __len__(self):
        return len(self.loss)

    def smoothed(self, window=50):
        """Trailing moving average of the loss (shorter at the start)."""
        loss = np.asarray(self.loss, dtype=np.float64)
        if loss.size == 0:
            return loss
        c = np.cumsum(np.concatenate(([0.0], loss)))
        idx = np.arange(1, loss.size + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)

    def to_csv(self, path):
        """Write ``iteration,loss,val_psnr`` rows (iterations are 1-based)."""
        val = dict(self.val_psnr)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "val_psnr"])
            for i, loss in enumerate(self.loss, start=1):
                v = val.get(i)
                w.writerow([i, repr(float(loss)), "" if v is None else repr(float(v))])

    @classmethod
    def from_csv(cls, path):
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.loss.append(float(row["loss"]))
                if row["val_psnr"]:
                    hist.val_psnr.append((int(row["iteration"]), float(row["val_psnr"])))
        return hist


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


def loss_central_l2(pred, target, margin: int) -> float:
    """Mean squared error over the central region, ignoring ``margin`` pixels per side."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = crop_center(pred - target, margin)
    return float(np.mean(d * d))


def _backprop(weights, cache, g, shape):
    """Gradients of all trainable parameters given dL/d(residual sum) ``g``.

    ``cache[l]`` is the im2col matrix of layer ``l``'s input as recorded by
    the forward pass, or the ``(C, N, H, W)`` input itself.  ``shape`` is
    ``(N, H, W)``.
    """
    depth = weights.depth
    grads = [None] * (2 * depth)
    gl = g.reshape(1, -1)
    dprop = None
    for l in range(depth - 1, -1, -1):
        k = weights.kernels[l]
        o, c = k.shape[:2]
        cols = cache[l] if cache[l].ndim == 2 else _im2col(cache[l])
        kmat = _kernel_matrix(k)
        if l == depth - 1:
            # only the extracted channel reaches the loss
            gk = np.zeros((o, 9 * c))
            gk[-1] = gl @ cols.T
            gb = np.zeros(o)
            gb[-1] = gl.sum()
            dcols = kmat[-1:].T @ gl if l > 0 else None
        else:
            dz = np.empty((o, gl.shape[1]))
            dz[-1] = gl
            d = dprop.reshape(o - 1, -1)
            if l < depth - LINEAR_TAIL:
                # ReLU outputs are positive exactly where the input was; layer l+1's
                # centre-tap rows of the im2col matrix hold them unshifted
                nxt = cache[l + 1]
                act = nxt[4 * (o - 1) : 5 * (o - 1)] if nxt.ndim == 2 else nxt.reshape(o - 1, -1)
                np.multiply(d, act > 0, out=dz[:-1])
            else:
                dz[:-1] = d
            gk = dz @ cols.T
            gb = dz.sum(axis=1)
            dcols = kmat.T @ dz if l > 0 else None
        grads[2 * l] = _kernel_from_matrix(gk, o, c)
        grads[2 * l + 1] = gb
        if l > 0:
            dprop = _col2im(dcols, (c,) + tuple(shape))
    return grads


def _loss_sum_and_grad(weights, x, target, margin, count):
    """Sum of squared central errors / ``count`` and its gradient, for one chunk."""
    if weights.variant == "vst_binned":
        feats = binned_features(x)
        base = anscombe_forward(x)
    else:
        feats = x[None]
        base = x
    n, h, w = x.shape
    cols_bytes = 8 * 9 * n * h * w * sum(k.shape[1] for k in weights.kernels)
    keep_cols = cols_bytes <= _COLS_CACHE_BYTES
    total, _, cache = _run_stack(weights, feats, keep_acts=not keep_cols, keep_cols=keep_cols)
    s = base + total
    if weights.variant == "vst_binned":
        pred = anscombe_inverse_unbiased(s) / weights.peak - 0.5
    else:
        pred = s
    diff = pred - target
    inner = crop_center(diff, margin)
    loss = float(np.sum(inner * inner)) / count
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    g = np.zeros_like(diff)
    crop_center(g, margin)[...] = (2.0 / count) * inner
    if weights.variant == "vst_binned":
        g *= anscombe_inverse_unbiased_grad(s) / weights.peak
    return loss, _backprop(weights, cache, g, (n, h, w))


def loss_and_grad(weights: ModelWeights, x, target, margin: int, chunk=None, threads=1):
    """Central-crop L2 loss of a batch and its gradient.

    ``x`` is the network input, ``(N, H, W)``: normalized shifted images for
    the plain network, raw counts for the binned variant.  ``target`` is the
    clean image in the normalized shifted convention.  Gradients come back in
    :meth:`ModelWeights.params` order; the fixed binning layer has none.

    The batch is processed in chunks of ``chunk`` patches (per patch when
    ``threads > 1``) and chunk gradients are summed in patch order, so the
    result does not depend on the thread count.
    """
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if x.ndim == 2:
        x, target = x[None], target[None]
    if x.shape != target.shape:
        raise DomainError(f"input {x.shape} and target {target.shape} differ")
    n, h, w = x.shape
    if 2 * margin >= min(h, w):
        raise DomainError(f"margin {margin} too large for {h}x{w} patches")
    count = n * (h - 2 * margin) * (w - 2 * margin)
    if threads > 1:
        chunk = 1
    size = n if chunk is None else chunk
    spans = [(i, min(i + size, n)) for i in range(0, n, size)]

    def run(span):
        a, b = span
        return _loss_sum_and_grad(weights, x[a:b], target[a:b], margin, count)

    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(s) for s in spans]
    loss, grads = parts[0]
    if len(parts) > 1:
        grads = [g.copy() for g in grads]
        for part_loss, part_grads in parts[1:]:
            loss += part_loss
            for acc, g in zip(grads, part_grads):
                acc += g
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("non-finite loss or gradient")
    return loss, grads


def backward(weights: ModelWeights, input_patch, target_patch, margin: int = 21):
    """Gradient of :func:`loss_central_l2` with respect to every trainable parameter."""
    return loss_and_grad(weights, input_patch, target_patch, margin)[1]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_init(weights: ModelWeights) -> AdamState:
    return AdamState([np.zeros_like(p) for p in weights.params()], [np.zeros_like(p) for p in weights.params()], 0)


def adam_step(weights: ModelWeights, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns ``(new_weights, new_state)``.

    ``theta -= lr * m_hat / (sqrt(v_hat) + eps)``.  Inputs are not modified.
    """
    params = weights.params()
    if len(grads) != len(params) or len(state.m) != len(params):
        raise DomainError("gradient/state count does not match the parameters")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise DomainError(f"shape mismatch {g.shape} vs {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - config.lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon))
        new_m.append(m)
        new_v.append(v)
    return weights.with_params(new_p), AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def sample_patch(image, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly placed square crop, mirrored left-right with probability 1/2.

    Draws, in order: top row, left column, flip.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if h < size or w < size:
        raise DomainError(f"{h}x{w} image is smaller than a {size}x{size} patch")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    patch = image[top : top + size, left : left + size]
    if rng.random() < 0.5:
        patch = patch[:, ::-1]
    return np.ascontiguousarray(patch)


def make_batch(dataset, config: TrainConfig, patch_rng, noise_rng):
    """Draw clean patches and their noisy network inputs.

    Returns ``(inputs, targets)``, both ``(batch, size, size)``; targets are
    ``clean - 1/2`` and inputs are either ``counts / peak - 1/2`` (plain) or
    the raw counts (binned variant).
    """
    clean = np.stack(
        [
            sample_patch(dataset[int(patch_rng.integers(len(dataset)))], config.patch_size, patch_rng)
            for _ in range(config.batch)
        ]
    )
    counts = sample_poisson_array(clean * config.peak, noise_rng).astype(np.float64)
    target = clean - 0.5
    if config.net.variant == "vst_binned":
        return counts, target
    return counts / config.peak - 0.5, target


def _validation_psnr(weights, validation, config):
    scores = []
    for j, img in enumerate(validation):
        field_ = np.asarray(img) * config.peak
        counts = CountImage(sample_poisson_array(field_, noise_stream(config.seed, 3, j)), config.peak)
        est = denoise(weights, counts, config.peak, margin=config.crop_margin)
        scores.append(psnr(field_, est, config.peak))
    return float(np.mean(scores))


def _usable(dataset, size):
    keep = []
    for i, img in enumerate(dataset):
        img = np.asarray(img, dtype=np.float64)
        if min(img.shape) < size:
            warnings.warn(f"skipping training image {i}: {img.shape} smaller than patch size {size}")
            continue
        keep.append(img)
    return keep


def train(dataset, config: TrainConfig, init: ModelWeights | None = None, validation=None, callback=None):
    """Train a denoiser and return ``(weights, history)``.

    Each iteration draws ``config.batch`` random patches (random image,
    random position, random left-right flip), samples fresh Poisson noise at
    ``config.peak``, and takes one Adam step on the central-crop L2 loss.
    ``init`` continues from existing weights instead of a fresh
    initialization.  ``callback(iteration, loss, weights)`` is called after
    every step.
    """
    data = _usable(dataset, config.patch_size)
    if not data:
        raise DomainError("no training image is at least as large as the patch size")
    if init is None:
        weights = init_weights(config.net, noise_stream(config.seed, 2), peak=config.peak)
    else:
        if init.variant != config.net.variant:
            raise DomainError(f"init weights are {init.variant}, config wants {config.net.variant}")
        weights = init.copy(peak=config.peak)
    state = adam_init(weights)
    history = TrainHistory()
    patch_rng = noise_stream(config.seed, 0)
    for t in range(1, config.iterations + 1):
        x, target = make_batch(data, config, patch_rng, noise_stream(config.seed, 1, t))
        loss, grads = loss_and_grad(
            weights, x, target, config.crop_margin, chunk=config.chunk, threads=config.threads
        )
        weights, state = adam_step(weights, grads, state, config)
        history.loss.append(loss)
        if validation and config.val_every and t % config.val_every == 0:
            history.val_psnr.append((t, _validation_psnr(weights, validation, config)))
            log.info("iteration %d: loss %.6g, validation PSNR %.3f dB", t, loss, history.val_psnr[-1][1])
        elif t % 100 == 0:
            log.debug("iteration %d: loss %.6g", t, loss)
        if callback is not None:
            callback(t, loss, weights)
    return weights, history


# ---------------------------------------------------------------------------
# Class-aware fine-tuning
# ---------------------------------------------------------------------------


def split_dataset(items, seed: int, fractions=(0.6, 0.2, 0.2)):
    """Seeded shuffle into train / validation / test lists (60/20/20 by default)."""
    items = list(items)
    n = len(items)
    order = noise_stream(seed, 4).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pick = [items[i] for i in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


def fine_tune(base: ModelWeights, class_dataset, class_tag: str, config: TrainConfig | None = None, **overrides):
    """Continue training ``base`` on one semantic class.

    The class images are split 60/20/20 with ``config.seed``; training uses
    the first part and validation snapshots the second.  Without ``config``,
    45,000 iterations are run with the remaining hyperparameters at their
    defaults; keyword ``overrides`` replace fields of the config.
    """
    if config is None:
        config = TrainConfig(peak=base.peak, net=base.config, iterations=45_000)
    config = replace(config, **overrides)
    if config.peak != base.peak:
        raise DomainError(f"base network was trained for peak {base.peak}, not {config.peak}")
    if config.net != base.config:
        config = replace(config, net=base.config)
    if config.iterations == 0:
        return base.copy(class_tag=class_tag)
    train_set, val_set, _ = split_dataset(class_dataset, config.seed)
    weights, _ = train(train_set or list(class_dataset), config, init=base, validation=val_set)
    return weights.copy(class_tag=class_tag)
