"""The residual denoising network: forward pass, weights and weight files.

Architecture
------------
Every layer convolves its input with ``F`` kernels of size 3x3 (stride 1,
one pixel of zero padding).  The last output channel of each layer is
*extracted*: it is added linearly to a running sum that starts at the network
input.  The first ``F - 1`` channels feed the next layer, through ReLU for all
but the last two layers.  With the default ``depth=20, features=64`` this is
the plain denoiser working on normalized images ``counts / peak - 1/2``.

The ``vst_binned`` variant first sums the raw counts with fixed 1x1, 3x3, 5x5
and 7x7 box kernels, applies the Anscombe transform to those four channels,
adds the residual sum to the Anscombe transform of the raw counts and maps the
result back with the unbiased inverse.

Convolutions are cross-correlations (kernels are not flipped).  Kernels are
stored ``[out][in][ky][kx]``.  Activations are kept channels-first
internally, ``(C, N, H, W)``, so every layer is one matrix product.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError, NumericError
from .imaging import crop_center, pad_symmetric
from .vst import anscombe_forward, anscombe_inverse_unbiased, box_filter, box_kernel_stack

__all__ = [
    "VARIANTS",
    "BIN_SIZES",
    "LINEAR_TAIL",
    "NetConfig",
    "ModelWeights",
    "ForwardTrace",
    "conv2d",
    "relu",
    "forward",
    "forward_batch",
    "forward_vst_variant",
    "binned_features",
    "to_photoelectrons",
    "denoise",
    "init_weights",
    "save_weights",
    "load_weights",
]

VARIANTS = ("plain", "vst_binned")
BIN_SIZES = (1, 3, 5, 7)
# number of trailing layers whose propagated channels skip the ReLU
LINEAR_TAIL = 2

_MAGIC = b"DNZ1"


@dataclass(frozen=True)
class NetConfig:
    """Network shape.  Defaults give the 20-layer, 64-kernel denoiser."""

    depth: int = 20
    features: int = 64
    variant: str = "plain"

    def __post_init__(self):
        if self.depth < 1:
            raise DomainError("depth must be >= 1")
        if self.features < 2:
            raise DomainError("features must be >= 2 (one propagated, one extracted)")
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}")

    @property
    def in_channels(self):
        return len(BIN_SIZES) if self.variant == "vst_binned" else 1

    def layer_shapes(self):
        """``(out, in)`` channel counts per layer."""
        shapes = [(self.features, self.in_channels)]
        shapes += [(self.features, self.features - 1)] * (self.depth - 1)
        return shapes

    @property
    def n_params(self):
        return sum(o * i * 9 + o for o, i in self.layer_shapes())


@dataclass
class ModelWeights:
    """Trainable parameters of one network.

    The fixed box-kernel layer of the ``vst_binned`` variant is not stored;
    it is rebuilt from :data:`BIN_SIZES`.
    """

    kernels: list
    biases: list
    peak: float
    variant: str = "plain"
    class_tag: str | None = None

    def __post_init__(self):
        self.kernels = [np.ascontiguousarray(k, dtype=np.float64) for k in self.kernels]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        self.peak = float(self.peak)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}")
        if not self.peak > 0:
            raise DomainError("peak must be positive")
        if not self.kernels or len(self.kernels) != len(self.biases):
            raise DomainError("need one bias vector per kernel tensor and at least one layer")
        features = self.kernels[0].shape[0]
        expect_in = len(BIN_SIZES) if self.variant == "vst_binned" else 1
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            if k.ndim != 4 or k.shape[2:] != (3, 3):
                raise DomainError(f"layer {i + 1}: kernels must be out x in x 3 x 3, got {k.shape}")
            if k.shape[0] != features or k.shape[1] != expect_in:
                raise DomainError(
                    f"layer {i + 1}: expected {features} x {expect_in} kernels, got {k.shape[:2]}"
                )
            if b.shape != (features,):
                raise DomainError(f"layer {i + 1}: bias shape {b.shape} != ({features},)")
            expect_in = features - 1
        if features < 2:
            raise DomainError("layers need at least two output channels")

    @property
    def depth(self):
        return len(self.kernels)

    @property
    def features(self):
        return self.kernels[0].shape[0]

    @property
    def config(self):
        return NetConfig(self.depth, self.features, self.variant)

    @property
    def n_params(self):
        return sum(k.size + b.size for k, b in zip(self.kernels, self.biases))

    def params(self):
        """Parameter arrays in file order: kernel, bias, kernel, bias, ..."""
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    def with_params(self, params, **meta):
        kw = dict(peak=self.peak, variant=self.variant, class_tag=self.class_tag)
        kw.update(meta)
        return ModelWeights(list(params[0::2]), list(params[1::2]), **kw)

    def copy(self, **meta):
        return self.with_params([p.copy() for p in self.params()], **meta)

    def equals(self, other):
        """Bit-exact equality of parameters and metadata."""
        if (self.peak, self.variant, self.class_tag) != (other.peak, other.variant, other.class_tag):
            return False
        mine, theirs = self.params(), other.params()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs)
        )


@dataclass
class ForwardTrace:
    """Per-layer record of one forward pass on a single image.

    ``residual_slices[l]`` is the channel extracted by layer ``l + 1`` and
    ``cumulative[l]`` the running estimate after it.  ``domain`` is
    ``"normalized"`` for the plain network and ``"anscombe"`` for the binned
    variant; ``final`` is the unclipped estimate in that network's output
    convention (normalized image, or photoelectrons for the variant).
    """

    input: np.ndarray
    residual_slices: np.ndarray
    cumulative: np.ndarray
    final: np.ndarray
    domain: str = "normalized"
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Convolution primitives (channels-first)
# ---------------------------------------------------------------------------


def _kernel_matrix(k):
    """``(O, C, 3, 3)`` kernels as an ``(O, 9C)`` matrix matching :func:`_im2col`."""
    o, c = k.shape[:2]
    return np.ascontiguousarray(k.transpose(0, 2, 3, 1).reshape(o, 9 * c))


def _kernel_from_matrix(m, o, c):
    return np.ascontiguousarray(m.reshape(o, 3, 3, c).transpose(0, 3, 1, 2))


def _shifts(h, w):
    """Yield ``(tap, out_rows, out_cols, in_rows, in_cols)`` slices for 3x3 taps.

    Tap ``(ky, kx)`` of output pixel ``(y, x)`` reads input pixel
    ``(y + ky - 1, x + kx - 1)``; pixels outside the image read zero.
    """
    for ky in range(3):
        dy = ky - 1
        oy = slice(max(0, -dy), h - max(0, dy))
        iy = slice(max(0, dy), h + min(0, dy))
        for kx in range(3):
            dx = kx - 1
            ox = slice(max(0, -dx), w - max(0, dx))
            ix = slice(max(0, dx), w + min(0, dx))
            yield 3 * ky + kx, oy, ox, iy, ix


def _im2col(x):
    """``(C, N, H, W)`` -> ``(9*C, N*H*W)`` with one pixel of zero padding.

    Row order is ``[ky][kx][c]``.
    """
    c, n, h, w = x.shape
    cols = np.empty((9, c, n, h, w))
    for tap, oy, ox, iy, ix in _shifts(h, w):
        dst = cols[tap]
        if tap != 4:
            # zero only the border strip the shifted copy leaves uncovered
            if oy.start:
                dst[:, :, : oy.start] = 0.0
            if oy.stop < h:
                dst[:, :, oy.stop :] = 0.0
            if ox.start:
                dst[:, :, :, : ox.start] = 0.0
            if ox.stop < w:
                dst[:, :, :, ox.stop :] = 0.0
        dst[:, :, oy, ox] = x[:, :, iy, ix]
    return cols.reshape(9 * c, n * h * w)


def _col2im(gcols, shape):
    """Adjoint of :func:`_im2col`: scatter-add column gradients to the input."""
    c, n, h, w = shape
    g = gcols.reshape(9, c, n, h, w)
    out = g[4].copy()
    for tap, oy, ox, iy, ix in _shifts(h, w):
        if tap != 4:
            out[:, :, iy, ix] += g[tap][:, :, oy, ox]
    return out


def _conv(x, kmat, bias):
    """Channels-first convolution: ``(C, N, H, W)`` -> ``(O, N, H, W)``."""
    _, n, h, w = x.shape
    out = kmat @ _im2col(x)
    out += bias[:, None]
    return out.reshape(kmat.shape[0], n, h, w)


def conv2d(x, kernels, bias=None) -> np.ndarray:
    """3x3 cross-correlation with one pixel of zero padding.

    ``x`` is ``(C, H, W)``, ``kernels`` ``(O, C, 3, 3)``; returns ``(O, H, W)``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DomainError("conv2d expects (C,H,W) input and (O,C,3,3) kernels")
    if x.shape[0] != kernels.shape[1]:
        raise DomainError(f"channel mismatch: input has {x.shape[0]}, kernels expect {kernels.shape[1]}")
    if bias is None:
        bias = np.zeros(kernels.shape[0])
    y = _conv(x[:, None], _kernel_matrix(kernels), np.asarray(bias, dtype=np.float64))
    return y[:, 0]


def relu(t):
    return np.maximum(t, 0.0)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def binned_features(counts):
    """Fixed first stage of the binned variant: box sums then Anscombe.

    ``counts`` is ``(H, W)`` or ``(N, H, W)``; returns ``(4, ...)``.
    """
    return anscombe_forward(box_filter(counts, box_kernel_stack(BIN_SIZES)))


def _run_stack(weights, feats, keep_slices=False, keep_acts=False, keep_cols=False):
    """Run the trainable layers on ``(C, N, H, W)`` features.

    Returns ``(residual_sum, slices, cache)``.  With ``keep_acts``,
    ``cache[l]`` is the input of layer ``l`` (so ``cache[0]`` is ``feats``);
    with ``keep_cols`` it is that input's im2col matrix instead.
    """
    depth = weights.depth
    a = feats
    total = np.zeros(feats.shape[1:])
    slices = [] if keep_slices else None
    cache = [] if (keep_acts or keep_cols) else None
    _, n, h, w = feats.shape
    for l, (k, b) in enumerate(zip(weights.kernels, weights.biases)):
        cols = _im2col(a)
        if cache is not None:
            cache.append(cols if keep_cols else a)
        z = _kernel_matrix(k) @ cols
        z += b[:, None]
        z = z.reshape(k.shape[0], n, h, w)
        r = z[-1]
        total += r
        if keep_slices:
            slices.append(r.copy())
        if l == depth - 1:
            break
        p = z[:-1]
        a = np.maximum(p, 0.0) if l < depth - LINEAR_TAIL else p
    return total, slices, cache


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def forward_batch(weights: ModelWeights, x) -> np.ndarray:
    """Denoise a batch without recording a trace.

    For the plain network ``x`` is ``(N, H, W)`` normalized and shifted and
    the result is in the same convention.  For the binned variant ``x`` holds
    raw counts and the result is in photoelectrons.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if weights.variant == "vst_binned":
        total, _, _ = _run_stack(weights, binned_features(x))
        out = anscombe_inverse_unbiased(anscombe_forward(x) + total)
    else:
        total, _, _ = _run_stack(weights, x[None])
        out = x + total
    _check_finite(out, "forward pass")
    return out


def forward(weights: ModelWeights, noisy_normalized) -> ForwardTrace:
    """Plain-network forward pass on one image with a full layer trace.

    ``noisy_normalized`` is ``counts / peak - 1/2``.  ``final`` equals the
    last cumulative estimate; clipping and de-normalization are left to the
    caller (see :func:`to_photoelectrons`).
    """
    if weights.variant != "plain":
        raise DomainError("forward() needs plain weights; use forward_vst_variant()")
    x = np.asarray(noisy_normalized, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 3:
        raise DomainError(f"input must be a 2-D image of at least 3x3, got {x.shape}")
    _, slices, _ = _run_stack(weights, x[None, None], keep_slices=True)
    slices = np.stack([s[0] for s in slices])
    cumulative = x + np.cumsum(slices, axis=0)
    _check_finite(cumulative, "forward pass")
    return ForwardTrace(x, slices, cumulative, cumulative[-1].copy(), "normalized")


def forward_vst_variant(weights: ModelWeights, counts) -> ForwardTrace:
    """Binned/Anscombe variant on one count image.

    Slices and cumulative estimates live in the Anscombe domain;
    ``final`` is the unbiased inverse of the last cumulative estimate.
    """
    if weights.variant != "vst_binned":
        raise DomainError("forward_vst_variant() needs vst_binned weights")
    c = counts.counts if hasattr(counts, "counts") else np.asarray(counts, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or min(c.shape) < 3:
        raise DomainError(f"input must be a 2-D image of at least 3x3, got {c.shape}")
    feats = binned_features(c[None])
    _, slices, _ = _run_stack(weights, feats, keep_slices=True)
    slices = np.stack([s[0] for s in slices])
    base = anscombe_forward(c)
    cumulative = base + np.cumsum(slices, axis=0)
    final = anscombe_inverse_unbiased(cumulative[-1])
    _check_finite(final, "forward pass")
    return ForwardTrace(base, slices, cumulative, final, "anscombe", {"features": feats[:, 0]})


def to_photoelectrons(values, domain, peak, clip=True):
    """Map trace values (normalized or Anscombe domain) to photoelectrons."""
    values = np.asarray(values, dtype=np.float64)
    if domain == "normalized":
        out = (values + 0.5) * peak
    elif domain == "anscombe":
        out = anscombe_inverse_unbiased(values)
    else:
        raise DomainError(f"unknown domain {domain!r}")
    return np.clip(out, 0.0, peak) if clip else out


def denoise(weights: ModelWeights, counts, peak=None, margin=21, clip=True) -> np.ndarray:
    """Test-time denoising of one count image.

    The input is mirror-padded by ``margin`` pixels, passed through the
    network and cropped back.  Returns an intensity estimate in photoelectrons,
    clipped to ``[0, peak]`` unless ``clip`` is false.
    """
    if peak is None:
        peak = getattr(counts, "peak", weights.peak)
    c = counts.counts if hasattr(counts, "counts") else counts
    c = np.asarray(c, dtype=np.float64)
    margin = min(int(margin), min(c.shape))
    padded = pad_symmetric(c, margin)
    if weights.variant == "vst_binned":
        est = crop_center(forward_batch(weights, padded)[0], margin)
    else:
        out = forward_batch(weights, padded / peak - 0.5)[0]
        est = (crop_center(out, margin) + 0.5) * peak
    return np.clip(est, 0.0, peak) if clip else est


# ---------------------------------------------------------------------------
# Initialization and serialization
# ---------------------------------------------------------------------------


def init_weights(config: NetConfig, rng: np.random.Generator, peak=1.0, extract_scale=0.1) -> ModelWeights:
    """He-normal kernels, zero biases; extracted-channel kernels scaled down.

    Draw order: layer by layer, each ``(out, in, 3, 3)`` tensor in C order.
    """
    kernels, biases = [], []
    for o, i in config.layer_shapes():
        k = rng.standard_normal((o, i, 3, 3)) * np.sqrt(2.0 / (9 * i))
        k[-1] *= extract_scale
        kernels.append(k)
        biases.append(np.zeros(o))
    return ModelWeights(kernels, biases, peak=peak, variant=config.variant)


def save_weights(weights: ModelWeights, path) -> None:
    """Write weights in the DNZ1 format.

    Layout (little-endian)::

        "DNZ1"  u8 variant (0 plain, 1 vst_binned)  f64 peak
        u16 tag length, UTF-8 class tag (length 0 = no tag)
        u32 layer count, then per layer u32 out, in, kh, kw
        per layer: kernel f64[out][in][ky][kx], then bias f64[out]
    """
    tag = (weights.class_tag or "").encode("utf-8")
    if len(tag) > 0xFFFF:
        raise DomainError("class tag too long")
    parts = [
        struct.pack("<4sBdH", _MAGIC, VARIANTS.index(weights.variant), weights.peak, len(tag)),
        tag,
        struct.pack("<I", weights.depth),
    ]
    for k in weights.kernels:
        parts.append(struct.pack("<4I", *k.shape))
    for k, b in zip(weights.kernels, weights.biases):
        parts.append(k.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError("weight file truncated", offset=len(raw))
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    magic, variant, peak, tag_len = take("<4sBdH")
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    if variant >= len(VARIANTS):
        raise FormatError(f"unknown variant code {variant}", offset=4)
    if pos + tag_len > len(raw):
        raise FormatError("weight file truncated in class tag", offset=len(raw))
    try:
        tag = raw[pos : pos + tag_len].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("class tag is not UTF-8", offset=pos) from None
    pos += tag_len
    (depth,) = take("<I")
    shapes = []
    for _ in range(depth):
        shape = take("<4I")
        if shape[2:] != (3, 3):
            raise FormatError(f"unsupported kernel size {shape[2:]}", offset=pos - 8)
        shapes.append(shape)
    need = sum(o * i * 9 + o for o, i, _, _ in shapes) * 8
    if len(raw) - pos != need:
        raise FormatError(
            f"weight payload is {len(raw) - pos} bytes, header implies {need}", offset=pos
        )
    kernels, biases = [], []
    for o, i, kh, kw in shapes:
        n = o * i * kh * kw
        kernels.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(o, i, kh, kw).astype(np.float64))
        pos += 8 * n
        biases.append(np.frombuffer(raw, dtype="<f8", count=o, offset=pos).astype(np.float64))
        pos += 8 * o
    try:
        return ModelWeights(kernels, biases, peak=peak, variant=VARIANTS[variant], class_tag=tag or None)
    except DomainError as exc:
        raise FormatError(f"inconsistent layer shapes: {exc}", offset=0) from None
