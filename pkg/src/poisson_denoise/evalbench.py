"""Evaluation harness: PSNR reports, paired comparisons and layer introspection.

CSV schemas (floats written with 4 decimals):

* evaluation report: ``image,realization,peak,psnr,noisy_psnr,runtime_s``
  (one row per image and noise realization; ``runtime_s`` is the per-image
  median and repeats on each of that image's rows)
* comparison report: ``rank,image,gain_db`` sorted by ascending gain
* layer report: ``depth,rmse`` for depths 0 (noisy input) to the network depth
* summary table: ``method,peak,<image names...>,time_s`` with one row per
  method and peak, cells holding per-image mean PSNR
"""

from __future__ import annotations

import csv
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError
from .imaging import crop_center, pad_symmetric, psnr, rmse
from .network import ModelWeights, denoise, forward, forward_vst_variant, to_photoelectrons
from .noise import CountImage, noise_stream, sample_poisson_array

__all__ = [
    "EvalReport",
    "ComparisonReport",
    "LayerReport",
    "evaluate",
    "compare",
    "layer_profile",
    "confusion_matrix",
    "time_inference",
    "emit_csv",
    "read_eval_csv",
    "read_comparison_csv",
    "read_layer_csv",
    "emit_table",
    "read_table",
]

_EVAL_HEADER = ["image", "realization", "peak", "psnr", "noisy_psnr", "runtime_s"]
_CMP_HEADER = ["rank", "image", "gain_db"]
_LAYER_HEADER = ["depth", "rmse"]


def _fmt(x):
    return f"{float(x):.4f}"


@dataclass
class EvalReport:
    """PSNR of every (image, realization) pair for one method at one peak."""

    peak: float | None
    names: list
    psnr: np.ndarray  # (images, realizations)
    noisy_psnr: np.ndarray  # (images, realizations)
    runtime: np.ndarray  # (images,) seconds
    method: str = "denoisenet"

    def __post_init__(self):
        n = len(self.names)
        self.psnr = np.asarray(self.psnr, dtype=np.float64)
        self.psnr = self.psnr.reshape(n, self.psnr.size // n if n else 0)
        self.noisy_psnr = np.asarray(self.noisy_psnr, dtype=np.float64).reshape(self.psnr.shape)
        self.runtime = np.asarray(self.runtime, dtype=np.float64).reshape(len(self.names))

    @property
    def realizations(self):
        return self.psnr.shape[1]

    @property
    def per_image(self):
        """Mean PSNR over realizations, one value per image."""
        return self.psnr.mean(axis=1)

    @property
    def mean(self):
        """Mean of the per-image means."""
        return float(self.per_image.mean()) if len(self.names) else float("nan")

    @property
    def noisy_mean(self):
        return float(self.noisy_psnr.mean(axis=1).mean()) if len(self.names) else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_EVAL_HEADER)
            for i, name in enumerate(self.names):
                for r in range(self.realizations):
                    w.writerow(
                        [
                            name,
                            r,
                            _fmt(self.peak),
                            _fmt(self.psnr[i, r]),
                            _fmt(self.noisy_psnr[i, r]),
                            _fmt(self.runtime[i]),
                        ]
                    )


@dataclass
class ComparisonReport:
    """Paired per-image gains of method A over method B.

    Ties count as wins for B.  ``zero_crossing`` is the number of images with
    a strictly negative gain, i.e. the index in ``sorted_gains`` where the
    profile reaches zero.
    """

    names: list
    gains: np.ndarray  # per image, input order

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)

    @property
    def order(self):
        return np.argsort(self.gains, kind="stable")

    @property
    def sorted_gains(self):
        return self.gains[self.order]

    @property
    def win_a(self):
        """Percentage of images where A is strictly better."""
        return 100.0 * float(np.mean(self.gains > 0)) if self.gains.size else 0.0

    @property
    def win_b(self):
        return 100.0 - self.win_a if self.gains.size else 0.0

    @property
    def zero_crossing(self):
        return int(np.sum(self.gains < 0))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_CMP_HEADER)
            for rank, i in enumerate(self.order):
                w.writerow([rank, self.names[i], _fmt(self.gains[i])])


@dataclass
class LayerReport:
    """Error after every depth and the per-pixel dominant layer.

    ``rmse[d]`` is the RMSE in photoelectrons between the clean image and the
    clipped estimate after ``d`` layers (``d = 0`` is the noisy input).
    ``dominant[y, x]`` is the 1-based layer whose extracted residual has the
    largest magnitude at that pixel (ties go to the shallower layer).
    """

    rmse: np.ndarray
    dominant: np.ndarray | None = None
    error_images: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.rmse = np.asarray(self.rmse, dtype=np.float64)

    @property
    def monotone_fraction(self):
        """Fraction of consecutive depth steps that lowered the RMSE."""
        steps = np.diff(self.rmse)
        return float(np.mean(steps < 0)) if steps.size else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_LAYER_HEADER)
            for d, v in enumerate(self.rmse):
                w.writerow([d, _fmt(v)])


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _named(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], list):
        names, images = dataset
    elif isinstance(dataset, dict):
        names, images = list(dataset), list(dataset.values())
    else:
        images = list(dataset)
        names = [f"img{i:04d}" for i in range(len(images))]
    return list(names), [np.asarray(im, dtype=np.float64) for im in images]


def evaluate(
    weights: ModelWeights,
    dataset,
    peak: float,
    realizations: int = 15,
    seed: int = 0,
    margin: int = 21,
    threads: int = 1,
    method: str = "denoisenet",
) -> EvalReport:
    """Denoise noisy realizations of every image and score them.

    ``dataset`` is a list of normalized images, a ``(names, images)`` pair or
    a name -> image mapping.  Realization ``r`` of image ``i`` uses the noise
    stream ``(seed, i, r)``, so reports do not depend on ``threads``.
    The noisy baseline is the count image itself, clipped to ``[0, peak]``.
    """
    if weights.peak != float(peak):
        raise DomainError(f"weights were trained for peak {weights.peak}, not {peak}")
    if realizations < 1:
        raise DomainError("need at least one realization")
    names, images = _named(dataset)
    n = len(images)
    scores = np.zeros((n, realizations))
    noisy = np.zeros((n, realizations))
    times = np.zeros((n, realizations))

    def job(ir):
        i, r = ir
        clean = images[i] * peak
        counts = CountImage(sample_poisson_array(clean, noise_stream(seed, i, r)), peak)
        t0 = time.perf_counter()
        est = denoise(weights, counts, peak, margin=margin)
        times[i, r] = time.perf_counter() - t0
        scores[i, r] = psnr(clean, est, peak)
        noisy[i, r] = psnr(clean, np.clip(counts.counts, 0, peak), peak)

    pairs = [(i, r) for i in range(n) for r in range(realizations)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(job, pairs))
    else:
        for p in pairs:
            job(p)
    runtime = np.median(times, axis=1) if n else np.zeros(0)
    return EvalReport(float(peak), names, scores, noisy, runtime, method)


def compare(report_a: EvalReport, report_b: EvalReport) -> ComparisonReport:
    """Per-image gains of ``report_a`` over ``report_b``."""
    if list(report_a.names) != list(report_b.names):
        raise DomainError("reports cover different images")
    if report_a.realizations != report_b.realizations:
        raise DomainError("reports use different numbers of realizations")
    if report_a.peak != report_b.peak:
        raise DomainError(f"reports are for different peaks ({report_a.peak}, {report_b.peak})")
    return ComparisonReport(list(report_a.names), report_a.per_image - report_b.per_image)


def layer_profile(weights: ModelWeights, clean, counts: CountImage, margin: int = 21) -> LayerReport:
    """Per-depth RMSE and dominant-layer map for one noisy image.

    ``clean`` is the intensity field in photoelectrons.  The image is
    mirror-padded and cropped exactly as in :func:`evaluate`, so the
    deepest entry equals the RMSE of the clipped network output.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != counts.shape:
        raise DomainError(f"clean {clean.shape} and counts {counts.shape} differ")
    peak = counts.peak
    c = counts.counts.astype(np.float64)
    m = min(int(margin), min(c.shape))
    padded = pad_symmetric(c, m)
    if weights.variant == "vst_binned":
        trace = forward_vst_variant(weights, padded)
    else:
        trace = forward(weights, padded / peak - 0.5)
    start = crop_center(trace.input, m)
    cumulative = crop_center(trace.cumulative, m)
    slices = crop_center(trace.residual_slices, m)
    estimates = [to_photoelectrons(start, trace.domain, peak)]
    estimates += [to_photoelectrons(cd, trace.domain, peak) for cd in cumulative]
    errors = np.stack([np.abs(clean - e) for e in estimates])
    values = [rmse(clean, e) for e in estimates]
    dominant = np.argmax(np.abs(slices), axis=0) + 1
    return LayerReport(np.array(values), dominant, errors)


def confusion_matrix(scores) -> np.ndarray:
    """Win probabilities of class-specific denoisers.

    ``scores[i]`` is an ``(images, denoisers)`` PSNR array for image class
    ``i``.  Entry ``(i, j)`` is the fraction of class-``i`` images on which
    denoiser ``j`` scores highest (ties to the lower index).
    """
    rows = []
    for s in scores:
        s = np.asarray(s, dtype=np.float64)
        best = np.argmax(s, axis=1)
        rows.append(np.bincount(best, minlength=s.shape[1]) / s.shape[0])
    return np.array(rows)


def time_inference(weights: ModelWeights, size: int = 256, repeats: int = 5, seed: int = 0) -> float:
    """Median wall-clock seconds to denoise one ``size x size`` image."""
    rng = noise_stream(seed, 5)
    clean = rng.random((size, size)) * weights.peak
    counts = CountImage(sample_poisson_array(clean, rng), weights.peak)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        denoise(weights, counts)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def emit_csv(report, path) -> None:
    """Write any report type to ``path`` using its documented schema."""
    report.to_csv(path)


def _rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected header {header}") from None
        if got != header:
            raise FormatError(f"{path}: header {got} does not match {header}")
        return list(reader)


def read_eval_csv(path, method="denoisenet") -> EvalReport:
    rows = _rows(path, _EVAL_HEADER)
    names, by_name, peak = [], {}, None
    for row in rows:
        try:
            name, r, pk, p, q, t = row[0], int(row[1]), float(row[2]), float(row[3]), float(row[4]), float(row[5])
        except (ValueError, IndexError):
            raise FormatError(f"{path}: malformed row {row}") from None
        if peak is None:
            peak = pk
        elif pk != peak:
            raise FormatError(f"{path}: mixed peaks {peak} and {pk}")
        if name not in by_name:
            names.append(name)
            by_name[name] = []
        by_name[name].append((r, p, q, t))
    counts = {len(v) for v in by_name.values()}
    if len(counts) > 1:
        raise FormatError(f"{path}: images have different realization counts")
    psnr_ = [[p for _, p, _, _ in sorted(by_name[n])] for n in names]
    noisy = [[q for _, _, q, _ in sorted(by_name[n])] for n in names]
    runtime = [by_name[n][0][3] for n in names]
    if not names:
        return EvalReport(peak, [], np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0), method)
    return EvalReport(peak, names, psnr_, noisy, runtime, method)


def read_comparison_csv(path) -> ComparisonReport:
    rows = _rows(path, _CMP_HEADER)
    try:
        names = [r[1] for r in rows]
        gains = [float(r[2]) for r in rows]
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed comparison row") from None
    return ComparisonReport(names, gains)


def read_layer_csv(path) -> LayerReport:
    rows = _rows(path, _LAYER_HEADER)
    try:
        return LayerReport([float(r[1]) for r in rows])
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed layer row") from None


def emit_table(reports, path) -> None:
    """Write a method x peak summary table (one row per report).

    Columns are the image names of the first report followed by ``time_s``,
    the median per-image runtime.
    """
    reports = list(reports)
    names = list(reports[0].names) if reports else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "peak"] + names + ["time_s"])
        for rep in reports:
            if list(rep.names) != names:
                raise DomainError("all reports in a table must cover the same images")
            means = rep.per_image
            time_s = float(np.median(rep.runtime)) if rep.runtime.size else float("nan")
            w.writerow([rep.method, _fmt(rep.peak)] + [_fmt(v) for v in means] + [_fmt(time_s)])


def read_table(path):
    """Parse :func:`emit_table` output into ``(names, rows)``.

    Each row is ``(method, peak, {image: psnr}, time_s)``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["method", "peak"] or header[-1] != "time_s":
            raise FormatError(f"{path}: not a summary table")
        names = header[2:-1]
        rows = []
        for row in reader:
            vals = [float(v) for v in row[2:-1]]
            rows.append((row[0], float(row[1]), dict(zip(names, vals)), float(row[-1])))
    return names, rows
