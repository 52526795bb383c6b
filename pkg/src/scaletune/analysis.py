"""Diagnostics: where fine-tuning moved the effective weights, whether the
movement has the structure the parameterization implies, storage accounting,
sample-set distances, and a dequantize-matmul micro-benchmark.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .quantizer import (
    calibrate_minmax,
    dequantize,
    pack_codes,
    packed_nbytes,
    quantize,
    unpack_codes,
)

RATIO_EPS = 1e-12


def change_ratio_map(w_init, w_tuned, codes, zero_point):
    """Elementwise relative change |w_tuned - w_init| / (|w_init| + eps).

    Entries whose code equals the channel zero point are masked (returned in
    the boolean mask); their effective weight is pinned at zero for any
    scale, so a ratio there is meaningless.
    """
    w_init = np.asarray(w_init)
    w_tuned = np.asarray(w_tuned)
    codes = np.asarray(codes)
    if not (w_init.shape == w_tuned.shape == codes.shape):
        raise DimensionError(
            f"shape mismatch: {w_init.shape}, {w_tuned.shape}, {codes.shape}"
        )
    z = np.asarray(zero_point).reshape((-1,) + (1,) * (codes.ndim - 1))
    mask = codes == z
    ratio = np.abs(w_tuned - w_init) / (np.abs(w_init) + RATIO_EPS)
    return ratio, mask


def channel_stats(ratio, mask, axis="out"):
    """Five-number summaries of a ratio map along one channel axis.

    axis="out" summarizes each output channel (rows); axis="in" each input
    channel (columns, spatial taps pooled). Masked entries are dropped.
    Quartiles use linear interpolation. Returns a list of dicts.
    """
    if axis not in ("out", "in"):
        raise ConfigurationError(f"axis must be 'out' or 'in', got {axis!r}")
    ratio = np.asarray(ratio)
    mask = np.asarray(mask)
    if axis == "out":
        flat = ratio.reshape(ratio.shape[0], -1)
        keep = ~mask.reshape(ratio.shape[0], -1)
    else:
        moved = np.moveaxis(ratio, 1, 0)
        flat = moved.reshape(moved.shape[0], -1)
        keep = ~np.moveaxis(mask, 1, 0).reshape(moved.shape[0], -1)
    rows = []
    for c in range(flat.shape[0]):
        vals = flat[c][keep[c]]
        if vals.size == 0:
            rows.append({"channel": c, "count": 0, "min": np.nan, "q1": np.nan,
                         "median": np.nan, "q3": np.nan, "max": np.nan})
            continue
        q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
        rows.append({
            "channel": c,
            "count": int(vals.size),
            "min": float(vals.min()),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
            "max": float(vals.max()),
        })
    return rows


def rank1_check(w_init, w_tuned, codes, zero_point):
    """Max absolute residual of fitting log|w_tuned / w_init| = a[o] + b[i].

    A scale-product update moves every unmasked entry by exactly such a
    separable field, so small residuals certify the structure. Conv taps
    share their input channel's b[i].
    """
    w_init = np.asarray(w_init, dtype=np.float64)
    w_tuned = np.asarray(w_tuned, dtype=np.float64)
    codes = np.asarray(codes)
    z = np.asarray(zero_point).reshape((-1,) + (1,) * (codes.ndim - 1))
    usable = (codes != z) & (w_init != 0) & (w_tuned != 0)
    if not usable.any():
        return 0.0

    log_ratio = np.zeros_like(w_init)
    log_ratio[usable] = np.log(np.abs(w_tuned[usable])) - np.log(np.abs(w_init[usable]))

    c_out, c_in = w_init.shape[0], w_init.shape[1]
    o_idx, i_idx = np.meshgrid(np.arange(c_out), np.arange(c_in), indexing="ij")
    o_idx = np.broadcast_to(o_idx.reshape((c_out, c_in) + (1,) * (w_init.ndim - 2)), w_init.shape)
    i_idx = np.broadcast_to(i_idx.reshape((c_out, c_in) + (1,) * (w_init.ndim - 2)), w_init.shape)

    rows = np.nonzero(usable.reshape(-1))[0]
    n = rows.size
    design = np.zeros((n, c_out + c_in))
    design[np.arange(n), o_idx.reshape(-1)[rows]] = 1.0
    design[np.arange(n), c_out + i_idx.reshape(-1)[rows]] = 1.0
    target = log_ratio.reshape(-1)[rows]
    coeffs, *_ = np.linalg.lstsq(design, target, rcond=None)
    residual = target - design @ coeffs
    return float(np.abs(residual).max())


# ---------------------------------------------------------------------------
# storage accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StorageReport:
    packed_weight_bytes: int
    scale_zero_point_bytes: int
    scale_pack_bytes: int
    full_precision_bytes: int
    compression_ratio: float
    trainable_params: int


def storage_report(model, bank=None):
    """Byte accounting over the model's quantized layers.

    full_precision_bytes is the real32 serialization of those layers'
    weights; compression compares it against packed codes plus scale and
    zero-point metadata. The scale-pack size is measured by serializing the
    bank exactly as the container writer does.
    """
    from .serial import scalepack_bytes

    packed = 0
    scale_zp = 0
    fp_bytes = 0
    for _, layer in model.named_layers():
        if not getattr(layer, "quantized", False):
            continue
        n = layer.qt.codes.size
        packed += packed_nbytes(n, layer.qt.bits)
        scale_zp += layer.c_out * 4 + layer.c_out  # real32 scale + u8 zero point
        fp_bytes += n * 4
    pack_size = len(scalepack_bytes(bank, task_id="report")) if bank is not None else 0
    denom = packed + scale_zp
    ratio = fp_bytes / denom if denom else float("nan")
    return StorageReport(
        packed_weight_bytes=packed,
        scale_zero_point_bytes=scale_zp,
        scale_pack_bytes=pack_size,
        full_precision_bytes=fp_bytes,
        compression_ratio=ratio,
        trainable_params=bank.trainable_count() if bank is not None else 0,
    )


# ---------------------------------------------------------------------------
# sample-set distance
# ---------------------------------------------------------------------------


def _moments(samples):
    flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    mu = flat.mean(axis=0)
    centered = flat - mu
    cov = centered.T @ centered / max(1, len(flat) - 1)
    return mu, cov


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_pixel_distance(samples_a, samples_b):
    """Squared Gaussian-moment distance between two image sets' pixels.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken through symmetric eigendecompositions (negative
    eigenvalues clamped to zero).
    """
    a = np.asarray(samples_a)
    b = np.asarray(samples_b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("need batched samples")
    if a[0].size != b[0].size:
        raise DimensionError(f"pixel counts differ: {a[0].size} vs {b[0].size}")
    if len(a) < 2 or len(b) < 2:
        raise DimensionError("need at least two samples per set")
    mu_a, cov_a = _moments(a)
    mu_b, cov_b = _moments(b)
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(dist, 0.0)


# ---------------------------------------------------------------------------
# micro-benchmark
# ---------------------------------------------------------------------------


def bench_dequant_matmul(sizes, bits=4, reps=5, seed=0):
    """Time x @ W.T with a materialized weight against on-the-fly
    unpack+dequantize+matmul from packed codes.

    Asserts both routes agree (<= 1e-5 absolute) before timing. Returns one
    dict per size with median seconds for each route.
    """
    if reps < 1:
        raise ConfigurationError(f"reps must be >= 1, got {reps}")
    results = []
    rng = np.random.default_rng(seed)
    for m, k, n in sizes:
        w = rng.normal(size=(n, k)).astype(np.float32)
        x = rng.normal(size=(m, k)).astype(np.float32)
        qt = quantize(w, calibrate_minmax(w, bits))
        packed = pack_codes(qt)
        w_hat = dequantize(qt)

        reference = x @ w_hat.T
        codes = unpack_codes(packed, bits, qt.codes.size, qt.codes.shape)
        redequant = x @ dequantize(type(qt)(codes=codes, params=qt.params)).T
        worst = float(np.abs(reference - redequant).max())
        if worst > 1e-5:
            raise ConfigurationError(f"dequantize mismatch {worst} for size {(m, k, n)}")

        def time_route(fn):
            times = []
            for _ in range(reps):
                started = time.perf_counter()
                fn()
                times.append(time.perf_counter() - started)
            return float(np.median(times))

        qt_params = qt.params
        shape = qt.codes.shape
        count = qt.codes.size

        t_fp = time_route(lambda: x @ w_hat.T)

        def dequant_route():
            c = unpack_codes(packed, bits, count, shape)
            from .quantizer import QuantizedTensor

            return x @ dequantize(QuantizedTensor(codes=c, params=qt_params)).T

        t_dq = time_route(dequant_route)
        results.append({
            "m": m, "k": k, "n": n, "bits": bits,
            "fp_seconds": t_fp, "dequant_seconds": t_dq,
            "overhead": t_dq / t_fp if t_fp > 0 else float("inf"),
            "max_abs_diff": worst,
        })
    return results


# ---------------------------------------------------------------------------
# small export helpers shared with the command line
# ---------------------------------------------------------------------------


def write_csv(path, rows, fieldnames=None):
    """Rows of dicts to a CSV file."""
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_pgm(path, image):
    """Normalize a 2-d array to 8-bit grayscale and write binary PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"PGM wants a 2-d array, got {image.shape}")
    lo, hi = image.min(), image.max()
    if hi > lo:
        scaled = (image - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(image)
    data = (scaled * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def tile_grid(images, columns=8):
    """Tile (B, 1, H, W) images into one 2-d array for previewing."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W), got {images.shape}")
    b, _, h, w = images.shape
    columns = min(columns, b)
    rows = (b + columns - 1) // columns
    canvas = np.full((rows * h, columns * w), images.min())
    for i in range(b):
        r, c = divmod(i, columns)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = images[i, 0]
    return canvas
