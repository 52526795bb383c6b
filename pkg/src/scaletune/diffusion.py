"""Forward noising, deterministic-capable reverse sampling, and the
procedural image families used as training targets.

The schedule is the usual linear-beta construction; sampling follows the
x0-prediction update with an eta knob, so eta=0 gives a deterministic
trajectory from a fixed starting noise.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError
from .experts import resolver_for
from .numerics import rng_stream

DATASET_FAMILIES = ("blobs", "rings", "checker", "bars")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule and its cumulative alpha products."""

    total_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self):
        return self.total_steps


def make_schedule(total_steps=100, beta_start=1e-4, beta_end=0.02):
    """Betas linearly spaced over [beta_start, beta_end], inclusive."""
    if total_steps < 1:
        raise ConfigurationError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(
        total_steps=total_steps,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alpha_bars=alpha_bars,
    )


def _check_t(schedule, t):
    t = np.asarray(t)
    if (t < 0).any() or (t >= schedule.total_steps).any():
        raise DomainError(f"timestep outside [0, {schedule.total_steps})")
    return t


def add_noise(schedule, x0, t, noise):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, per item."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if x0.shape != noise.shape:
        raise DimensionError(f"x0 {x0.shape} and noise {noise.shape} differ")
    t = _check_t(schedule, t).reshape(-1)
    if t.shape[0] != x0.shape[0]:
        raise DimensionError(f"{t.shape[0]} timesteps for {x0.shape[0]} items")
    abar = schedule.alpha_bars[t].astype(x0.dtype).reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def ddim_step(schedule, x_t, eps_hat, t, t_prev, eta=0.0, noise=None):
    """One reverse step from t to t_prev (t_prev = -1 ends at the sample).

    Predicts x0 from the noise estimate, then re-noises toward t_prev with
    variance controlled by eta.
    """
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise DimensionError(f"x_t {x_t.shape} and eps_hat {eps_hat.shape} differ")
    _check_t(schedule, t)
    if not -1 <= t_prev < t:
        raise DomainError(f"t_prev must lie in [-1, t), got {t_prev} for t={t}")
    if eta < 0:
        raise DomainError(f"eta must be >= 0, got {eta}")

    dtype = x_t.dtype
    abar_t = schedule.alpha_bars[t]
    abar_prev = schedule.alpha_bars[t_prev] if t_prev >= 0 else 1.0

    x0_hat = (x_t - np.sqrt(1.0 - abar_t, dtype=dtype) * eps_hat) / np.sqrt(abar_t, dtype=dtype)
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
    residual = 1.0 - abar_prev - sigma * sigma
    if residual < 0:
        warnings.warn(
            f"ddim_step: direction coefficient clamped at t={t} (residual {residual:.3e})",
            RuntimeWarning,
        )
        residual = 0.0
    x_prev = (
        np.sqrt(abar_prev, dtype=dtype) * x0_hat
        + np.asarray(np.sqrt(residual), dtype=dtype) * eps_hat
    )
    if sigma > 0:
        if noise is None:
            raise ConfigurationError("ddim_step: eta > 0 requires a noise array")
        x_prev = x_prev + np.asarray(sigma, dtype=dtype) * np.asarray(noise, dtype=dtype)
    return x_prev


def sampling_timesteps(total_steps, n_steps):
    """Evenly spaced visited timesteps, ascending; n_steps = T gives all."""
    if not 1 <= n_steps <= total_steps:
        raise ConfigurationError(f"n_steps must lie in [1, {total_steps}], got {n_steps}")
    stride = total_steps // n_steps
    return list(range(0, total_steps, stride))[:n_steps]


def sample(model, scales, schedule, n_images, n_steps=50, eta=0.0, seed=0):
    """Draw images by iterating the reverse step from pure noise.

    ``scales`` may be None (full precision / stored base scales), a mapping
    of layer name to ScaleSet, or an ExpertBank (resolved per visited
    timestep). Model weights are never written to. Fixed seed, fixed
    arguments: bitwise-identical output.
    """
    cfg = model.config
    stream = rng_stream(seed, "sample")
    shape = (n_images, cfg.channels, cfg.image_size, cfg.image_size)
    x = stream.standard_normal(shape, dtype=np.float32).astype(model.dtype, copy=False)
    ts = sampling_timesteps(schedule.total_steps, n_steps)
    for k in range(len(ts) - 1, -1, -1):
        t = ts[k]
        t_prev = ts[k - 1] if k > 0 else -1
        eps_hat = model.forward(x, np.full(n_images, t), resolver_for(scales, t)).data
        noise = None
        if eta > 0 and t_prev >= 0:
            noise = stream.standard_normal(shape, dtype=np.float32).astype(model.dtype, copy=False)
        x = ddim_step(schedule, x, eps_hat, t, t_prev, eta=eta, noise=noise)
    return x


# ---------------------------------------------------------------------------
# procedural datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyDatasetSpec:
    family: str
    n_samples: int
    noise: float = 0.05
    seed: int = 0
    image_size: int = 16

    def __post_init__(self):
        if self.family not in DATASET_FAMILIES:
            raise ConfigurationError(
                f"unknown family {self.family!r}, pick from {DATASET_FAMILIES}"
            )
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.noise < 0:
            raise ConfigurationError(f"noise must be >= 0, got {self.noise}")


def _grid(size):
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def _blobs(stream, n, size):
    yy, xx = _grid(size)
    images = np.full((n, size, size), -1.0)
    counts = stream.integers(1, 4, size=n)
    for i in range(n):
        for _ in range(counts[i]):
            cy, cx = stream.uniform(2, size - 2, size=2)
            sig = stream.uniform(1.2, 2.2)
            amp = stream.uniform(1.6, 2.0)
            images[i] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    return images


def _rings(stream, n, size):
    yy, xx = _grid(size)
    images = np.full((n, size, size), -0.9)
    for i in range(n):
        cy, cx = stream.uniform(size / 2 - 2, size / 2 + 2, size=2)
        radius = stream.uniform(3.0, 6.0)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        images[i] += 1.8 * np.exp(-((dist - radius) ** 2) / 0.8)
    return images


def _checker(stream, n, size):
    yy, xx = _grid(size)
    images = np.empty((n, size, size))
    for i in range(n):
        cell = int(stream.integers(2, 5))
        py, px = stream.integers(0, cell, size=2)
        pattern = (((yy + py) // cell + (xx + px) // cell) % 2) * 2.0 - 1.0
        images[i] = pattern * 0.8
    return images


def _bars(stream, n, size):
    yy, xx = _grid(size)
    images = np.empty((n, size, size))
    for i in range(n):
        period = int(stream.integers(3, 7))
        phase = int(stream.integers(0, period))
        axis = yy if stream.integers(0, 2) == 0 else xx
        pattern = ((((axis + phase) // period) % 2) * 2.0 - 1.0)
        images[i] = pattern * 0.8
    return images


_FAMILY_BUILDERS = {"blobs": _blobs, "rings": _rings, "checker": _checker, "bars": _bars}


def gen_dataset(spec: ToyDatasetSpec):
    """Images in [-1, 1], shape (n, 1, size, size), real32, reproducible
    from (seed, family)."""
    stream = rng_stream(spec.seed, f"dataset:{spec.family}")
    images = _FAMILY_BUILDERS[spec.family](stream, spec.n_samples, spec.image_size)
    if spec.noise > 0:
        images = images + stream.normal(0.0, spec.noise, size=images.shape)
    images = np.clip(images, -1.0, 1.0)
    return images[:, None, :, :].astype(np.float32)
