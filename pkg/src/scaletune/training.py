"""Optimization loops: full-precision pretraining, scale-only fine-tuning
with per-sample expert routing, and deterministic evaluation.

The objective everywhere is noise-prediction MSE. Fine-tuning optionally
adds lambda_prior times the same loss on a preservation dataset, and routes
every sample's gradient to the expert owning its timestep, so experts not
visited in an iteration are left byte-identical.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .diffusion import add_noise
from .errors import ConfigurationError, ContractError, DimensionError, NumericError
from .experts import ExpertBank, expert_index, resolver_for, select_scales
from .numerics import backward, rng_stream
from .qlayers import trainable_param_count


@dataclass
class TrainConfig:
    method: str = "mcsu"
    bits: int = 4
    n_experts: int = 1
    lr: float = 1e-3
    batch_size: int = 16
    iterations: int = 800
    lambda_prior: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    scale_init_mean: float = 1.0
    scale_init_std: float = 0.01

    def __post_init__(self):
        if self.method not in ("baseline", "mcsu"):
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.iterations < 0 or self.n_experts < 1:
            raise ConfigurationError("batch_size >= 1, iterations >= 0, n_experts >= 1 required")
        if self.lambda_prior < 0:
            raise ConfigurationError(f"lambda_prior must be >= 0, got {self.lambda_prior}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigurationError("Adam betas must lie in [0, 1)")


@dataclass
class TrainReport:
    losses: list
    trainable_params: int
    wall_seconds: float
    final_eval_loss: float = float("nan")
    expert_sample_counts: dict = field(default_factory=dict)


class Adam:
    """Standard Adam with per-parameter state; steps only the params it is
    handed, so untouched experts keep bitwise-identical moments and values."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state = {}

    def step(self, params):
        for p in params:
            if not p.trainable:
                continue
            state = self._state.get(id(p))
            if state is None:
                state = [np.zeros_like(p.value), np.zeros_like(p.value), 0]
                self._state[id(p)] = state
            m, v, _ = state
            state[2] += 1
            k = state[2]
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1**k)
            v_hat = v / (1 - self.beta2**k)
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype)


def _noise_pred_sq_error(model, resolver, x0, t, eps, schedule):
    """Sum of squared noise-prediction errors over a (sub-)batch, as a graph."""
    x_t = add_noise(schedule, x0, t, eps).astype(model.dtype, copy=False)
    pred = model.forward(x_t, t, resolver)
    diff = nm.sub(pred, nm.constant(eps.astype(model.dtype, copy=False)))
    return nm.total(nm.mul(diff, diff))


def diffusion_loss(model, scales, x0_batch, schedule, rng):
    """Noise-prediction MSE over a batch; timesteps uniform per item.

    Returns a scalar graph tensor. With an ExpertBank the batch is split by
    expert so each item is evaluated under its own timestep's scales.
    """
    x0 = np.asarray(x0_batch)
    if x0.ndim != 4:
        raise DimensionError(f"x0 batch must be 4-d, got {x0.shape}")
    B = x0.shape[0]
    t = rng.integers(0, schedule.total_steps, size=B)
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    denom = 1.0 / x0.size

    if isinstance(scales, ExpertBank):
        loss = None
        for _, members in _expert_groups(t, scales):
            part = _noise_pred_sq_error(
                model,
                resolver_for(scales, int(t[members[0]])),
                x0[members],
                t[members],
                eps[members],
                schedule,
            )
            loss = part if loss is None else nm.add(loss, part)
        return loss * denom
    return _noise_pred_sq_error(model, resolver_for(scales, 0), x0, t, eps, schedule) * denom


def prior_loss(model, scales, prior_batch, schedule, rng):
    """Same objective on preservation data; callers weight it by lambda."""
    return diffusion_loss(model, scales, prior_batch, schedule, rng)


def _expert_groups(t, bank):
    """Sorted (expert, member_indices) pairs partitioning the batch."""
    idx = expert_index(t, bank.n_experts, bank.total_steps)
    groups = []
    for e in np.unique(idx):
        groups.append((int(e), np.nonzero(idx == e)[0]))
    return groups


def pretrain(model, dataset, schedule, config: TrainConfig):
    """Full-precision training of every model parameter. Returns a report;
    the model is updated in place."""
    dataset = np.asarray(dataset)
    params = model.parameters()
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    batch_stream = rng_stream(config.seed, "pretrain-batch")
    noise_stream = rng_stream(config.seed, "pretrain-noise")
    losses = []
    started = time.monotonic()
    for _ in range(config.iterations):
        picks = batch_stream.integers(0, dataset.shape[0], size=config.batch_size)
        try:
            loss = diffusion_loss(model, None, dataset[picks], schedule, noise_stream)
        except NumericError as err:
            raise ContractError(
                f"pretraining diverged at iteration {len(losses)}: {err}"
            ) from err
        value = loss.item()
        if not np.isfinite(value):
            raise ContractError(f"pretraining diverged at iteration {len(losses)}")
        backward(loss)
        opt.step(params)
        nm.zero_grads(params)
        losses.append(value)
    return TrainReport(
        losses=losses,
        trainable_params=sum(p.value.size for p in params),
        wall_seconds=time.monotonic() - started,
    )


def finetune(model, bank, target_dataset, prior_dataset, schedule, config: TrainConfig):
    """Scale-only fine-tuning of a quantized model toward ``target_dataset``.

    Only bank scale parameters move; codes, zero points, biases, and retained
    full-precision layers are untouched. Per iteration the batch is split by
    expert; Adam steps exactly the experts that received samples.
    """
    target = np.asarray(target_dataset)
    expected = trainable_param_count(model, bank.method, bank.n_experts)
    if bank.trainable_count() != expected:
        raise ContractError(
            f"bank holds {bank.trainable_count()} trainable scales, model implies {expected}"
        )
    frozen = [p for p in model.parameters() if p.trainable]
    if frozen:
        raise ContractError(
            f"quantized model still has trainable weights: {[p.name for p in frozen][:3]}"
        )

    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    batch_stream = rng_stream(config.seed, "finetune-batch")
    noise_stream = rng_stream(config.seed, "finetune-noise")
    prior_batch_stream = rng_stream(config.seed, "finetune-prior-batch")
    prior_noise_stream = rng_stream(config.seed, "finetune-prior-noise")

    losses = []
    counts = {e: 0 for e in range(bank.n_experts)}
    started = time.monotonic()
    for it in range(config.iterations):
        touched = set()
        total_loss = 0.0

        def run_batch(dataset, b_stream, n_stream, weight):
            nonlocal total_loss
            picks = b_stream.integers(0, dataset.shape[0], size=config.batch_size)
            x0 = dataset[picks]
            t = n_stream.integers(0, schedule.total_steps, size=config.batch_size)
            eps = n_stream.standard_normal(x0.shape, dtype=np.float32)
            denom = weight / x0.size
            for e, members in _expert_groups(t, bank):
                part = _noise_pred_sq_error(
                    model, resolver_for(bank, int(t[members[0]])), x0[members], t[members],
                    eps[members], schedule,
                ) * denom
                value = part.item()
                if not np.isfinite(value):
                    raise ContractError(f"fine-tuning diverged at iteration {it}")
                backward(part)
                total_loss += value
                touched.add(e)
                counts[e] += len(members)

        try:
            run_batch(target, batch_stream, noise_stream, 1.0)
            if prior_dataset is not None and config.lambda_prior > 0:
                run_batch(
                    np.asarray(prior_dataset), prior_batch_stream, prior_noise_stream,
                    config.lambda_prior,
                )
        except NumericError as err:
            raise ContractError(f"fine-tuning diverged at iteration {it}: {err}") from err

        stepped = []
        for e in sorted(touched):
            stepped.extend(bank.expert_params(e))
        opt.step(stepped)
        nm.zero_grads(stepped)
        losses.append(total_loss)

    for name, group in bank.sets.items():
        for e, scale_set in enumerate(group):
            if (scale_set.s_out.value <= 0).any():
                warnings.warn(
                    f"{name}: expert {e} has non-positive output scales after fine-tuning",
                    RuntimeWarning,
                )

    report = TrainReport(
        losses=losses,
        trainable_params=bank.trainable_count(),
        wall_seconds=time.monotonic() - started,
        expert_sample_counts=counts,
    )
    report.final_eval_loss = eval_loss(model, bank, target[: min(64, len(target))], schedule,
                                       config.seed)
    return report


def eval_loss(model, scales, eval_images, schedule, seed, n_timesteps=8):
    """Deterministic noise-prediction MSE on a fixed timestep/noise grid."""
    images = np.asarray(eval_images)
    if images.ndim != 4:
        raise DimensionError(f"eval images must be 4-d, got {images.shape}")
    ts = np.unique(np.linspace(0, schedule.total_steps - 1, n_timesteps).round().astype(int))
    stream = rng_stream(seed, "eval-noise")
    eps = stream.standard_normal((len(ts),) + images.shape, dtype=np.float32)
    total = 0.0
    count = 0
    for row, t_val in enumerate(ts):
        t = np.full(images.shape[0], t_val)
        err = _noise_pred_sq_error(
            model, resolver_for(scales, int(t_val)), images, t, eps[row], schedule
        )
        total += err.item()
        count += images.size
    return total / count


@dataclass
class EvalResult:
    eval_loss: float
    frechet: float
    n_generated: int


def evaluate(model, scales, eval_dataset, schedule, seed, n_generated=256, gen_steps=100,
             eta=0.0):
    """Eval loss on held-out images plus a sample-quality metric.

    The metric is the Gaussian-moment distance between generated pixels and
    the eval set. Deterministic for a fixed seed.
    """
    from .analysis import frechet_pixel_distance
    from .diffusion import sample

    images = np.asarray(eval_dataset)
    loss = eval_loss(model, scales, images[: min(128, len(images))], schedule, seed)
    generated = sample(model, scales, schedule, n_generated, n_steps=gen_steps, eta=eta,
                       seed=seed)
    return EvalResult(
        eval_loss=loss,
        frechet=frechet_pixel_distance(generated, images),
        n_generated=n_generated,
    )
