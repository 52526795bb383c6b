"""Timestep-indexed banks of scale sets.

The diffusion timestep axis [0, T) is cut into N equal spans and each span
owns a full set of per-layer scales (an "expert"). Routing is a pure index
computation, so a sample's gradient lands in exactly one expert.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .numerics import Param, rng_stream
from .qlayers import ScaleSet

INIT_MEAN = 1.0
INIT_STD = 0.01


def expert_index(t, n_experts, total_steps):
    """floor(t * N / T), clamped to N - 1 at the top edge."""
    if n_experts < 1:
        raise ConfigurationError(f"n_experts must be >= 1, got {n_experts}")
    if total_steps < 1:
        raise ConfigurationError(f"total_steps must be >= 1, got {total_steps}")
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr > total_steps).any():
        raise DomainError(f"timestep {t} outside [0, {total_steps}]")
    idx = np.minimum(t_arr * n_experts // total_steps, n_experts - 1)
    return int(idx) if np.isscalar(t) or t_arr.ndim == 0 else idx.astype(np.int64)


@dataclass
class ExpertBank:
    """Per-layer lists of N scale sets plus the routing geometry."""

    n_experts: int
    total_steps: int
    sets: dict  # layer name -> [ScaleSet] * n_experts
    method: str = "mcsu"
    instrument: bool = False
    query_log: list = field(default_factory=list)

    def __post_init__(self):
        for name, group in self.sets.items():
            if len(group) != self.n_experts:
                raise ConfigurationError(
                    f"layer {name!r} has {len(group)} scale sets, bank expects {self.n_experts}"
                )

    def layer_names(self):
        return list(self.sets.keys())

    def params(self):
        out = []
        for group in self.sets.values():
            for scale_set in group:
                out.extend(scale_set.params())
        return out

    def expert_params(self, index):
        """All scale params belonging to one expert, in layer order."""
        out = []
        for group in self.sets.values():
            out.extend(group[index].params())
        return out

    def trainable_count(self):
        return sum(p.value.size for p in self.params() if p.trainable)

    def state_bytes(self):
        """Concatenated little-endian payload of every scale vector, for
        cheap bitwise comparisons."""
        chunks = []
        for group in self.sets.values():
            for scale_set in group:
                chunks.append(scale_set.s_out.value.astype("<f4", copy=False).tobytes())
                chunks.append(scale_set.s_in.value.astype("<f4", copy=False).tobytes())
        return b"".join(chunks)


def select_scales(bank, layer_name, t):
    """The scale set governing ``layer_name`` at timestep ``t``."""
    if layer_name not in bank.sets:
        raise KeyError(f"bank has no layer {layer_name!r}")
    idx = expert_index(t, bank.n_experts, bank.total_steps)
    if bank.instrument:
        bank.query_log.append((layer_name, int(t), idx))
    return bank.sets[layer_name][idx]


def resolver_for(bank, t):
    """Bind a bank (or a plain name->ScaleSet mapping) to one timestep."""
    if bank is None:
        return None
    if isinstance(bank, ExpertBank):
        return lambda name: select_scales(bank, name, t)
    return lambda name: bank[name]


def init_bank(model, n_experts, total_steps, seed=0, init_mean=INIT_MEAN, init_std=INIT_STD,
              method="mcsu"):
    """Fresh bank for a quantized model.

    Every expert's s_out starts as a copy of the layer's calibrated scale;
    s_in is drawn from Normal(init_mean, init_std) for the multi-channel
    method and pinned at one for the baseline. Draws are consumed layer by
    layer, expert by expert, from the (seed, "bank-init") stream.
    """
    if method not in ("baseline", "mcsu"):
        raise ConfigurationError(f"unknown method {method!r}")
    if n_experts < 1:
        raise ConfigurationError(f"n_experts must be >= 1, got {n_experts}")
    if init_std < 0:
        raise ConfigurationError(f"init_std must be >= 0, got {init_std}")
    stream = rng_stream(seed, "bank-init")
    sets = {}
    for name, layer in model.named_layers():
        if not getattr(layer, "quantized", False):
            continue
        dtype = layer.dtype
        group = []
        for e in range(n_experts):
            s_out = Param(
                layer.qt.params.scale.astype(dtype).copy(),
                trainable=True,
                name=f"{name}.expert{e}.s_out",
            )
            if method == "mcsu":
                draw = stream.normal(loc=init_mean, scale=init_std, size=layer.c_in)
                s_in = Param(draw.astype(dtype), trainable=True, name=f"{name}.expert{e}.s_in")
            else:
                stream.normal(loc=init_mean, scale=init_std, size=layer.c_in)  # keep stream aligned
                s_in = Param(
                    np.ones(layer.c_in, dtype=dtype), trainable=False,
                    name=f"{name}.expert{e}.s_in",
                )
            group.append(ScaleSet(s_out=s_out, s_in=s_in, mode=method))
        sets[name] = group
    return ExpertBank(n_experts=n_experts, total_steps=total_steps, sets=sets, method=method)
