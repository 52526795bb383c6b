"""A small convolutional noise predictor for square single-channel images.

Layout: an input conv, one or more resolution levels of residual blocks with
sinusoidal-timestep conditioning, a strided-conv downsample between levels,
and a mirrored upsample path with skip concatenation. No normalization
layers; SiLU activations throughout. Small enough to pretrain on a CPU in
minutes, structured enough (both linear and conv layers) to exercise every
quantization path.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError, DimensionError
from .numerics import DTYPES, Param, Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    channels: int = 1
    base_width: int = 24
    channel_mults: tuple = (1, 2)
    res_blocks: int = 1
    temb_dim: int = 24
    temb_hidden: int = 48

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if self.image_size < 4 or self.channels < 1 or self.base_width < 1:
            raise ConfigurationError(f"degenerate model config: {self}")
        if self.temb_dim % 2:
            raise ConfigurationError(f"temb_dim must be even, got {self.temb_dim}")
        if not self.channel_mults or self.res_blocks < 1:
            raise ConfigurationError(f"degenerate model config: {self}")
        halvings = len(self.channel_mults) - 1
        if self.image_size % (1 << halvings):
            raise ConfigurationError(
                f"image size {self.image_size} does not survive {halvings} halvings"
            )

    @property
    def widths(self):
        return [self.base_width * m for m in self.channel_mults]


class Linear:
    kind = "linear"
    quantized = False

    def __init__(self, name, weight: Param, bias: Param = None):
        self.name = name
        self.weight = weight
        self.bias = bias

    def forward(self, x: Tensor) -> Tensor:
        return nm.linear(x, self.weight.tensor(), self.bias.tensor() if self.bias else None)

    @property
    def shape(self):
        return self.weight.value.shape


class Conv2d:
    kind = "conv2d"
    quantized = False

    def __init__(self, name, weight: Param, bias: Param = None, stride=1, padding=0):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return nm.conv2d(
            x,
            self.weight.tensor(),
            self.bias.tensor() if self.bias else None,
            stride=self.stride,
            padding=self.padding,
        )

    @property
    def shape(self):
        return self.weight.value.shape


def timestep_embedding(t, dim, dtype=np.float32):
    """Sinusoidal features of integer timesteps, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    if half > 1:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def _layer_plan(config):
    """Structural table: (name, kind, out_ch, in_ch, k, stride, pad, zero_init)."""
    widths = config.widths
    levels = len(widths)
    plan = [
        ("time_mlp.fc1", "linear", config.temb_hidden, config.temb_dim, None, None, None, False),
        ("time_mlp.fc2", "linear", config.temb_hidden, config.temb_hidden, None, None, None, False),
        ("in_conv", "conv2d", widths[0], config.channels, 3, 1, 1, False),
    ]

    def res(prefix, c_in, c_out):
        plan.append((f"{prefix}.conv1", "conv2d", c_out, c_in, 3, 1, 1, False))
        plan.append((f"{prefix}.proj", "linear", c_out, config.temb_hidden, None, None, None, False))
        plan.append((f"{prefix}.conv2", "conv2d", c_out, c_out, 3, 1, 1, True))
        if c_in != c_out:
            plan.append((f"{prefix}.skip", "conv2d", c_out, c_in, 1, 1, 0, False))

    for li in range(levels - 1):
        for r in range(config.res_blocks):
            res(f"down{li}.res{r}", widths[li], widths[li])
        plan.append((f"down{li}.down", "conv2d", widths[li + 1], widths[li], 3, 2, 1, False))
    for r in range(config.res_blocks):
        res(f"mid.res{r}", widths[-1], widths[-1])
    for li in reversed(range(levels - 1)):
        plan.append((f"up{li}.up", "conv2d", widths[li], widths[li + 1], 3, 1, 1, False))
        for r in range(config.res_blocks):
            c_in = widths[li] * 2 if r == 0 else widths[li]
            res(f"up{li}.res{r}", c_in, widths[li])
    plan.append(("out_conv", "conv2d", config.channels, widths[0], 3, 1, 1, True))
    return plan


class Denoiser:
    """Noise predictor; see module docstring for the topology."""

    boundary_names = frozenset({"in_conv", "out_conv"})

    def __init__(self, config: DenoiserConfig, dtype="real32", seed=0, layers=None):
        if dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
        self.config = config
        self.dtype_name = dtype
        self.dtype = DTYPES[dtype]
        self.base_scales = None  # set by quantize_model / checkpoint loader
        if layers is not None:
            self.layers = OrderedDict(layers)
        else:
            self.layers = self._init_layers(seed)

    def _init_layers(self, seed):
        stream = nm.rng_stream(seed, "init")
        layers = OrderedDict()
        for name, kind, c_out, c_in, k, stride, pad, zero_init in _layer_plan(self.config):
            fan_in = c_in if kind == "linear" else c_in * k * k
            shape = (c_out, c_in) if kind == "linear" else (c_out, c_in, k, k)
            if zero_init:
                w = np.zeros(shape, dtype=self.dtype)
            else:
                w = stream.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(self.dtype)
            weight = Param(w, trainable=True, name=f"{name}.weight")
            bias = Param(np.zeros(c_out, dtype=self.dtype), trainable=True, name=f"{name}.bias")
            if kind == "linear":
                layers[name] = Linear(name, weight, bias)
            else:
                layers[name] = Conv2d(name, weight, bias, stride=stride, padding=pad)
        return layers

    # -- structure ---------------------------------------------------------

    def named_layers(self):
        return self.layers.items()

    def quant_layer_names(self):
        return [n for n, l in self.layers.items() if getattr(l, "quantized", False)]

    def parameters(self):
        out = []
        for layer in self.layers.values():
            if getattr(layer, "quantized", False):
                if layer.bias is not None:
                    out.append(layer.bias)
            else:
                out.append(layer.weight)
                if layer.bias is not None:
                    out.append(layer.bias)
        return out

    def total_param_count(self):
        """All real parameters, counting quantized layers at their code counts."""
        total = 0
        for layer in self.layers.values():
            if getattr(layer, "quantized", False):
                total += layer.qt.codes.size
            else:
                total += layer.weight.value.size
            if layer.bias is not None:
                total += layer.bias.value.size
        return total

    def with_layers(self, replacements, freeze=False):
        """Copy of the model with some layers swapped out.

        ``freeze=True`` deep-copies the remaining full-precision layers with
        trainable=False, so the result shares nothing trainable with the
        source model.
        """
        new_layers = OrderedDict()
        for name, layer in self.layers.items():
            if name in replacements:
                new_layers[name] = replacements[name]
            elif freeze and not getattr(layer, "quantized", False):
                weight = Param(layer.weight.value.copy(), trainable=False, name=layer.weight.name)
                bias = None
                if layer.bias is not None:
                    bias = Param(layer.bias.value.copy(), trainable=False, name=layer.bias.name)
                if isinstance(layer, Linear):
                    new_layers[name] = Linear(name, weight, bias)
                else:
                    new_layers[name] = Conv2d(
                        name, weight, bias, stride=layer.stride, padding=layer.padding
                    )
            else:
                new_layers[name] = layer
        model = Denoiser(self.config, dtype=self.dtype_name, layers=new_layers)
        model.refresh_base_scales()
        return model

    def refresh_base_scales(self):
        """Rebuild the fallback (untuned) scale sets from the quantized layers."""
        if any(getattr(l, "quantized", False) for l in self.layers.values()):
            from .qlayers import base_scales_for

            self.base_scales = {
                n: base_scales_for(n, l.qt, self.dtype)
                for n, l in self.layers.items()
                if getattr(l, "quantized", False)
            }
        else:
            self.base_scales = None

    # -- forward -----------------------------------------------------------

    def _apply(self, name, x, resolver):
        layer = self.layers[name]
        if getattr(layer, "quantized", False):
            if resolver is not None:
                scales = resolver(name)
            elif self.base_scales is not None:
                scales = self.base_scales[name]
            else:
                raise ConfigurationError(f"{name}: quantized layer needs a scale resolver")
            return layer.forward(x, scales)
        return layer.forward(x)

    def _res_block(self, prefix, h, emb, resolver):
        z = self._apply(f"{prefix}.conv1", nm.silu(h), resolver)
        e = self._apply(f"{prefix}.proj", nm.silu(emb), resolver)
        z = nm.add(z, nm.reshape(e, (e.shape[0], e.shape[1], 1, 1)))
        z = self._apply(f"{prefix}.conv2", nm.silu(z), resolver)
        if f"{prefix}.skip" in self.layers:
            h = self._apply(f"{prefix}.skip", h, resolver)
        return nm.add(z, h)

    def forward(self, x, t, resolver=None) -> Tensor:
        """Predict the noise component of x_t. ``t`` is one integer per item."""
        if not isinstance(x, Tensor):
            x = nm.constant(np.asarray(x, dtype=self.dtype))
        cfg = self.config
        if x.data.ndim != 4 or x.data.shape[1] != cfg.channels:
            raise DimensionError(f"forward: expected (B, {cfg.channels}, H, W), got {x.data.shape}")
        t = np.asarray(t).reshape(-1)
        if t.shape[0] != x.data.shape[0]:
            raise DimensionError(f"forward: {t.shape[0]} timesteps for {x.data.shape[0]} items")

        emb = nm.constant(timestep_embedding(t, cfg.temb_dim, self.dtype))
        emb = nm.silu(self._apply("time_mlp.fc1", emb, resolver))
        emb = self._apply("time_mlp.fc2", emb, resolver)

        levels = len(cfg.channel_mults)
        h = self._apply("in_conv", x, resolver)
        skips = []
        for li in range(levels - 1):
            for r in range(cfg.res_blocks):
                h = self._res_block(f"down{li}.res{r}", h, emb, resolver)
            skips.append(h)
            h = self._apply(f"down{li}.down", h, resolver)
        for r in range(cfg.res_blocks):
            h = self._res_block(f"mid.res{r}", h, emb, resolver)
        for li in reversed(range(levels - 1)):
            h = self._apply(f"up{li}.up", nm.upsample_nearest2x(h), resolver)
            h = nm.concat(h, skips[li], axis=1)
            for r in range(cfg.res_blocks):
                h = self._res_block(f"up{li}.res{r}", h, emb, resolver)
        return self._apply("out_conv", nm.silu(h), resolver)
