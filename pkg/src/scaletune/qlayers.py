"""Layers whose weights are frozen integer codes and whose trainable
parameters are quantization scales.

The effective weight of a layer is

    W_eff[o, i] = s_out[o] * (code[o, i] - z[o]) * s_in[i]

with ``s_in`` broadcast across the spatial taps of conv kernels. The baseline
method pins s_in at one and trains s_out alone; the multi-channel method
trains both, which costs (C_out + C_in) parameters per layer instead of a
full weight's worth.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError, ContractError, DimensionError
from .numerics import Param, Tensor
from .quantizer import QuantizedTensor

METHODS = ("baseline", "mcsu")


@dataclass
class ScaleSet:
    """One layer's trainable scales: per-output and per-input vectors."""

    s_out: Param
    s_in: Param
    mode: str = "mcsu"

    def __post_init__(self):
        if self.mode not in METHODS:
            raise ConfigurationError(f"unknown scale mode {self.mode!r}")
        if self.s_out.value.ndim != 1 or self.s_in.value.ndim != 1:
            raise DimensionError("scale vectors must be 1-d")
        if self.mode == "baseline":
            if self.s_in.trainable:
                raise ConfigurationError("baseline mode freezes s_in")
            if not np.all(self.s_in.value == 1.0):
                raise ConfigurationError("baseline mode requires s_in identically one")

    def params(self):
        return [self.s_out, self.s_in]

    def trainable_params(self):
        return [p for p in (self.s_out, self.s_in) if p.trainable]

    def copy(self):
        return ScaleSet(
            s_out=Param(self.s_out.value.copy(), self.s_out.trainable, self.s_out.name),
            s_in=Param(self.s_in.value.copy(), self.s_in.trainable, self.s_in.name),
            mode=self.mode,
        )


def base_scales_for(name, qt, dtype, mode="baseline", trainable=False):
    """ScaleSet reproducing plain dequantization: s_out = calibrated scale,
    s_in = ones."""
    c_in = qt.shape[1]
    return ScaleSet(
        s_out=Param(qt.params.scale.astype(dtype), trainable=trainable, name=f"{name}.s_out"),
        s_in=Param(
            np.ones(c_in, dtype=dtype),
            trainable=False if mode == "baseline" else trainable,
            name=f"{name}.s_in",
        ),
        mode=mode,
    )


class _QuantLayerBase:
    quantized = True

    def __init__(self, name, qt: QuantizedTensor, bias):
        self.name = name
        self.qt = qt
        self.bias = bias
        dtype = qt.params.scale.dtype
        z = qt.params.zero_point.astype(dtype)
        offset = qt.codes.astype(dtype) - z.reshape((-1,) + (1,) * (qt.codes.ndim - 1))
        offset.setflags(write=False)
        # codes - zero_point, cached once; all forward passes reuse it.
        self.offset = offset
        self._recorded = None

    @property
    def c_out(self):
        return self.qt.shape[0]

    @property
    def c_in(self):
        return self.qt.shape[1]

    @property
    def dtype(self):
        return self.qt.params.scale.dtype

    def _check_scales(self, scales: ScaleSet):
        if scales.s_out.value.shape != (self.c_out,):
            raise DimensionError(
                f"{self.name}: s_out has {scales.s_out.value.shape[0]} entries, "
                f"layer has {self.c_out} output channels"
            )
        if scales.s_in.value.shape != (self.c_in,):
            raise DimensionError(
                f"{self.name}: s_in has {scales.s_in.value.shape[0]} entries, "
                f"layer has {self.c_in} input channels"
            )

    def effective_weight(self, scales: ScaleSet) -> Tensor:
        """Recorded graph for s_out * (codes - z) * s_in."""
        self._check_scales(scales)
        ndim = self.qt.codes.ndim
        out_shape = (self.c_out,) + (1,) * (ndim - 1)
        in_shape = (1, self.c_in) + (1,) * (ndim - 2)
        w = nm.mul(nm.reshape(scales.s_out.tensor(), out_shape), nm.constant(self.offset))
        return nm.mul(w, nm.reshape(scales.s_in.tensor(), in_shape))


class QuantLinear(_QuantLayerBase):
    kind = "linear"

    def __init__(self, name, qt, bias=None):
        if qt.codes.ndim != 2:
            raise DimensionError(f"{name}: linear codes must be 2-d, got {qt.codes.shape}")
        super().__init__(name, qt, bias)

    def forward(self, x: Tensor, scales: ScaleSet) -> Tensor:
        w = self.effective_weight(scales)
        self._recorded = (x.data, scales)
        return nm.linear(x, w, self.bias.tensor() if self.bias is not None else None)


class QuantConv2d(_QuantLayerBase):
    kind = "conv2d"

    def __init__(self, name, qt, bias=None, stride=1, padding=0):
        if qt.codes.ndim != 4:
            raise DimensionError(f"{name}: conv codes must be 4-d, got {qt.codes.shape}")
        super().__init__(name, qt, bias)
        self.stride = stride
        self.padding = padding

    @property
    def kernel_size(self):
        return self.qt.shape[2]

    def forward(self, x: Tensor, scales: ScaleSet) -> Tensor:
        w = self.effective_weight(scales)
        self._recorded = (x.data, scales)
        return nm.conv2d(
            x,
            w,
            self.bias.tensor() if self.bias is not None else None,
            stride=self.stride,
            padding=self.padding,
        )


def effective_weight(layer, scales):
    """Module-level alias for ``layer.effective_weight(scales)``."""
    return layer.effective_weight(scales)


def scale_gradients(layer, upstream_grad, x, scales):
    """Closed-form gradients of the loss w.r.t. s_out and s_in.

    ``upstream_grad`` is dL/d(layer output) for the forward pass recorded
    with input ``x``. With G = dL/dW_eff:

        d s_out[o] = sum_i G[o, i] * (code[o, i] - z[o]) * s_in[i]
        d s_in[i]  = sum_o G[o, i] * (code[o, i] - z[o]) * s_out[o]

    conv kernels sum over their spatial taps as well. Baseline mode returns a
    zero s_in gradient.
    """
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x)
    upstream = upstream_grad.data if isinstance(upstream_grad, Tensor) else np.asarray(upstream_grad)
    if layer._recorded is None:
        raise ContractError(f"{layer.name}: no forward pass recorded")
    rec_x, rec_scales = layer._recorded
    if rec_x is not x_data and not (rec_x.shape == x_data.shape and np.array_equal(rec_x, x_data)):
        raise ContractError(f"{layer.name}: no forward pass recorded with this input")
    if rec_scales is not scales:
        raise ContractError(f"{layer.name}: no forward pass recorded with these scales")

    if layer.kind == "linear":
        G = upstream.T @ x_data
        GK = G * layer.offset
        grad_out = GK @ scales.s_in.value
        grad_in = GK.T @ scales.s_out.value
    else:
        G = nm.conv2d_weight_grad(
            x_data, upstream, layer.kernel_size, stride=layer.stride, padding=layer.padding
        )
        GK = G * layer.offset
        grad_out = np.einsum("oikl,i->o", GK, scales.s_in.value)
        grad_in = np.einsum("oikl,o->i", GK, scales.s_out.value)
    if scales.mode == "baseline":
        grad_in = np.zeros_like(grad_in)
    return grad_out.astype(layer.dtype), grad_in.astype(layer.dtype)


def trainable_param_count(obj, method, n_experts=1):
    """Number of trainable scale entries for a layer or a whole model.

    baseline: C_out per expert set; mcsu: C_out + C_in per expert set.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    if n_experts < 1:
        raise ConfigurationError(f"n_experts must be >= 1, got {n_experts}")
    if isinstance(obj, _QuantLayerBase):
        per_set = obj.c_out if method == "baseline" else obj.c_out + obj.c_in
        return per_set * n_experts
    total = 0
    for _, layer in obj.named_layers():
        if getattr(layer, "quantized", False):
            total += trainable_param_count(layer, method, n_experts)
    return total
