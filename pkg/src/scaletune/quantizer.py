"""Per-output-channel uniform weight quantization and nibble packing.

A weight tensor of shape (C_out, ...) is mapped channel by channel to
unsigned integer codes:

    code = clamp(round(w / s) + z, 0, 2^b - 1)        round: half away from zero
    w_hat = s * (code - z)

``s`` and ``z`` come from min/max calibration over each output channel. Codes
are frozen after quantization; everything downstream trains scales only.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, CorruptionError, DimensionError

SCALE_FLOOR = 1e-8

# Widths with a packing rule. Calibration is restricted to these; QuantParams
# itself accepts any width up to 8 bits so that hand-built fixtures can use
# tiny code books.
PACKABLE_BITS = (4, 8)


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    """Per-channel affine quantization parameters.

    scale:      (C,) positive reals
    zero_point: (C,) unsigned integers in [0, 2^bits - 1]
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    symmetric: bool = False

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ConfigurationError(f"bits must lie in [1, 8], got {self.bits}")
        scale = np.asarray(self.scale)
        zero = np.asarray(self.zero_point, dtype=np.uint8)
        if scale.ndim != 1 or zero.ndim != 1 or scale.shape != zero.shape:
            raise DimensionError(
                f"scale {scale.shape} and zero_point {zero.shape} must be equal-length vectors"
            )
        if not (scale > 0).all():
            raise ConfigurationError("scales must be strictly positive")
        if (zero > self.code_max).any():
            raise ConfigurationError(f"zero points exceed {self.code_max} for {self.bits} bits")
        scale = scale.copy()
        zero = zero.copy()
        scale.setflags(write=False)
        zero.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zero)

    @property
    def code_max(self):
        return (1 << self.bits) - 1

    @property
    def channels(self):
        return self.scale.shape[0]


@dataclass(frozen=True)
class QuantizedTensor:
    """Frozen integer codes plus the parameters that decode them."""

    codes: np.ndarray  # uint8, original weight shape
    params: QuantParams

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        if codes.shape[0] != self.params.channels:
            raise DimensionError(
                f"codes lead axis {codes.shape[0]} != {self.params.channels} channels"
            )
        if (codes > self.params.code_max).any():
            raise CorruptionError(
                f"codes exceed {self.params.code_max} for {self.params.bits} bits"
            )
        codes = codes.copy()
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def shape(self):
        return self.codes.shape

    @property
    def bits(self):
        return self.params.bits


def _per_channel(vec, ndim):
    """Reshape a (C,) vector so it broadcasts over trailing axes."""
    return vec.reshape(vec.shape[0:1] + (1,) * (ndim - 1))


def calibrate_minmax(weight, bits, symmetric=False):
    """Min/max calibration over each output channel (axis 0).

    The per-channel range is widened to include zero before fitting, the
    usual asymmetric convention: the zero point then lands inside the code
    range without clamping and every in-range value round-trips within s/2.
    Degenerate channels (all zero) get scale = SCALE_FLOOR and zero point 0.
    """
    if bits not in PACKABLE_BITS:
        raise ConfigurationError(f"calibration supports bits in {PACKABLE_BITS}, got {bits}")
    weight = np.asarray(weight)
    if weight.ndim < 2:
        raise DimensionError(f"need at least 2 axes (C_out leading), got shape {weight.shape}")
    flat = weight.reshape(weight.shape[0], -1).astype(np.float64)
    lo = np.minimum(flat.min(axis=1), 0.0)
    hi = np.maximum(flat.max(axis=1), 0.0)
    code_max = (1 << bits) - 1

    scale = np.maximum((hi - lo) / code_max, SCALE_FLOOR)
    zero = np.clip(round_half_away(-lo / scale), 0, code_max)
    degenerate = hi == lo
    scale = np.where(degenerate, SCALE_FLOOR, scale)
    zero = np.where(degenerate, 0.0, zero)
    return QuantParams(
        scale=scale.astype(weight.dtype if weight.dtype in (np.float32, np.float64) else np.float32),
        zero_point=zero.astype(np.uint8),
        bits=bits,
        symmetric=symmetric,
    )


def quantize(weight, params):
    """Map real weights to integer codes under ``params``."""
    weight = np.asarray(weight)
    if weight.shape[0] != params.channels:
        raise DimensionError(
            f"weight lead axis {weight.shape[0]} != {params.channels} calibrated channels"
        )
    s = _per_channel(params.scale.astype(np.float64), weight.ndim)
    z = _per_channel(params.zero_point.astype(np.float64), weight.ndim)
    codes = np.clip(round_half_away(weight / s) + z, 0, params.code_max)
    return QuantizedTensor(codes=codes.astype(np.uint8), params=params)


def dequantize(qt):
    """Reconstruct real weights: s * (code - z), in the scale's dtype."""
    dtype = qt.params.scale.dtype
    s = _per_channel(qt.params.scale, qt.codes.ndim)
    z = _per_channel(qt.params.zero_point.astype(dtype), qt.codes.ndim)
    return (qt.codes.astype(dtype) - z) * s


def packed_nbytes(n_elements, bits):
    """Bytes needed to pack ``n_elements`` codes at ``bits`` per code."""
    return (n_elements * bits + 7) // 8


def pack_codes(qt):
    """Serialize codes to bytes; at 4 bits, two codes per byte, even flat
    index in the low nibble."""
    bits = qt.params.bits
    if bits not in PACKABLE_BITS:
        raise ConfigurationError(f"packing supports bits in {PACKABLE_BITS}, got {bits}")
    flat = qt.codes.reshape(-1)
    if bits == 8:
        return flat.tobytes()
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    low = flat[0::2]
    high = flat[1::2]
    return (low | (high << 4)).astype(np.uint8).tobytes()


def unpack_codes(data, bits, n_elements, shape):
    """Invert :func:`pack_codes`. ``data`` length must match exactly."""
    if bits not in PACKABLE_BITS:
        raise ConfigurationError(f"packing supports bits in {PACKABLE_BITS}, got {bits}")
    if int(np.prod(shape)) != n_elements:
        raise DimensionError(f"shape {shape} does not hold {n_elements} elements")
    expected = packed_nbytes(n_elements, bits)
    if len(data) != expected:
        raise CorruptionError(
            f"packed payload is {len(data)} bytes, expected {expected} at byte 0 of segment"
        )
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        codes = raw
    else:
        codes = np.empty(raw.size * 2, dtype=np.uint8)
        codes[0::2] = raw & 0x0F
        codes[1::2] = raw >> 4
        tail = codes[n_elements:]
        if tail.any():
            raise CorruptionError(
                f"nonzero padding nibble at byte {expected - 1} of packed segment"
            )
        codes = codes[:n_elements]
    return codes.reshape(shape).copy()


def quantize_model(model, bits, policy="interior"):
    """Return a copy of ``model`` with designated layers quantized.

    policy: "interior" quantizes every linear/conv layer except the model's
    boundary layers (first and last); "all" takes the boundary layers too;
    "none" returns a frozen full-precision copy.
    """
    from . import qlayers
    from .denoiser import Conv2d, Linear

    if policy not in ("interior", "all", "none"):
        raise ConfigurationError(f"unknown quantization policy {policy!r}")
    if bits not in PACKABLE_BITS:
        raise ConfigurationError(f"quantization supports bits in {PACKABLE_BITS}, got {bits}")

    replacements = {}
    for name, layer in model.named_layers():
        take = policy == "all" or (policy == "interior" and name not in model.boundary_names)
        if policy == "none":
            take = False
        if not take or not isinstance(layer, (Linear, Conv2d)):
            continue
        params = calibrate_minmax(layer.weight.value, bits)
        qt = quantize(layer.weight.value, params)
        bias = None
        if layer.bias is not None:
            bias = type(layer.bias)(layer.bias.value.copy(), trainable=False, name=layer.bias.name)
        if isinstance(layer, Linear):
            replacements[name] = qlayers.QuantLinear(name, qt, bias)
        else:
            replacements[name] = qlayers.QuantConv2d(
                name, qt, bias, stride=layer.stride, padding=layer.padding
            )
    return model.with_layers(replacements, freeze=True)
