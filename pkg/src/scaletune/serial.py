"""Binary containers: model checkpoints and scale packs.

Both share one envelope:

    magic (4 bytes) | version (u16 LE) | header length (u32 LE)
    | header JSON (UTF-8, canonical) | payload

Headers carry structure and per-tensor payload segments as [offset, length]
pairs relative to the payload start; segments must tile the payload exactly.
All floats are little-endian. Saving the same object twice produces the same
bytes, and save -> load -> save is byte-identical.

A scale pack stores nothing but per-layer, per-expert scale vectors plus
run metadata, so swapping tasks over one shared checkpoint means loading a
few kilobytes.
"""

import json
import os

import numpy as np

from .denoiser import Conv2d, Denoiser, DenoiserConfig, Linear
from .diffusion import make_schedule
from .errors import ConfigurationError, CorruptionError, DimensionError, MigrationError
from .experts import ExpertBank
from .numerics import Param
from .qlayers import QuantConv2d, QuantLinear, ScaleSet
from .quantizer import QuantParams, QuantizedTensor, pack_codes, unpack_codes

CHECKPOINT_MAGIC = b"TQDM"
SCALEPACK_MAGIC = b"TQSP"
FORMAT_VERSION = 1

# File-read tallies, bumped once per successful load. Lets callers check that
# swapping scale packs over a live model never re-reads the checkpoint.
READ_COUNTS = {"checkpoint": 0, "scalepack": 0}

_ENVELOPE_BYTES = 4 + 2 + 4
_FLOAT_CODES = {"real32": "<f4", "real64": "<f8"}


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _envelope(magic, header, payload):
    header_bytes = _canonical_json(header)
    return b"".join([
        magic,
        FORMAT_VERSION.to_bytes(2, "little"),
        len(header_bytes).to_bytes(4, "little"),
        header_bytes,
        payload,
    ])


def _open_envelope(data, magic, what):
    if len(data) < _ENVELOPE_BYTES:
        raise CorruptionError(f"{what}: truncated envelope, {len(data)} bytes at byte 0")
    if data[:4] != magic:
        raise CorruptionError(f"{what}: bad magic {data[:4]!r} at byte 0")
    version = int.from_bytes(data[4:6], "little")
    if version != FORMAT_VERSION:
        raise MigrationError(
            f"{what}: format version {version} at byte 4; this build reads version "
            f"{FORMAT_VERSION} and does not migrate other versions"
        )
    header_len = int.from_bytes(data[6:10], "little")
    if _ENVELOPE_BYTES + header_len > len(data):
        raise CorruptionError(
            f"{what}: header of {header_len} bytes exceeds file at byte {_ENVELOPE_BYTES}"
        )
    try:
        header = json.loads(data[_ENVELOPE_BYTES : _ENVELOPE_BYTES + header_len])
    except ValueError as err:  # bad JSON or bad UTF-8
        raise CorruptionError(f"{what}: unreadable header at byte {_ENVELOPE_BYTES}: {err}") from err
    payload = data[_ENVELOPE_BYTES + header_len :]
    return header, payload, _ENVELOPE_BYTES + header_len


class _SegmentWriter:
    def __init__(self):
        self.chunks = []
        self.offset = 0

    def put(self, raw):
        seg = [self.offset, len(raw)]
        self.chunks.append(raw)
        self.offset += len(raw)
        return seg

    def payload(self):
        return b"".join(self.chunks)


class _SegmentReader:
    """Bounds-checked reads that must jointly tile the payload."""

    def __init__(self, payload, base_offset, what):
        self.payload = payload
        self.base = base_offset
        self.what = what
        self.seen = []

    def get(self, seg, label):
        offset, length = int(seg[0]), int(seg[1])
        if offset < 0 or length < 0 or offset + length > len(self.payload):
            raise CorruptionError(
                f"{self.what}: segment {label} [{offset}, {offset + length}) escapes payload "
                f"of {len(self.payload)} bytes at byte {self.base + max(offset, 0)}"
            )
        self.seen.append((offset, length, label))
        return self.payload[offset : offset + length]

    def check_tiled(self):
        cursor = 0
        for offset, length, label in sorted(self.seen):
            if offset != cursor:
                raise CorruptionError(
                    f"{self.what}: segment {label} at offset {offset} leaves a gap or overlap "
                    f"at byte {self.base + cursor}"
                )
            cursor += length
        if cursor != len(self.payload):
            raise CorruptionError(
                f"{self.what}: {len(self.payload) - cursor} trailing payload bytes at byte "
                f"{self.base + cursor}"
            )


def _atomic_write(path, data):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _vector_bytes(arr, code):
    return np.ascontiguousarray(arr, dtype=code).tobytes()


def _vector_from(raw, code, count, what, label):
    item = np.dtype(code).itemsize
    if len(raw) != count * item:
        raise CorruptionError(
            f"{what}: segment {label} holds {len(raw)} bytes, expected {count * item}"
        )
    return np.frombuffer(raw, dtype=code).copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(model, schedule):
    """Serialize a model (full precision or quantized) plus its schedule."""
    dtype_name = model.dtype_name
    fcode = _FLOAT_CODES[dtype_name]
    writer = _SegmentWriter()
    layer_entries = []
    for name, layer in model.named_layers():
        entry = {"name": name, "kind": layer.kind}
        if layer.kind == "conv2d":
            entry["stride"] = getattr(layer, "stride", 1)
            entry["padding"] = getattr(layer, "padding", 0)
        if getattr(layer, "quantized", False):
            qt = layer.qt
            entry["quantized"] = True
            entry["shape"] = list(qt.codes.shape)
            entry["bits"] = qt.params.bits
            entry["symmetric"] = qt.params.symmetric
            segments = {
                "codes": writer.put(pack_codes(qt)),
                "zero_point": writer.put(qt.params.zero_point.tobytes()),
                "scale": writer.put(_vector_bytes(qt.params.scale, fcode)),
            }
        else:
            entry["quantized"] = False
            entry["shape"] = list(layer.weight.value.shape)
            segments = {"weight": writer.put(_vector_bytes(layer.weight.value, fcode))}
        if layer.bias is not None:
            segments["bias"] = writer.put(_vector_bytes(layer.bias.value, fcode))
        entry["segments"] = segments
        layer_entries.append(entry)

    header = {
        "container": "checkpoint",
        "dtype": dtype_name,
        "arch": {
            "image_size": model.config.image_size,
            "channels": model.config.channels,
            "base_width": model.config.base_width,
            "channel_mults": list(model.config.channel_mults),
            "res_blocks": model.config.res_blocks,
            "temb_dim": model.config.temb_dim,
            "temb_hidden": model.config.temb_hidden,
        },
        "schedule": {
            "total_steps": schedule.total_steps,
            "beta_start": schedule.beta_start,
            "beta_end": schedule.beta_end,
        },
        "layers": layer_entries,
    }
    return _envelope(CHECKPOINT_MAGIC, header, writer.payload())


def save_checkpoint(model, schedule, path):
    _atomic_write(path, checkpoint_bytes(model, schedule))


def load_checkpoint_bytes(data, what="checkpoint"):
    header, payload, base = _open_envelope(data, CHECKPOINT_MAGIC, what)
    try:
        dtype_name = header["dtype"]
        if dtype_name not in _FLOAT_CODES:
            raise CorruptionError(f"{what}: unknown dtype {dtype_name!r}")
        fcode = _FLOAT_CODES[dtype_name]
        np_dtype = np.float32 if dtype_name == "real32" else np.float64
        config = DenoiserConfig(**header["arch"])
        sched = header["schedule"]
        schedule = make_schedule(sched["total_steps"], sched["beta_start"], sched["beta_end"])
        reader = _SegmentReader(payload, base, what)

        layers = {}
        any_quant = any(e["quantized"] for e in header["layers"])
        for entry in header["layers"]:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            segs = entry["segments"]
            bias = None
            if "bias" in segs:
                bias_vec = _vector_from(
                    reader.get(segs["bias"], f"{name}.bias"), fcode, shape[0], what,
                    f"{name}.bias",
                ).astype(np_dtype)
                bias = Param(bias_vec, trainable=not any_quant, name=f"{name}.bias")
            if entry["quantized"]:
                n = int(np.prod(shape))
                codes = unpack_codes(
                    reader.get(segs["codes"], f"{name}.codes"), entry["bits"], n, shape
                )
                zero = _vector_from(
                    reader.get(segs["zero_point"], f"{name}.zero_point"), "u1", shape[0],
                    what, f"{name}.zero_point",
                )
                scale = _vector_from(
                    reader.get(segs["scale"], f"{name}.scale"), fcode, shape[0], what,
                    f"{name}.scale",
                ).astype(np_dtype)
                if bias is not None:
                    bias.trainable = False
                qt = QuantizedTensor(
                    codes=codes,
                    params=QuantParams(
                        scale=scale, zero_point=zero, bits=int(entry["bits"]),
                        symmetric=bool(entry.get("symmetric", False)),
                    ),
                )
                if entry["kind"] == "linear":
                    layers[name] = QuantLinear(name, qt, bias)
                else:
                    layers[name] = QuantConv2d(
                        name, qt, bias, stride=int(entry["stride"]),
                        padding=int(entry["padding"]),
                    )
            else:
                weight_vec = _vector_from(
                    reader.get(segs["weight"], f"{name}.weight"), fcode, int(np.prod(shape)),
                    what, f"{name}.weight",
                )
                weight = Param(
                    weight_vec.astype(np_dtype).reshape(shape),
                    trainable=not any_quant,
                    name=f"{name}.weight",
                )
                if entry["kind"] == "linear":
                    layers[name] = Linear(name, weight, bias)
                else:
                    layers[name] = Conv2d(
                        name, weight, bias, stride=int(entry["stride"]),
                        padding=int(entry["padding"]),
                    )
        reader.check_tiled()
    except (KeyError, TypeError, ValueError) as err:
        raise CorruptionError(f"{what}: malformed header ({err})") from err

    model = Denoiser(config, dtype=dtype_name, layers=layers)
    model.refresh_base_scales()
    return model, schedule


def load_checkpoint(path):
    """Read a checkpoint file back into a model and its schedule."""
    with open(path, "rb") as fh:
        data = fh.read()
    out = load_checkpoint_bytes(data, what=f"checkpoint {os.fspath(path)!r}")
    READ_COUNTS["checkpoint"] += 1
    return out


# ---------------------------------------------------------------------------
# scale packs
# ---------------------------------------------------------------------------


def scalepack_bytes(bank, task_id, iterations=0, seed=0, init_mean=1.0, init_std=0.01, bits=0):
    """Serialize a bank's scale vectors plus run metadata."""
    writer = _SegmentWriter()
    layer_entries = []
    for name, group in bank.sets.items():
        experts = []
        for scale_set in group:
            experts.append({
                "s_out": writer.put(_vector_bytes(scale_set.s_out.value, "<f4")),
                "s_in": writer.put(_vector_bytes(scale_set.s_in.value, "<f4")),
            })
        layer_entries.append({
            "name": name,
            "c_out": int(group[0].s_out.value.shape[0]),
            "c_in": int(group[0].s_in.value.shape[0]),
            "experts": experts,
        })
    header = {
        "container": "scalepack",
        "task_id": task_id,
        "method": bank.method,
        "bits": bits,
        "n_experts": bank.n_experts,
        "total_steps": bank.total_steps,
        "iterations": iterations,
        "seed": seed,
        "init_mean": init_mean,
        "init_std": init_std,
        "layers": layer_entries,
    }
    return _envelope(SCALEPACK_MAGIC, header, writer.payload())


def save_scalepack(bank, task_id, path, **meta):
    _atomic_write(path, scalepack_bytes(bank, task_id, **meta))


def load_scalepack(path, model):
    """Rebuild an ExpertBank for ``model`` from a pack file.

    Touches only the pack file; integer codes stay wherever the model came
    from. The pack's layer table must match the model's quantized layers
    exactly (same names, same widths).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    what = f"scale pack {os.fspath(path)!r}"
    header, payload, base = _open_envelope(data, SCALEPACK_MAGIC, what)
    try:
        method = header["method"]
        n_experts = int(header["n_experts"])
        entries = header["layers"]
        model_layers = {
            name: layer for name, layer in model.named_layers()
            if getattr(layer, "quantized", False)
        }
        pack_names = [e["name"] for e in entries]
        if list(model_layers) != pack_names:
            missing = next(
                (n for n in pack_names if n not in model_layers),
                next((n for n in model_layers if n not in pack_names), "<order>"),
            )
            raise ConfigurationError(
                f"{what}: layer table does not match model (first difference: {missing!r})"
            )
        reader = _SegmentReader(payload, base, what)
        sets = {}
        for entry in entries:
            name = entry["name"]
            layer = model_layers[name]
            if int(entry["c_out"]) != layer.c_out or int(entry["c_in"]) != layer.c_in:
                raise ConfigurationError(
                    f"{what}: layer {name!r} is {entry['c_out']}x{entry['c_in']} in the pack "
                    f"but {layer.c_out}x{layer.c_in} in the model"
                )
            group = []
            for e, seg in enumerate(entry["experts"]):
                s_out = _vector_from(
                    reader.get(seg["s_out"], f"{name}.e{e}.s_out"), "<f4", layer.c_out, what,
                    f"{name}.e{e}.s_out",
                ).astype(layer.dtype)
                s_in = _vector_from(
                    reader.get(seg["s_in"], f"{name}.e{e}.s_in"), "<f4", layer.c_in, what,
                    f"{name}.e{e}.s_in",
                ).astype(layer.dtype)
                group.append(ScaleSet(
                    s_out=Param(s_out, trainable=True, name=f"{name}.expert{e}.s_out"),
                    s_in=Param(
                        s_in, trainable=method == "mcsu", name=f"{name}.expert{e}.s_in"
                    ),
                    mode=method,
                ))
            sets[name] = group
        reader.check_tiled()
        bank = ExpertBank(
            n_experts=n_experts, total_steps=int(header["total_steps"]), sets=sets,
            method=method,
        )
    except (KeyError, TypeError) as err:
        raise CorruptionError(f"{what}: malformed header ({err})") from err
    meta = {k: header[k] for k in
            ("task_id", "method", "bits", "n_experts", "total_steps", "iterations", "seed",
             "init_mean", "init_std")}
    READ_COUNTS["scalepack"] += 1
    return bank, meta
