"""Command-line pipeline: toy data, pretraining, quantization, scale
fine-tuning, sampling, evaluation, analysis, benchmarks.

Every subcommand takes ``--config FILE`` (TOML or JSON) plus flag overrides;
flags beat per-command config tables, which beat top-level config keys, which
beat built-in defaults. Artifacts land under ``--out``.

Exit codes: 0 success, 1 usage error, 2 data or file-corruption error.
"""

import argparse
import dataclasses
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .analysis import (
    bench_dequant_matmul,
    change_ratio_map,
    channel_stats,
    rank1_check,
    storage_report,
    tile_grid,
    write_csv,
    write_pgm,
)
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DATASET_FAMILIES, ToyDatasetSpec, gen_dataset, make_schedule, sample
from .errors import (
    ConfigurationError,
    CorruptionError,
    DimensionError,
    DomainError,
    MigrationError,
)
from .experts import init_bank
from .quantizer import PACKABLE_BITS, quantize_model
from .serial import load_checkpoint, load_scalepack, save_checkpoint, save_scalepack
from .training import TrainConfig, evaluate, finetune, pretrain

METHOD_NAMES = ("baseline", "tuneqdm")
_METHOD_TO_MODE = {"baseline": "baseline", "tuneqdm": "mcsu"}
_MODE_TO_METHOD = {"baseline": "baseline", "mcsu": "tuneqdm"}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this surface reserves 2 for bad
    data, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


_COMMON = {"seed": 0, "out": None, "config": None}

DEFAULTS = {
    "gen-data": {**_COMMON, "family": None, "n": 512, "noise": 0.05, "image_size": 16},
    "pretrain": {
        **_COMMON, "data": None, "steps": 2000, "batch_size": 16, "lr": 1e-3,
        "total_steps": 100, "beta_start": 1e-4, "beta_end": 0.02,
        "image_size": 16, "base_width": 24, "channel_mults": "1,2", "res_blocks": 1,
        "temb_dim": 24, "temb_hidden": 48,
    },
    "quantize": {**_COMMON, "model": None, "bits": 4, "policy": "interior"},
    "finetune": {
        **_COMMON, "model": None, "data": None, "prior_data": None, "task_id": None,
        "method": "tuneqdm", "experts": 2, "steps": 800, "batch_size": 16, "lr": 1e-3,
        "lambda_prior": 0.0, "scale_init_mean": 1.0, "scale_init_std": 0.01,
    },
    "sample": {**_COMMON, "model": None, "pack": None, "n": 16, "steps": 50, "eta": 0.0,
               "columns": 8},
    "eval": {**_COMMON, "model": None, "pack": None, "data": None, "n_generated": 256,
             "gen_steps": 100, "eta": 0.0},
    "analyze": {**_COMMON, "model": None, "pack": None},
    "bench": {**_COMMON, "sizes": "256,512,1024", "bits": 4, "reps": 5},
}


def _build_parser():
    parser = _Parser(prog="scaletune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML or JSON run configuration")
        p.add_argument("--out", help="output directory for artifacts")
        p.add_argument("--seed", type=int)
        return p

    p = cmd("gen-data", "write a toy image family as .npy plus a preview grid")
    p.add_argument("--family", choices=sorted(DATASET_FAMILIES))
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--noise", type=float, help="additive pixel noise sigma")
    p.add_argument("--image-size", type=int)

    p = cmd("pretrain", "train a full-precision denoiser and save a checkpoint")
    p.add_argument("--data", help=".npy dataset from gen-data")
    p.add_argument("--steps", type=int, help="training iterations")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--total-steps", type=int, help="diffusion timesteps T")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--channel-mults", help="comma-separated, e.g. 1,2")
    p.add_argument("--res-blocks", type=int)
    p.add_argument("--temb-dim", type=int)
    p.add_argument("--temb-hidden", type=int)

    p = cmd("quantize", "quantize a checkpoint's interior layers to integer codes")
    p.add_argument("--model", help="full-precision checkpoint")
    p.add_argument("--bits", type=int)
    p.add_argument("--policy", choices=("interior", "all", "none"))

    p = cmd("finetune", "fine-tune quantization scales toward a target family")
    p.add_argument("--model", help="quantized checkpoint")
    p.add_argument("--data", help="target .npy dataset")
    p.add_argument("--prior-data", help="optional pretraining-family .npy for the prior term")
    p.add_argument("--task-id", help="name for the scale pack (default: data file stem)")
    p.add_argument("--method", choices=METHOD_NAMES)
    p.add_argument("--experts", type=int, help="timestep experts N")
    p.add_argument("--steps", type=int, help="fine-tuning iterations")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-prior", type=float)
    p.add_argument("--scale-init-mean", type=float)
    p.add_argument("--scale-init-std", type=float)

    p = cmd("sample", "draw images from a checkpoint (optionally with a scale pack)")
    p.add_argument("--model")
    p.add_argument("--pack")
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--steps", type=int, help="sampler steps")
    p.add_argument("--eta", type=float)
    p.add_argument("--columns", type=int, help="grid columns in the preview")

    p = cmd("eval", "noise-prediction loss plus sample-set distance on a dataset")
    p.add_argument("--model")
    p.add_argument("--pack")
    p.add_argument("--data", help="held-out .npy dataset")
    p.add_argument("--n-generated", type=int)
    p.add_argument("--gen-steps", type=int)
    p.add_argument("--eta", type=float)

    p = cmd("analyze", "scale-change statistics, separability check, storage accounting")
    p.add_argument("--model", help="quantized checkpoint")
    p.add_argument("--pack", help="fine-tuned scale pack")

    p = cmd("bench", "time dequantize+matmul against a materialized matmul")
    p.add_argument("--sizes", help="comma-separated sizes, each N or MxKxN")
    p.add_argument("--bits", type=int)
    p.add_argument("--reps", type=int)

    return parser


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _load_config(path, parser):
    try:
        if path.endswith(".json"):
            with open(path) as fh:
                cfg = json.load(fh)
        else:
            with open(path, "rb") as fh:
                cfg = tomllib.load(fh)
    except FileNotFoundError:
        parser.error(f"config file not found: {path}")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        parser.error(f"unreadable config {path}: {err}")
    if not isinstance(cfg, dict):
        parser.error(f"config {path} must be a table/object at top level")
    return cfg


def _merge_options(command, args, parser):
    """defaults < top-level config keys < per-command config table < flags."""
    defaults = DEFAULTS[command]
    merged = dict(defaults)
    if args.config:
        cfg = _load_config(args.config, parser)
        top = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        section = cfg.get(command, {})
        if not isinstance(section, dict):
            parser.error(f"config table {command!r} must be a table/object")
        for key, value in top.items():
            key = key.replace("-", "_")
            if key in defaults:
                merged[key] = value
        for key, value in section.items():
            key = key.replace("-", "_")
            if key not in defaults:
                parser.error(f"unknown config key {key!r} for {command}")
            merged[key] = value
    for key, value in vars(args).items():
        if key != "command" and value is not None:
            merged[key] = value
    return argparse.Namespace(**merged)


def _require(opts, parser, *names):
    for name in names:
        if getattr(opts, name) in (None, ""):
            parser.error(f"--{name.replace('_', '-')} is required")


def _check_bits(parser, bits):
    if bits not in PACKABLE_BITS:
        valid = ", ".join(str(b) for b in sorted(PACKABLE_BITS))
        parser.error(f"--bits must be one of {{{valid}}}, got {bits}")


def _out_dir(opts):
    os.makedirs(opts.out, exist_ok=True)
    return opts.out


def _load_dataset(path):
    try:
        data = np.load(path)
    except FileNotFoundError:
        raise CorruptionError(f"dataset file not found: {path}") from None
    except ValueError as err:
        raise CorruptionError(f"unreadable dataset {path}: {err}") from None
    data = np.asarray(data)
    if data.ndim != 4:
        raise CorruptionError(f"dataset {path} must be (n, 1, H, W), got {data.shape}")
    return data


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CorruptionError(f"checkpoint file not found: {path}") from None


def _load_pack(path, model):
    try:
        return load_scalepack(path, model)
    except FileNotFoundError:
        raise CorruptionError(f"scale pack file not found: {path}") from None


def _model_bits(model):
    for _, layer in model.named_layers():
        if getattr(layer, "quantized", False):
            return layer.qt.params.bits
    raise ConfigurationError("checkpoint has no quantized layers; run quantize first")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(opts, parser):
    _require(opts, parser, "family", "out")
    out = _out_dir(opts)
    spec = ToyDatasetSpec(family=opts.family, n_samples=opts.n, noise=opts.noise,
                          seed=opts.seed, image_size=opts.image_size)
    images = gen_dataset(spec)
    data_path = os.path.join(out, f"{opts.family}.npy")
    np.save(data_path, images)
    preview = os.path.join(out, f"{opts.family}_preview.pgm")
    write_pgm(preview, tile_grid(images[:16], columns=4))
    print(f"wrote {data_path} shape={images.shape} range=[{images.min():.2f}, "
          f"{images.max():.2f}]")
    print(f"wrote {preview}")
    return 0


def _parse_mults(text):
    try:
        mults = tuple(int(p) for p in str(text).split(","))
    except ValueError:
        raise ConfigurationError(f"channel mults must be comma-separated ints, got {text!r}")
    return mults


def _cmd_pretrain(opts, parser):
    _require(opts, parser, "data", "out")
    out = _out_dir(opts)
    dataset = _load_dataset(opts.data)
    config = DenoiserConfig(
        image_size=opts.image_size, base_width=opts.base_width,
        channel_mults=_parse_mults(opts.channel_mults), res_blocks=opts.res_blocks,
        temb_dim=opts.temb_dim, temb_hidden=opts.temb_hidden,
    )
    model = Denoiser(config, seed=opts.seed)
    schedule = make_schedule(opts.total_steps, opts.beta_start, opts.beta_end)
    train_cfg = TrainConfig(lr=opts.lr, batch_size=opts.batch_size, iterations=opts.steps,
                            seed=opts.seed)
    report = pretrain(model, dataset, schedule, train_cfg)
    model_path = os.path.join(out, "model.tqdm")
    save_checkpoint(model, schedule, model_path)
    csv_path = os.path.join(out, "pretrain_report.csv")
    write_csv(csv_path, [{"iteration": i, "loss": v} for i, v in enumerate(report.losses)])
    first = float(np.mean(report.losses[:20]))
    last = float(np.mean(report.losses[-20:]))
    print(f"pretrained {report.trainable_params} params for {opts.steps} iterations "
          f"in {report.wall_seconds:.1f}s; loss {first:.4f} -> {last:.4f}")
    print(f"wrote {model_path}")
    print(f"wrote {csv_path}")
    return 0


def _cmd_quantize(opts, parser):
    _require(opts, parser, "model", "out")
    _check_bits(parser, opts.bits)
    out = _out_dir(opts)
    model, schedule = _load_model(opts.model)
    qmodel = quantize_model(model, bits=opts.bits, policy=opts.policy)
    q_path = os.path.join(out, f"model_q{opts.bits}.tqdm")
    save_checkpoint(qmodel, schedule, q_path)
    if qmodel.quant_layer_names():
        report = storage_report(qmodel)
        print(f"quantized {len(qmodel.quant_layer_names())} layers to {opts.bits} bits; "
              f"codes+metadata {report.packed_weight_bytes + report.scale_zero_point_bytes} "
              f"bytes vs {report.full_precision_bytes} full precision "
              f"({report.compression_ratio:.2f}x)")
    print(f"wrote {q_path}")
    return 0


def _cmd_finetune(opts, parser):
    _require(opts, parser, "model", "data", "out")
    if opts.method not in METHOD_NAMES:
        parser.error(f"--method must be one of {{baseline, tuneqdm}}, got {opts.method!r}")
    if opts.experts < 1:
        parser.error(f"--experts must be >= 1, got {opts.experts}")
    out = _out_dir(opts)
    model, schedule = _load_model(opts.model)
    bits = _model_bits(model)
    target = _load_dataset(opts.data)
    prior = _load_dataset(opts.prior_data) if opts.prior_data else None
    task_id = opts.task_id or os.path.splitext(os.path.basename(opts.data))[0]

    mode = _METHOD_TO_MODE[opts.method]
    bank = init_bank(model, opts.experts, schedule.total_steps, seed=opts.seed,
                     init_mean=opts.scale_init_mean, init_std=opts.scale_init_std,
                     method=mode)
    train_cfg = TrainConfig(
        method=mode, bits=bits, n_experts=opts.experts, lr=opts.lr,
        batch_size=opts.batch_size, iterations=opts.steps,
        lambda_prior=opts.lambda_prior if prior is not None else 0.0,
        seed=opts.seed, scale_init_mean=opts.scale_init_mean,
        scale_init_std=opts.scale_init_std,
    )
    report = finetune(model, bank, target, prior, schedule, train_cfg)

    pack_path = os.path.join(out, f"{task_id}.tqsp")
    save_scalepack(bank, task_id, pack_path, iterations=opts.steps, seed=opts.seed,
                   init_mean=opts.scale_init_mean, init_std=opts.scale_init_std, bits=bits)
    csv_path = os.path.join(out, f"{task_id}_train_report.csv")
    write_csv(csv_path, [{"iteration": i, "loss": v} for i, v in enumerate(report.losses)])
    counts = ", ".join(f"e{e}:{c}" for e, c in sorted(report.expert_sample_counts.items()))
    print(f"fine-tuned {report.trainable_params} scales ({opts.method}, N={opts.experts}) "
          f"for {opts.steps} iterations in {report.wall_seconds:.1f}s")
    print(f"expert sample counts: {counts}")
    print(f"final eval loss on target: {report.final_eval_loss:.5f}")
    print(f"wrote {pack_path} ({os.path.getsize(pack_path)} bytes)")
    print(f"wrote {csv_path}")
    return 0


def _cmd_sample(opts, parser):
    _require(opts, parser, "model", "out")
    if opts.eta < 0:
        parser.error(f"--eta must be >= 0, got {opts.eta}")
    out = _out_dir(opts)
    model, schedule = _load_model(opts.model)
    scales = None
    if opts.pack:
        scales, _ = _load_pack(opts.pack, model)
    images = sample(model, scales, schedule, opts.n, n_steps=opts.steps, eta=opts.eta,
                    seed=opts.seed)
    raw_path = os.path.join(out, "samples.npy")
    np.save(raw_path, images)
    grid_path = os.path.join(out, "samples.pgm")
    write_pgm(grid_path, tile_grid(images, columns=opts.columns))
    print(f"sampled {opts.n} images ({opts.steps} steps, eta={opts.eta})")
    print(f"wrote {raw_path}")
    print(f"wrote {grid_path}")
    return 0


def _cmd_eval(opts, parser):
    _require(opts, parser, "model", "data", "out")
    out = _out_dir(opts)
    model, schedule = _load_model(opts.model)
    scales = None
    pack_meta = None
    if opts.pack:
        scales, pack_meta = _load_pack(opts.pack, model)
    images = _load_dataset(opts.data)
    result = evaluate(model, scales, images, schedule, opts.seed,
                      n_generated=opts.n_generated, gen_steps=opts.gen_steps, eta=opts.eta)
    metrics = {
        "eval_loss": result.eval_loss,
        "frechet_pixel_distance": result.frechet,
        "n_generated": result.n_generated,
        "model": opts.model,
        "pack": opts.pack,
        "data": opts.data,
        "method": _MODE_TO_METHOD.get(pack_meta["method"]) if pack_meta else None,
    }
    path = os.path.join(out, "metrics.json")
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"eval loss {result.eval_loss:.5f}, sample-set distance {result.frechet:.3f}")
    print(f"wrote {path}")
    return 0


def _cmd_analyze(opts, parser):
    _require(opts, parser, "model", "pack", "out")
    out = _out_dir(opts)
    model, schedule = _load_model(opts.model)
    bank, meta = _load_pack(opts.pack, model)
    init = init_bank(model, meta["n_experts"], meta["total_steps"], seed=meta["seed"],
                     init_mean=meta["init_mean"], init_std=meta["init_std"],
                     method=meta["method"])

    out_rows, in_rows, rank_rows = [], [], []
    for name in bank.layer_names():
        layer = model.layers[name]
        codes = layer.qt.codes
        zp = layer.qt.params.zero_point
        for e in range(bank.n_experts):
            w_init = layer.effective_weight(init.sets[name][e]).data
            w_tuned = layer.effective_weight(bank.sets[name][e]).data
            ratio, mask = change_ratio_map(w_init, w_tuned, codes, zp)
            for row in channel_stats(ratio, mask, axis="out"):
                out_rows.append({"layer": name, "expert": e, **row})
            for row in channel_stats(ratio, mask, axis="in"):
                in_rows.append({"layer": name, "expert": e, **row})
            rank_rows.append({
                "layer": name, "expert": e,
                "max_log_residual": rank1_check(w_init, w_tuned, codes, zp),
            })

    write_csv(os.path.join(out, "scale_change_out.csv"), out_rows)
    write_csv(os.path.join(out, "scale_change_in.csv"), in_rows)
    write_csv(os.path.join(out, "rank1.csv"), rank_rows)
    report = storage_report(model, bank=bank)
    pack_size = os.path.getsize(opts.pack)  # the file as written, real metadata included
    storage = {**dataclasses.asdict(report), "scale_pack_bytes": pack_size,
               "pack_meta": meta}
    with open(os.path.join(out, "storage.json"), "w") as fh:
        json.dump(storage, fh, indent=2, sort_keys=True)
        fh.write("\n")
    worst = max((r["max_log_residual"] for r in rank_rows), default=0.0)
    print(f"analyzed {len(bank.layer_names())} layers x {bank.n_experts} experts; "
          f"worst separability residual {worst:.2e}")
    print(f"compression {report.compression_ratio:.2f}x; pack {pack_size} "
          f"bytes vs {report.packed_weight_bytes} packed code bytes")
    print(f"wrote {out}/scale_change_out.csv, scale_change_in.csv, rank1.csv, storage.json")
    return 0


def _parse_sizes(text, parser):
    sizes = []
    for part in str(text).split(","):
        dims = part.strip().split("x")
        try:
            if len(dims) == 1:
                n = int(dims[0])
                sizes.append((n, n, n))
            elif len(dims) == 3:
                sizes.append(tuple(int(d) for d in dims))
            else:
                raise ValueError(part)
        except ValueError:
            parser.error(f"--sizes entries must be N or MxKxN, got {part!r}")
    return sizes


def _cmd_bench(opts, parser):
    _require(opts, parser, "out")
    _check_bits(parser, opts.bits)
    out = _out_dir(opts)
    sizes = _parse_sizes(opts.sizes, parser)
    rows = bench_dequant_matmul(sizes, bits=opts.bits, reps=opts.reps, seed=opts.seed)
    path = os.path.join(out, "bench.csv")
    write_csv(path, rows)
    for row in rows:
        print(f"{row['m']}x{row['k']}x{row['n']}: materialized {row['fp_seconds'] * 1e3:.2f}ms, "
              f"unpack+dequant {row['dequant_seconds'] * 1e3:.2f}ms "
              f"({row['overhead']:.2f}x)")
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "quantize": _cmd_quantize,
    "finetune": _cmd_finetune,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "bench": _cmd_bench,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    opts = _merge_options(args.command, args, parser)
    try:
        return _COMMANDS[args.command](opts, parser)
    except (CorruptionError, MigrationError, ConfigurationError, DomainError,
            DimensionError) as err:
        print(f"scaletune {args.command}: error: {err}", file=sys.stderr)
        return 2


def console_entry():
    sys.exit(main())
