"""Command line entry point: ``gaitkit <synth|train|eval|ablate|activations|inspect>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigKeyError, RunConfig, load_config, resolve_config
from .data import DataError, DatasetIndex
from .evaluation import ABLATION_MODES, AblationError, ablation_shuffle, evaluate, write_activation_csv
from .model import ConfigError, ResGCN, activation_map, count_parameters
from .skeleton import SchemaError, get_schema
from .synthetic import synthesize_dataset
from .tensor import NonFiniteError
from .training import load_model, model_config_from, train

log = logging.getLogger("gaitkit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# published full-width sizes the presets are sized against
REFERENCE_PARAMS = {"n21-r8": 350_000, "n51-r4": 765_000}


def _parse_set(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigKeyError(item, "--set expects key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(args, base: RunConfig | None = None) -> RunConfig:
    """Defaults < GAITKIT_SEED < config file < --set < dedicated flags."""
    file_values = load_config(args.config) if getattr(args, "config", None) else {}
    overrides = _parse_set(getattr(args, "set", None))
    env_seed = os.environ.get("GAITKIT_SEED")
    if env_seed is not None and "seed" not in file_values and "seed" not in overrides:
        overrides["seed"] = env_seed
    for flag in ("data", "out", "preset", "seed", "workers"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = str(value)
    return resolve_config(file_values, overrides, base)


def write_record(out: Path, command: str, cfg: RunConfig | None, extra: dict | None = None) -> Path:
    """Reproducibility record stored beside every command's outputs."""
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, "seed": cfg.seed if cfg else None,
           "config": cfg.to_dict() if cfg else None}
    doc.update(extra or {})
    path = out / "run.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if cfg is not None:
        (out / "config.txt").write_text(cfg.to_text())
    return path


def _load_index(cfg: RunConfig) -> DatasetIndex:
    if not cfg.data:
        raise ConfigKeyError("data", "no dataset given; use --data or set data = <dir>")
    root = Path(cfg.data)
    manifest = root / "manifest.json" if root.is_dir() else root
    if manifest.is_file():
        return DatasetIndex.from_manifest(manifest)
    return DatasetIndex.from_directory(root, cfg.schema)


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = resolve(args)
    out = Path(args.out or cfg.out)
    rng = np.random.default_rng(cfg.seed)
    views = [int(v) for v in args.views.split(",")]
    lo, _, hi = args.frames.partition("-")
    frames = (int(lo), int(hi)) if hi else int(lo)
    seqs, ids = synthesize_dataset(args.ids, args.seqs, views, frames, rng, args.mode, args.noise,
                                   treadmill=args.treadmill)
    DatasetIndex.from_sequences(seqs, cfg.schema).write(out)
    (out / "identities.json").write_text(json.dumps([i.to_json() for i in ids], indent=1) + "\n")
    write_record(out, "synth", cfg, {"ids": args.ids, "seqs": args.seqs, "views": views,
                                     "frames": args.frames, "mode": args.mode, "noise": args.noise,
                                     "treadmill": args.treadmill})
    print(f"wrote {len(seqs)} sequences of {args.ids} identities to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args)
    out = Path(cfg.out)
    splits = _load_index(cfg).split(cfg.protocol, cfg.gallery_view_list)
    write_record(out, "train", cfg)
    res = train(cfg, splits["train"], out, resume=args.resume)
    if args.evaluate:
        _write_tables(evaluate(res.model, splits, cfg), out)
    print(f"final checkpoint: {res.checkpoint}")
    return EXIT_OK


def _write_tables(tables, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for cond, table in sorted(tables.items()):
        table.to_csv(out / f"rank1_{cond}.csv")
        print(f"{cond}: mean rank-1 {table.mean:.2f}%")


def cmd_eval(args) -> int:
    model, state = load_model(args.checkpoint, use_swa=not args.raw)
    cfg = resolve(args, RunConfig(**state["config"]))
    out = Path(args.out or Path(cfg.out) / "eval")
    splits = _load_index(cfg).split(cfg.protocol, cfg.gallery_view_list)
    write_record(out, "eval", cfg, {"checkpoint": str(args.checkpoint)})
    _write_tables(evaluate(model, splits, cfg), out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve(args)
    modes = ABLATION_MODES if args.mode == "all" else (args.mode,)
    index = _load_index(cfg)
    out = Path(cfg.out)
    write_record(out, "ablate", cfg, {"modes": list(modes)})
    trained = {}
    for mode in modes:
        train_mode = mode.split("/")[0]
        sub = out / mode.replace("/", "_")
        tables, model = ablation_shuffle(index, cfg, mode, trained.get(train_mode), sub)
        trained[train_mode] = model
        _write_tables(tables, sub)
    return EXIT_OK


def cmd_activations(args) -> int:
    model, state = load_model(args.checkpoint, use_swa=not args.raw)
    cfg = resolve(args, RunConfig(**state["config"]))
    out = Path(args.out or Path(cfg.out) / "activations")
    index = _load_index(cfg)
    spec = get_schema(cfg.schema)
    write_record(out, "activations", cfg, {"checkpoint": str(args.checkpoint)})
    n = len(index) if args.limit is None else min(args.limit, len(index))
    for i in range(n):
        e = index.entries[i]
        amap = activation_map(index.load(i), model, spec)
        write_activation_csv(out / f"{e.subject}_{e.condition.lower()}-{e.seq_index:02d}_{e.view:03d}.csv", amap)
    print(f"wrote {n} activation maps to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = resolve(args)
    if args.width is not None:
        cfg = cfg.replace(width=args.width)
    mcfg = model_config_from(cfg)
    model = ResGCN(mcfg, seed=cfg.seed)
    total = count_parameters(model)
    print(f"preset {mcfg.preset} width {mcfg.width} skeleton {mcfg.skeleton.name}")
    print(f"parameters {total}")
    ref = REFERENCE_PARAMS.get(mcfg.preset)
    if ref and mcfg.width == 1.0:
        print(f"reference {ref} ({100.0 * (total - ref) / ref:+.1f}%)")
    if args.verbose:
        for name, p in model.named_parameters():
            print(f"  {name} {tuple(p.shape)}")
    else:
        for bname, blocks in list(model.branches.items()) + [("main", model.main)]:
            for i, blk in enumerate(blocks):
                c = blk.cfg
                print(f"  {bname}[{i}] {c.kind} {c.in_ch}->{c.out_ch} stride {c.stride} "
                      f"params {count_parameters(blk)}")
        print(f"  head {mcfg.feature_channels}->{mcfg.embedding_dim} params {count_parameters(model.head)}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaitkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gaitkit {__version__}")
    parser.add_argument("-v", "--verbose-log", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset directory or manifest.json")
            p.add_argument("--workers", type=int, help="data loading threads")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic gait dataset"), data=False)
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--seqs", type=int, default=8)
    p.add_argument("--views", default="18,54,90,126")
    p.add_argument("--frames", default="40-70", help="length or low-high range")
    p.add_argument("--mode", choices=("full", "dynamics", "body"), default="full")
    p.add_argument("--noise", type=float, default=3.0, help="keypoint noise sigma, px")
    p.add_argument("--treadmill", action="store_true", help="walk in place (no forward travel)")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--preset")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--evaluate", action="store_true", help="also write rank-1 tables")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="rank-1 tables for a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--raw", action="store_true", help="use weights before SWA")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="frame shuffle control conditions"))
    p.add_argument("--mode", choices=ABLATION_MODES + ("all",), default="all")
    p.add_argument("--preset")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("activations", help="per-joint activation CSVs"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--raw", action="store_true")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_activations)

    p = common(sub.add_parser("inspect", help="parameter counts of a preset"), data=False)
    p.add_argument("--preset")
    p.add_argument("--width", type=float)
    p.add_argument("--verbose", action="store_true", help="list every parameter")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose_log else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigKeyError, ConfigError, SchemaError, AblationError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as err:
        where = getattr(err, "checkpoint", None)
        print(f"numerical failure: {err}" + (f" (last checkpoint {where})" if where else ""), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
