"""Command-line surface.

Subcommands: chirality, invariance, gradcheck, gen, train, eval, embed,
rotate-axis, attn. Exit codes: 0 success, 1 check failure, 2 input error,
3 internal numeric error. Reports go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .encoder import RankStrategy
from .errors import CheckpointError, ChiralDetError, MoleculeParseError, NumericError
from .geometry import (
    Configuration,
    assign_configuration,
    random_reflection,
    random_rotation,
    transform,
    unit_products,
)
from .gradcheck import TINY_CONFIG, run_gradcheck
from .model import (
    AdamState,
    ModelConfig,
    TrainConfig,
    attention_export_rows,
    embed,
    evaluate,
    init_model,
    load_checkpoint,
    mirror_consistency,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_NUMERIC_ERROR = 3

_MODEL_KEYS = {f.name for f in dataclass_fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclass_fields(TrainConfig)}


def read_config_file(path) -> dict:
    """key=value lines mirroring ModelConfig/TrainConfig field names."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MoleculeParseError(f"expected key=value, got {line!r}", lineno)
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _MODEL_KEYS | _TRAIN_KEYS:
            raise MoleculeParseError(f"unknown config key {key!r}", lineno)
        values[key] = val
    return values


def build_configs(values: dict, seed: int | None = None) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig()
    train_cfg = TrainConfig()
    for key, val in values.items():
        if key in _MODEL_KEYS:
            if key == "rank_strategy":
                setattr(model_cfg, key, RankStrategy(val))
            else:
                setattr(model_cfg, key, int(val))
        else:
            current = getattr(train_cfg, key)
            setattr(train_cfg, key, type(current)(val))
    if seed is not None:
        model_cfg.seed = seed
    return model_cfg.validate(), train_cfg.validate()


def _load_config_arg(arg, seed):
    if arg is None:
        return build_configs({}, seed)
    if arg == "tiny":
        cfg = ModelConfig(**{**TINY_CONFIG.__dict__})
        if seed is not None:
            cfg.seed = seed
        return cfg.validate(), TrainConfig()
    return build_configs(read_config_file(arg), seed)


def _write_or_print(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_chirality(args) -> int:
    mol = data_mod.parse(args.file)
    for i, product in enumerate(unit_products(mol)):
        label = assign_configuration(product, args.tol)
        name = label.value if label is not Configuration.DEGENERATE else "Degenerate"
        print(f"unit {i}: P={product:+.6f} {name}")
    return EXIT_OK


def cmd_invariance(args) -> int:
    if args.trials < 1:
        print("--trials must be >= 1", file=sys.stderr)
        return EXIT_INPUT_ERROR
    mol = data_mod.parse(args.file)
    products = unit_products(mol)
    live = [i for i, p in enumerate(products) if abs(p) > args.tol]
    for i, p in enumerate(products):
        if i not in live:
            print(f"warning: unit {i} is Degenerate (P={p:.3e}), sign check skipped",
                  file=sys.stderr)
    if not live:
        print("all units degenerate; nothing to check")
        return EXIT_OK
    max_drift = 0.0
    flips = 0
    bad_seed = None
    for t in range(args.trials):
        rng = np.random.default_rng(args.seed + t)
        rigid = transform(mol, random_rotation(rng), rng.uniform(-10, 10, 3))
        reflected = transform(mol, random_reflection(rng), rng.uniform(-10, 10, 3))
        p_rigid = unit_products(rigid)
        p_refl = unit_products(reflected)
        ok = True
        for i in live:
            drift = abs(p_rigid[i] - products[i]) / abs(products[i])
            max_drift = max(max_drift, drift)
            if drift >= 1e-9 or np.sign(p_refl[i]) != -np.sign(products[i]):
                ok = False
        if ok:
            flips += 1
        elif bad_seed is None:
            bad_seed = args.seed + t
    flip_rate = flips / args.trials
    status = "PASS" if max_drift < 1e-9 and flip_rate == 1.0 else "FAIL"
    print(f"{status} trials={args.trials} max_drift={max_drift:.3e} flip_rate={flip_rate:.4f}")
    if status == "FAIL":
        print(f"first offending transform seed: {bad_seed}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model_cfg, _ = _load_config_arg(args.config or "tiny", args.seed)
    reports = run_gradcheck(config=model_cfg, seed=args.seed, tol=args.tol,
                            sabotage=args.sabotage)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_rel_error:.3e}")
    if failed:
        print("failed blocks: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.count < 1:
        print("--count must be >= 1", file=sys.stderr)
        return EXIT_INPUT_ERROR
    out = args.out or f"dataset_{args.task}"
    if args.task == "rs":
        spec = data_mod.SyntheticSpec(
            count=args.count,
            seed=args.seed,
            min_abs_product=args.min_product,
            spectator_range=(0, args.spectators),
        )
        dataset = data_mod.gen_rs(spec)
    else:
        dataset = data_mod.gen_axial(
            args.count, seed=args.seed, min_abs_product=args.min_product,
            spectator_range=(0, min(args.spectators, 2)),
        )
    manifest = data_mod.write_dataset(dataset, out)
    print(f"wrote {len(dataset)} molecules to {manifest.parent} (manifest: {manifest})")
    return EXIT_OK


def _split_dataset(dataset, split: str):
    fracs = [float(x) for x in split.split(",")]
    if len(fracs) != 3 or abs(sum(fracs) - 1.0) > 1e-9 or min(fracs) < 0:
        raise ValueError(f"--split must be three fractions summing to 1, got {split!r}")
    n = len(dataset)
    n_train = int(round(fracs[0] * n))
    n_val = int(round(fracs[1] * n))
    return (
        dataset[:n_train],
        dataset[n_train : n_train + n_val],
        dataset[n_train + n_val :],
    )


def cmd_train(args) -> int:
    dataset = data_mod.read_manifest(args.data)
    model_cfg, train_cfg = _load_config_arg(args.config, args.seed)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.lr is not None:
        train_cfg.lr = args.lr
    train_set, val_set, _ = _split_dataset(dataset, args.split)
    if not train_set:
        print("empty training split", file=sys.stderr)
        return EXIT_INPUT_ERROR
    out_dir = Path(args.out or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    model = init_model(model_cfg)
    adam = AdamState.for_model(model)
    train(
        model,
        train_set,
        train_cfg,
        val_dataset=val_set if val_set else None,
        metrics_path=out_dir / "metrics.log",
        adam=adam,
        log=print,
    )
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt, adam)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dataset = data_mod.read_manifest(args.data)
    splits = dict(zip(("train", "val", "test"), _split_dataset(dataset, args.split)))
    splits["all"] = dataset
    subset = splits[args.eval_split]
    if not subset:
        print(f"split {args.eval_split!r} is empty", file=sys.stderr)
        return EXIT_INPUT_ERROR
    acc = evaluate(model, subset)
    print(f"accuracy={acc:.4f} n={len(subset)}")
    if args.mirror_check:
        _, flip = mirror_consistency(model, subset)
        print(f"mirror_flip_rate={flip:.4f}")
    return EXIT_OK


def _input_molecules(args):
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            for mol, _ in data_mod.read_manifest(p):
                yield mol
        else:
            yield data_mod.parse(p)


def cmd_embed(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    h = model.config.h
    lines = ["id," + ",".join(f"e{i}" for i in range(h))]
    for mol in _input_molecules(args):
        vec = embed(model, mol)
        lines.append(mol.id + "," + ",".join(f"{x:.10g}" for x in vec))
    _write_or_print("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_attn(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    lines = ["id,query,weights"]
    for mol in _input_molecules(args):
        keys, rows = attention_export_rows(model, mol)
        lines.append(mol.id + ",keys," + ",".join(str(k) for k in keys))
        for q, row in enumerate(rows):
            lines.append(f"{mol.id},{q}," + ",".join(f"{x:.10g}" for x in row))
    _write_or_print("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_rotate_axis(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    base = data_mod.parse(args.file)
    conformers = data_mod.gen_axial_torsion(base, args.step)
    ref = embed(model, conformers[0])
    lines = ["angle_deg,cosine_to_first,product_sign"]
    for t, conf in enumerate(conformers):
        vec = embed(model, conf)
        cos = float(ref @ vec / (np.linalg.norm(ref) * np.linalg.norm(vec)))
        sign = int(np.sign(unit_products(conf)[0]))
        lines.append(f"{t * args.step:g},{cos:.6f},{sign:+d}")
    _write_or_print("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chiraldet",
        description="Chirality-aware molecular representations from determinant kernels",
    )
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="random seed")
    shared.add_argument("--out", default=None, help="output path")
    shared.add_argument("--config", default=None,
                        help="config file of key=value lines, or 'tiny'")
    shared.add_argument("--verbose", action="store_true", help="extra diagnostics on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("chirality", parents=[shared],
                       help="chirality products and R/S labels of a molecule file")
    p.add_argument("file")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_chirality)

    p = sub.add_parser("invariance", parents=[shared],
                       help="audit rigid-motion invariance and reflection sign flips")
    p.add_argument("file")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_invariance)

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="audit every backward pass against finite differences")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--sabotage", default=None, metavar="BLOCK",
                   help="corrupt matching blocks' gradients (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen", parents=[shared], help="generate a synthetic dataset")
    p.add_argument("--task", choices=("rs", "axial"), default="rs")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--min-product", type=float, default=0.5, dest="min_product")
    p.add_argument("--spectators", type=int, default=3)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[shared], help="train a classifier on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.add_argument("--eval-split", choices=("train", "val", "test", "all"),
                   default="test", dest="eval_split")
    p.add_argument("--mirror-check", action="store_true", dest="mirror_check")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", parents=[shared],
                       help="write pooled embeddings as comma-separated rows")
    p.add_argument("--ckpt", required=True)
    p.add_argument("inputs", nargs="+", help="molecule files or dataset directories")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("rotate-axis", parents=[shared],
                       help="torsion sweep: angle, embedding similarity, product sign")
    p.add_argument("file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--step", type=float, default=20.0)
    p.set_defaults(func=cmd_rotate_axis)

    p = sub.add_parser("attn", parents=[shared],
                       help="export final-layer head-averaged attention rows")
    p.add_argument("--ckpt", required=True)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_attn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (MoleculeParseError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC_ERROR
    except ChiralDetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
