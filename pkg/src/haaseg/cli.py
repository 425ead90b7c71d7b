"""Command line entry point: gen-data, train, eval, ablate, gradcheck.

Every command is deterministic given its resolved config and seed, and
writes a ``resolved_config.json`` snapshot next to its primary outputs
so a run can be reproduced with no hidden defaults. Exit codes: 0 ok,
1 usage or config error, 2 runtime failure, 3 failed gradcheck/ablation
thresholds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from . import gradcheck as gradcheck_mod
from .ablate import run_ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    PgmError,
    SynthConfig,
    generate_dataset,
    load_dataset,
    split,
    write_dataset,
    write_pgm,
)
from .metrics import METRIC_COLUMNS, evaluate_dataset
from .network import HAANet, NetConfig
from .training import TrainConfig, fit


class ConfigError(ValueError):
    """Invalid configuration or command usage; maps to exit code 1."""


@dataclass
class SplitConfig:
    """Dataset split fractions and the shuffle seed used to cut them."""

    train: float = 0.8
    val: float = 0.0
    test: float = 0.2
    seed: int = 0


@dataclass
class AblateConfig:
    """Which encoding variants to train, how many seeds, and the Dice
    margin the absolute encodings must put on the no-encoding baseline."""

    variants: Tuple[str, ...] = ("None", "LPE", "APE", "LPE+APE")
    n_seeds: int = 3
    base_seed: int = 100
    check_margins: bool = True
    margin: float = 5.0


_SECTIONS = {
    "net": NetConfig,
    "train": TrainConfig,
    "data": SynthConfig,
    "split": SplitConfig,
    "ablate": AblateConfig,
}


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


def config_from_dict(raw: Dict) -> RunConfig:
    """Build a RunConfig, rejecting unknown sections and keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(
            f"unknown config section(s) {unknown}; valid sections: {sorted(_SECTIONS)}"
        )
    sections = {}
    for name, cls in _SECTIONS.items():
        body = raw.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object")
        known = {f.name: f for f in fields(cls)}
        bad = sorted(set(body) - set(known))
        if bad:
            raise ConfigError(
                f"unknown key(s) {bad} in section {name!r}; valid keys: {sorted(known)}"
            )
        kwargs = {}
        for key, value in body.items():
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        try:
            sections[name] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"section {name!r}: {e}") from None
    return RunConfig(**sections)


def config_to_dict(cfg: RunConfig) -> Dict:
    out = {}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        out[name] = {
            k: list(v) if isinstance(v, tuple) else v for k, v in section.items()
        }
    return out


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: not valid JSON ({e})") from None
    return config_from_dict(raw)


def _apply_seed(cfg: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return cfg
    return RunConfig(
        net=replace(cfg.net, seed=seed),
        train=replace(cfg.train, seed=seed + 1),
        data=replace(cfg.data, seed=seed + 2),
        split=replace(cfg.split, seed=seed + 3),
        ablate=replace(cfg.ablate, base_seed=seed + 100),
    )


def _write_snapshot(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"
    (out_dir / "resolved_config.json").write_text(text)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("HAASEG_THREADS")
    return max(1, int(env)) if env else 1


def _split_dataset(cfg: RunConfig):
    samples = generate_dataset(cfg.data)
    fr = (cfg.split.train, cfg.split.val, cfg.split.test)
    try:
        return split(samples, fr, cfg.split.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _load_or_generate(cfg: RunConfig, data_dir: Optional[str], split_name: str):
    if data_dir is None:
        train_s, val_s, test_s = _split_dataset(cfg)
        return {"train": train_s, "val": val_s, "test": test_s}[split_name]
    samples = load_dataset(data_dir, split_name)
    return samples


def cmd_gen_data(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    out = Path(args.out)
    train_s, val_s, test_s = _split_dataset(cfg)
    splits = {}
    for name, chunk in (("train", train_s), ("val", val_s), ("test", test_s)):
        for s in chunk:
            splits[s.id] = name
    samples = sorted(train_s + val_s + test_s, key=lambda s: s.id)
    write_dataset(out, samples, splits)
    _write_snapshot(out, cfg)
    print(
        f"wrote {len(samples)} samples to {out} "
        f"(train {len(train_s)}, val {len(val_s)}, test {len(test_s)})"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_s = _load_or_generate(cfg, args.data, "train")
    if not train_s:
        raise ConfigError("training split is empty")
    val_s = _load_or_generate(cfg, args.data, "val")
    net = HAANet(cfg.net)
    history = fit(net, train_s, cfg.train, val_samples=val_s, log_path=out / "training_log.csv")
    save_checkpoint(out / "checkpoint.haaseg", net.state_items())
    _write_snapshot(out, cfg)
    last = history[-1]
    print(
        f"trained {cfg.train.epochs} epoch(s) on {len(train_s)} sample(s); "
        f"final mean loss {last['mean_loss']:.6f}"
    )
    return 0


def _report_lines(report) -> List[str]:
    d = report.as_dict()
    return [f"{k}: {d[k]:.4f}" for k in METRIC_COLUMNS]


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    config_path = args.config
    if config_path is None:
        sibling = ckpt_path.parent / "resolved_config.json"
        config_path = str(sibling) if sibling.exists() else None
    cfg = _apply_seed(load_config(config_path), args.seed)
    samples = _load_or_generate(cfg, args.data, args.split)
    if not samples:
        raise ConfigError(f"no samples in split {args.split!r}")
    net = HAANet(cfg.net)
    try:
        net.load_state(load_checkpoint(ckpt_path))
    except ValueError as e:
        raise RuntimeError(f"checkpoint incompatible with configured architecture: {e}")
    report = evaluate_dataset(net, samples)
    out = Path(args.out) if args.out else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)
    row = report.as_dict()
    csv_text = ",".join(METRIC_COLUMNS) + "\n" + ",".join(repr(row[m]) for m in METRIC_COLUMNS) + "\n"
    (out / "report.csv").write_text(csv_text)
    (out / "report.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
    if args.dump_predictions:
        pred_dir = out / "predictions"
        pred_dir.mkdir(exist_ok=True)
        for s in samples:
            write_pgm(net.forward(s.image).data[0], pred_dir / f"{s.id}.pgm")
    for line in _report_lines(report):
        print(line)
    return 0


def cmd_ablate(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    if args.variants:
        variants = tuple(v.strip() for v in args.variants.split(","))
    else:
        variants = cfg.ablate.variants
    n_seeds = args.seeds if args.seeds is not None else cfg.ablate.n_seeds
    # fold command-line overrides into the config so the snapshot alone
    # reproduces the run
    cfg = replace(cfg, ablate=replace(cfg.ablate, variants=variants, n_seeds=n_seeds))
    seeds = [cfg.ablate.base_seed + i for i in range(n_seeds)]
    train_s, _, test_s = _split_dataset(cfg)
    if not train_s or not test_s:
        raise ConfigError("ablation needs non-empty train and test splits")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(key):
        print(f"  finished variant={key[0]} seed={key[1]}", flush=True)

    try:
        result = run_ablation(
            cfg.net,
            cfg.train,
            train_s,
            test_s,
            variants,
            seeds,
            threads=_threads(args),
            progress=progress,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    (out / "ablation.csv").write_text(result.to_csv())
    _write_snapshot(out, cfg)
    for v in result.variants():
        print(f"{v}: dice {result.mean(v, 'dice'):.2f}±{result.std(v, 'dice'):.2f}")
    if cfg.ablate.check_margins:
        problems = result.ordering_violations(cfg.ablate.margin)
        if problems:
            for p in problems:
                print(f"ordering violation: {p}", file=sys.stderr)
            return 3
    return 0


def cmd_gradcheck(args) -> int:
    net_cfg = None
    if args.config:
        net_cfg = load_config(args.config).net
    results = gradcheck_mod.run_all(net_cfg)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  max rel err {r.max_rel_err:.3e}")
    failures = [r for r in results if not r.passed]
    print(f"{len(results) - len(failures)}/{len(results)} components passed")
    return 3 if failures else 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default="haaseg_out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="master seed override")
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="parallel workers (fallback: HAASEG_THREADS, then 1)",
    )
    parser = _Parser(prog="haaseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and checkpoint")
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--dump-predictions", action="store_true")
    p.set_defaults(func=cmd_eval, out=None)

    p = sub.add_parser("ablate", parents=[common], help="position-encoding study")
    p.add_argument("--variants", help="comma-separated encoding names")
    p.add_argument("--seeds", type=int, help="number of seeds per variant")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, PgmError, FileNotFoundError, NotADirectoryError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
