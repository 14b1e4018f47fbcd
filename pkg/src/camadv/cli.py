"""Command-line entry point: ``camadv <command> [options]``.

Exit status is 0 on success, 1 on usage or configuration errors and 2 when
the run itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, apply_overrides, load, loads
from .data import DataError
from .embedding import read_checkpoint, save_checkpoint
from .figures import FIGURE_KINDS, emit_figures
from .harness import (
    build_models,
    init_run_dir,
    load_experiment_data,
    load_pretrained,
    model_names,
    read_reports,
    resolve_run_dir,
    write_synthetic,
)
from .pseudo_labels import ClusteringFailed
from .training import adapt_target, eval_mode_for, evaluate_models, mu_sweep, pretrain_source, write_table

logger = logging.getLogger("camadv")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_MU_GRID = (0.0, 0.01, 0.05, 0.1, 0.3, 1.0, 1.8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig.preset(args.preset)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    extra = {}
    if getattr(args, "mode", None):
        extra["mode"] = args.mode
    if getattr(args, "mu", None) is not None:
        extra["mu"] = args.mu
    return apply_overrides(cfg, extra) if extra else cfg


def _pretrained(args, cfg, data, run_dir: Path) -> list:
    if args.checkpoint:
        return load_pretrained(Path(args.checkpoint), cfg)
    logger.info("no --checkpoint given; pre-training on the source split first")
    return _pretrain(cfg, data, run_dir)


def _pretrain(cfg, data, run_dir: Path) -> list:
    models = build_models(cfg, data["source_train"])
    for i, m in enumerate(models):
        pretrain_source(m, data["source_train"], cfg, seed=cfg.seed + i)
    save_checkpoint(
        run_dir / "checkpoints" / "pretrain.pt",
        dict(zip(model_names(cfg), models)),
        config_text=(run_dir / "config.toml").read_text(),
    )
    return models


def _results_row(cfg, scores) -> dict:
    return {"mode": cfg.mode, "composition": cfg.composition, "mu": cfg.mu, "rank1": scores.rank1, "mAP": scores.mAP}


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    run_dir = init_run_dir(resolve_run_dir(args.run_dir, "pretrain"), cfg, "pretrain")
    data = load_experiment_data(cfg, ("source_train",))
    models = build_models(cfg, data["source_train"])
    histories = {}
    for i, (name, m) in enumerate(zip(model_names(cfg), models)):
        ckpt_dir = run_dir / "checkpoints" / name if len(models) > 1 else run_dir / "checkpoints"
        result = pretrain_source(m, data["source_train"], cfg, seed=cfg.seed + i, checkpoint_dir=ckpt_dir)
        histories[name] = result.history
    save_checkpoint(
        run_dir / "checkpoints" / "pretrain.pt",
        dict(zip(model_names(cfg), models)),
        config_text=(run_dir / "config.toml").read_text(),
    )
    with open(run_dir / "pretrain_history.jsonl", "w") as fh:
        for name, history in histories.items():
            for row in history:
                fh.write(json.dumps({"model": name, **row}, sort_keys=True) + "\n")
    print(run_dir)


def cmd_adapt(args) -> None:
    cfg = _config(args)
    run_dir = init_run_dir(resolve_run_dir(args.run_dir, "adapt"), cfg, "adapt")
    data = load_experiment_data(cfg)
    models = _pretrained(args, cfg, data, run_dir)
    result = adapt_target(models, data["target_train"], cfg, run_dir=run_dir)
    save_checkpoint(
        run_dir / "checkpoints" / "final.pt",
        dict(zip(model_names(cfg), result.models)),
        config_text=(run_dir / "config.toml").read_text(),
    )
    scores = evaluate_models(result.models, data["gallery"], data["query"], eval_mode_for(cfg))
    write_table(run_dir / "results.csv", [_results_row(cfg, scores)])
    (run_dir / "results.json").write_text(json.dumps(scores.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"run_dir": str(run_dir), **scores.to_dict()}, sort_keys=True))


def cmd_evaluate(args) -> None:
    checkpoint = Path(args.checkpoint)
    if args.config:
        cfg = load(args.config)
    else:
        cfg = loads(read_checkpoint(checkpoint)["config"])
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    data = load_experiment_data(cfg, ("gallery", "query"))
    models = load_pretrained(checkpoint, cfg)
    scores = evaluate_models(models, data["gallery"], data["query"], args.eval_mode or eval_mode_for(cfg))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "results.csv", [_results_row(cfg, scores)])
    print(json.dumps(scores.to_dict(), sort_keys=True))


def cmd_ablate_mu(args) -> None:
    cfg = _config(args)
    if cfg.mode == "baseline":
        raise UsageError("a mu sweep needs an adversarial mode (plain_adv or canu)")
    mus = [float(x) for x in args.mus.split(",")] if args.mus else list(DEFAULT_MU_GRID)
    if any(m < 0 for m in mus):
        raise UsageError("mu values must be non-negative")
    run_dir = init_run_dir(resolve_run_dir(args.run_dir, "ablate-mu"), cfg, "ablate-mu")
    data = load_experiment_data(cfg)
    models = _pretrained(args, cfg, data, run_dir)
    rows = mu_sweep(cfg, mus, models, data["target_train"], data["gallery"], data["query"], run_dir=run_dir)
    for row in rows:
        print(json.dumps(row, sort_keys=True))


def cmd_diagnose(args) -> None:
    run_dir = Path(args.run_dir)
    runs = {args.name or run_dir.name: read_reports(run_dir)}
    for item in args.compare or []:
        if "=" not in item:
            raise UsageError(f"--compare expects NAME=RUN_DIR, got {item!r}")
        name, path = item.split("=", 1)
        runs[name] = read_reports(Path(path))
    pairs = []
    for item in args.pairs or ["0,1"]:
        try:
            a, b = (int(x) for x in item.split(","))
        except ValueError:
            raise UsageError(f"--pairs expects A,B camera indices, got {item!r}") from None
        pairs.append((a, b))
    features = cameras = None
    stored = run_dir / "target_features.npz"
    if stored.exists():
        with np.load(stored) as z:
            features, cameras = z["features"], z["cameras"]
    out = Path(args.out) if args.out else run_dir / "figures"
    kinds = args.kinds.split(",") if args.kinds else list(FIGURE_KINDS)
    for path in emit_figures(runs, out, kinds, features=features, cameras=cameras, camera_pairs=pairs):
        print(path)


def cmd_synth(args) -> None:
    cfg = _config(args)
    out = Path(args.out) if args.out else resolve_run_dir(None, "synth")
    for role, path in write_synthetic(cfg, out).items():
        print(f"{role}\t{path}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camadv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, run=True):
        p.add_argument("--config", help="flat TOML config file (default: the --preset)")
        p.add_argument("--preset", default="toy", choices=("toy", "mmt", "ssg"))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if run:
            p.add_argument("--run-dir", help="output directory (default: $CAMADV_RUN_ROOT/<command>-<time>)")

    p = sub.add_parser("pretrain", help="supervised pre-training on the source split")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (
        ("adapt", cmd_adapt, "cluster / fine-tune adaptation on the target split"),
        ("ablate-mu", cmd_ablate_mu, "sweep the adversarial weight mu"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--mode", choices=("baseline", "plain_adv", "canu"))
        p.add_argument("--mu", type=float)
        p.add_argument("--checkpoint", help="pre-trained checkpoint (default: pre-train first)")
        if name == "ablate-mu":
            p.add_argument("--mus", help="comma-separated mu values")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="rank-1 / mAP of a checkpoint on gallery and query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config file (default: the one stored in the checkpoint)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--eval-mode", choices=("single", "mmt", "ssg"))
    p.add_argument("--out", help="directory for a results.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="MI, lost-ID and PCA figures from a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--name", help="legend label for --run-dir")
    p.add_argument("--compare", action="append", metavar="NAME=RUN_DIR", help="another run on the same axes")
    p.add_argument("--pairs", action="append", metavar="A,B", help="camera pair for a PCA scatter")
    p.add_argument("--kinds", help=f"comma-separated subset of {','.join(FIGURE_KINDS)}")
    p.add_argument("--out", help="figure directory (default: <run-dir>/figures)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("synth", help="write the synthetic splits as .npz files")
    common(p, run=False)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"camadv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ClusteringFailed, ValueError, RuntimeError) as exc:
        print(f"camadv: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
