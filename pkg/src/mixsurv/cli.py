"""Command-line entry point: ``mixsurv {synth,train,cv,eval,km}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .config import DESCRIPTIONS, ConfigError, PipelineConfig, resolve_config

log = logging.getLogger("mixsurv")

COMMANDS = ("synth", "train", "cv", "eval", "km")


class UsageError(Exception):
    pass


@dataclass
class Command:
    name: str
    config: PipelineConfig
    config_path: Path | None = None
    overrides: list[str] = field(default_factory=list)
    manifest: Path | None = None
    checkpoint: Path | None = None
    out_dir: Path = Path("mixsurv_out")
    jobs: int = 1


def _schema_text() -> str:
    rows = ["config keys (file 'key = value' or --set key=value), default in brackets:"]
    for k, v in PipelineConfig().to_dict().items():
        if isinstance(v, tuple):
            v = ",".join(f"{x:g}" for x in v)
        rows.append(f"  {k:<18} [{v}]  {DESCRIPTIONS.get(k, '')}")
    return "\n".join(rows)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    common.add_argument("--jobs", type=int, default=1, help="parallel folds for cv")
    common.add_argument("--out-dir", type=Path, default=Path("mixsurv_out"))
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="mixsurv", description="Mixture-of-log-logistics survival prediction from patch-feature bags.",
                epilog=_schema_text(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, metavar="{synth,train,cv,eval,km}", parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic cohort into --out-dir",
                   epilog=_schema_text(), formatter_class=fmt)
    for name, helptext, needs_ckpt in (
        ("train", "train on a manifest; writes model.ckpt and train_log.jsonl", False),
        ("cv", "k-fold cross-validation; prints per-fold and mean +/- std TDC", False),
        ("eval", "evaluate a checkpoint on a manifest", True),
        ("km", "median-split Kaplan-Meier curves, CSV + SVG, log-rank p", True),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext, epilog=_schema_text(), formatter_class=fmt)
        sp.add_argument("--manifest", type=Path, required=True)
        if needs_ckpt:
            sp.add_argument("--checkpoint", type=Path, required=True)
    return p


def parse_args(argv=None) -> Command:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides, seed=args.seed)
    except (ConfigError, OSError) as exc:
        raise UsageError(f"mixsurv {args.command}: {exc}") from None
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return Command(args.command, cfg, args.config, list(args.overrides), getattr(args, "manifest", None),
                   getattr(args, "checkpoint", None), args.out_dir, args.jobs)


# ---------------------------------------------------------------------------
# command bodies


def _synth(cmd: Command) -> None:
    from .dataio import SyntheticSpec, generate_synthetic_cohort

    c = cmd.config
    spec = SyntheticSpec(
        n_slides=c.synth_slides, patches_per_slide=(c.synth_min_patches, c.synth_max_patches),
        d=c.synth_dim, n_phenotypes=len(c.synth_alphas), alphas=c.synth_alphas, betas=c.synth_betas,
        censoring=c.synth_censoring, seed=c.seed,
    )
    coh = generate_synthetic_cohort(spec, cmd.out_dir)
    print(f"wrote {len(coh.manifest)} slides to {cmd.out_dir / 'manifest.csv'}")


def _tdc_line(tdc, n, pairs) -> str:
    if tdc is None:
        return f"TDC undefined: insufficient comparable pairs (n={n})"
    return f"TDC {tdc:.4f} (n={n}, comparable pairs={pairs})"


def _train(cmd: Command) -> None:
    from .dataio import read_manifest
    from .trainer import train

    manifest = read_manifest(cmd.manifest)
    ckpt = train(cmd.config, manifest, log_path=cmd.out_dir / "train_log.jsonl")
    ckpt.save(cmd.out_dir / "model.ckpt")
    print(f"trained {len(manifest)} slides for {ckpt.epoch} epochs; final mean loss {ckpt.history[-1]:.6f}")
    print(f"checkpoint: {cmd.out_dir / 'model.ckpt'}")


def _eval(cmd: Command) -> None:
    from .dataio import read_manifest
    from .trainer import Checkpoint, evaluate

    m = evaluate(Checkpoint.load(cmd.checkpoint), read_manifest(cmd.manifest))
    (cmd.out_dir / "metrics.json").write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")
    print(_tdc_line(m.tdc, len(m.slide_ids), m.comparable_pairs))
    if m.logrank is not None and m.logrank.defined:
        print(f"log-rank chi2 {m.logrank.statistic:.4f} p {m.logrank.p_value:.4g}")


def _cv(cmd: Command) -> None:
    from .dataio import read_manifest
    from .trainer import cross_validate

    rep = cross_validate(cmd.config, read_manifest(cmd.manifest), jobs=cmd.jobs, out_dir=cmd.out_dir)
    for f in rep.folds:
        tdc = "undefined" if f.tdc is None else f"{f.tdc:.3f}"
        print(f"fold {f.fold}: n_train={f.n_train} n_test={f.n_test} TDC {tdc}")
    print(f"TDC {rep.mean:.3f} ± {rep.std:.3f}")
    lr = rep.pooled.logrank
    if lr is not None and lr.defined:
        print(f"pooled log-rank chi2 {lr.statistic:.4f} p {lr.p_value:.4g}")


def _km(cmd: Command) -> None:
    from .dataio import read_manifest
    from .metrics import write_km_csv
    from .plot import km_svg
    from .trainer import Checkpoint, evaluate

    m = evaluate(Checkpoint.load(cmd.checkpoint), read_manifest(cmd.manifest))
    if m.km_high is None:
        raise RuntimeError("risk stratification is degenerate (all predicted scores tie)")
    write_km_csv(cmd.out_dir / "km_high_risk.csv", m.km_high)
    write_km_csv(cmd.out_dir / "km_low_risk.csv", m.km_low)
    p = m.logrank.p_value if m.logrank.defined else None
    svg = km_svg({"high risk": m.km_high, "low risk": m.km_low}, p, t_max=float(m.times.max()))
    (cmd.out_dir / "km.svg").write_text(svg, encoding="utf-8")
    if p is None:
        print("log-rank undefined: no events")
    else:
        print(f"log-rank chi2 {m.logrank.statistic:.4f} p {p:.4g}")


def run(cmd: Command) -> int:
    handlers = {"synth": _synth, "train": _train, "cv": _cv, "eval": _eval, "km": _km}
    try:
        cmd.out_dir.mkdir(parents=True, exist_ok=True)
        if cmd.name != "synth":
            (cmd.out_dir / "resolved_config.txt").write_text(cmd.config.dumps(), encoding="utf-8")
        log.info("resolved config:\n%s", cmd.config.dumps().rstrip())
        handlers[cmd.name](cmd)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"mixsurv {cmd.name}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cmd = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return run(cmd)


if __name__ == "__main__":
    sys.exit(main())
