"""Command-line front end: ``sm2 run | validate | report | compare``.

Exit codes:
  0  success
  1  unexpected internal error
  2  invalid configuration, arguments or input files
  3  run aborted: every configuration diverged during exploration
  4  run aborted: the final configuration diverged in thorough training
  5  ledger or comparison error (unreadable ledger, mismatched experiments)
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import __version__
from .config import (RunConfigFile, build_dataset, build_learner_spec, build_power_model,
                     build_settings, effective_yaml, fingerprint, load_config, load_power_model,
                     with_overrides)
from .core import ConfigError, LedgerError, RunLedger, SM2Error
from .energy import SimulatedMonitor
from .report import (ComparisonError, compare, format_comparison, write_comparison_csv,
                     write_report)
from .scheduler import Engine, RunAbort, VanillaEngine, initial_configs
from .trainer import make_learner

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_ALL_DIVERGED = 3
EXIT_FINAL_DIVERGED = 4
EXIT_LEDGER = 5

log = logging.getLogger("sm2")


@dataclass
class Vanilla:
    batch_size: int
    lr: float


def execute(cfg: RunConfigFile, out_dir: Optional[Path], vanilla: Optional[Vanilla] = None,
            figures: bool = True) -> tuple:
    """Run one experiment from a validated config; returns (RunResult, RunLedger)."""
    seed = cfg.run.seed
    dataset = build_dataset(cfg, seed)
    spec = build_learner_spec(cfg, dataset, seed)
    if vanilla is None:
        sizes = list(cfg.batch_candidates)
        initial_lr = cfg.run.initial_lr or cfg.lr_grid.lr_min
        label = cfg.run.label
    else:
        if vanilla.batch_size < 1 or not vanilla.lr > 0:
            raise ConfigError("vanilla runs need a positive batch size and learning rate")
        sizes, initial_lr, label = [vanilla.batch_size], vanilla.lr, "vanilla"
    configs = initial_configs(sizes, initial_lr)
    settings = build_settings(cfg, seed, len(cfg.batch_candidates))
    monitor = SimulatedMonitor(build_power_model(cfg.energy), cfg.energy.poll_interval_s)
    ledger = RunLedger(out_dir / "ledger.jsonl" if out_dir is not None else None)
    trainers = {c.config_id: make_learner(spec) for c in configs}
    info = {"fingerprint": fingerprint(cfg, seed), "label": label,
            "settings": cfg.model_dump(mode="json")}
    if vanilla is None:
        engine = Engine(configs, trainers, monitor, ledger, dataset, settings, out_dir)
        result = engine.run(info)
    else:
        engine = VanillaEngine(configs, trainers, monitor, ledger, dataset, settings, out_dir)
        n_rounds = max(1, (len(cfg.batch_candidates) - 1).bit_length())
        result = engine.run(info, n_halving_rounds=n_rounds)
    if out_dir is not None:
        write_report(ledger, out_dir, figures=figures)
    return result, ledger


def _load_with_overrides(args) -> RunConfigFile:
    cfg = load_config(args.config)
    energy = load_power_model(args.power_model) if getattr(args, "power_model", None) else None
    return with_overrides(cfg, seed=args.seed, alpha=getattr(args, "alpha", None), energy=energy)


def cmd_run(args) -> int:
    cfg = _load_with_overrides(args)
    out = Path(args.out or cfg.run.out or "sm2-out")
    out.mkdir(parents=True, exist_ok=True)
    vanilla = None
    if args.vanilla:
        if args.batch_size is None or args.lr is None:
            raise ConfigError("--vanilla needs --batch-size and --lr")
        if args.batch_size not in cfg.batch_candidates and args.batch_size % min(cfg.batch_candidates):
            raise ConfigError("--batch-size must be a multiple of the smallest batch candidate")
        vanilla = Vanilla(args.batch_size, args.lr)
    (out / "effective_config.yaml").write_text(effective_yaml(cfg, Path(args.config).read_text()),
                                               encoding="utf-8")
    result, ledger = execute(cfg, out, vanilla, figures=not args.no_figures)
    final = ledger[-1]
    print(f"final config: {final.config_id} (batch size {final.batch_size}), lr {final.final_lr:.6g}"
          + (" [truncated]" if result.truncated else ""))
    print(f"final performance: {final.performance:.6g} ({final.metric_polarity.value})")
    print(f"total energy: {result.total_energy_wh:.6f} Wh")
    print(f"ledger: {out / 'ledger.jsonl'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load_with_overrides(args)
    sys.stdout.write(effective_yaml(cfg, Path(args.config).read_text()))
    return EXIT_OK


def cmd_report(args) -> int:
    ledger = RunLedger.read(args.ledger)
    paths = write_report(ledger, args.out, figures=not args.no_figures)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_compare(args) -> int:
    ledgers = [RunLedger.read(p) for p in (args.alpha1, args.sm2, args.vanilla)]
    summary = compare(*ledgers, experiment=args.name)
    table = format_comparison([summary])
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(table, encoding="utf-8")
        write_comparison_csv([summary], out / "comparison.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sm2", description="Energy-aware successive-halving "
                                     "search over batch size and learning rate.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a search (or a vanilla baseline) from a config file")
    p.add_argument("--config", required=True, help="run config file (YAML or JSON)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="output directory (default: run.out or ./sm2-out)")
    p.add_argument("--power-model", help="file with an energy section overriding the config's")
    p.add_argument("--alpha", type=float, help="override objective.alpha (e.g. 1.0 for performance only)")
    p.add_argument("--vanilla", action="store_true",
                   help="train one fixed config with thorough epochs only, as an energy baseline")
    p.add_argument("--batch-size", type=int, help="batch size for --vanilla")
    p.add_argument("--lr", type=float, help="learning rate for --vanilla")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="schema-check a config and print the effective settings")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--power-model", help="file with an energy section overriding the config's")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="write traces, summary and figures for a ledger")
    p.add_argument("--ledger", required=True, help="ledger.jsonl from a run")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="energy of a tuned run against performance-only and vanilla runs")
    p.add_argument("--alpha1", required=True, help="ledger of the alpha=1 run")
    p.add_argument("--sm2", required=True, help="ledger of the energy-aware run")
    p.add_argument("--vanilla", required=True, help="ledger of the vanilla run")
    p.add_argument("--name", default="experiment", help="row label")
    p.add_argument("--out", help="directory for comparison.txt / comparison.csv")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return exc.exit_code
    except (LedgerError, ComparisonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LEDGER
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SM2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
