"""Post-run reporting: per-epoch traces, exploration curves, totals and comparisons.

Everything here is a pure function of ledger contents, so identical ledgers
give byte-identical files (figures included: PNG metadata is stripped).
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .core import (EpochEnergyRecord, EpochMetricsRecord, ExplorationTrace, FinalSelection,
                   HalvingDecision, Mode, RunLedger, RunStarted, SM2Error, ledger_total_energy)

TRACE_COLUMNS = ["config_id", "batch_size", "round", "epoch_index", "mode", "exploratory",
                 "performance", "energy_wh", "lr"]
EXPLORE_COLUMNS = ["lr_index", "lr", "mean_loss", "curvature", "in_selected_window", "selected"]
COMPARE_COLUMNS = ["experiment", "energy_alpha1_wh", "energy_sm2_wh", "energy_vanilla_wh",
                   "reduction_pct", "parity", "parity_symmetric"]


class ComparisonError(SM2Error):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


def trace_rows(ledger) -> dict:
    """Rows per config id, one per epoch, in epoch order."""
    header = next((e for e in ledger if isinstance(e, RunStarted)), None)
    sizes = {c["config_id"]: c["batch_size"] for c in header.configs} if header else {}
    metrics = {(m.config_id, m.epoch_index): m for m in ledger if isinstance(m, EpochMetricsRecord)}
    lrs = {(t.config_id, t.epoch_index): t.selected_lr for t in ledger if isinstance(t, ExplorationTrace)}
    rows = defaultdict(list)
    for e in ledger:
        if not isinstance(e, EpochEnergyRecord):
            continue
        m = metrics.get((e.config_id, e.epoch_index))
        lr = m.selected_lr if m is not None else lrs.get((e.config_id, e.epoch_index))
        rows[e.config_id].append({
            "config_id": e.config_id, "batch_size": sizes.get(e.config_id, ""), "round": e.round,
            "epoch_index": e.epoch_index, "mode": e.mode.value,
            "exploratory": int(e.mode is Mode.EXPLORATORY),
            "performance": m.performance if m is not None else None,
            "energy_wh": e.energy_wh, "lr": lr,
        })
    return dict(sorted(rows.items()))


def emit_traces(ledger, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for cid, rows in trace_rows(ledger).items():
        path = out_dir / f"trace_config{cid}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in TRACE_COLUMNS])
        paths.append(path)
    return paths


def write_exploration_csv(path, analysis) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    win = analysis.selected_window
    sel_index = None if analysis.fallback else win[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPLORE_COLUMNS)
        for j, (lr, loss) in enumerate(zip(analysis.lrs, analysis.mean_loss_per_lr)):
            curv = analysis.curvature[j - 1] if 1 <= j <= len(analysis.curvature) else None
            inside = win is not None and win[0] + 1 <= j <= win[1]
            w.writerow([j, _fmt(lr), _fmt(loss), _fmt(curv), int(inside), int(j == sel_index)])
    return path


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    path.write_bytes(buf.getvalue())
    return path


def render_traces(ledger, path) -> Path:
    """Performance, energy per epoch and learning rate against epoch, one line per config.

    Exploratory epochs are marked with dotted vertical lines.
    """
    rows = trace_rows(ledger)
    fig = Figure(figsize=(13, 3.6))
    axes = fig.subplots(1, 3)
    titles = ("Performance", "Energy per epoch (Wh)", "Learning rate")
    keys = ("performance", "energy_wh", "lr")
    for ax, title, key in zip(axes, titles, keys):
        for cid, rs in rows.items():
            pts = [(r["epoch_index"], r[key]) for r in rs if r[key] is not None]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker=".", lw=1, label=f"batch {rs[0]['batch_size']}")
        explored = sorted({r["epoch_index"] for rs in rows.values() for r in rs if r["exploratory"]})
        for x in explored:
            ax.axvline(x, ls=":", lw=0.8, color="0.5")
        ax.set_title(title)
        ax.set_xlabel("epoch")
    axes[2].set_yscale("log")
    axes[0].legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, Path(path))


def render_exploration(ledger, round_index: int, path) -> Path:
    """Loss against learning rate for every config explored in one round, with the chosen window."""
    traces = [t for t in ledger if isinstance(t, ExplorationTrace) and t.round == round_index]
    fig = Figure(figsize=(9, 3.6))
    ax_loss, ax_curv = fig.subplots(1, 2)
    for t in traces:
        pts = [(lr, v) for lr, v in zip(t.lrs, t.mean_losses) if v is not None and math.isfinite(v)]
        if pts:
            line, = ax_loss.plot(*zip(*pts), marker=".", lw=1, label=f"config {t.config_id}")
            cpts = [(lr, c) for lr, c in zip(t.lrs[1:-1], t.curvature) if c is not None and math.isfinite(c)]
            if cpts:
                ax_curv.plot(*zip(*cpts), marker=".", lw=1, color=line.get_color())
            if t.selected_window:
                lo, hi = t.lrs[t.selected_window[0] + 1], t.lrs[t.selected_window[1]]
                for ax in (ax_loss, ax_curv):
                    ax.axvline(lo, ls=":", lw=0.8, color=line.get_color())
                    ax.axvline(hi, ls=":", lw=0.8, color=line.get_color())
    for ax, title in ((ax_loss, "Mean loss"), (ax_curv, "Loss curvature")):
        ax.set_xscale("log")
        ax.set_xlabel("learning rate")
        ax.set_title(f"{title}, round {round_index}")
    if traces:
        ax_loss.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, Path(path))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def round_subtotals(ledger) -> dict:
    totals = defaultdict(float)
    for e in ledger:
        if isinstance(e, EpochEnergyRecord):
            totals[e.round] += e.energy_wh
    return dict(sorted(totals.items()))


def run_summary(ledger) -> str:
    lines = []
    header = next((e for e in ledger if isinstance(e, RunStarted)), None)
    final = next((e for e in ledger if isinstance(e, FinalSelection)), None)
    if header is not None:
        lines.append(f"run: {header.label}  seed: {header.seed}  fingerprint: {header.fingerprint}")
        lines.append("configs: " + ", ".join(f"{c['config_id']}:b{c['batch_size']}" for c in header.configs))
    for d in (e for e in ledger if isinstance(e, HalvingDecision)):
        lines.append(f"round {d.round}: survivors {d.survivors} dropped {d.dropped}")
        lines.append(f"  {'config':>6} {'batch':>6} {'P':>7} {'E':>7} {'LR':>7} {'score':>7}")
        for entry in sorted(d.entries, key=lambda x: d.ranking.index(x["config_id"])):
            n = entry["normalized"]
            flag = " *" if entry["placeholder"] else ""
            lines.append(f"  {entry['config_id']:>6} {entry['batch_size']:>6} {n['P']:7.4f} {n['E']:7.4f} "
                         f"{n['LR']:7.4f} {entry['score']:7.4f}{flag}")
    for r, wh in round_subtotals(ledger).items():
        lines.append(f"round {r} energy: {wh:.6f} Wh")
    lines.append(f"total energy: {ledger_total_energy(ledger):.6f} Wh")
    if final is not None:
        lines.append(f"final config: {final.config_id} (batch {final.batch_size}) lr {final.final_lr:.6g} "
                     f"performance {final.performance:.6g} [{final.metric_polarity.value}] "
                     f"epochs {final.total_epochs}" + (" TRUNCATED" if final.truncated else ""))
    return "\n".join(lines) + "\n"


def write_report(ledger, out_dir, figures: bool = True) -> list:
    """Traces, summary text and (optionally) figures for one ledger."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = emit_traces(ledger, out_dir)
    summary = out_dir / "summary.txt"
    summary.write_text(run_summary(ledger), encoding="utf-8")
    paths.append(summary)
    if figures:
        paths.append(render_traces(ledger, out_dir / "traces.png"))
        rounds = sorted({t.round for t in ledger if isinstance(t, ExplorationTrace)})
        for r in rounds:
            paths.append(render_exploration(ledger, r, out_dir / f"exploration_round{r}.png"))
    return paths


# ---------------------------------------------------------------------------
# Comparison against the performance-only and vanilla baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonSummary:
    experiment: str
    energy_alpha1_wh: float
    energy_sm2_wh: float
    energy_vanilla_wh: float
    reduction_pct: float
    parity: float
    parity_symmetric: float


def parity(energy_sm2_wh: float, energy_vanilla_wh: float) -> float:
    """Energy of the tuned run in units of one vanilla training run."""
    if not (energy_sm2_wh > 0 and energy_vanilla_wh > 0):
        raise ValueError("parity needs two positive energies")
    return energy_sm2_wh / energy_vanilla_wh


def symmetric_parity(energy_a_wh: float, energy_b_wh: float) -> float:
    if not (energy_a_wh > 0 and energy_b_wh > 0):
        raise ValueError("parity needs two positive energies")
    return max(energy_a_wh, energy_b_wh) / min(energy_a_wh, energy_b_wh)


def summarize(experiment: str, energy_alpha1_wh: float, energy_sm2_wh: float,
              energy_vanilla_wh: float) -> ComparisonSummary:
    for v in (energy_alpha1_wh, energy_sm2_wh, energy_vanilla_wh):
        if v < 0:
            raise ValueError("energies must be non-negative")
    if energy_alpha1_wh <= 0:
        raise ValueError("the performance-only energy must be positive")
    reduction = (energy_alpha1_wh - energy_sm2_wh) / energy_alpha1_wh * 100.0
    return ComparisonSummary(experiment, energy_alpha1_wh, energy_sm2_wh, energy_vanilla_wh, reduction,
                             parity(energy_sm2_wh, energy_vanilla_wh),
                             symmetric_parity(energy_sm2_wh, energy_vanilla_wh))


def compare(run_alpha1: RunLedger, run_sm2: RunLedger, run_vanilla: RunLedger,
            experiment: str = "experiment") -> ComparisonSummary:
    prints = []
    for name, led in (("alpha1", run_alpha1), ("sm2", run_sm2), ("vanilla", run_vanilla)):
        header = next((e for e in led if isinstance(e, RunStarted)), None)
        if header is None:
            raise ComparisonError(f"{name} ledger has no run header")
        if not any(isinstance(e, FinalSelection) for e in led):
            raise ComparisonError(f"{name} ledger is incomplete (no final selection)")
        prints.append(header.fingerprint)
    if len(set(prints)) != 1:
        raise ComparisonError(f"experiment fingerprints differ: {prints}")
    return summarize(experiment, ledger_total_energy(run_alpha1), ledger_total_energy(run_sm2),
                     ledger_total_energy(run_vanilla))


def format_comparison(summaries: Sequence[ComparisonSummary]) -> str:
    lines = [f"{'Experiment':<14}{'alpha=1':>10}{'alpha=0.75':>18}{'vanilla':>10}{'parity':>9}{'sym.':>7}"]
    for s in summaries:
        tuned = f"{s.energy_sm2_wh:.1f} ({-s.reduction_pct:+.0f}%)"
        lines.append(f"{s.experiment:<14}{s.energy_alpha1_wh:>10.1f}{tuned:>18}{s.energy_vanilla_wh:>10.1f}"
                     f"{s.parity:>9.3f}{s.parity_symmetric:>7.2f}")
    lines.append("Energies in Wh. parity = tuned / vanilla; sym. = larger / smaller of the two.")
    return "\n".join(lines) + "\n"


def write_comparison_csv(summaries: Sequence[ComparisonSummary], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for s in summaries:
            w.writerow([_fmt(getattr(s, c)) for c in COMPARE_COLUMNS])
    return path
