"""SVG charts with CSV sidecars; the CSV holds exactly the plotted values."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import write_csv  # noqa: E402

log = logging.getLogger(__name__)

STYLE = {
    "svg.hashsalt": "unlearnlab",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "lines.markersize": 3.5,
}

TRAJECTORY_COLUMNS = ["config_hash", "seed", "epoch", "chunk", "loss", "el", "ma", "heldout_ma", "heldout_ppl", "forgotten"]


def _save(fig, path: Path, description: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # no creation date so reruns are byte-identical
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
    plt.close(fig)
    return path


def trajectory_chart(rep: dict, out: Path, threshold: dict | None = None) -> list[Path]:
    """Epoch against target EL/MA and the held-out proxies for one repetition."""
    rows = rep.get("trajectory") or []
    stem = out / f"rep-{rep['rep']}-trajectory"
    if not rows:
        log.info("rep %s has no trajectory; chart skipped", rep.get("rep"))
        return []
    csv_path = write_csv(stem.with_suffix(".csv"), TRAJECTORY_COLUMNS,
                         [[rep["config_hash"], rep["seed"]] + [r[c] for c in TRAJECTORY_COLUMNS[2:]] for r in rows])
    ep = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        a1.plot(ep, [r["el"] for r in rows], "o-", label="EL (targets)")
        a1.plot(ep, [r["ma"] for r in rows], "s-", label="MA (targets)")
        if threshold:
            a1.axhline(threshold["el"], ls="--", lw=0.8, color="C0")
            a1.axhline(threshold["ma"], ls="--", lw=0.8, color="C1")
        a1.set_xlabel("epoch")
        a1.set_ylim(-0.02, 1.02)
        a1.legend(frameon=False)
        ma = [r["heldout_ma"] for r in rows]
        if all(v is not None for v in ma):
            a2.plot(ep, ma, "o-", color="C2", label="held-out MA")
            a2.set_ylabel("held-out MA")
            tw = a2.twinx()
            tw.plot(ep, [r["heldout_ppl"] for r in rows], "^-", color="C3", label="held-out ppl")
            tw.set_ylabel("held-out perplexity")
        a2.set_xlabel("epoch")
        fig.suptitle(f"rep {rep['rep']} seed {rep['seed']}")
        fig.tight_layout()
        svg = _save(fig, stem.with_suffix(".svg"), f"config {rep['config_hash']} seed {rep['seed']}")
    return [svg, csv_path]


def comparison_chart(report: dict, out: Path) -> list[Path]:
    """Before/after target EL and MA for every completed repetition."""
    reps = [r for r in report["repetitions"] if "el_before" in r]
    if not reps:
        log.info("no completed repetitions; comparison chart skipped")
        return []
    cols = ["config_hash", "rep", "seed", "el_before", "el_after", "ma_before", "ma_after",
            "heldout_ma_before", "heldout_ma_after", "epochs"]
    csv_path = write_csv(out / "repetitions.csv", cols, [[r[c] for c in cols] for r in reps])
    x = list(range(len(reps)))
    w = 0.2
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        for j, (key, label) in enumerate([("el_before", "EL before"), ("el_after", "EL after"),
                                          ("ma_before", "MA before"), ("ma_after", "MA after")]):
            ax.bar([i + (j - 1.5) * w for i in x], [r[key] for r in reps], w, label=label)
        thr = report["threshold"]
        ax.axhline(thr["el"], ls="--", lw=0.8, color="C0")
        ax.axhline(thr["ma"], ls=":", lw=0.8, color="C2")
        ax.set_xticks(x, [f"rep {r['rep']}" for r in reps])
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, ncol=4, fontsize=7)
        fig.tight_layout()
        svg = _save(fig, out / "repetitions.svg", f"config {report['config_hash']} seeds {report['seeds']}")
    return [svg, csv_path]


def emit_charts(report: dict, out) -> list[Path]:
    out = Path(out)
    paths = []
    for rep in report["repetitions"]:
        paths += trajectory_chart(rep, out, report.get("threshold"))
    paths += comparison_chart(report, out)
    return paths


def sweep_chart(doc: dict, out) -> list[Path]:
    """Epochs to forget and held-out MA after unlearning against learning rate."""
    out = Path(out)
    rows = doc["rows"]
    if not rows:
        log.info("empty sweep; chart skipped")
        return []
    cols = ["lr", "status", "epochs_to_forget", "epochs", "heldout_ma_before", "heldout_ma_after"]
    csv_path = write_csv(out / "sweep.csv", ["config_hash"] + cols, [[doc["config_hash"]] + [r[c] for c in cols] for r in rows])
    lrs = [r["lr"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        a1.plot(lrs, [r["epochs"] for r in rows], "o-")
        a1.set_xscale("log")
        a1.set_xlabel("learning rate")
        a1.set_ylabel("epochs run")
        a2.plot(lrs, [r["heldout_ma_after"] for r in rows], "s-", color="C2")
        a2.set_xscale("log")
        a2.set_xlabel("learning rate")
        a2.set_ylabel("held-out MA after")
        fig.tight_layout()
        svg = _save(fig, out / "sweep.svg", f"config {doc['config_hash']} seeds {doc['seeds']}")
    return [svg, csv_path]
