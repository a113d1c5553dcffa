"""Repeated unlearning experiments over random samplings of a memorized pool."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..corpus import TargetSet, ValidationSet, assert_disjoint, load_corpus, sample_targets, sample_validation
from ..metrics import ForgettingThreshold, MetricsReport, evaluate, extraction_attack, forgetting_threshold
from ..model import ModelState, init_model, load_checkpoint, save_checkpoint
from ..unlearn import HeldOut, MemorizationError, RunLog, lr_sweep, pretrain, unlearn_batch, unlearn_sequential
from .config import ExperimentConfig

log = logging.getLogger(__name__)

AGGREGATE_KEYS = ["epochs", "el_before", "el_after", "ma_before", "ma_after",
                  "heldout_ma_before", "heldout_ma_after", "heldout_ppl_before", "heldout_ppl_after", "forgotten"]


class PreconditionError(RuntimeError):
    """The starting checkpoint does not memorize the targets."""


def write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seeds": list(cfg.seeds)}


def _config_record(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    d.pop("out_dir")
    return d


def run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "runs" / cfg.config_hash()


# ----------------------------------------------------------------------------
# shared setup: memorized checkpoint, held-out set, threshold


@dataclass
class Setup:
    state: ModelState
    pool: TargetSet
    d_prime: ValidationSet
    heldout: HeldOut
    threshold: ForgettingThreshold
    pretrain_info: dict = field(default_factory=dict)


def _pretrained_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "pretrained" / cfg.pretrain_hash()


def load_data(cfg: ExperimentConfig) -> tuple[TargetSet, ValidationSet]:
    corpus = load_corpus(cfg.corpus)
    valid = load_corpus(cfg.heldout)
    pool = sample_targets(corpus, cfg.pool, cfg.T, cfg.pool_seed, distinct_first=True)
    d_prime = sample_validation(valid, cfg.m, cfg.T, cfg.dprime_seed, exclude=corpus)
    assert_disjoint(d_prime, corpus)
    return pool, d_prime


def memorized_checkpoint(cfg: ExperimentConfig) -> tuple[ModelState, dict]:
    """Load ``cfg.checkpoint`` or pretrain one (cached under ``out_dir/pretrained``)."""
    if cfg.checkpoint:
        state = load_checkpoint(cfg.checkpoint)
        return state, {"source": "checkpoint", "checkpoint_id": state.checkpoint_id}
    where = _pretrained_dir(cfg)
    model_path, info_path = where / "model.unlm", where / "pretrain.json"
    if model_path.is_file() and info_path.is_file():
        return load_checkpoint(model_path), json.loads(info_path.read_text())
    corpus = load_corpus(cfg.corpus)
    pool, d_prime = load_data(cfg)
    info = {"source": "pretrain", "pretrain_hash": cfg.pretrain_hash()}
    try:
        res = pretrain(init_model(cfg.model_config()), corpus, pool, cfg.pretrain_steps, cfg.lr_pre,
                       batch_size=cfg.pretrain_batch, seed=cfg.model_seed, check_every=cfg.check_every,
                       d_prime=d_prime, metrics_cfg=cfg.metrics_config())
        info["memorized"] = True
    except MemorizationError as exc:
        if cfg.require_memorized:
            raise PreconditionError(str(exc)) from exc
        res = exc.result
        info["memorized"] = False
        info["diagnostic"] = str(exc)
    info.update(steps=res.steps, target_ma=res.target_ma, target_el=res.target_el,
                history=res.history, checkpoint_id=res.state.checkpoint_id)
    save_checkpoint(res.state, model_path)
    write_json(info_path, info)
    return res.state, info


def prepare(cfg: ExperimentConfig) -> Setup:
    pool, d_prime = load_data(cfg)
    state, info = memorized_checkpoint(cfg)
    thr = forgetting_threshold(state, d_prime, cfg.metrics_config())
    return Setup(state, pool, d_prime, HeldOut(d_prime.sequences), thr, info)


def threshold_record(thr: ForgettingThreshold) -> dict:
    return {"el": thr.el, "ma": thr.ma, "n": thr.cfg.n, "d_prime": thr.d_prime, "checkpoint_id": thr.checkpoint_id}


def sample_repetition(pool: TargetSet, s: int, seed: int) -> TargetSet:
    """s targets drawn without replacement from the pool, in pool order."""
    rng = np.random.default_rng(seed)
    return pool.subset(sorted(int(i) for i in rng.choice(len(pool), s, replace=False)))


def target_ids(targets: TargetSet) -> list[str]:
    return [f"{name}@{off}" for name, off in targets.offsets]


# ----------------------------------------------------------------------------
# one repetition


def _trajectory(mode: str, logs: list[RunLog]) -> list[dict]:
    """Epoch records of every chunk on one cumulative epoch axis."""
    rows, offset = [], 0
    for chunk, lg in enumerate(logs):
        for r in lg.records:
            if chunk and r.epoch == 0:
                continue
            rows.append({"epoch": offset + r.epoch, "chunk": chunk, "loss": r.loss, "el": r.el, "ma": r.ma,
                         "heldout_ma": r.heldout_ma, "heldout_ppl": r.heldout_ppl, "forgotten": r.forgotten})
        offset += lg.epochs
    return rows


def run_repetition(cfg: ExperimentConfig, setup: Setup, k: int) -> dict:
    seed = cfg.seeds[k]
    out = run_dir(cfg) / f"rep-{k}"
    targets = sample_repetition(setup.pool, cfg.s, seed)
    ids = target_ids(targets)
    X = targets.array()
    mcfg = cfg.metrics_config()
    state = setup.state
    rec = {"rep": k, "seed": seed, "targets": ids, "domains": list(targets.domains), **_provenance(cfg)}
    before = evaluate(state, X, mcfg, ids)
    if cfg.require_memorized and (min(before.ma) < 1.0 or before.el_mean <= setup.threshold.el):
        rec.update(status="precondition-failed",
                   diagnostic=f"targets not memorized: min MA {min(before.ma):.3f}, "
                              f"mean EL {before.el_mean:.3f} vs threshold {setup.threshold.el:.3f}")
        log.error("rep %d: %s", k, rec["diagnostic"])
        write_json(out / "metrics.json", rec)
        return rec
    save_checkpoint(state, out / "checkpoints" / "epoch-0.unlm")
    prefix = cfg.T // 2
    attacks_before = [extraction_attack(state, x, prefix, cfg.n) for x in X[:cfg.attack_targets]]
    ucfg = cfg.unlearn_config(seed)
    if cfg.mode == "sequential":
        final, seq = unlearn_sequential(state, targets, setup.threshold, ucfg, setup.heldout)
        logs = seq.chunk_logs
        status = "converged" if not seq.violations and all(lg.status == "converged" for lg in logs) else (
            "error" if any(lg.status == "error" for lg in logs) else "epoch-cap")
        rec["sequential"] = seq.to_json()
    else:
        final, run = unlearn_batch(state, targets, setup.threshold, ucfg, setup.heldout)
        logs = [run]
        status = run.status
    after = evaluate(final, X, mcfg, ids)
    attacks_after = [extraction_attack(final, x, prefix, cfg.n) for x in X[:cfg.attack_targets]]
    save_checkpoint(final, out / "checkpoints" / "final.unlm")

    lines = []
    for chunk, lg in enumerate(logs):
        for line in lg.to_jsonl().splitlines():
            lines.append(json.dumps({**json.loads(line), "chunk": chunk, **_provenance(cfg)}, sort_keys=True))
    (out / "logs.jsonl").write_text("\n".join(lines) + "\n")
    for i, (a, b) in enumerate(zip(attacks_before, attacks_after)):
        head = f"# config {cfg.config_hash()} rep {k} seed {seed} target {ids[i]} prefix {prefix}\n"
        (out / f"attack-{i}.txt").write_text(head + "== before unlearning\n" + a.render()
                                              + "== after unlearning\n" + b.render())

    first, last = logs[0].records[0], logs[-1].records[-1]
    epochs = sum(lg.epochs for lg in logs)
    rec.update(
        status=status,
        epochs=epochs,
        epochs_to_forget=epochs if status == "converged" else None,
        threshold=threshold_record(setup.threshold),
        before=before.to_json(setup.threshold),
        after=after.to_json(setup.threshold),
        el_before=before.el_mean, el_after=after.el_mean,
        ma_before=before.ma_mean, ma_after=after.ma_mean,
        heldout_ma_before=first.heldout_ma, heldout_ma_after=last.heldout_ma,
        heldout_ppl_before=first.heldout_ppl, heldout_ppl_after=last.heldout_ppl,
        forgotten=bool(after.to_json(setup.threshold)["forgotten"]),
        attacks=[{"target": ids[i], "overlap_before": a.overlap, "overlap_after": b.overlap}
                 for i, (a, b) in enumerate(zip(attacks_before, attacks_after))],
        trajectory=_trajectory(cfg.mode, logs),
    )
    write_json(out / "metrics.json", rec)
    return rec


# ----------------------------------------------------------------------------
# aggregation


def aggregate(reps: list[dict]) -> dict:
    done = [r for r in reps if "epochs" in r]
    agg = {"completed": len(done), "failed": [r["rep"] for r in reps if "epochs" not in r]}
    for key in AGGREGATE_KEYS:
        vals = [float(r[key]) for r in done if r.get(key) is not None]
        agg[key] = float(np.mean(vals)) if vals else None
    return agg


def per_domain(reps: list[dict]) -> dict:
    """Mean per-sequence EL/MA before and after unlearning, grouped by target domain."""
    acc: dict[str, dict[str, list]] = {}
    for r in reps:
        if "before" not in r:
            continue
        for dom, b, a in zip(r["domains"], r["before"]["per_sequence"], r["after"]["per_sequence"]):
            d = acc.setdefault(dom, {"el_before": [], "el_after": [], "ma_before": [], "ma_after": []})
            d["el_before"].append(b["el"])
            d["ma_before"].append(b["ma"])
            d["el_after"].append(a["el"])
            d["ma_after"].append(a["ma"])
    return {dom: {"count": len(v["el_before"]), **{k: float(np.mean(x)) for k, x in v.items()}}
            for dom, v in sorted(acc.items())}


REPORT_COLUMNS = ["config_hash", "rep", "seed", "status"] + AGGREGATE_KEYS


def report_rows(report: dict) -> list[list]:
    h = report["config_hash"]
    rows = [[h, r["rep"], r["seed"], r["status"]] + [r.get(k) for k in AGGREGATE_KEYS]
            for r in report["repetitions"]]
    rows.append([h, "mean", "", ""] + [report["aggregate"][k] for k in AGGREGATE_KEYS])
    return rows


def write_report(cfg: ExperimentConfig, report: dict) -> Path:
    where = run_dir(cfg)
    write_json(where / "report.json", report)
    write_csv(where / "report.csv", REPORT_COLUMNS, report_rows(report))
    return where / "report.json"


def run_experiment(cfg: ExperimentConfig, setup: Setup | None = None, charts: bool = True) -> dict:
    """Every repetition, then aggregates, report files and charts."""
    cfg.validate()
    setup = setup or prepare(cfg)
    reps = []
    for k in range(cfg.repetitions):
        reps.append(run_repetition(cfg, setup, k))
        log.info("rep %d: %s", k, reps[-1]["status"])
    report = {
        **_provenance(cfg),
        "config": _config_record(cfg),
        "pretrain": {k: v for k, v in setup.pretrain_info.items() if k != "history"},
        "threshold": threshold_record(setup.threshold),
        "repetitions": reps,
        "aggregate": aggregate(reps),
        "per_domain": per_domain(reps),
    }
    write_report(cfg, report)
    if charts:
        from .plotting import emit_charts

        report["charts"] = [str(p.relative_to(run_dir(cfg))) for p in emit_charts(report, run_dir(cfg) / "charts")]
        write_report(cfg, report)
    return report


def run_sweep(cfg: ExperimentConfig, setup: Setup | None = None) -> dict:
    """Learning-rate sweep on the targets of the first repetition."""
    setup = setup or prepare(cfg)
    targets = sample_repetition(setup.pool, cfg.s, cfg.seeds[0])
    lrs = cfg.lrs or [cfg.lr]
    sweep, logs = lr_sweep(setup.state, targets, setup.threshold, lrs, cfg.unlearn_config(cfg.seeds[0]), setup.heldout)
    doc = {**_provenance(cfg), "config": _config_record(cfg), "threshold": threshold_record(setup.threshold),
           "targets": target_ids(targets), **sweep.to_json(),
           "trajectories": {repr(lr): _trajectory("batch", [lg]) for lr, lg in zip(lrs, logs)}}
    where = run_dir(cfg)
    write_json(where / "sweep.json", doc)
    cols = list(asdict(sweep.rows[0]).keys()) if sweep.rows else ["lr"]
    write_csv(where / "sweep.csv", ["config_hash"] + cols,
              [[cfg.config_hash()] + list(asdict(r).values()) for r in sweep.rows])
    from .plotting import sweep_chart

    sweep_chart(doc, where / "charts")
    return doc


def load_reports(out_dir) -> list[tuple[Path, dict]]:
    runs = Path(out_dir) / "runs"
    found = sorted(runs.glob("*/report.json")) if runs.is_dir() else []
    return [(p, json.loads(p.read_text())) for p in found]
