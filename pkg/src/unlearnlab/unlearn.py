"""Memorization pretraining and unlikelihood unlearning drivers."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .corpus import BOS, TargetSet, training_windows
from .metrics import (
    ForgettingThreshold,
    MetricsConfig,
    MetricsReport,
    evaluate,
    forgetting_threshold,
    is_forgotten,
    memorization_accuracy_many,
)
from .model import ModelState, forward_logits

log = logging.getLogger(__name__)


class MemorizationError(RuntimeError):
    """Pretraining did not reach the memorized starting condition.

    ``result`` holds the partially trained state and its history.
    """

    result: "PretrainResult | None" = None


def _teacher_inputs(X: np.ndarray, bos: int = BOS) -> np.ndarray:
    return np.concatenate([np.full((len(X), 1), bos, dtype=np.int64), X[:, :-1]], axis=1)


def _apply_grads(state: ModelState, opt: ad.AdamState, lr: float) -> None:
    ad.adam_step(state.params, {k: p.grad for k, p in state.params.items() if p.grad is not None}, opt, lr)


# ----------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    state: ModelState
    steps: int
    target_ma: float
    target_el: float | None
    threshold: ForgettingThreshold | None
    history: list[dict] = field(default_factory=list)


def pretrain(state: ModelState, corpus, targets: TargetSet, steps: int, lr_pre: float = 1e-3, *,
             batch_size: int = 16, seed: int = 0, check_every: int = 25, d_prime=None,
             metrics_cfg: MetricsConfig = MetricsConfig()) -> PretrainResult:
    """NLL training on corpus windows with every target present in each batch.

    Stops once every target has MA = 1.0 and, when ``d_prime`` is given,
    the targets' mean EL exceeds the threshold measured on the current
    model. Raises :class:`MemorizationError` if ``steps`` run out first.
    """
    state = state.copy()
    if steps <= 0:
        return PretrainResult(state, 0, float("nan"), None, None)
    X = targets.array()
    pool = training_windows(corpus, targets.length) if corpus is not None else X
    rng = np.random.default_rng(seed)
    opt = ad.AdamState()
    history = []
    ma = el = 0.0
    for step in range(1, steps + 1):
        batch = np.concatenate([X, pool[rng.integers(0, len(pool), batch_size)]]) if batch_size else X
        state.zero_grad()
        with ad.Tape() as tape:
            loss = ad.nll_loss(forward_logits(state, _teacher_inputs(batch, state.bos_id)), batch)
        ad.backward(tape, loss)
        _apply_grads(state, opt, lr_pre)
        if step % check_every and step != steps:
            continue
        per = memorization_accuracy_many(state, X)
        ma = float(per.mean())
        history.append({"step": step, "loss": float(loss.item()), "target_ma": ma})
        log.info("pretrain step %d loss %.4f target MA %.3f", step, loss.item(), ma)
        if per.min() < 1.0:
            continue
        if d_prime is None:
            return PretrainResult(state, step, ma, None, None, history)
        thr = forgetting_threshold(state, d_prime, metrics_cfg)
        el = float(np.mean(evaluate(state, X, metrics_cfg).el))
        history[-1].update(target_el=el, threshold_el=thr.el, threshold_ma=thr.ma)
        if el > thr.el:
            return PretrainResult(state, step, ma, el, thr, history)
    err = MemorizationError(
        f"targets not memorized after {steps} steps: mean MA {ma:.3f}, mean EL {el:.3f}; "
        "increase steps or lr_pre, or shrink the target set")
    err.result = PretrainResult(state, steps, ma, el or None, None, history)
    raise err


# ----------------------------------------------------------------------------
# unlearning


@dataclass
class UnlearnConfig:
    lr: float = 5e-5
    max_epochs: int = 40
    batch_size: int | None = None  # None means all s targets in one batch
    chunk_size: int | None = None
    eval_every: int = 1
    seed: int = 0
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self, s: int) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if s < 1:
            raise ValueError("need at least one target")
        if self.max_epochs < 0 or self.eval_every < 1:
            raise ValueError("max_epochs must be >= 0 and eval_every >= 1")
        if self.chunk_size is not None and not 1 <= self.chunk_size <= s:
            raise ValueError("chunk_size must lie in [1, s]")


@dataclass
class EpochRecord:
    epoch: int
    loss: float | None
    el: float
    ma: float
    forgotten: bool
    heldout_nll: float | None = None
    heldout_ppl: float | None = None
    heldout_ma: float | None = None
    el_per_seq: list[float] = field(default_factory=list)
    ma_per_seq: list[float] = field(default_factory=list)
    forgotten_per_seq: list[bool] = field(default_factory=list)


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    status: str = "running"
    epochs_to_forget: int | None = None
    lr: float = 0.0
    threshold: dict = field(default_factory=dict)
    gradient_sources: list[str] = field(default_factory=list)
    note: str = ""

    @property
    def epochs(self) -> int:
        return self.records[-1].epoch if self.records else 0

    @property
    def first(self) -> EpochRecord:
        return self.records[0]

    @property
    def last(self) -> EpochRecord:
        return self.records[-1]

    def summary(self) -> dict:
        return {"type": "summary", "status": self.status, "epochs": self.epochs,
                "epochs_to_forget": self.epochs_to_forget, "lr": self.lr, "threshold": self.threshold,
                "gradient_sources": self.gradient_sources, "note": self.note}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "epoch", **asdict(r)}, sort_keys=True) for r in self.records]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"


@dataclass
class HeldOut:
    """Frozen held-out sequences used as the capability-retention proxy."""

    sequences: list[np.ndarray]

    def measure(self, state: ModelState) -> tuple[float, float, float]:
        X = np.stack(self.sequences)
        total = 0.0
        for start in range(0, len(X), 64):
            chunk = X[start:start + 64]
            loss = ad.nll_loss(forward_logits(state, _teacher_inputs(chunk, state.bos_id)), chunk)
            total += float(loss.item()) * len(chunk)
        nll = total / len(X)
        ma = float(memorization_accuracy_many(state, X).mean())
        return nll, math.exp(nll), ma


def _record(state, X, epoch, loss, threshold, cfg: UnlearnConfig, heldout: HeldOut | None) -> EpochRecord:
    rep: MetricsReport = evaluate(state, X, cfg.metrics)
    per_thr = [e <= threshold.el and m <= threshold.ma for e, m in zip(rep.el, rep.ma)]
    rec = EpochRecord(epoch, loss, rep.el_mean, rep.ma_mean, is_forgotten(rep, threshold),
                      el_per_seq=rep.el, ma_per_seq=rep.ma, forgotten_per_seq=per_thr)
    if heldout is not None:
        rec.heldout_nll, rec.heldout_ppl, rec.heldout_ma = heldout.measure(state)
    return rec


def unlearn_batch(state: ModelState, targets: TargetSet, threshold: ForgettingThreshold,
                  cfg: UnlearnConfig = UnlearnConfig(), heldout: HeldOut | None = None) -> tuple[ModelState, RunLog]:
    """Minimize mean unlikelihood loss over the targets until they count as forgotten.

    One epoch is one pass over the targets; with the default batch size
    (all targets) that is a single Adam step. Metrics are evaluated every
    ``cfg.eval_every`` epochs and the run stops at the first evaluation
    where the aggregate EL and MA are at or below ``threshold``.
    """
    X = targets.array()
    s = len(X)
    cfg.validate(s)
    if threshold.cfg != cfg.metrics:
        raise ValueError("threshold was computed with a different metrics config")
    state = state.copy()
    bs = cfg.batch_size or s
    ids = [f"{name}@{off}" for name, off in targets.offsets] or [str(i) for i in range(s)]
    run = RunLog(lr=cfg.lr, threshold={"el": threshold.el, "ma": threshold.ma,
                                       "checkpoint_id": threshold.checkpoint_id},
                 gradient_sources=ids)
    run.note = "threshold frozen at the pre-unlearning checkpoint"
    rec = _record(state, X, 0, None, threshold, cfg, heldout)
    run.records.append(rec)
    if rec.forgotten:
        run.status, run.epochs_to_forget = "converged", 0
        return state, run
    opt = ad.AdamState()
    rng = np.random.default_rng(cfg.seed)
    last_good = state.copy()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(s) if bs < s else np.arange(s)
        losses = []
        try:
            for start in range(0, s, bs):
                batch = X[order[start:start + bs]]
                state.zero_grad()
                with ad.Tape() as tape:
                    logits = forward_logits(state, _teacher_inputs(batch, state.bos_id))
                    loss = ad.unlikelihood_loss(logits, batch)
                ad.backward(tape, loss)
                _apply_grads(state, opt, cfg.lr)
                losses.append(float(loss.item()))
            if epoch % cfg.eval_every and epoch != cfg.max_epochs:
                continue
            rec = _record(state, X, epoch, float(np.mean(losses)), threshold, cfg, heldout)
        except ad.NonFiniteError as exc:
            log.error("unlearning aborted at epoch %d: %s", epoch, exc)
            run.status = "error"
            run.note += f"; aborted at epoch {epoch}: {exc}"
            return last_good, run
        run.records.append(rec)
        last_good = state.copy()
        log.info("epoch %d UL %.4f EL %.4f MA %.4f", epoch, rec.loss, rec.el, rec.ma)
        if rec.forgotten:
            run.status, run.epochs_to_forget = "converged", epoch
            return state, run
    run.status = "epoch-cap"
    return state, run


@dataclass
class SequentialResult:
    chunk_logs: list[RunLog]
    chunk_ids: list[list[int]]
    final_el: list[float] = field(default_factory=list)
    final_ma: list[float] = field(default_factory=list)
    final_forgotten: list[bool] = field(default_factory=list)
    final_heldout: tuple | None = None
    violations: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "chunks": [{"targets": ids, "status": lg.status, "epochs": lg.epochs} for ids, lg in zip(self.chunk_ids, self.chunk_logs)],
            "final": [{"chunk": i, "el": e, "ma": m, "forgotten": f}
                      for i, (e, m, f) in enumerate(zip(self.final_el, self.final_ma, self.final_forgotten))],
            "violations": self.violations,
        }


def unlearn_sequential(state: ModelState, targets: TargetSet, threshold: ForgettingThreshold,
                       cfg: UnlearnConfig, heldout: HeldOut | None = None) -> tuple[ModelState, SequentialResult]:
    """Unlearn ``chunk_size`` targets at a time, then re-check every chunk on the final model."""
    s = len(targets)
    cfg.validate(s)
    size = cfg.chunk_size or s
    chunks = [list(range(i, min(i + size, s))) for i in range(0, s, size)]
    logs = []
    inner = replace(cfg, chunk_size=None)
    for idx in chunks:
        state, run = unlearn_batch(state, targets.subset(idx), threshold, inner, heldout)
        logs.append(run)
        if run.status == "error":
            break
    result = SequentialResult(logs, chunks)
    for i, idx in enumerate(chunks):
        rep = evaluate(state, targets.subset(idx).array(), cfg.metrics)
        result.final_el.append(rep.el_mean)
        result.final_ma.append(rep.ma_mean)
        ok = is_forgotten(rep, threshold)
        result.final_forgotten.append(ok)
        if not ok:
            result.violations.append(i)
    if result.violations:
        log.warning("chunks %s are no longer below the forgetting threshold", result.violations)
    if heldout is not None:
        result.final_heldout = heldout.measure(state)
    return state, result


@dataclass
class SweepRow:
    lr: float
    status: str
    epochs_to_forget: int | None
    epochs: int
    heldout_ppl_before: float | None
    heldout_ppl_after: float | None
    heldout_ma_before: float | None
    heldout_ma_after: float | None


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)
    monotone: bool = True
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "monotone": self.monotone, "flags": self.flags}


def lr_sweep(state: ModelState, targets: TargetSet, threshold: ForgettingThreshold, lrs,
             cfg: UnlearnConfig = UnlearnConfig(), heldout: HeldOut | None = None) -> tuple[SweepReport, list[RunLog]]:
    """Independent unlearning runs from the same checkpoint, one per learning rate."""
    report = SweepReport()
    logs = []
    for lr in lrs:
        if lr <= 0:
            raise ValueError("learning rates must be positive")
        arm = replace(cfg, lr=lr)
        _, run = unlearn_batch(state, targets, threshold, arm, heldout)
        logs.append(run)
        report.rows.append(SweepRow(lr, run.status, run.epochs_to_forget, run.epochs,
                                    run.first.heldout_ppl, run.last.heldout_ppl,
                                    run.first.heldout_ma, run.last.heldout_ma))
    # unforgotten arms count as needing more than the cap
    ordered = sorted(report.rows, key=lambda r: r.lr)
    cost = [r.epochs_to_forget if r.epochs_to_forget is not None else math.inf for r in ordered]
    for a, b, ra, rb in zip(cost, cost[1:], ordered, ordered[1:]):
        if b > a:
            report.monotone = False
            report.flags.append(f"lr {rb.lr:g} needed more epochs than lr {ra.lr:g}")
    return report, logs


@dataclass
class ModeComparison:
    batch: RunLog
    sequential: SequentialResult
    heldout_before: tuple
    batch_drop: float
    sequential_drop: float
    violation: bool

    def to_json(self) -> dict:
        return {
            "heldout_ma_before": self.heldout_before[2],
            "batch": {"status": self.batch.status, "epochs": self.batch.epochs,
                      "heldout_ma_after": self.batch.last.heldout_ma, "heldout_ma_drop": self.batch_drop},
            "sequential": {**self.sequential.to_json(), "heldout_ma_after": self.sequential.final_heldout[2],
                           "heldout_ma_drop": self.sequential_drop},
            "violation": self.violation,
        }


def compare_modes(state: ModelState, targets: TargetSet, threshold: ForgettingThreshold,
                  cfg: UnlearnConfig, heldout: HeldOut) -> ModeComparison:
    """Batch unlearning of all targets against chunked sequential unlearning from the same start.

    ``violation`` is set when sequential unlearning degrades held-out MA
    more than batch unlearning does, or leaves a chunk unforgotten.
    """
    before = heldout.measure(state)
    _, batch = unlearn_batch(state, targets, threshold, replace(cfg, chunk_size=None), heldout)
    _, seq = unlearn_sequential(state, targets, threshold, cfg, heldout)
    b_drop = before[2] - batch.last.heldout_ma
    s_drop = before[2] - seq.final_heldout[2]
    violation = s_drop > b_drop or bool(seq.violations)
    if violation:
        log.warning("sequential held-out MA drop %.4f vs batch %.4f, unforgotten chunks %s",
                    s_drop, b_drop, seq.violations)
    return ModeComparison(batch, seq, before, b_drop, s_drop, violation)
