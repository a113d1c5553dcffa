"""Extraction likelihood, memorization accuracy and the forgetting criterion.

Metric functions accept any model object exposing

* ``bos_id`` / ``eos_id`` attributes,
* ``logits(batch) -> (B, L, V)`` next-token logits,
* ``prefix_continuations(seqs, prefix_lens, stop_token)``: greedy
  continuation of ``seq[:L]`` for every ``L`` in ``prefix_lens``, each with
  budget ``len(seq) - L``,
* ``greedy_continue(contexts, budgets, stop_token)``.

:class:`unlearnlab.model.ModelState` implements all of them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import to_text


class ComparabilityError(ValueError):
    """Report and threshold were computed under different metric settings."""


def ngrams(seq, n: int) -> list[tuple[int, ...]]:
    seq = [int(t) for t in seq]
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def ngram_overlap(a, b, n: int) -> float:
    """Share of the n-grams of ``a`` (as a list) that occur anywhere in ``b``.

    Returns 0.0 when ``a`` is shorter than n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    grams = ngrams(a, n)
    if not grams:
        return 0.0
    pool = set(ngrams(b, n))
    return sum(g in pool for g in grams) / len(grams)


@dataclass(frozen=True)
class MetricsConfig:
    n: int = 5
    decode: str = "greedy"

    def validate(self, T: int | None = None) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.decode != "greedy":
            raise ValueError("only greedy decoding is supported")
        if T is not None and T <= self.n:
            raise ValueError(f"sequence length {T} must exceed n={self.n}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def _with_bos(model, x) -> np.ndarray:
    return np.concatenate([[model.bos_id], np.asarray(x, dtype=np.int64)])


def extraction_likelihood_many(model, seqs, cfg: MetricsConfig = MetricsConfig()) -> np.ndarray:
    """Extraction likelihood of every sequence in ``seqs``.

    For t = 1..T-n the model greedily continues the BOS-prefixed prefix
    x_<t for |x_>=t| tokens; the score is the mean n-gram overlap between
    those continuations and the true suffixes.
    """
    seqs = [np.asarray(x, dtype=np.int64) for x in seqs]
    if not seqs:
        return np.zeros(0)
    for x in seqs:
        cfg.validate(len(x))
    out = np.zeros(len(seqs))
    by_len: dict[int, list[int]] = {}
    for i, x in enumerate(seqs):
        by_len.setdefault(len(x), []).append(i)
    for T, idx in by_len.items():
        # context for t is BOS + x_1..x_{t-1}, i.e. t tokens of the BOS-prefixed sequence
        prefix_lens = list(range(1, T - cfg.n + 1))
        conts = model.prefix_continuations([_with_bos(model, seqs[i]) for i in idx], prefix_lens, model.eos_id)
        for i, gens in zip(idx, conts):
            x = seqs[i]
            total = sum(ngram_overlap(g, x[t - 1:], cfg.n) for t, g in zip(prefix_lens, gens))
            out[i] = total / (T - cfg.n)
    return out


def extraction_likelihood(model, x, cfg: MetricsConfig = MetricsConfig()) -> float:
    return float(extraction_likelihood_many(model, [x], cfg)[0])


def memorization_accuracy_many(model, seqs) -> np.ndarray:
    """Teacher-forced share of the T-1 positions t = 2..T where argmax p(.|x_<t) equals x_t.

    The first token only serves as context: predicting it from BOS alone
    cannot depend on the sequence.
    """
    seqs = [np.asarray(x, dtype=np.int64) for x in seqs]
    out = np.zeros(len(seqs))
    by_len: dict[int, list[int]] = {}
    for i, x in enumerate(seqs):
        if len(x) < 2:
            raise ValueError("memorization accuracy needs sequences of length >= 2")
        by_len.setdefault(len(x), []).append(i)
    for T, idx in by_len.items():
        X = np.stack([seqs[i] for i in idx])
        inp = np.concatenate([np.full((len(idx), 1), model.bos_id), X[:, :-1]], axis=1)
        for start in range(0, len(idx), 64):
            logits = np.asarray(model.logits(inp[start:start + 64]))
            hits = logits[:, 1:].argmax(axis=-1) == X[start:start + 64, 1:]
            out[idx[start:start + 64]] = hits.mean(axis=1)
    return out


def memorization_accuracy(model, x) -> float:
    return float(memorization_accuracy_many(model, [x])[0])


# ----------------------------------------------------------------------------
# reports and thresholds


@dataclass
class MetricsReport:
    el: list[float]
    ma: list[float]
    cfg: MetricsConfig
    checkpoint_id: str = ""
    ids: list[str] = field(default_factory=list)
    perplexity: float | None = None
    timestamp: float | None = None

    @property
    def el_mean(self) -> float:
        return float(np.mean(self.el)) if self.el else 0.0

    @property
    def ma_mean(self) -> float:
        return float(np.mean(self.ma)) if self.ma else 0.0

    def to_json(self, threshold: "ForgettingThreshold | None" = None) -> dict:
        ids = self.ids or [str(i) for i in range(len(self.el))]
        doc = {
            "checkpoint_id": self.checkpoint_id,
            "config": {**asdict(self.cfg), "hash": self.cfg.digest()},
            "per_sequence": [{"id": i, "el": e, "ma": m} for i, e, m in zip(ids, self.el, self.ma)],
            "aggregates": {"el": self.el_mean, "ma": self.ma_mean, "ppl": self.perplexity},
        }
        if self.timestamp is not None:
            doc["timestamp"] = self.timestamp
        if threshold is not None:
            doc["threshold"] = {"el": threshold.el, "ma": threshold.ma}
            doc["forgotten"] = is_forgotten(self, threshold)
        return doc


def evaluate(model, seqs, cfg: MetricsConfig = MetricsConfig(), ids=None, timestamp: float | None = None) -> MetricsReport:
    el = extraction_likelihood_many(model, seqs, cfg)
    ma = memorization_accuracy_many(model, seqs)
    return MetricsReport([float(v) for v in el], [float(v) for v in ma], cfg,
                         getattr(model, "checkpoint_id", ""), list(ids or []), timestamp=timestamp)


@dataclass(frozen=True)
class ForgettingThreshold:
    el: float
    ma: float
    cfg: MetricsConfig
    d_prime: str = ""
    checkpoint_id: str = ""


_THRESHOLD_CACHE: dict[tuple, ForgettingThreshold] = {}


def forgetting_threshold(model, d_prime, cfg: MetricsConfig = MetricsConfig()) -> ForgettingThreshold:
    """Mean EL and MA over a held-out set; cached per (checkpoint, held-out set, config)."""
    seqs = list(getattr(d_prime, "sequences", d_prime))
    if not seqs:
        raise ValueError("forgetting threshold needs a non-empty held-out set")
    if hasattr(d_prime, "descriptor"):
        desc = json.dumps(d_prime.descriptor(), sort_keys=True)
    else:
        desc = hashlib.sha256(np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs]).tobytes()).hexdigest()
    desc = hashlib.sha256(desc.encode()).hexdigest()[:16]
    ckpt = getattr(model, "checkpoint_id", "")
    key = (ckpt, desc, cfg)
    if ckpt and key in _THRESHOLD_CACHE:
        return _THRESHOLD_CACHE[key]
    el = extraction_likelihood_many(model, seqs, cfg)
    ma = memorization_accuracy_many(model, seqs)
    thr = ForgettingThreshold(float(np.mean(el)), float(np.mean(ma)), cfg, desc, ckpt)
    if ckpt:
        _THRESHOLD_CACHE[key] = thr
    return thr


def is_forgotten(report: MetricsReport, threshold: ForgettingThreshold) -> bool:
    """Both aggregate EL and aggregate MA at or below the threshold."""
    if report.cfg != threshold.cfg:
        raise ComparabilityError(f"report uses {report.cfg}, threshold uses {threshold.cfg}")
    return report.el_mean <= threshold.el and report.ma_mean <= threshold.ma


# ----------------------------------------------------------------------------
# extraction attack


@dataclass
class AttackTranscript:
    prefix: str
    true_suffix: str
    generated: str
    overlap: float
    n: int
    note: str = ""
    tokens: dict = field(default_factory=dict)

    def render(self) -> str:
        lines = [
            f"n={self.n} overlap={self.overlap:.4f}" + (f" ({self.note})" if self.note else ""),
            "--- prefix + [[generated]]",
            f"{self.prefix}[[{self.generated}]]",
            "--- true suffix",
            self.true_suffix,
        ]
        return "\n".join(lines) + "\n"


def extraction_attack(model, x, prefix_len: int, n: int = 5) -> AttackTranscript:
    """Greedy continuation of the first ``prefix_len`` tokens of ``x``."""
    x = np.asarray(x, dtype=np.int64)
    if not 0 <= prefix_len < len(x):
        raise ValueError("prefix_len must be in [0, len(x))")
    suffix = x[prefix_len:]
    gen = model.greedy_continue([_with_bos(model, x[:prefix_len])], [len(suffix)], model.eos_id)[0]
    overlap = ngram_overlap(gen, suffix, n)
    note = "generation shorter than n; overlap is 0 by definition" if len(gen) < n else ""
    return AttackTranscript(to_text(x[:prefix_len]), to_text(suffix), to_text(gen), overlap, n, note,
                            {"prefix": x[:prefix_len].tolist(), "suffix": suffix.tolist(), "generated": gen.tolist()})


def flops_estimate(total_training_tokens, parameter_count):
    """Training compute as 6 x tokens x parameters."""
    if total_training_tokens < 0 or parameter_count < 0:
        raise ValueError("token and parameter counts must be non-negative")
    return 6 * total_training_tokens * parameter_count
