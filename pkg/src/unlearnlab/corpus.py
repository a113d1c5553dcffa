"""Byte-level tokenization, domain-tagged corpus ingestion and window sampling."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOS, EOS, PAD, UNK = 256, 257, 258, 259
SPECIALS = {"<bos>": BOS, "<eos>": EOS, "<pad>": PAD, "<unk>": UNK}
VOCAB_SIZE = 260
MANIFEST_NAME = "manifest.json"


class CorpusError(ValueError):
    pass


class CapacityError(CorpusError):
    """Not enough disjoint windows in the corpus."""


def tokenize(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> bytes:
    """Inverse of :func:`tokenize`; special ids are dropped."""
    arr = np.asarray(tokens, dtype=np.int64)
    return arr[(arr >= 0) & (arr < 256)].astype(np.uint8).tobytes()


def to_text(tokens) -> str:
    return detokenize(tokens).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Document:
    text: bytes
    domain: str
    name: str = ""

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"document {self.name!r} is empty")

    @property
    def tokens(self) -> np.ndarray:
        return tokenize(self.text)


@dataclass
class Corpus:
    documents: list[Document]
    root: str = ""

    @property
    def domains(self) -> list[str]:
        return sorted({d.domain for d in self.documents})

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for d in sorted(self.documents, key=lambda d: (d.domain, d.name)):
            h.update(d.domain.encode() + b"\0" + d.name.encode() + b"\0")
            h.update(hashlib.sha256(d.text).digest())
        return h.hexdigest()[:16]

    def token_count(self, domain: str | None = None) -> int:
        return sum(len(d.text) for d in self.documents if domain is None or d.domain == domain)

    def subset(self, domain: str) -> "Corpus":
        return Corpus([d for d in self.documents if d.domain == domain], self.root)

    def contains(self, window: bytes) -> bool:
        return any(window in d.text for d in self.documents)


def _file_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def load_corpus(root, verify: bool = True) -> Corpus:
    """Read ``root/<domain>/*`` files; the subdirectory name is the domain tag."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus directory not found: {root}")
    docs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(p for p in sub.rglob("*") if p.is_file()):
            data = f.read_bytes()
            if data:
                docs.append(Document(data, sub.name, f.relative_to(root).as_posix()))
    if not docs:
        raise CorpusError(f"no documents under {root}")
    manifest = root / MANIFEST_NAME
    if verify and manifest.exists():
        recorded = json.loads(manifest.read_text())["files"]
        for d in docs:
            if d.name in recorded and recorded[d.name] != _file_hash(d.text):
                raise CorpusError(f"content hash mismatch for {d.name}")
    return Corpus(docs, str(root))


def write_manifest(root) -> Path:
    corpus = load_corpus(root, verify=False)
    files = {d.name: _file_hash(d.text) for d in corpus.documents}
    payload = {"corpus_hash": corpus.content_hash(), "domains": corpus.domains, "files": files}
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------------------
# window sampling


@dataclass
class TargetSet:
    sequences: list[np.ndarray]
    length: int
    corpus_id: str
    seed: int
    offsets: list[tuple[str, int]] = field(default_factory=list)
    domains: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    def array(self) -> np.ndarray:
        return np.stack(self.sequences) if self.sequences else np.zeros((0, self.length), dtype=np.int64)

    def subset(self, idx) -> "TargetSet":
        idx = list(idx)
        return TargetSet([self.sequences[i] for i in idx], self.length, self.corpus_id, self.seed,
                         [self.offsets[i] for i in idx], [self.domains[i] for i in idx])

    def descriptor(self) -> dict:
        return {"corpus_id": self.corpus_id, "seed": self.seed, "length": self.length,
                "offsets": [list(o) for o in self.offsets]}


@dataclass
class ValidationSet(TargetSet):
    weights: dict[str, float] = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {**super().descriptor(), "weights": dict(sorted(self.weights.items()))}


def _candidate_windows(corpus: Corpus, T: int, exclude: Corpus | None = None) -> list[tuple[int, int]]:
    """Non-overlapping, block-aligned windows of length T, duplicates removed.

    Windows occurring verbatim anywhere in ``exclude`` are skipped.
    """
    seen = set()
    out = []
    for di, doc in enumerate(corpus.documents):
        for off in range(0, len(doc.text) - T + 1, T):
            w = doc.text[off:off + T]
            if w not in seen and not (exclude is not None and exclude.contains(w)):
                seen.add(w)
                out.append((di, off))
    return out


def sample_targets(corpus: Corpus, k: int, T: int, seed: int, distinct_first: bool = False,
                   exclude: Corpus | None = None) -> TargetSet:
    """k distinct non-overlapping length-T windows chosen by a seeded shuffle.

    With ``distinct_first`` no two chosen windows start with the same token.
    Two sequences with a common first token present identical contexts up to
    their first difference, so they cannot both be predicted perfectly.
    """
    if T <= 0:
        raise CorpusError("window length must be positive")
    cid = corpus.content_hash()
    if k == 0:
        return TargetSet([], T, cid, seed)
    cands = _candidate_windows(corpus, T, exclude)
    if len(cands) < k:
        raise CapacityError(f"corpus offers {len(cands)} disjoint windows of length {T}, need {k}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cands))
    if distinct_first:
        picks, firsts = [], set()
        for i in order:
            di, off = cands[i]
            first = corpus.documents[di].text[off]
            if first not in firsts:
                firsts.add(first)
                picks.append(cands[i])
            if len(picks) == k:
                break
        if len(picks) < k:
            raise CapacityError(f"only {len(picks)} windows with distinct first tokens, need {k}")
    else:
        picks = [cands[i] for i in order[:k]]
    seqs, offsets, domains = [], [], []
    for di, off in picks:
        doc = corpus.documents[di]
        seqs.append(tokenize(doc.text[off:off + T]))
        offsets.append((doc.name, off))
        domains.append(doc.domain)
    return TargetSet(seqs, T, cid, seed, offsets, domains)


def apportion(weights: dict[str, float], m: int) -> dict[str, int]:
    """Largest-remainder apportionment of m items; ties go to the earlier domain name."""
    total = sum(weights.values())
    if total <= 0 or any(w < 0 for w in weights.values()):
        raise CorpusError("domain weights must be non-negative with a positive sum")
    quotas = {d: m * w / total for d, w in weights.items()}
    counts = {d: math.floor(q) for d, q in quotas.items()}
    left = m - sum(counts.values())
    by_remainder = sorted(quotas, key=lambda d: (-(quotas[d] - counts[d]), d))
    for d in by_remainder[:left]:
        counts[d] += 1
    return counts


def sample_validation(corpus: Corpus, m: int, T: int, seed: int,
                      domain_weights: dict[str, float] | None = None,
                      exclude: Corpus | None = None) -> ValidationSet:
    """m held-out windows apportioned across domains by ``domain_weights``.

    Without explicit weights, domains are weighted by their token counts.
    Pass the training corpus as ``exclude`` to keep the set disjoint from it.
    """
    present = set(corpus.domains)
    if domain_weights is None:
        domain_weights = {d: float(corpus.token_count(d)) for d in corpus.domains}
    missing = sorted(set(domain_weights) - present)
    if missing:
        raise CorpusError(f"weights given for domains missing from corpus: {missing}")
    counts = apportion(domain_weights, m)
    seqs, offsets, domains = [], [], []
    for i, dom in enumerate(sorted(counts)):
        if counts[dom] == 0:
            continue
        part = sample_targets(corpus.subset(dom), counts[dom], T, seed + 7919 * (i + 1), exclude=exclude)
        seqs += part.sequences
        offsets += part.offsets
        domains += part.domains
    return ValidationSet(seqs, T, corpus.content_hash(), seed, offsets, domains, weights=dict(domain_weights))


def assert_disjoint(held_out: TargetSet, training: Corpus) -> None:
    """Raise if any held-out window occurs verbatim in the training corpus."""
    for seq, off in zip(held_out.sequences, held_out.offsets):
        if training.contains(detokenize(seq)):
            raise CorpusError(f"held-out window {off} appears in the training corpus")


def training_windows(corpus: Corpus, T: int) -> np.ndarray:
    """All block-aligned windows as an (N, T) array."""
    rows = [tokenize(corpus.documents[di].text[off:off + T]) for di, off in _candidate_windows(corpus, T)]
    return np.stack(rows) if rows else np.zeros((0, T), dtype=np.int64)
