"""Decoder-only causal transformer language model.

Pre-LayerNorm GPT-style blocks with learned absolute position embeddings,
tanh-GELU MLPs and an untied output projection. Training goes through the
autodiff ops; greedy decoding uses a numpy KV cache.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, VOCAB_SIZE

CHECKPOINT_MAGIC = b"UNLM"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.qkv.w": (d, 3 * d), p + "attn.qkv.b": (3 * d,),
            p + "attn.out.w": (d, d), p + "attn.out.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.fc.w": (d, ff), p + "mlp.fc.b": (ff,),
            p + "mlp.proj.w": (ff, d), p + "mlp.proj.b": (d,),
        })
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, cfg.vocab_size)
    return shapes


@dataclass
class ModelState:
    """Config plus named parameter tensors of the language model."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    bos_id: int = BOS
    eos_id: int | None = EOS

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def checkpoint_id(self) -> str:
        return checkpoint_digest(self)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
                          self.bos_id, self.eos_id)

    def astype(self, dtype) -> "ModelState":
        new = self.copy()
        for p in new.params.values():
            p.data = p.data.astype(dtype)
        return new

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # metric-facing protocol
    def logits(self, tokens: np.ndarray) -> np.ndarray:
        """Next-token logits for a (B, L) or (L,) batch, without recording a tape."""
        return forward_logits(self, tokens).data

    def greedy_continue(self, contexts, budgets, stop_token=None) -> list[np.ndarray]:
        return greedy_continue(self, contexts, budgets, stop_token)

    def prefix_continuations(self, seqs, prefix_lens, stop_token=None) -> list[list[np.ndarray]]:
        return prefix_continuations(self, seqs, prefix_lens, stop_token)


def init_model(cfg: ModelConfig) -> ModelState:
    """Seeded N(0, 0.02) weights, zero biases, unit LayerNorm gains."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return ModelState(cfg, params)


def _as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    return arr[None, :] if arr.ndim == 1 else arr


def _check_tokens(state: ModelState, batch: np.ndarray) -> None:
    if batch.shape[-1] > state.config.max_seq_len:
        raise SequenceLengthError(f"sequence length {batch.shape[-1]} exceeds max_seq_len {state.config.max_seq_len}")
    if batch.size and (batch.min() < 0 or batch.max() >= state.config.vocab_size):
        raise IndexError(f"token id out of range [0, {state.config.vocab_size})")


def forward_logits(state: ModelState, tokens, kv_out: list | None = None) -> Tensor:
    """Logits of shape (T, V) for a 1-D input or (B, T, V) for a 2-D batch.

    Row t holds the prediction for the token following position t.
    When ``kv_out`` is a list, per-layer (keys, values) arrays shaped
    (B, heads, T, head_dim) are appended to it.
    """
    unbatched = np.asarray(tokens).ndim == 1
    batch = _as_batch(tokens)
    _check_tokens(state, batch)
    cfg = state.config
    P = state.params
    B, T = batch.shape
    h, dh = cfg.n_heads, cfg.head_dim

    x = ad.add(ad.embedding(P["tok_emb"], batch), ad.embedding(P["pos_emb"], np.arange(T)))
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        a = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        qkv = ad.add(ad.matmul(a, P[p + "attn.qkv.w"]), P[p + "attn.qkv.b"])
        q, k, v = (ad.transpose(ad.reshape(t, (B, T, h, dh)), (0, 2, 1, 3)) for t in ad.split_last(qkv, 3))
        if kv_out is not None:
            kv_out.append((k.data, v.data))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ad.matmul(ad.causal_softmax(scores), v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = ad.add(x, ad.add(ad.matmul(att, P[p + "attn.out.w"]), P[p + "attn.out.b"]))
        m = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        m = ad.gelu(ad.add(ad.matmul(m, P[p + "mlp.fc.w"]), P[p + "mlp.fc.b"]))
        x = ad.add(x, ad.add(ad.matmul(m, P[p + "mlp.proj.w"]), P[p + "mlp.proj.b"]))
    x = ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    logits = ad.matmul(x, P["head.w"])
    if unbatched:
        logits = ad.reshape(logits, (T, cfg.vocab_size))
    return logits


# ----------------------------------------------------------------------------
# incremental decoding


def _layer_norm_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + x.dtype.type(eps)) * g + b


def _gelu_np(x):
    c = x.dtype.type(math.sqrt(2.0 / math.pi))
    return 0.5 * x * (1 + np.tanh(c * (x + x.dtype.type(0.044715) * (x * x * x))))


def _decode_step(state: ModelState, cache: list, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Logits (B, V) for one new token per row written at ``positions``."""
    cfg = state.config
    P = {k: v.data for k, v in state.params.items()}
    B = tokens.shape[0]
    h, dh = cfg.n_heads, cfg.head_dim
    rows = np.arange(B)
    x = P["tok_emb"][tokens] + P["pos_emb"][positions]
    key_pos = np.arange(cache[0][0].shape[2])
    masked = key_pos[None, :] > positions[:, None]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        K, V = cache[i]
        a = _layer_norm_np(x, P[p + "ln1.g"], P[p + "ln1.b"])
        qkv = a @ P[p + "attn.qkv.w"] + P[p + "attn.qkv.b"]
        q, k, v = (t.reshape(B, h, dh) for t in np.split(qkv, 3, axis=-1))
        K[rows, :, positions] = k
        V[rows, :, positions] = v
        scores = np.einsum("bhd,bhkd->bhk", q, K) / q.dtype.type(math.sqrt(dh))
        scores = np.where(masked[:, None, :], -np.inf, scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        att = np.einsum("bhk,bhkd->bhd", w, V).reshape(B, cfg.d_model)
        x = x + att @ P[p + "attn.out.w"] + P[p + "attn.out.b"]
        m = _layer_norm_np(x, P[p + "ln2.g"], P[p + "ln2.b"])
        x = x + _gelu_np(m @ P[p + "mlp.fc.w"] + P[p + "mlp.fc.b"]) @ P[p + "mlp.proj.w"] + P[p + "mlp.proj.b"]
    x = _layer_norm_np(x, P["ln_f.g"], P["ln_f.b"])
    return x @ P["head.w"]


def _argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest token id
    return np.argmax(logits, axis=-1)


def _decode(state: ModelState, kv: list, src_rows: np.ndarray, first_logits: np.ndarray,
            lens: np.ndarray, budgets: np.ndarray, stop_token) -> list[np.ndarray]:
    """Cached greedy decoding; rows must be sorted by non-increasing budget.

    Row r starts from the prefilled keys/values of source ``src_rows[r]``
    truncated to its context length ``lens[r]``.
    """
    cfg = state.config
    B = len(src_rows)
    cap = int((lens + budgets - 1).max())
    cache = []
    for k, v in kv:
        L = min(k.shape[2], cap)
        K = np.zeros((B, cfg.n_heads, cap, cfg.head_dim), dtype=k.dtype)
        V = np.zeros_like(K)
        K[:, :, :L] = k[src_rows, :, :L]
        V[:, :, :L] = v[src_rows, :, :L]
        cache.append([K, V])
    out = np.zeros((B, int(budgets.max())), dtype=np.int64)
    out[:, 0] = _argmax_lowest(first_logits)
    for step in range(1, int(budgets.max())):
        active = int((budgets > step).sum())
        sub = [[K[:active], V[:active]] for K, V in cache]
        logits = _decode_step(state, sub, out[:active, step - 1], lens[:active] + step - 1)
        out[:active, step] = _argmax_lowest(logits)
    results = []
    for r in range(B):
        seq = out[r, : budgets[r]]
        if stop_token is not None:
            where = np.flatnonzero(seq == stop_token)
            if where.size:
                seq = seq[: where[0]]
        results.append(seq.copy())
    return results


def greedy_continue(state: ModelState, contexts, budgets, stop_token=None) -> list[np.ndarray]:
    """Greedy continuation of each context for up to ``budgets[i]`` new tokens.

    Generation for a row stops early when ``stop_token`` is produced; the stop
    token itself is not included in the output.
    """
    contexts = [np.asarray(c, dtype=np.int64) for c in contexts]
    budgets = [int(b) for b in budgets]
    if len(contexts) != len(budgets):
        raise ValueError("contexts and budgets differ in length")
    results: list[np.ndarray] = [np.zeros(0, dtype=np.int64) for _ in contexts]
    live = [i for i, b in enumerate(budgets) if b > 0]
    if not live:
        return results
    for i in live:
        if len(contexts[i]) == 0:
            raise ValueError("context must contain at least one token")
        if len(contexts[i]) + budgets[i] - 1 > state.config.max_seq_len:
            raise SequenceLengthError("context plus generation budget exceeds max_seq_len")
    # longest budget first so the active rows are always a leading slice
    order = sorted(live, key=lambda i: (-budgets[i], i))
    lens = np.array([len(contexts[i]) for i in order])
    pad = np.zeros((len(order), int(lens.max())), dtype=np.int64)
    for r, i in enumerate(order):
        pad[r, : lens[r]] = contexts[i]
    kv: list = []
    full = forward_logits(state, pad, kv_out=kv).data
    rows = np.arange(len(order))
    gens = _decode(state, kv, rows, full[rows, lens - 1], lens, np.array([budgets[i] for i in order]), stop_token)
    for i, g in zip(order, gens):
        results[i] = g
    return results


def prefix_continuations(state: ModelState, seqs, prefix_lens, stop_token=None,
                         max_rows: int = 1024) -> list[list[np.ndarray]]:
    """For each sequence, greedy continuations of ``seq[:L]`` with budget ``len(seq) - L``.

    All prefixes of one sequence share a single prefill pass. Sequences must
    have equal length.
    """
    seqs = [np.asarray(x, dtype=np.int64) for x in seqs]
    prefix_lens = [int(L) for L in prefix_lens]
    if not seqs:
        return []
    T = len(seqs[0])
    if any(len(x) != T for x in seqs):
        raise ValueError("prefix_continuations needs equal-length sequences")
    if any(not 1 <= L <= T for L in prefix_lens):
        raise ValueError("prefix lengths must lie in [1, len(seq)]")
    per_chunk = max(1, max_rows // max(1, len(prefix_lens)))
    out: list[list[np.ndarray]] = []
    for start in range(0, len(seqs), per_chunk):
        block = np.stack(seqs[start:start + per_chunk])
        kv: list = []
        full = forward_logits(state, block, kv_out=kv).data
        pairs = [(i, L) for i in range(len(block)) for L in prefix_lens if T - L > 0]
        pairs.sort(key=lambda p: (-(T - p[1]), p[0], p[1]))
        gens: dict[tuple[int, int], np.ndarray] = {}
        if pairs:
            src = np.array([p[0] for p in pairs])
            lens = np.array([p[1] for p in pairs])
            decoded = _decode(state, kv, src, full[src, lens - 1], lens, T - lens, stop_token)
            gens = dict(zip(pairs, decoded))
        for i in range(len(block)):
            out.append([gens.get((i, L), np.zeros(0, dtype=np.int64)) for L in prefix_lens])
    return out


@dataclass
class GenerationRequest:
    prefix: np.ndarray
    max_new_tokens: int
    stop_token: int | None = None

    def __post_init__(self):
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")


def generate_greedy(state: ModelState, request: GenerationRequest) -> np.ndarray:
    prefix = np.asarray(request.prefix, dtype=np.int64)
    if len(prefix) >= state.config.max_seq_len:
        raise SequenceLengthError("prefix must be shorter than max_seq_len")
    return greedy_continue(state, [prefix], [request.max_new_tokens], request.stop_token)[0]


def sequence_nll(state: ModelState, seqs, bos: int | None = None) -> np.ndarray:
    """Per-sequence mean next-token NLL with BOS prepended as conditioning."""
    bos = state.bos_id if bos is None else bos
    out = []
    for x in seqs:
        x = np.asarray(x, dtype=np.int64)
        inp = np.concatenate([[bos], x[:-1]])
        out.append(ad.nll_loss(forward_logits(state, inp), x).item())
    return np.array(out)


def perplexity(state: ModelState, corpus) -> float:
    """exp of the mean token-level NLL over every position of every sequence."""
    corpus = [np.asarray(x, dtype=np.int64) for x in corpus]
    if not corpus:
        raise ValueError("perplexity needs a non-empty corpus")
    lengths = np.array([len(x) for x in corpus], dtype=np.float64)
    nll = sequence_nll(state, corpus).astype(np.float64)
    return float(math.exp((nll * lengths).sum() / lengths.sum()))


# ----------------------------------------------------------------------------
# checkpoint I/O


def _encode(state: ModelState, with_checksum: bool = True) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_blob = json.dumps({**asdict(state.config), "bos_id": state.bos_id, "eos_id": state.eos_id},
                          sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<I", len(state.params)))
    for name in sorted(state.params):
        data = np.ascontiguousarray(state.params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    body = buf.getvalue()
    if with_checksum:
        body += struct.pack("<Q", _checksum(body))
    return body


def _checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def checkpoint_digest(state: ModelState) -> str:
    return hashlib.sha256(_encode(state, with_checksum=False)).hexdigest()[:16]


def save_checkpoint(state: ModelState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode(state))
    return path


def load_checkpoint(path) -> ModelState:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    pos = 4
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos:pos + n])
    pos += n
    bos_id, eos_id = meta.pop("bos_id"), meta.pop("eos_id")
    cfg = ModelConfig(**meta)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 4
        data = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
        params[name] = Tensor(data, requires_grad=True, name=name)
    state = ModelState(cfg, params, bos_id, eos_id)
    expected = parameter_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: parameter set does not match config")
    return state
