"""Experiment configuration: flat INI sections plus command-line overrides."""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..metrics import MetricsConfig
from ..model import ModelConfig
from ..synth import bundled_corpus_path
from ..unlearn import UnlearnConfig


class ConfigValidationError(ValueError):
    pass


# keys that only say where to write, not what to compute
_LOCATION_KEYS = {"out_dir"}

SECTIONS = {
    "model": ["d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "model_seed"],
    "data": ["corpus", "heldout", "T", "pool", "pool_seed", "m", "dprime_seed"],
    "pretrain": ["checkpoint", "pretrain_steps", "lr_pre", "pretrain_batch", "check_every"],
    "experiment": ["s", "n", "repetitions", "seeds", "mode", "chunk_size", "lr", "lrs",
                   "max_epochs", "eval_every", "attack_targets", "require_memorized", "out_dir"],
}


def _default_corpus() -> str:
    return str(bundled_corpus_path() / "train")


def _default_heldout() -> str:
    return str(bundled_corpus_path() / "valid")


@dataclass
class ExperimentConfig:
    # model
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    model_seed: int = 0
    # data
    corpus: str = field(default_factory=_default_corpus)
    heldout: str = field(default_factory=_default_heldout)
    T: int = 64
    pool: int = 16
    pool_seed: int = 0
    m: int = 64
    dprime_seed: int = 1
    # pretraining
    checkpoint: str = ""
    pretrain_steps: int = 2000
    lr_pre: float = 1e-3
    pretrain_batch: int = 16
    check_every: int = 50
    # unlearning experiment
    s: int = 4
    n: int = 5
    repetitions: int = 5
    seeds: list[int] = field(default_factory=list)
    mode: str = "batch"
    chunk_size: int = 0
    lr: float = 5e-5
    lrs: list[float] = field(default_factory=list)
    max_epochs: int = 40
    eval_every: int = 1
    attack_targets: int = 3
    require_memorized: bool = True
    out_dir: str = "out"

    def __post_init__(self):
        if not self.seeds:
            self.seeds = list(range(self.repetitions))

    # derived configs
    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                           d_ff=self.d_ff, max_seq_len=self.max_seq_len, seed=self.model_seed)

    def metrics_config(self) -> MetricsConfig:
        return MetricsConfig(n=self.n)

    def unlearn_config(self, seed: int = 0) -> UnlearnConfig:
        return UnlearnConfig(lr=self.lr, max_epochs=self.max_epochs,
                             chunk_size=self.chunk_size or None, eval_every=self.eval_every,
                             seed=seed, metrics=self.metrics_config())

    def validate(self) -> None:
        for key in ("corpus", "heldout"):
            if not Path(getattr(self, key)).is_dir():
                raise ConfigValidationError(f"{key} directory does not exist: {getattr(self, key)}")
        if self.checkpoint and not Path(self.checkpoint).is_file():
            raise ConfigValidationError(f"checkpoint not found: {self.checkpoint}")
        if self.repetitions < 1:
            raise ConfigValidationError("repetitions must be >= 1")
        if len(self.seeds) != self.repetitions:
            raise ConfigValidationError(f"{len(self.seeds)} seeds given for {self.repetitions} repetitions")
        if self.mode not in ("batch", "sequential"):
            raise ConfigValidationError(f"mode must be batch or sequential, got {self.mode!r}")
        if not 1 <= self.s <= self.pool:
            raise ConfigValidationError(f"s={self.s} must lie in [1, pool={self.pool}]")
        if self.chunk_size < 0 or self.chunk_size > self.s:
            raise ConfigValidationError("chunk_size must lie in [0, s]")
        if self.mode == "sequential" and not self.chunk_size:
            raise ConfigValidationError("sequential mode needs chunk_size")
        if self.lr <= 0 or any(x <= 0 for x in self.lrs):
            raise ConfigValidationError("learning rates must be positive")
        if self.T + 1 > self.max_seq_len:
            raise ConfigValidationError(f"T={self.T} plus BOS exceeds max_seq_len={self.max_seq_len}")
        if self.m < 1 or self.attack_targets < 0:
            raise ConfigValidationError("m must be >= 1 and attack_targets >= 0")
        try:
            self.model_config().validate()
            self.metrics_config().validate(self.T)
        except ValueError as exc:
            raise ConfigValidationError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that influences results; paths are resolved first."""
        d = {k: v for k, v in asdict(self).items() if k not in _LOCATION_KEYS}
        for k in ("corpus", "heldout", "checkpoint"):
            if d[k]:
                d[k] = str(Path(d[k]).resolve())
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def pretrain_hash(self) -> str:
        """Hash of the settings that determine the memorized checkpoint."""
        keys = SECTIONS["model"] + ["corpus", "T", "pool", "pool_seed", "checkpoint", "pretrain_steps",
                                    "lr_pre", "pretrain_batch", "check_every", "n", "heldout", "m", "dprime_seed"]
        d = {k: getattr(self, k) for k in keys}
        for k in ("corpus", "heldout", "checkpoint"):
            if d[k]:
                d[k] = str(Path(d[k]).resolve())
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, raw):
    if key not in _FIELDS:
        raise ConfigValidationError(f"unknown config key {key!r}")
    default = getattr(ExperimentConfig(), key)
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            cast = int if key == "seeds" else float
            return [cast(x) for x in raw.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigValidationError(f"bad value for {key}: {raw!r}") from exc
    return raw


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI file (any section layout, keys must be known) and apply overrides."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigValidationError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read(path)
        base = path.parent
        for section in parser.sections():
            for key, raw in parser.items(section):
                values[key] = _coerce(key, raw)
        # relative paths in the file are relative to the file
        for key in ("corpus", "heldout", "checkpoint", "out_dir"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = _coerce(key, raw)
    if "repetitions" in values and "seeds" not in values:
        values["seeds"] = list(range(values["repetitions"]))
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, keys in SECTIONS.items():
        parser[section] = {}
        for k in keys:
            v = getattr(cfg, k)
            if isinstance(v, list):
                v = " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            parser[section][k] = str(v)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
