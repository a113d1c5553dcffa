import pytest

from unlearnlab.corpus import load_corpus, sample_targets, sample_validation
from unlearnlab.metrics import MetricsConfig, forgetting_threshold
from unlearnlab.model import ModelConfig, init_model
from unlearnlab.synth import bundled_corpus_path
from unlearnlab.unlearn import HeldOut, pretrain

TINY_MODEL = ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ff=64, max_seq_len=32, seed=0)
TINY_METRICS = MetricsConfig(n=2)


class TinySetup:
    """Four 16-token targets memorized by a one-layer model, plus an 8-sequence held-out set."""

    def __init__(self):
        root = bundled_corpus_path()
        self.corpus = load_corpus(root / "train")
        self.valid = load_corpus(root / "valid")
        self.targets = sample_targets(self.corpus, 4, 16, seed=0, distinct_first=True)
        self.d_prime = sample_validation(self.valid, 8, 16, seed=1, exclude=self.corpus)
        self.fresh = init_model(TINY_MODEL)
        self.result = pretrain(self.fresh, self.corpus, self.targets, 1500, 3e-3, batch_size=8,
                               check_every=25, d_prime=self.d_prime, metrics_cfg=TINY_METRICS)
        self.state = self.result.state
        self.threshold = forgetting_threshold(self.state, self.d_prime, TINY_METRICS)
        self.heldout = HeldOut(self.d_prime.sequences)


@pytest.fixture(scope="session")
def tiny():
    return TinySetup()


# ----------------------------------------------------------------------------
# one summary line per acceptance criterion

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    k, title = mark.args
    detail = "; ".join(f"{v}" for key, v in item.user_properties if key == "detail")
    if rep.when == "call" or k not in _CRITERIA:
        _CRITERIA[k] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[k]
        terminalreporter.write_line(f"[{status}] criterion {k}: {title}" + (f" ({detail})" if detail else ""))
