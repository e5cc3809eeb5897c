import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from pseudodist import io as pio
from pseudodist.models import init_models
from pseudodist.numeric import make_rng
from pseudodist.scoring import generate_trials, score_trials, trial_labels
from pseudodist.trainer import train

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"
CONFIGS = ROOT / "configs"

TEST_TRIALS = 10_000


def mnist_split(split):
    return pio.load_idx(MNIST_DIR / f"{split}-images-idx3-ubyte.gz",
                        MNIST_DIR / f"{split}-labels-idx1-ubyte.gz", split)


@dataclasses.dataclass
class Run:
    bundle: object
    entries: list
    seconds: float


def run_config(cfg: pio.RunConfig, data: pio.LabeledDataset) -> Run:
    train_ds, valid_ds = pio.split_validation(data, cfg.valid_fraction, cfg.seed)
    enc = cfg.encoder_config(train_ds.dim)
    t0 = time.perf_counter()
    bundle, entries = train(train_ds.features, train_ds.labels, valid_ds.features,
                            valid_ds.labels, enc, cfg.distance_config(enc.embedding_dim),
                            cfg.train_config())
    return Run(bundle, entries, time.perf_counter() - t0)


def balanced_test_trials(labels, seed=0):
    return generate_trials(labels, "sampled", n=TEST_TRIALS, target_fraction=0.5,
                           rng=make_rng(seed, "test_trials"))


def score_columns(bundle, features, trials):
    scored = score_trials(bundle, features, trials)
    cols = {k: np.array([getattr(s, f"score_{k}") for s in scored]) for k in ("e2e", "cos", "fused")}
    return cols, trial_labels(trials)


@pytest.fixture(scope="session")
def mnist_config():
    return pio.RunConfig.load(CONFIGS / "mnist.conf")


@pytest.fixture(scope="session")
def mnist_train():
    return mnist_split("train")


@pytest.fixture(scope="session")
def mnist_test():
    return mnist_split("test")


@pytest.fixture(scope="session")
def mnist_run(mnist_config, mnist_train):
    """The closed-set recipe run; shared by several acceptance checks."""
    return run_config(mnist_config, mnist_train)


@pytest.fixture(scope="session")
def mnist_run_no_aux(mnist_config, mnist_train):
    return run_config(dataclasses.replace(mnist_config, aux_weight=0.0), mnist_train)


@pytest.fixture(scope="session")
def mnist_untrained(mnist_config, mnist_train):
    enc = mnist_config.encoder_config(mnist_train.dim)
    return init_models(enc, mnist_config.distance_config(enc.embedding_dim), 10, mnist_config.seed)


@pytest.fixture(scope="session")
def gaussian_config():
    return pio.RunConfig.load(CONFIGS / "gaussian.conf")


# ---------------------------------------------------------------------------
# one summary line per acceptance criterion

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.fixture
def criterion_detail(request):
    """Tests append measured values here; they are echoed in the summary line."""
    marker = request.node.get_closest_marker("criterion")
    details: list = []
    if marker is not None:
        _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "outcomes": [],
                                              "details": []})["details"].append(details)
    return details


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "outcomes": [],
                                                  "details": []})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["outcomes"].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        ok = bool(entry["outcomes"]) and all(entry["outcomes"])
        detail = "; ".join(d for group in entry["details"] for d in group)
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
