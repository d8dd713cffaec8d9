import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from seqfm import synth  # noqa: E402
from seqfm.evaluation import evaluate  # noqa: E402
from seqfm.featurestore import ingest_events, leave_one_out_split  # noqa: E402
from seqfm.model import HyperConfig  # noqa: E402
from seqfm.numerics import Rng  # noqa: E402
from seqfm.tasks import TrainConfig, train  # noqa: E402

# shared setup for the sequence-awareness experiment
MARKOV = dict(users=2000, objects=20, events=30, seed=0)
SEQ_LEN = 10


def load_split(rows, tmp_path, min_count=0):
    path = tmp_path / "events.tsv"
    synth.write_events(rows, path)
    space, hist, side = ingest_events(path, min_count=min_count)
    return leave_one_out_split(hist, space, side=side)


@pytest.fixture
def small_regression(tmp_path):
    rows = synth.rating_bilinear(users=40, objects=20, events=8, seed=3)
    return load_split(rows, tmp_path)


def markov_config(model="seqfm", **flags):
    return TrainConfig(
        task="classification",
        hyper=HyperConfig(d=32, l=1, n_dyn_max=SEQ_LEN, keep_prob=1.0, **flags),
        learning_rate=1e-3,
        batch_size=256,
        max_epochs=40,
        patience=6,
        seed=0,
        model=model,
    )


@dataclass
class MarkovRun:
    name: str
    test_auc: float
    best_validation_auc: float
    epochs: int
    seconds: float


@pytest.fixture(scope="session")
def markov_runs(tmp_path_factory):
    """Full SeqFM, plain FM and SeqFM without the dynamic view on one markov-last-item dataset."""
    import time

    ds = load_split(synth.markov_last_item(**MARKOV), tmp_path_factory.mktemp("markov"), min_count=10)
    out = {"dataset": ds}
    for name, cfg in (
        ("seqfm", markov_config()),
        ("plain_fm", markov_config("plain_fm")),
        ("no_dynamic_view", markov_config(use_dynamic_view=False)),
    ):
        t0 = time.perf_counter()
        model, rep = train(ds, cfg)
        test = evaluate(model, ds.test, "classification", ds.visited, Rng(1).stream("test"), side=ds.side)
        out[name] = MarkovRun(name, test.metrics["AUC"], rep.best_metric, len(rep.epoch_losses),
                              time.perf_counter() - t0)
    return out


# one summary line per acceptance criterion
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    _criteria[crit[0]] = (crit[1], report.outcome == "passed", detail)


@pytest.fixture(autouse=True)
def _criterion_tag(request, record_property):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        record_property("criterion", m.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, detail = _criteria[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
