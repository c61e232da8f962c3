"""Shared fixtures: the default-config model and one default pipeline run.

Training the default model takes a few minutes on one core, so the
checkpoint is cached under ``.cache/models`` (override with
``ANYDOOR_TEST_CACHE``) and reused by later sessions. The wall time of the
training that produced it is stored next to it.
"""

import json
import os
import time
from pathlib import Path

import pytest

CACHE = Path(os.environ.get("ANYDOOR_TEST_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "models"))
CRITERIA = {}


@pytest.fixture(scope="session")
def default_config():
    from anydoor.config import from_dict

    return from_dict({})


@pytest.fixture(scope="session")
def default_model(default_config):
    """``(model, train_seconds)`` for the default data/model settings."""
    from anydoor.experiment import load_or_train, model_key

    stamp = CACHE / f"model-{model_key(default_config)}.train.json"
    t0 = time.perf_counter()
    model = load_or_train(default_config, CACHE)
    elapsed = time.perf_counter() - t0
    if stamp.exists():
        seconds = json.loads(stamp.read_text())["train_seconds"]
    else:
        seconds = elapsed
        stamp.write_text(json.dumps({"train_seconds": seconds}) + "\n")
    return model, seconds


@pytest.fixture(scope="session")
def default_run(default_config, default_model, tmp_path_factory):
    """The default pipeline on the cached model; every attack step's delta is audited."""
    import numpy as np

    import anydoor.experiment as ex
    from anydoor.perturbation import build_mask

    model, _ = default_model
    outside = []
    original = ex.run_attack

    def audited(model, samples, pair, spec, config, **kwargs):
        outer = 1 - build_mask(spec, 64, 64)[..., None]

        def on_step(t, delta, row):
            outside.append(float(np.abs(delta * outer).sum()))

        return original(model, samples, pair, spec, config, on_step=on_step, **kwargs)

    ex.run_attack = audited
    try:
        t0 = time.perf_counter()
        out = ex.run_experiment(default_config, model=model, out_dir=tmp_path_factory.mktemp("default_run"))
        seconds = time.perf_counter() - t0
    finally:
        ex.run_attack = original
    return {"dir": out, "seconds": seconds, "outside_l1": outside}


# ----------------------------------------------------------------------------
# one pass/fail line per acceptance criterion


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    CRITERIA[marker.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
