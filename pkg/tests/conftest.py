import os
import sys
import time
from types import SimpleNamespace

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from caption_forge import synthetic  # noqa: E402
from caption_forge.pipeline import (  # noqa: E402
    CaptionPipeline,
    PipelineConfig,
    train_confidence_stage,
    train_dmsm_stage,
    train_lm_stage,
    train_vision_stage,
    write_gallery,
)

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"{status}  criterion {number:>2}: {title}")


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Full pipeline trained once on the seed-7 corpus (2000 train / 500 test)."""
    base = tmp_path_factory.mktemp("models")
    config = PipelineConfig(base_dir=str(base))
    train, test = synthetic.split_corpus()
    timings = {}

    t = time.perf_counter()
    detectors = train_vision_stage(train, config, seed=0)
    timings["vision"] = time.perf_counter() - t

    t = time.perf_counter()
    train_lm_stage(train, config)
    timings["lm"] = time.perf_counter() - t

    t = time.perf_counter()
    dmsm = train_dmsm_stage(train, config, seed=0)
    timings["dmsm"] = time.perf_counter() - t

    t = time.perf_counter()
    train_confidence_stage(train[:600], config, seed=0)
    write_gallery(config)
    timings["confidence"] = time.perf_counter() - t

    config_path = base / "config.json"
    config.save(config_path)
    return SimpleNamespace(
        config=config,
        config_path=str(config_path),
        pipeline=CaptionPipeline.from_config(config),
        detectors=detectors,
        dmsm=dmsm,
        train=train,
        test=test,
        timings=timings,
    )
