from __future__ import annotations

import numpy as np
import pytest

from tara_forge import ingest
from tara_forge.model import BBox, Entity, ResponsibilityVerdict, Source, VideoSample


def write_clip(frames_dir, n_frames=40, width=128, height=96, overlay=True, seed=0):
    frames_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for t in range(n_frames):
        frame = rng.integers(0, 255, size=(height, width, 3), dtype=np.uint8)
        if overlay:
            frame = ingest.overlay_frame_index(frame, t)
        ingest.save_frame(frame, frames_dir / ingest.frame_filename(t))
    return frames_dir


@pytest.fixture
def clip_dir(tmp_path):
    return write_clip(tmp_path / "clip")


@pytest.fixture
def accident_sample(clip_dir):
    return VideoSample(
        id="acc1",
        source=Source.SYNTHETIC,
        fps=8,
        frame_count=40,
        has_accident=True,
        frames_dir=str(clip_dir),
        frame_width=128,
        frame_height=96,
        accident_type="vehicle-to-pedestrian",
        accident_frame=12,
        accident_bbox=BBox(10, 20, 60, 70),
        facts_text="A car hits a pedestrian crossing the road.",
        cause_text="The pedestrian crossed outside the crosswalk.",
        advice_text="Use the crosswalk.",
        responsibility=ResponsibilityVerdict.main(Entity("pedestrian")),
    )


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        number, title = marker.args
        label = title
        if hasattr(item, "callspec"):
            label = f"{title} [{item.callspec.id}]"
        _CRITERIA.append(("PASS" if report.passed else "FAIL", str(number), label))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for status, number, label in _CRITERIA:
        terminalreporter.write_line(f"{status}  criterion {number}: {label}")
