"""Shared fixtures and the acceptance-summary reporting hook."""

from __future__ import annotations

import sys

import numpy as np
import pytest
import torch

from surgline.ingest import FrameRecord, make_split, split_records, synth_dataset

torch.set_num_threads(1)

# ---------------------------------------------------------------------------
# Acceptance criterion reporting: tests marked @pytest.mark.acceptance(n, name)
# are tallied and printed as one PASS/FAIL line per criterion at the end.
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, str] = {}
_RESULTS: dict[int, list[bool]] = {}
_NODE_TO_CRITERION: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance(num, name): tie a test to a numbered acceptance criterion",
    )


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is None:
            continue
        num, name = marker.args
        _CRITERIA[num] = name
        _NODE_TO_CRITERION[item.nodeid] = num


def pytest_runtest_logreport(report):
    num = _NODE_TO_CRITERION.get(report.nodeid)
    if num is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _RESULTS.setdefault(num, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        outcomes = _RESULTS.get(num, [])
        status = "PASS" if outcomes and all(outcomes) else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {num:2d} {status} — {_CRITERIA[num]}")


# ---------------------------------------------------------------------------
# Shared data fixtures
# ---------------------------------------------------------------------------


def make_records(labels, video_id="vid0", fps=5.0, images=False, image_size=8, seed=0):
    """Frame records with the given label sequence, evenly timed."""
    rng = np.random.default_rng(seed)
    records = []
    for i, label in enumerate(labels):
        image = rng.random((3, image_size, image_size), dtype=np.float32) if images else None
        records.append(
            FrameRecord(
                video_id=video_id,
                frame_index=i,
                timestamp_s=i / fps,
                label=label,
                image=image,
            )
        )
    return records


@pytest.fixture
def record_factory():
    return make_records


@pytest.fixture(scope="session")
def phase_synth():
    """Small 7-class synthetic dataset with a video-level split."""
    videos, records = synth_dataset(7, 40, image_size=32, noise=0.05, seed=11)
    split = make_split([v.video_id for v in videos], (0.6, 0.1, 0.3), seed=11)
    return videos, records, split, split_records(records, split)


@pytest.fixture(scope="session")
def gesture_synth():
    """Small 15-class synthetic dataset with a video-level split."""
    videos, records = synth_dataset(15, 20, image_size=32, noise=0.05, seed=11)
    split = make_split([v.video_id for v in videos], (0.6, 0.1, 0.3), seed=11)
    return videos, records, split, split_records(records, split)


def cli_argv(*args: str) -> list[str]:
    """Command line that runs the installed CLI in a subprocess."""
    return [
        sys.executable,
        "-c",
        "import sys; from surgline.cli import main; sys.exit(main(sys.argv[1:]))",
        *map(str, args),
    ]


@pytest.fixture
def cli_command():
    return cli_argv
