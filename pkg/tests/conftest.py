"""Shared fixtures, the belief-normalization tracker and the acceptance summary."""

from __future__ import annotations

import numpy as np
import pytest

from tumorseg.crf import meanfield
from tumorseg.fcnn import inference

BELIEF_TOLERANCE = 1e-6

# criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


class BeliefTracker:
    """Watches every distribution the CRF or slice inference hands out."""

    def __init__(self):
        self.worst = 0.0
        self.count = 0

    def observe(self, probs: np.ndarray, axis: int) -> None:
        if probs.size == 0:
            return
        dev = float(np.max(np.abs(probs.sum(axis=axis) - 1.0)))
        self.worst = max(self.worst, dev)
        self.count += probs.size // probs.shape[axis]
        assert dev <= BELIEF_TOLERANCE, f"distribution sums deviate from 1 by {dev}"


TRACKER = BeliefTracker()


def pytest_configure(config):
    original_checked = meanfield._checked_softmax
    original_softmax = inference.softmax

    def checked(logits):
        out = original_checked(logits)
        TRACKER.observe(out, axis=1)
        return out

    def slice_softmax(scores, axis=1):
        out = original_softmax(scores, axis=axis)
        TRACKER.observe(out, axis=axis)
        return out

    meanfield._checked_softmax = checked
    inference.softmax = slice_softmax


def pytest_sessionfinish(session, exitstatus):
    if TRACKER.worst > BELIEF_TOLERANCE:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and TRACKER.count == 0:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    ok = TRACKER.worst <= BELIEF_TOLERANCE
    tr.write_line(
        f"{'PASS' if ok else 'FAIL'}  belief normalization (all tests): max |sum - 1| = "
        f"{TRACKER.worst:.2e} over {TRACKER.count} distributions"
    )


@pytest.fixture
def record():
    """``record(name, ok, detail)`` stores one acceptance line and asserts it."""

    def _record(name: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[name] = (bool(ok), detail)
        assert ok, f"{name}: {detail}"

    return _record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
