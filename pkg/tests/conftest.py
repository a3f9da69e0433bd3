"""Shared fixtures: a trained toy subject, counting classifiers, and an
in-process HTTP stub for the remote protocol. Test doubles live in support.py."""

import pytest

from signhunt import RngStream, pattern_dataset, train_toy

from support import CountingClassifier, ScoreServer, default_scores


@pytest.fixture(scope="session")
def subject():
    """(dataset, model): 3-class 8x8 patterns and a trained 1-hidden-layer MLP."""
    ds = pattern_dataset(3, (1, 8, 8), 30, noise=0.08, rng=RngStream(7))
    tr = train_toy(ds, hidden=(32,), epochs=100, lr=0.1, rng=RngStream(1))
    assert tr.accuracy >= 0.9
    return ds, tr.model


@pytest.fixture
def counting_classifier():
    return CountingClassifier


@pytest.fixture
def score_server():
    servers = []

    def make(score_fn=default_scores):
        srv = ScoreServer(score_fn)
        servers.append(srv)
        return srv

    yield make
    for srv in servers:
        srv.close()


@pytest.fixture(autouse=True)
def _fast_retries(monkeypatch):
    # keep transport-retry tests from sleeping
    monkeypatch.setattr("signhunt.remote.RETRY_BACKOFF", 0.0)
