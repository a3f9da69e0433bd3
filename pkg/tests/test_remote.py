"""Remote protocol: wire format, retry/budget semantics, vocabulary interning,
and an end-to-end attack against the stub server."""

import numpy as np
import pytest

from signhunt.attack import AttackConfig, bmi_fgsm
from signhunt.de import DEParams, FitnessSpec
from signhunt.errors import BudgetExceeded, ProtocolError, RemoteUnavailable
from signhunt.models import QueryBudget
from signhunt.remote import (LabelVocabulary, RemoteClassifier, RemoteEndpoint,
                             fetch_scores, png_base64, remote_classify)
from signhunt.tensors import ImageTensor, RngStream


def gray(value=0.8, shape=(1, 6, 6)):
    return ImageTensor(np.full(shape, value, dtype=np.float32))


def make_endpoint(server, **kw):
    return RemoteEndpoint(server.url, **kw)


def test_fetch_scores_returns_ranked_pairs(score_server):
    srv = score_server()
    pairs = fetch_scores(make_endpoint(srv), gray(0.8), QueryBudget(10))
    names = [n for n, _ in pairs]
    scores = [s for _, s in pairs]
    assert names[0] == "bright"
    assert scores[0] == pytest.approx(0.8, abs=0.01)  # uint8 quantization
    assert srv.requests == 1


def test_fetch_scores_honors_top_k(score_server):
    srv = score_server()
    pairs = fetch_scores(make_endpoint(srv, top_k=2), gray(), QueryBudget(10))
    assert len(pairs) == 2


def test_png_round_trip_through_server(score_server):
    # server decodes our PNG back to [0,1]; mean must survive the trip
    srv = score_server()
    img = ImageTensor(RngStream(3).uniform(48).reshape(1, 6, 8).astype(np.float32))
    pairs = dict(fetch_scores(make_endpoint(srv), img, QueryBudget(10)))
    assert pairs["bright"] == pytest.approx(float(img.data.mean()), abs=0.01)


def test_rgb_images_accepted(score_server):
    srv = score_server()
    img = ImageTensor(RngStream(4).uniform(3 * 25).reshape(3, 5, 5).astype(np.float32))
    pairs = dict(fetch_scores(make_endpoint(srv), img, QueryBudget(10)))
    assert pairs["bright"] == pytest.approx(float(img.data.mean()), abs=0.01)


def test_transient_failures_retried(score_server):
    srv = score_server()
    srv.fail_budget = 2  # two 500s, then healthy
    pairs = fetch_scores(make_endpoint(srv), gray(), QueryBudget(10))
    assert pairs[0][0] == "bright"
    assert srv.requests == 3


def test_persistent_failure_raises_remote_unavailable(score_server):
    srv = score_server()
    srv.fail_budget = 99
    with pytest.raises(RemoteUnavailable):
        fetch_scores(make_endpoint(srv), gray(), QueryBudget(10))
    assert srv.requests == 3  # exactly RETRY_ATTEMPTS transport tries


def test_unreachable_host_raises_remote_unavailable():
    dead = RemoteEndpoint("http://127.0.0.1:1", timeout=0.2)
    with pytest.raises(RemoteUnavailable):
        fetch_scores(dead, gray(), QueryBudget(10))


def test_malformed_body_raises_protocol_error_without_retry(score_server):
    srv = score_server()
    srv.malformed = b"these are not the scores you are looking for"
    with pytest.raises(ProtocolError):
        fetch_scores(make_endpoint(srv), gray(), QueryBudget(10))
    assert srv.requests == 1  # a decoded-but-wrong reply is final


def test_missing_fields_raise_protocol_error(score_server):
    srv = score_server()
    srv.malformed = b'{"labels": [{"name": "x"}]}'  # score absent
    with pytest.raises(ProtocolError):
        fetch_scores(make_endpoint(srv), gray(), QueryBudget(10))


def test_budget_charged_before_transport(score_server):
    srv = score_server()
    budget = QueryBudget(5)
    for _ in range(5):
        fetch_scores(make_endpoint(srv), gray(), budget)
    with pytest.raises(BudgetExceeded):
        fetch_scores(make_endpoint(srv), gray(), budget)
    assert srv.requests == 5  # the sixth call never reached the wire
    assert budget.used == 5


def test_failed_transport_still_consumed_budget(score_server):
    srv = score_server()
    srv.fail_budget = 99
    budget = QueryBudget(10)
    with pytest.raises(RemoteUnavailable):
        fetch_scores(make_endpoint(srv), gray(), budget)
    assert budget.used == 1  # charge precedes the attempt, retries are free


def test_bearer_token_header(score_server):
    srv = score_server()
    fetch_scores(make_endpoint(srv, token="sk-123"), gray(), QueryBudget(10))
    assert srv.last_headers.get("Authorization") == "Bearer sk-123"
    srv2 = score_server()
    fetch_scores(make_endpoint(srv2), gray(), QueryBudget(10))
    assert "Authorization" not in srv2.last_headers


def test_vocabulary_interns_first_seen_order():
    vocab = LabelVocabulary()
    assert vocab.intern("cat") == 0
    assert vocab.intern("dog") == 1
    assert vocab.intern("cat") == 0  # stable on repeat
    assert vocab.lookup("dog") == 1
    assert vocab.lookup("fox") is None
    assert vocab.name(1) == "dog"
    assert len(vocab) == 2


def test_remote_classify_builds_sparse_vector(score_server):
    srv = score_server()
    vocab = LabelVocabulary()
    vocab.intern("mid")  # pre-seeded: indices must respect existing assignments
    pred = remote_classify(make_endpoint(srv), gray(0.9), QueryBudget(10), vocab)
    assert pred.kind == "raw-scores"
    assert pred.scores[vocab.lookup("bright")] == pytest.approx(0.9, abs=0.01)
    assert pred.scores[0] == pytest.approx(0.25)  # "mid" kept slot 0
    assert len(pred.scores) == len(vocab)


def test_remote_classifier_attack_smoke(score_server):
    # end-to-end: drive the full loop over HTTP and flip the stub's top label
    srv = score_server()
    clf = RemoteClassifier(make_endpoint(srv), QueryBudget(4000))
    base = gray(0.6, (1, 4, 4))
    clean = clf.classify(base)
    y = clf.vocab.lookup("bright")
    assert clean.scores[y] > 0.5
    config = AttackConfig(
        epsilon=0.3, iterations=10,
        de=DEParams(size=8, generations=6),
        spec=FitnessSpec("score_only", y),
    )
    result = bmi_fgsm(base, config, clf, RngStream(5))
    assert result.success
    assert result.linf <= 0.3 + 1e-6
    assert result.queries == clf.budget.used - 1  # clean check charged the shared budget
    assert clf.budget.used <= 4000
