"""Budgeted HTTP classifier client.

Wire contract: POST {base}/classify with JSON {"image_b64": <base64 PNG>,
"top_k": k}; the service answers {"labels": [{"name": str, "score": float},
...]} with HTTP 200. Scores are opaque (neither probabilities nor logits) and
only the returned labels are known — everything else is treated as score 0.
"""

import base64
import io
import json
import threading
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image
import requests

from .errors import ContractViolation, ProtocolError, RemoteUnavailable
from .models import PredictionVector, QueryBudget
from .tensors import ImageTensor

RETRY_ATTEMPTS = 3
RETRY_BACKOFF = 0.2  # seconds, doubled per attempt


@dataclass(frozen=True)
class RemoteEndpoint:
    base_url: str
    top_k: int = 5
    timeout: float = 10.0
    token: str = None

    def __post_init__(self):
        if self.top_k < 1:
            raise ContractViolation(f"top_k must be >= 1, got {self.top_k}")
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))

    @property
    def classify_url(self):
        return self.base_url + "/classify"

    def headers(self):
        h = {"Content-Type": "application/json"}
        if self.token:
            h["Authorization"] = "Bearer " + self.token
        return h


def png_base64(image: ImageTensor) -> str:
    arr = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    elif arr.shape[0] == 3:
        pil = Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB")
    else:
        raise ContractViolation(f"PNG wire format needs 1 or 3 channels, got {arr.shape[0]}")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _parse_pairs(payload):
    try:
        labels = payload["labels"]
        pairs = [(str(e["name"]), float(e["score"])) for e in labels]
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(f"malformed classify response: {e}") from e
    return pairs


def fetch_scores(endpoint: RemoteEndpoint, image: ImageTensor,
                 budget: QueryBudget, session=None):
    """One budgeted service query -> list of (label name, score) pairs.

    The budget unit is charged before transport: a query the service may have
    received counts as spent even if the response is lost. Transport failures
    and non-200 statuses are retried RETRY_ATTEMPTS times in total, then raise
    RemoteUnavailable; a 200 with an unparseable body raises ProtocolError
    without retry.
    """
    budget.charge()
    body = json.dumps({"image_b64": png_base64(image), "top_k": endpoint.top_k})
    post = session.post if session is not None else requests.post
    last = None
    for attempt in range(RETRY_ATTEMPTS):
        if attempt:
            time.sleep(RETRY_BACKOFF * (2 ** (attempt - 1)))
        try:
            resp = post(endpoint.classify_url, data=body,
                        headers=endpoint.headers(), timeout=endpoint.timeout)
        except requests.RequestException as e:
            last = str(e)
            continue
        if resp.status_code != 200:
            last = f"HTTP {resp.status_code}"
            continue
        try:
            payload = resp.json()
        except ValueError as e:
            raise ProtocolError(f"response is not JSON: {e}") from e
        return _parse_pairs(payload)
    raise RemoteUnavailable(
        f"{endpoint.classify_url} failed after {RETRY_ATTEMPTS} attempts: {last}")


class LabelVocabulary:
    """Interns string labels to dense indices in first-seen order.

    The service's label set is unknown and unenumerable, so indices exist only
    for labels that have appeared in some response. Thread-safe.
    """

    def __init__(self):
        self._index = {}
        self._names = []
        self._lock = threading.Lock()

    def intern(self, name) -> int:
        with self._lock:
            if name not in self._index:
                self._index[name] = len(self._names)
                self._names.append(name)
            return self._index[name]

    def lookup(self, name):
        return self._index.get(name)

    def name(self, index) -> str:
        return self._names[index]

    def __len__(self):
        return len(self._names)


def remote_classify(endpoint: RemoteEndpoint, image: ImageTensor,
                    budget: QueryBudget, vocab: LabelVocabulary = None,
                    session=None) -> PredictionVector:
    """Sparse raw-score vector over the vocabulary; absent labels score 0."""
    if vocab is None:
        vocab = LabelVocabulary()
    pairs = fetch_scores(endpoint, image, budget, session=session)
    indexed = [(vocab.intern(name), score) for name, score in pairs]
    scores = np.zeros(max(len(vocab), 1), dtype=np.float64)
    for idx, score in indexed:
        scores[idx] = score
    return PredictionVector(scores, kind="raw-scores")


class RemoteClassifier:
    """classify() surface over a remote endpoint with a shared vocabulary.

    Vectors grow as new labels appear; indices of previously seen labels never
    change, so a FitnessSpec tracking an interned label stays valid across the
    whole attack.
    """

    def __init__(self, endpoint: RemoteEndpoint, budget: QueryBudget,
                 session=None):
        self.endpoint = endpoint
        self.budget = budget
        self.vocab = LabelVocabulary()
        self._session = session if session is not None else requests.Session()

    def classify(self, image: ImageTensor) -> PredictionVector:
        return remote_classify(self.endpoint, image, self.budget,
                               vocab=self.vocab, session=self._session)
