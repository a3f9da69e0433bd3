"""Test doubles shared across suites: counting classifiers, an analytic
surrogate with a known optimum, and an in-process HTTP scoring stub."""

import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from signhunt import PredictionVector, QueryBudget, RngStream, UNLIMITED


class CountingClassifier:
    """Wraps a model; counts every evaluation; optional fixed output."""

    def __init__(self, model=None, fixed_scores=None, limit=UNLIMITED):
        self.model = model
        self.fixed = None if fixed_scores is None else np.asarray(fixed_scores, float)
        self.budget = QueryBudget(limit)
        self.calls = 0

    @property
    def n_classes(self):
        return len(self.fixed) if self.fixed is not None else self.model.n_classes

    def classify(self, image):
        self.budget.charge()
        self.calls += 1
        if self.fixed is not None:
            return PredictionVector(self.fixed)
        return PredictionVector(self.model.forward(image.data))


class SurrogateClassifier:
    """Analytic score surface with a hidden sign vector s*.

    For images built as clip(0.5 + alpha*c) with alpha in (0, 0.5), the sign
    pattern c is recoverable from the image, and untargeted fitness at y=0
    equals -<c, s*>/m: the unique optimum is c = s*.
    """

    def __init__(self, star, limit=UNLIMITED):
        self.star = np.asarray(star, dtype=np.float64)
        self.budget = QueryBudget(limit)
        self.calls = 0

    def classify(self, image):
        self.budget.charge()
        self.calls += 1
        c = np.where(image.data.ravel() > 0.5, 1.0, -1.0)
        t = float(np.dot(c, self.star.ravel())) / self.star.size
        return PredictionVector([(1.0 - t) / 2.0, (1.0 + t) / 2.0])


def surrogate_setup(m=16, seed=0, limit=UNLIMITED):
    from signhunt import ImageTensor
    shape = (1, 1, m)
    star = RngStream(seed).sign_array(shape).astype(np.float64)
    base = ImageTensor(np.full(shape, 0.5, dtype=np.float32))
    return shape, star, base, SurrogateClassifier(star, limit=limit)


def default_scores(arr):
    """Pixel-mean driven label scores; movable by L-inf perturbations."""
    m = float(arr.mean())
    pairs = [("bright", m), ("dark", 1.0 - m), ("mid", 0.25)]
    return sorted(pairs, key=lambda kv: -kv[1])


class ScoreServer:
    """Stub classify endpoint speaking the wire protocol, with failure knobs."""

    def __init__(self, score_fn=default_scores):
        self.score_fn = score_fn
        self.requests = 0
        self.fail_budget = 0  # respond 500 to this many requests first
        self.malformed = None  # raw body to send instead of a valid response
        self.last_headers = {}
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                with stub._lock:
                    stub.requests += 1
                    stub.last_headers = dict(self.headers)
                    failing = stub.fail_budget > 0
                    if failing:
                        stub.fail_budget -= 1
                if self.path != "/classify":
                    self.send_error(404)
                    return
                if failing:
                    self.send_error(500)
                    return
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                if stub.malformed is not None:
                    payload = stub.malformed
                else:
                    from PIL import Image
                    raw = base64.b64decode(body["image_b64"])
                    arr = np.asarray(Image.open(io.BytesIO(raw)), dtype=np.float64) / 255.0
                    if arr.ndim == 2:
                        arr = arr[None, :, :]
                    else:
                        arr = arr.transpose(2, 0, 1)
                    pairs = stub.score_fn(arr)[: int(body["top_k"])]
                    payload = json.dumps(
                        {"labels": [{"name": n, "score": s} for n, s in pairs]}
                    ).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_port}"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()
