"""
Attacking over HTTP with a hard query budget
============================================

The classifier behind an API returns named scores, not class indices, and
every request costs money. This demo stands up a toy scoring endpoint in a
thread, then drives the same attack loop through it: labels are interned as
they appear, and the budget meter stops the attack at exactly its limit.
"""

import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from signhunt import (AttackConfig, BudgetExceeded, DEParams, FitnessSpec,
                      ImageTensor, QueryBudget, RemoteClassifier, RemoteEndpoint,
                      RngStream, bmi_fgsm)

# ---- a stand-in for somebody else's image API ---------------------------------
# POST /classify {"image_b64": ..., "top_k": k} -> {"labels": [{name, score}]}
# It scores by mean brightness, so darkening the image flips its answer.


class Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        raw = base64.b64decode(body["image_b64"])
        arr = np.asarray(Image.open(io.BytesIO(raw)), dtype=np.float64) / 255.0
        m = float(arr.mean())
        pairs = sorted([("bright", m), ("dark", 1.0 - m), ("mid", 0.25)],
                       key=lambda kv: -kv[1])[: body["top_k"]]
        payload = json.dumps(
            {"labels": [{"name": n, "score": s} for n, s in pairs]}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
threading.Thread(target=server.serve_forever, daemon=True).start()
url = f"http://127.0.0.1:{server.server_port}"
print(f"toy endpoint listening at {url}")

# ---- attack through the wire ----------------------------------------------------

image = ImageTensor(np.full((1, 6, 6), 0.62, dtype=np.float32))
classifier = RemoteClassifier(RemoteEndpoint(url), QueryBudget(2000))

clean = classifier.classify(image)
top = int(np.argmax(clean.scores))
print(f"clean top label: {classifier.vocab.name(top)!r} "
      f"(score {clean.scores[top]:.3f})")

# remote scores are opaque, so the attack just drives the top label's score down
config = AttackConfig(
    epsilon=0.3, iterations=12,
    de=DEParams(size=8, generations=6),
    spec=FitnessSpec("score_only", top),
)
result = bmi_fgsm(image, config, classifier, RngStream(3))

final = classifier.vocab.name(result.final_label)
print(f"success={result.success} final label {final!r} "
      f"after {result.queries} queries (budget 2000, "
      f"{classifier.budget.remaining} left)")

# ---- the meter is exact: one query past the limit raises ------------------------

burn = QueryBudget(3)
probe = RemoteClassifier(RemoteEndpoint(url), burn)
for _ in range(3):
    probe.classify(image)
try:
    probe.classify(image)
except BudgetExceeded as e:
    print(f"4th query against a budget of 3 -> BudgetExceeded: {e}")

server.shutdown()
