"""Forward-only inference engine, query budgeting, toy trainer, and the SMF
bit-exact model format.

The engine answers "what does the classifier say" and nothing else: layers run
in manifest order on float32 weights with float64 math, and every evaluation
is charged against a QueryBudget.
"""

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BudgetExceeded, ContractViolation, CorruptModel, TrainingFailed
from .tensors import ImageTensor

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "flatten", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind plus its explicit dimensions.

    dense:  dims = (in_dim, out_dim)
    conv2d: dims = (in_ch, out_ch, kernel_h, kernel_w, stride, pad)
    others: dims = ()
    """

    kind: str
    dims: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractViolation(f"unknown layer kind {self.kind!r}")
        want = {"dense": 2, "conv2d": 6}.get(self.kind, 0)
        if len(self.dims) != want:
            raise ContractViolation(f"{self.kind} needs {want} dims, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def param_count(self):
        if self.kind == "dense":
            i, o = self.dims
            return o * i + o
        if self.kind == "conv2d":
            i, o, kh, kw, _, _ = self.dims
            return o * i * kh * kw + o
        return 0

    def to_manifest(self):
        d = {"kind": self.kind}
        if self.kind == "dense":
            d["in_dim"], d["out_dim"] = self.dims
        elif self.kind == "conv2d":
            i, o, kh, kw, s, p = self.dims
            d.update(in_ch=i, out_ch=o, kernel=[kh, kw], stride=s, pad=p)
        return d

    @classmethod
    def from_manifest(cls, d):
        kind = d["kind"]
        if kind == "dense":
            return cls(kind, (d["in_dim"], d["out_dim"]))
        if kind == "conv2d":
            kh, kw = d["kernel"]
            return cls(kind, (d["in_ch"], d["out_ch"], kh, kw, d["stride"], d["pad"]))
        return cls(kind)


def dense(in_dim, out_dim):
    return LayerSpec("dense", (in_dim, out_dim))


def conv2d(in_ch, out_ch, kernel_h, kernel_w, stride=1, pad=0):
    return LayerSpec("conv2d", (in_ch, out_ch, kernel_h, kernel_w, stride, pad))


def relu():
    return LayerSpec("relu")


def maxpool2x2():
    return LayerSpec("maxpool2x2")


def flatten():
    return LayerSpec("flatten")


def softmax_layer():
    return LayerSpec("softmax")


def _propagate_shape(shape, layer):
    """Output shape of `layer` given input `shape`; raises on incompatibility."""
    if layer.kind == "dense":
        i, o = layer.dims
        if shape != (i,):
            raise ContractViolation(f"dense expects ({i},), got {shape}")
        return (o,)
    if layer.kind == "conv2d":
        in_ch, out_ch, kh, kw, s, p = layer.dims
        if len(shape) != 3 or shape[0] != in_ch:
            raise ContractViolation(f"conv2d expects ({in_ch}, H, W), got {shape}")
        _, h, w = shape
        oh = (h + 2 * p - kh) // s + 1
        ow = (w + 2 * p - kw) // s + 1
        if oh <= 0 or ow <= 0:
            raise ContractViolation(f"conv2d output collapses on input {shape}")
        return (out_ch, oh, ow)
    if layer.kind == "maxpool2x2":
        if len(shape) != 3:
            raise ContractViolation(f"maxpool2x2 expects (C, H, W), got {shape}")
        c, h, w = shape
        if h < 2 or w < 2:
            raise ContractViolation(f"maxpool2x2 needs H, W >= 2, got {shape}")
        return (c, h // 2, w // 2)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    # relu / softmax preserve shape; softmax additionally needs a vector
    if layer.kind == "softmax" and len(shape) != 1:
        raise ContractViolation(f"softmax expects a vector, got {shape}")
    return shape


class Model:
    """Immutable layer stack over a flat float32 weights blob."""

    def __init__(self, input_shape, layers, weights):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = tuple(layers)
        weights = np.asarray(weights, dtype=np.float32).ravel()
        declared = sum(l.param_count for l in self.layers)
        if weights.size != declared:
            raise ContractViolation(
                f"weights blob has {weights.size} params, manifest declares {declared}")
        self.weights = weights
        self.weights.flags.writeable = False

        shape = self.input_shape
        self._params = []  # per layer: (W64, b64) or None
        offset = 0
        for layer in self.layers:
            shape = _propagate_shape(shape, layer)
            if layer.kind == "dense":
                i, o = layer.dims
                w = weights[offset:offset + o * i].reshape(o, i).astype(np.float64)
                b = weights[offset + o * i:offset + o * i + o].astype(np.float64)
                self._params.append((w, b))
            elif layer.kind == "conv2d":
                i, o, kh, kw, _, _ = layer.dims
                nw = o * i * kh * kw
                w = weights[offset:offset + nw].reshape(o, i, kh, kw).astype(np.float64)
                b = weights[offset + nw:offset + nw + o].astype(np.float64)
                self._params.append((w, b))
            else:
                self._params.append(None)
            offset += layer.param_count
        self.output_shape = shape

    @property
    def n_classes(self):
        if len(self.output_shape) != 1:
            raise ContractViolation("model output is not a score vector")
        return self.output_shape[0]

    def forward(self, image_data):
        """Single input (input_shape) -> output array (float64)."""
        out = self.forward_batch(np.asarray(image_data)[None, ...])
        return out[0]

    def forward_batch(self, batch):
        """Batched forward: (B, *input_shape) -> (B, *output_shape), float64."""
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ContractViolation(
                f"input shape {x.shape[1:]} does not match model {self.input_shape}")
        for layer, params in zip(self.layers, self._params):
            x = _apply_batch(layer, params, x)
        return x


def _apply_batch(layer, params, x):
    kind = layer.kind
    if kind == "dense":
        w, b = params
        return x @ w.T + b
    if kind == "conv2d":
        _, _, kh, kw, stride, pad = layer.dims
        w, b = params
        if pad:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        patches = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        patches = patches[:, :, ::stride, ::stride, :, :]
        out = np.einsum("bchwkl,ockl->bohw", patches, w, optimize=True)
        return out + b[None, :, None, None]
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "maxpool2x2":
        b_, c, h, w_ = x.shape
        h2, w2 = h // 2, w_ // 2
        return x[:, :, :h2 * 2, :w2 * 2].reshape(b_, c, h2, 2, w2, 2).max(axis=(3, 5))
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "softmax":
        return softmax(x)
    raise ContractViolation(f"unknown layer kind {kind!r}")


def softmax(z):
    """Row-wise softmax in float64; shift-invariant by construction."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class PredictionVector:
    """Classifier output: scores plus whether they are probabilities."""

    scores: np.ndarray
    kind: str = "probabilities"  # or "raw-scores"

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)
        if self.kind not in ("probabilities", "raw-scores"):
            raise ContractViolation(f"bad prediction kind {self.kind!r}")
        if self.kind == "probabilities":
            if scores.size == 0 or (scores < -1e-9).any() or (scores > 1 + 1e-9).any():
                raise ContractViolation("probabilities out of [0, 1]")
            if abs(float(scores.sum()) - 1.0) > 1e-5:
                raise ContractViolation("probabilities do not sum to 1")

    def __len__(self):
        return self.scores.size


class QueryBudget:
    """Hard cap on model evaluations. charge() is an atomic
    check-and-increment: it either consumes exactly one unit or raises."""

    def __init__(self, limit):
        if limit < 0:
            raise ContractViolation(f"budget limit must be >= 0, got {limit}")
        self.limit = int(limit)
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self):
        return self._used

    @property
    def remaining(self):
        return self.limit - self._used

    def charge(self):
        with self._lock:
            if self._used >= self.limit:
                raise BudgetExceeded(self._used, self.limit)
            self._used += 1


UNLIMITED = 2**62


def classify(model: Model, image: ImageTensor, budget: QueryBudget) -> PredictionVector:
    """Run the layers in order; one budget unit per call; returns probabilities."""
    if model.layers and model.layers[-1].kind != "softmax":
        raise ContractViolation("classifier models must end with a softmax layer")
    if image.shape != model.input_shape:
        raise ContractViolation(
            f"image shape {image.shape} does not match model {model.input_shape}")
    budget.charge()
    return PredictionVector(model.forward(image.data))


def top_label(p: PredictionVector) -> int:
    """Index of the maximum score; ties break toward the lowest index."""
    if len(p) < 1:
        raise ContractViolation("empty prediction vector")
    return int(np.argmax(p.scores))


def in_top_k(p: PredictionVector, label, k) -> bool:
    """True iff `label` is among the k highest scores (ties by lower index)."""
    n = len(p)
    if not 1 <= k <= n:
        raise ContractViolation(f"k must be in [1, {n}], got {k}")
    if not 0 <= label < n:
        raise ContractViolation(f"label {label} out of range [0, {n})")
    order = np.argsort(-p.scores, kind="stable")
    return label in order[:k]


class LocalClassifier:
    """Budgeted classify() surface over an in-process model.

    classify_batch keeps per-candidate accounting (one charge per image,
    in order, raising at exactly the limit) but runs the math vectorized.
    """

    def __init__(self, model: Model, budget: QueryBudget):
        self.model = model
        self.budget = budget

    @property
    def n_classes(self):
        return self.model.n_classes

    def classify(self, image: ImageTensor) -> PredictionVector:
        return classify(self.model, image, self.budget)

    def classify_batch(self, images):
        if self.model.layers and self.model.layers[-1].kind != "softmax":
            raise ContractViolation("classifier models must end with a softmax layer")
        for img in images:
            self.budget.charge()
        if not images:
            return []
        batch = np.stack([img.data for img in images])
        out = self.model.forward_batch(batch)
        return [PredictionVector(row) for row in out]


def cross_entropy(probs, label):
    """-log p[label], guarded against exact zeros."""
    p = max(float(np.asarray(probs)[label]), 1e-300)
    return -np.log(p)


def numeric_gradient(model: Model, image: ImageTensor, label, h=1e-4,
                     budget: QueryBudget = None) -> np.ndarray:
    """Central-difference gradient of cross-entropy at `label` w.r.t. the image.

    Consumes 2*m budget units (m = pixel count). Probe points are not clipped;
    the model itself accepts any finite floats.
    """
    if h <= 0:
        raise ContractViolation(f"finite-difference step must be > 0, got {h}")
    if budget is None:
        budget = QueryBudget(UNLIMITED)
    flat = image.data.astype(np.float64).ravel()
    m = flat.size
    grad = np.empty(m)
    chunk = max(1, 65536 // max(m, 1))  # keep probe batches near 0.5M floats
    for start in range(0, m, chunk):
        idx = np.arange(start, min(start + chunk, m))
        probes = np.repeat(flat[None, :], 2 * idx.size, axis=0)
        rows = np.arange(idx.size)
        probes[2 * rows, idx] += h
        probes[2 * rows + 1, idx] -= h
        for _ in range(2 * idx.size):
            budget.charge()
        out = model.forward_batch(probes.reshape(-1, *image.shape))
        losses = -np.log(np.maximum(out[:, label], 1e-300))
        grad[idx] = (losses[0::2] - losses[1::2]) / (2.0 * h)
    return grad.reshape(image.shape)


# --- toy trainer --------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    accuracy: float
    losses: list


def train_toy(dataset, hidden=(32,), epochs=100, lr=0.1, rng=None, batch_size=32):
    """Plain minibatch SGD with cross-entropy on a flatten/dense/relu/softmax
    stack. Deterministic given the rng seed; raises TrainingFailed on a
    non-finite loss."""
    if rng is None:
        raise ContractViolation("train_toy requires an RngStream")
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ContractViolation("dataset is empty")
    n_classes = int(labels.max()) + 1
    if n_classes < 2:
        raise ContractViolation("need at least 2 classes")
    input_shape = images.shape[1:]
    m = int(np.prod(input_shape))
    x_all = images.reshape(images.shape[0], m)

    dims = [m] + list(hidden) + [n_classes]
    ws, bs = [], []
    for i, o in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(1.0 / i)
        ws.append((rng.uniform(o * i).reshape(o, i) * 2.0 - 1.0) * limit)
        bs.append(np.zeros(o))

    losses = []
    n = x_all.shape[0]
    for _ in range(epochs):
        order = rng.shuffle_indices(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            xb, yb = x_all[sel], labels[sel]
            acts, zs = [xb], []
            for k, (w, b) in enumerate(zip(ws, bs)):
                z = acts[-1] @ w.T + b
                zs.append(z)
                acts.append(np.maximum(z, 0.0) if k < len(ws) - 1 else z)
            probs = softmax(zs[-1])
            batch_loss = float(np.mean(-np.log(
                np.maximum(probs[np.arange(len(yb)), yb], 1e-300))))
            if not np.isfinite(batch_loss):
                raise TrainingFailed(f"non-finite loss {batch_loss}")
            epoch_loss += batch_loss * len(yb)

            dz = probs.copy()
            dz[np.arange(len(yb)), yb] -= 1.0
            dz /= len(yb)
            for k in range(len(ws) - 1, -1, -1):
                dw = dz.T @ acts[k]
                db = dz.sum(axis=0)
                if k > 0:
                    dz = (dz @ ws[k]) * (zs[k - 1] > 0.0)
                ws[k] = ws[k] - lr * dw
                bs[k] = bs[k] - lr * db
        losses.append(epoch_loss / n)

    layers = [flatten()]
    blob = []
    for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(dense(i, o))
        if k < len(dims) - 2:
            layers.append(relu())
        blob.append(ws[k].astype(np.float32).ravel())
        blob.append(bs[k].astype(np.float32))
    layers.append(softmax_layer())
    model = Model(input_shape, layers, np.concatenate(blob))

    preds = model.forward_batch(images).argmax(axis=1)
    accuracy = float(np.mean(preds == labels))
    return TrainResult(model=model, accuracy=accuracy, losses=losses)


# --- SMF model format ---------------------------------------------------------
# Directory: manifest.json + weights.bin (concatenated parameters, manifest
# order, row-major, little-endian float32). Manifest carries the blob SHA-256.

def save_model(model: Model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = model.weights.astype("<f4").tobytes()
    manifest = {
        "format": "SMF",
        "version": 1,
        "dtype": "f32le",
        "input_shape": list(model.input_shape),
        "layers": [l.to_manifest() for l in model.layers],
        "weights": "weights.bin",
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path / "weights.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptModel(f"unreadable manifest: {e}") from e
    if manifest.get("dtype") != "f32le":
        raise CorruptModel(f"unsupported dtype {manifest.get('dtype')!r}")
    blob = (path / manifest["weights"]).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["sha256"]:
        raise CorruptModel(f"weights checksum mismatch: {digest} != {manifest['sha256']}")
    layers = [LayerSpec.from_manifest(d) for d in manifest["layers"]]
    declared = sum(l.param_count for l in layers)
    if len(blob) != declared * 4:
        raise CorruptModel(f"weights blob is {len(blob)} bytes, expected {declared * 4}")
    weights = np.frombuffer(blob, dtype="<f4")
    try:
        return Model(manifest["input_shape"], layers, weights)
    except ContractViolation as e:
        raise CorruptModel(str(e)) from e
