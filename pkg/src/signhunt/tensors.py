"""Image and sign tensors, perturbation arithmetic, and the seeded RNG contract.

All pixel data lives in [0, 1] float32, shape (channels, height, width).
Sign tensors share the image shape and hold exactly -1.0 or +1.0 per element.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractViolation


def _as_readonly_f32(data, shape=None):
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim != 3:
        raise ContractViolation(f"expected (channels, height, width), got shape {arr.shape}")
    if any(d <= 0 for d in arr.shape):
        raise ContractViolation(f"dimensions must be positive, got {arr.shape}")
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """A float32 image, shape (channels, height, width). May hold out-of-range
    values transiently; clip_unit produces the valid-image form."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_readonly_f32(self.data)
        if not np.isfinite(arr).all():
            raise ContractViolation("image data must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def digest(self):
        """Content hash used as the fitness-cache version key."""
        h = hashlib.sha256()
        h.update(str(self.shape).encode())
        h.update(self.data.tobytes())
        return h.hexdigest()

    def is_valid_image(self):
        return bool((self.data >= 0.0).all() and (self.data <= 1.0).all())


@dataclass(frozen=True)
class SignCandidate:
    """One population member: a tensor of exact -1.0 / +1.0 with image shape."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_readonly_f32(self.data)
        # sign-domain closure is a system-wide invariant, checked on every construction
        if not np.all(np.abs(arr) == np.float32(1.0)):
            raise ContractViolation("sign candidate elements must be exactly -1.0 or +1.0")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape


class RngStream:
    """Deterministic counter-based random stream (Philox).

    Identical seed => identical draw sequence, regardless of how evaluation
    work is parallelized, because all draws are made serially by the owner.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))
        self.draws = 0

    def uniform(self, n):
        """n float64 draws from [0, 1)."""
        self.draws += int(n)
        return self._gen.random(int(n))

    def integer(self, n):
        """One uniform integer from [0, n)."""
        self.draws += 1
        return int(self._gen.integers(0, int(n)))

    def sign_array(self, shape):
        """float32 array of fair +/-1 draws."""
        size = int(np.prod(shape))
        self.draws += size
        bits = self._gen.integers(0, 2, size=size, dtype=np.int8)
        return (bits.astype(np.float32) * 2.0 - 1.0).reshape(shape)

    def shuffle_indices(self, n):
        """A permutation of range(n)."""
        self.draws += int(n)
        return self._gen.permutation(int(n))

    def child(self, label):
        """Derived stream with a seed hashed from (seed, label)."""
        h = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
        return RngStream(int.from_bytes(h[:8], "little"))


def derive_seed(seed, label):
    """Stable 64-bit seed from a campaign seed and an item id."""
    h = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def linf_distance(a: ImageTensor, b: ImageTensor) -> float:
    """Max absolute per-element difference."""
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))
    return float(diff.max())


def clip_unit(x: ImageTensor) -> ImageTensor:
    """Clamp every element into [0, 1]. Idempotent."""
    return ImageTensor(np.clip(x.data, 0.0, 1.0))


def perturb(base: ImageTensor, signs: SignCandidate, step: float) -> ImageTensor:
    """clip_unit(base + step * signs); base is left unmodified."""
    if base.shape != signs.shape:
        raise ContractViolation(f"shape mismatch: {base.shape} vs {signs.shape}")
    if step < 0:
        raise ContractViolation(f"step must be >= 0, got {step}")
    stepped = base.data + np.float32(step) * signs.data
    return ImageTensor(np.clip(stepped, 0.0, 1.0))


def random_sign_tensor(shape, rng: RngStream) -> SignCandidate:
    """Each element independently +/-1 with probability 1/2."""
    return SignCandidate(rng.sign_array(tuple(shape)))


# --- TF32 file format -------------------------------------------------------
# Manifest: {"dtype": "f32le", "shape": [C, H, W], "data": "<relative path>"}
# Data file: little-endian float32, row-major.

def save_tf32(tensor: ImageTensor, manifest_path, data_name=None):
    manifest_path = Path(manifest_path)
    if data_name is None:
        data_name = manifest_path.stem + ".bin"
    manifest = {"dtype": "f32le", "shape": list(tensor.shape), "data": data_name}
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    (manifest_path.parent / data_name).write_bytes(tensor.data.astype("<f4").tobytes())
    manifest_path.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return manifest_path


def load_tf32(manifest_path) -> ImageTensor:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("dtype") != "f32le":
        raise ContractViolation(f"unsupported tensor dtype {manifest.get('dtype')!r}")
    shape = tuple(int(d) for d in manifest["shape"])
    raw = (manifest_path.parent / manifest["data"]).read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ContractViolation(f"tensor blob has {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return ImageTensor(arr)


# --- PNG ingestion / emission -----------------------------------------------
# 8-bit RGB or grayscale; pixel p maps to p / 255.0 on load.

def load_png(path) -> ImageTensor:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return ImageTensor(arr)


def save_png(tensor: ImageTensor, path):
    c = tensor.shape[0]
    if c not in (1, 3):
        raise ContractViolation(f"PNG export needs 1 or 3 channels, got {c}")
    arr = np.clip(np.rint(tensor.data * 255.0), 0, 255).astype(np.uint8)
    if c == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return Path(path)
