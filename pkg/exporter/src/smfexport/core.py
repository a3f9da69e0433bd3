"""Turn externally trained checkpoints into SMF model directories.

A checkpoint is a flat mapping of tensor names to arrays — either a torch
state_dict (.pt/.pth) or a numpy archive (.npz). The architecture comes from
a JSON file with the same schema as an SMF manifest (input_shape + layers),
so an existing manifest.json works as-is. Every mapped tensor must match its
layer slot's exact shape before a single byte is written.

Slots are addressed as "<layer index>.weight" / "<layer index>.bias", the
index counting all arch layers (including relu/pool/...). That convention is
deliberately identical to torch nn.Sequential state_dict keys, so a
checkpoint saved from a Sequential that mirrors the arch maps by name with
no explicit mapping at all.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from signhunt import ContractViolation, LayerSpec, Model, save_model

PARAMETRIC = ("dense", "conv2d")


class ExportError(Exception):
    """A checkpoint, arch, mapping, or fidelity problem; nothing was written."""


@dataclass
class ExportPlan:
    """One export job.

    mapping is a list of (source tensor name, slot) pairs; empty means
    "infer by name identity". golden optionally points to an .npz with
    `inputs` and `outputs` arrays recorded by the original training code.
    """

    checkpoint: Path
    arch: Path
    out_dir: Path
    mapping: list = field(default_factory=list)
    golden: Path = None
    skip_check: bool = False


# --- inputs -------------------------------------------------------------------

def load_arch(path):
    """Manifest-template JSON -> (input_shape, [LayerSpec, ...])."""
    try:
        doc = json.loads(Path(path).read_text())
        input_shape = tuple(int(d) for d in doc["input_shape"])
        layers = [LayerSpec.from_manifest(d) for d in doc["layers"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError,
            ContractViolation) as e:
        raise ExportError(f"unreadable arch template {path}: {e}") from e
    if not any(l.kind in PARAMETRIC for l in layers):
        raise ExportError(f"arch template {path} has no parametric layers")
    return input_shape, layers


def load_checkpoint(path):
    """Checkpoint file -> (kind, {name: float32 array}).

    kind is "torch" or "npz"; torch loading requires torch to be importable
    and accepts a state_dict, optionally nested under a "state_dict" key.
    """
    path = Path(path)
    if not path.is_file():
        raise ExportError(f"checkpoint {path} does not exist")
    if path.suffix == ".npz":
        with np.load(path) as archive:
            return "npz", {k: np.asarray(archive[k], dtype=np.float32)
                           for k in archive.files}
    if path.suffix in (".pt", ".pth"):
        try:
            import torch
        except ImportError as e:
            raise ExportError(
                f"checkpoint {path} needs torch, which is not installed") from e
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise ExportError(
                f"unreadable checkpoint {path} (save a plain state_dict): {e}") from e
        if isinstance(state, dict) and isinstance(state.get("state_dict"), dict):
            state = state["state_dict"]
        if not isinstance(state, dict) or not all(
                torch.is_tensor(v) for v in state.values()):
            raise ExportError(
                f"checkpoint {path} is not a mapping of name -> tensor")
        return "torch", {k: v.detach().cpu().numpy().astype(np.float32)
                         for k, v in state.items()}
    raise ExportError(f"unsupported checkpoint suffix {path.suffix!r} "
                      "(expected .npz, .pt, or .pth)")


# --- mapping ------------------------------------------------------------------

def slot_shapes(layers):
    """{slot: exact array shape} for every parameter the arch declares.

    dense weights are (out, in); conv kernels are (out_ch, in_ch, kh, kw).
    """
    shapes = {}
    for idx, layer in enumerate(layers):
        if layer.kind == "dense":
            i, o = layer.dims
            shapes[f"{idx}.weight"] = (o, i)
            shapes[f"{idx}.bias"] = (o,)
        elif layer.kind == "conv2d":
            i, o, kh, kw, _, _ = layer.dims
            shapes[f"{idx}.weight"] = (o, i, kh, kw)
            shapes[f"{idx}.bias"] = (o,)
    return shapes


def infer_mapping(tensor_names, layers):
    """Name-identity mapping: every slot must appear verbatim in the checkpoint."""
    slots = slot_shapes(layers)
    missing = sorted(s for s in slots if s not in tensor_names)
    if missing:
        raise ExportError(
            f"cannot infer mapping: checkpoint lacks tensors named {missing}; "
            f"it has {sorted(tensor_names)} — pass an explicit mapping")
    return [(s, s) for s in slots]


def _resolve(mapping, tensors, layers):
    """Validated {slot: array} covering every parametric slot exactly once."""
    slots = slot_shapes(layers)
    resolved, used = {}, set()
    for source, slot in mapping:
        if source not in tensors:
            raise ExportError(f"checkpoint has no tensor named {source!r}")
        if slot not in slots:
            raise ExportError(f"arch has no parameter slot {slot!r}; "
                              f"valid slots: {sorted(slots)}")
        if slot in resolved:
            raise ExportError(f"slot {slot!r} mapped twice")
        if source in used:
            raise ExportError(f"tensor {source!r} mapped twice")
        resolved[slot] = tensors[source]
        used.add(source)

    unmapped = sorted(set(tensors) - used)
    if unmapped:
        raise ExportError(f"checkpoint tensors left unmapped: {unmapped}")
    uncovered = sorted(set(slots) - set(resolved))
    if uncovered:
        raise ExportError(f"no source tensor mapped to slots {uncovered}")

    for slot, want in slots.items():
        got = resolved[slot].shape
        if got != want:
            raise ExportError(
                f"dimension mismatch at slot {slot!r}: arch wants {want}, "
                f"checkpoint tensor has {got}")
    return resolved


# --- fidelity checks ----------------------------------------------------------

def verify_golden(model, inputs, outputs, tol=1e-4):
    """Compare model predictions against recorded reference outputs.

    Returns the max absolute deviation; raises ExportError beyond tol. This
    is the only check that catches a transposed square weight — structure
    and a rebuilt source model are both blind to it.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    outputs = np.asarray(outputs, dtype=np.float64)
    got = model.forward_batch(inputs)
    if got.shape != outputs.shape:
        raise ExportError(f"golden outputs have shape {outputs.shape}, "
                          f"model produces {got.shape}")
    dev = float(np.max(np.abs(got - outputs)))
    if dev > tol:
        raise ExportError(
            f"golden-output check failed: max deviation {dev:.3g} > {tol:g}")
    return dev


def _torch_reference(input_shape, layers, resolved):
    """Rebuild the checkpoint as a torch Sequential and load the mapped tensors."""
    import torch
    from torch import nn

    modules = []
    for layer in layers:
        if layer.kind == "dense":
            i, o = layer.dims
            modules.append(nn.Linear(i, o))
        elif layer.kind == "conv2d":
            i, o, kh, kw, s, p = layer.dims
            modules.append(nn.Conv2d(i, o, (kh, kw), stride=s, padding=p))
        elif layer.kind == "relu":
            modules.append(nn.ReLU())
        elif layer.kind == "maxpool2x2":
            modules.append(nn.MaxPool2d(2))
        elif layer.kind == "flatten":
            modules.append(nn.Flatten())
        elif layer.kind == "softmax":
            modules.append(nn.Softmax(dim=-1))
        else:
            raise ExportError(f"no torch equivalent for layer kind {layer.kind!r}")
    ref = nn.Sequential(*modules)
    ref.load_state_dict({k: torch.from_numpy(v) for k, v in resolved.items()})
    ref.eval()
    return ref


def _self_check(model, layers, resolved, tol=1e-4, n=10):
    """Run n random inputs through a rebuilt torch model and the SMF model."""
    import torch

    ref = _torch_reference(model.input_shape, layers, resolved)
    x = np.random.default_rng(0).random((n, *model.input_shape), dtype=np.float32)
    with torch.no_grad():
        want = ref(torch.from_numpy(x)).numpy()
    got = model.forward_batch(x)
    dev = float(np.max(np.abs(got - want)))
    if dev > tol:
        raise ExportError(
            f"self-check failed: SMF and source disagree by {dev:.3g} > {tol:g}")
    return dev


# --- the export itself --------------------------------------------------------

def export(plan: ExportPlan):
    """Convert plan.checkpoint into an SMF directory at plan.out_dir.

    All structural and fidelity checks run before anything is written, so a
    raised ExportError means the output directory was not touched.
    """
    input_shape, layers = load_arch(plan.arch)
    kind, tensors = load_checkpoint(plan.checkpoint)
    mapping = plan.mapping or infer_mapping(set(tensors), layers)
    resolved = _resolve(mapping, tensors, layers)

    blob = np.concatenate(
        [resolved[f"{idx}.{part}"].ravel()
         for idx, layer in enumerate(layers) if layer.kind in PARAMETRIC
         for part in ("weight", "bias")])
    try:
        model = Model(input_shape, layers, blob)
    except ContractViolation as e:
        raise ExportError(f"assembled weights rejected: {e}") from e

    if plan.golden is not None:
        try:
            with np.load(plan.golden) as ref:
                inputs, outputs = ref["inputs"], ref["outputs"]
        except (OSError, KeyError, ValueError) as e:
            raise ExportError(f"unreadable golden file {plan.golden} "
                              f"(needs `inputs` and `outputs` arrays): {e}") from e
        verify_golden(model, inputs, outputs)

    if not plan.skip_check:
        if kind == "torch":
            _self_check(model, layers, resolved)
        else:
            warnings.warn(
                "no source framework for this checkpoint; skipping the "
                "self-check inference comparison", stacklevel=2)

    return save_model(model, plan.out_dir)
