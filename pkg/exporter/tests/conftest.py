"""Fixture checkpoints: two torch nets and one framework-free npz archive.

Each fixture yields (checkpoint path, arch path, oracle, input_shape) where
oracle(batch) -> source-side predictions computed outside the exporter.
"""

import json
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn


def _write_arch(path, input_shape, layers):
    path.write_text(json.dumps({"input_shape": input_shape, "layers": layers}))
    return path


def _torch_oracle(net):
    def oracle(batch):
        with torch.no_grad():
            return net(torch.from_numpy(np.asarray(batch, dtype=np.float32))).numpy()
    return oracle


@pytest.fixture(scope="session")
def dense_mlp(tmp_path_factory):
    work = tmp_path_factory.mktemp("dense_mlp")
    torch.manual_seed(11)
    net = nn.Sequential(nn.Linear(12, 16), nn.ReLU(),
                        nn.Linear(16, 3), nn.Softmax(dim=-1))
    torch.save(net.state_dict(), work / "mlp.pt")
    arch = _write_arch(work / "arch.json", [12], [
        {"kind": "dense", "in_dim": 12, "out_dim": 16},
        {"kind": "relu"},
        {"kind": "dense", "in_dim": 16, "out_dim": 3},
        {"kind": "softmax"},
    ])
    return work / "mlp.pt", arch, _torch_oracle(net), (12,)


@pytest.fixture(scope="session")
def conv_net(tmp_path_factory):
    work = tmp_path_factory.mktemp("conv_net")
    torch.manual_seed(12)
    net = nn.Sequential(nn.Conv2d(1, 4, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
                        nn.Flatten(), nn.Linear(64, 3), nn.Softmax(dim=-1))
    torch.save(net.state_dict(), work / "conv.pth")
    arch = _write_arch(work / "arch.json", [1, 8, 8], [
        {"kind": "conv2d", "in_ch": 1, "out_ch": 4, "kernel": [3, 3],
         "stride": 1, "pad": 1},
        {"kind": "relu"},
        {"kind": "maxpool2x2"},
        {"kind": "flatten"},
        {"kind": "dense", "in_dim": 64, "out_dim": 3},
        {"kind": "softmax"},
    ])
    return work / "conv.pth", arch, _torch_oracle(net), (1, 8, 8)


@pytest.fixture(scope="session")
def npz_mlp(tmp_path_factory):
    work = tmp_path_factory.mktemp("npz_mlp")
    rng = np.random.default_rng(13)
    w1 = rng.normal(0, 0.4, (8, 6)).astype(np.float32)
    b1 = rng.normal(0, 0.1, 8).astype(np.float32)
    w2 = rng.normal(0, 0.4, (4, 8)).astype(np.float32)
    b2 = rng.normal(0, 0.1, 4).astype(np.float32)
    np.savez(work / "mlp.npz", **{"0.weight": w1, "0.bias": b1,
                                  "2.weight": w2, "2.bias": b2})
    arch = _write_arch(work / "arch.json", [6], [
        {"kind": "dense", "in_dim": 6, "out_dim": 8},
        {"kind": "relu"},
        {"kind": "dense", "in_dim": 8, "out_dim": 4},
        {"kind": "softmax"},
    ])

    def oracle(batch):
        x = np.asarray(batch, dtype=np.float64)
        h = np.maximum(x @ w1.T.astype(np.float64) + b1, 0.0)
        z = h @ w2.T.astype(np.float64) + b2
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    return work / "mlp.npz", arch, oracle, (6,)


FIXTURES = ("dense_mlp", "conv_net", "npz_mlp")
