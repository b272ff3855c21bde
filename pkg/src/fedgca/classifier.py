"""Small GAP-headed CNN operating on a flat parameter vector.

Flat parameter order (the checkpoint and exchange format)::

    for each conv block b:   conv{b}.weight (out, in, 3, 3), conv{b}.bias (out,)
    then:                    fc.weight (C, L), fc.bias (C,)

all in row-major order, where ``L`` is the last entry of ``conv_channels``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from fedgca.streams import make_rng

ModelParams = torch.Tensor

CAM_FLOOR = 1e-3


@dataclass(frozen=True)
class ClassifierSpec:
    input_shape: tuple[int, int, int] = (3, 28, 28)
    conv_channels: tuple[int, ...] = (32, 64, 128)
    class_count: int = 10

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        if not self.conv_channels:
            raise ValueError("conv_channels must be non-empty")
        h, w = self.feature_size
        if h < 2 or w < 2:
            raise ValueError(f"final feature map {h}x{w} is smaller than 2x2; input {self.input_shape} too small")

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_shape[1:]
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
        return h, w

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c_in = self.input_shape[0]
        for b, c_out in enumerate(self.conv_channels):
            shapes.append((f"conv{b}.weight", (c_out, c_in, 3, 3)))
            shapes.append((f"conv{b}.bias", (c_out,)))
            c_in = c_out
        shapes.append(("fc.weight", (self.class_count, c_in)))
        shapes.append(("fc.bias", (self.class_count,)))
        return shapes

    @property
    def D(self) -> int:
        return sum(math.prod(s) for _, s in self.layer_shapes())

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ClassifierSpec":
        return cls(tuple(doc["input_shape"]), tuple(doc["conv_channels"]), int(doc["class_count"]))


def unflatten(spec: ClassifierSpec, flat: ModelParams) -> dict[str, torch.Tensor]:
    """Views into ``flat``; gradients flow back to the flat vector."""
    if flat.ndim != 1 or flat.numel() != spec.D:
        raise ValueError(f"expected a flat vector of length {spec.D}, got shape {tuple(flat.shape)}")
    out, offset = {}, 0
    for name, shape in spec.layer_shapes():
        size = math.prod(shape)
        out[name] = flat[offset : offset + size].view(shape)
        offset += size
    return out


def _as_tensor(batch, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch)
    return batch.to(dtype)


def forward(spec: ClassifierSpec, params: ModelParams, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits ``(n, C)`` and last-block feature maps ``(n, L, h_f, w_f)``."""
    x = _as_tensor(batch, params.dtype)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"batch shape {tuple(x.shape[1:])} does not match input shape {spec.input_shape}")
    layers = unflatten(spec, params)
    h = x
    for b in range(len(spec.conv_channels)):
        h = F.conv2d(h, layers[f"conv{b}.weight"], layers[f"conv{b}.bias"], padding=1)
        h = F.max_pool2d(F.relu(h), 2)
    pooled = h.mean(dim=(2, 3))
    logits = pooled @ layers["fc.weight"].T + layers["fc.bias"]
    return logits, h


def softmax(logits: torch.Tensor) -> torch.Tensor:
    z = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def predict_softmax(spec: ClassifierSpec, params: ModelParams, batch) -> torch.Tensor:
    logits, _ = forward(spec, params, batch)
    return softmax(logits)


def raw_cam(fc_weight: torch.Tensor, features: torch.Tensor, class_ids) -> torch.Tensor:
    """``M = sum_l W[class, l] * F_l`` for each image; returns ``(n, h_f, w_f)``."""
    class_ids = torch.as_tensor(class_ids, dtype=torch.long)
    if class_ids.numel() and (class_ids.min() < 0 or class_ids.max() >= fc_weight.shape[0]):
        raise ValueError(f"class ids outside [0, {fc_weight.shape[0]})")
    weights = fc_weight[class_ids]
    return torch.einsum("nl,nlhw->nhw", weights, features)


def normalize_cam(raw: torch.Tensor, temperature: float = 1.0, mode: str = "softmax", floor: float = CAM_FLOOR) -> torch.Tensor:
    """Turn raw CAMs ``(..., h, w)`` into floored spatial probability maps."""
    flat = raw.flatten(-2)
    if mode == "softmax":
        probs = softmax(flat / temperature)
    elif mode == "minmax":
        shifted = flat - flat.min(dim=-1, keepdim=True).values
        total = shifted.sum(dim=-1, keepdim=True)
        uniform = torch.full_like(flat, 1.0 / flat.shape[-1])
        probs = torch.where(total > 1e-12, shifted / total.clamp_min(1e-12), uniform)
    else:
        raise ValueError(f"unknown CAM normalization {mode!r}")
    probs = (1 - floor) * probs + floor / flat.shape[-1]
    return probs.view_as(raw)


@dataclass
class CamMap:
    values: torch.Tensor
    normalized: torch.Tensor


def compute_cam(
    spec: ClassifierSpec, params: ModelParams, batch, class_ids, temperature: float = 1.0, mode: str = "softmax"
) -> list[CamMap]:
    _, feats = forward(spec, params, batch)
    fc = unflatten(spec, params)["fc.weight"]
    raw = raw_cam(fc, feats, class_ids)
    norm = normalize_cam(raw, temperature, mode)
    return [CamMap(r, m) for r, m in zip(raw, norm)]


def gradient(params: ModelParams, loss_fn: Callable[[ModelParams], torch.Tensor]) -> torch.Tensor:
    """Reverse-mode gradient of the scalar ``loss_fn(params)`` w.r.t. the flat vector."""
    w = params.detach().requires_grad_(True)
    loss = loss_fn(w)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValueError("loss_fn must return a scalar tensor")
    if not loss.requires_grad:
        return torch.zeros_like(params)
    (g,) = torch.autograd.grad(loss.reshape(()), w, allow_unused=True)
    return torch.zeros_like(params) if g is None else g


def init_params(spec: ClassifierSpec, seed: int, dtype: torch.dtype = torch.float32) -> ModelParams:
    """He-normal (fan-in) weights, zero biases."""
    rng = make_rng((seed,))
    chunks = []
    for name, shape in spec.layer_shapes():
        if name.endswith(".bias"):
            chunks.append(np.zeros(math.prod(shape)))
        else:
            fan_in = math.prod(shape[1:])
            chunks.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=math.prod(shape)))
    return torch.from_numpy(np.concatenate(chunks)).to(dtype)


class CamNet(nn.Module):
    """``nn.Module`` twin of :func:`forward` for interop with module-based code."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        c_in = spec.input_shape[0]
        self.convs = nn.ModuleList()
        for c_out in spec.conv_channels:
            self.convs.append(nn.Conv2d(c_in, c_out, 3, padding=1))
            c_in = c_out
        self.fc = nn.Linear(c_in, spec.class_count)

    def forward(self, x):
        for conv in self.convs:
            x = F.max_pool2d(F.relu(conv(x)), 2)
        return self.fc(x.mean(dim=(2, 3)))

    def ordered_parameters(self) -> list[nn.Parameter]:
        out = []
        for conv in self.convs:
            out += [conv.weight, conv.bias]
        return out + [self.fc.weight, self.fc.bias]


def get_params(module: CamNet) -> ModelParams:
    return torch.cat([p.detach().reshape(-1) for p in module.ordered_parameters()])


def set_params(module: CamNet, flat: ModelParams) -> None:
    layers = unflatten(module.spec, flat)
    with torch.no_grad():
        for p, (_, view) in zip(module.ordered_parameters(), layers.items()):
            p.copy_(view)


def save_checkpoint(path, spec: ClassifierSpec, params: ModelParams, **extra) -> Path:
    """JSON document with fields in order: ``spec``, ``flat``, then any extras."""
    doc = {"spec": spec.to_dict(), "dtype": str(params.dtype).replace("torch.", ""), "flat": params.double().tolist()}
    for k, v in extra.items():
        doc[k] = v.double().tolist() if isinstance(v, torch.Tensor) else v
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path) -> tuple[ClassifierSpec, ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    spec = ClassifierSpec.from_dict(doc.pop("spec"))
    dtype = getattr(torch, doc.pop("dtype", "float32"))
    flat = torch.tensor(doc.pop("flat"), dtype=torch.float64).to(dtype)
    if flat.numel() != spec.D:
        raise ValueError(f"{path}: checkpoint has {flat.numel()} parameters, spec needs {spec.D}")
    return spec, flat, doc


def feature_shape(spec: ClassifierSpec) -> Sequence[int]:
    return (spec.conv_channels[-1], *spec.feature_size)
