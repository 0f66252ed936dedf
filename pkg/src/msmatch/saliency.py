"""Guided-backpropagation saliency maps.

The model is cloned and each rectifier module (ReLU, ReLU6, SiLU) is replaced
by a guided version: in the backward pass the signal is zeroed wherever the
forward input was <= 0 and wherever the incoming gradient is negative.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datasets import ImageSample

RECTIFIERS = (nn.ReLU, nn.ReLU6, nn.SiLU)


class SaliencyError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray  # [C, H, W] input gradient under the guided rule
    sample_id: str
    target_class: int

    def render(self) -> np.ndarray:
        """uint8 [H, W]: channel-wise max |value|, scaled by the map's max."""
        mag = np.abs(self.values).max(axis=0)
        peak = mag.max()
        if peak > 0:
            mag = mag / peak
        return np.round(255 * mag).astype(np.uint8)

    def save(self, png_path, npy_path=None) -> None:
        from PIL import Image

        Image.fromarray(self.render(), mode="L").save(png_path)
        if npy_path is not None:
            np.save(npy_path, self.values)


class _GuidedFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, kind, sink):
        ctx.save_for_backward(x)
        ctx.kind, ctx.sink = kind, sink
        if kind == "relu6":
            return torch.clamp(x, 0, 6)
        return torch.relu(x) if kind == "relu" else nn.functional.silu(x)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        if ctx.kind == "relu":
            local = torch.ones_like(x)
        elif ctx.kind == "relu6":
            local = (x < 6).to(x.dtype)
        else:
            s = torch.sigmoid(x)
            local = s * (1 + x * (1 - s))
        out = grad.clamp(min=0) * local * (x > 0).to(x.dtype)
        if ctx.sink is not None:
            ctx.sink.append((x.detach().clone(), out.detach().clone()))
        return out, None, None


class GuidedRectifier(nn.Module):
    def __init__(self, kind: str, sink: list | None = None):
        super().__init__()
        self.kind = kind
        self.sink = sink

    def forward(self, x):
        return _GuidedFn.apply(x, self.kind, self.sink)


def _kind(module: nn.Module) -> str:
    if isinstance(module, nn.ReLU6):
        return "relu6"
    return "relu" if isinstance(module, nn.ReLU) else "silu"


def guided_copy(model: nn.Module, sink: list | None = None) -> nn.Module:
    """Deep copy of ``model`` with every rectifier swapped for its guided version.

    With ``sink`` given, each rectifier appends ``(forward_input, backward_out)``
    during backward, for inspection.
    """
    clone = copy.deepcopy(model).eval()
    for parent in list(clone.modules()):
        for name, child in list(parent.named_children()):
            if isinstance(child, RECTIFIERS):
                setattr(parent, name, GuidedRectifier(_kind(child), sink))
    return clone


def _input_tensor(sample, model: nn.Module) -> tuple[torch.Tensor, str]:
    if isinstance(sample, ImageSample):
        x, sid = sample.pixels, sample.id
    else:
        x, sid = sample, ""
    x = torch.as_tensor(np.asarray(x))
    if x.ndim != 3:
        raise SaliencyError(f"expected a [C, H, W] sample, got {tuple(x.shape)}")
    dtype = next(model.parameters()).dtype
    return x.to(dtype)[None].clone().requires_grad_(True), sid


def _input_gradient(model: nn.Module, sample, target: int | None):
    x, sid = _input_tensor(sample, model)
    logits = model(x)
    k = logits.shape[1]
    if target is None:
        target = int(logits.argmax(dim=1))
    if not 0 <= target < k:
        raise SaliencyError(f"target class {target} outside [0, {k})")
    model.zero_grad(set_to_none=True)
    logits[0, target].backward()
    return x.grad[0].detach().cpu().numpy(), sid, target


def guided_backprop(model: nn.Module, sample, target: int | None = None, sink: list | None = None) -> SaliencyMap:
    """Guided-backprop map of ``target`` (default: the predicted class).

    ``sample`` must be normalized the way the model was trained. The model
    itself is left untouched; the instrumented copy is discarded.
    """
    guided = guided_copy(model, sink)
    values, sid, target = _input_gradient(guided, sample, target)
    return SaliencyMap(values, sid, target)


def vanilla_gradient(model: nn.Module, sample, target: int | None = None) -> SaliencyMap:
    clone = copy.deepcopy(model).eval()
    values, sid, target = _input_gradient(clone, sample, target)
    return SaliencyMap(values, sid, target)


def write_maps(maps, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for m in maps:
        stem = (m.sample_id or "sample").replace("/", "__")
        png = out_dir / f"{stem}_t{m.target_class}.png"
        m.save(png, out_dir / f"{stem}_t{m.target_class}.npy")
        written.append(png)
    return written
