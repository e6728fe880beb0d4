"""Differentiable-computation substrate.

Layers, reverse-mode propagation and the adaptive optimiser come from torch.
This module adds what the rest of the package relies on beyond that: a
finite-difference gradient oracle, a guarded backward pass, the
straight-through categorical sampler, and a plain binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteValue, NonScalarRoot

Tensor = torch.Tensor
Module = nn.Module

DTYPE = torch.float32

CHECKPOINT_MAGIC = b"NGCK"


def check_finite(t: Tensor, op: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteValue(f"non-finite value produced by {op}", op=op)
    return t


def forward_backward(root: Tensor, params: Optional[Iterable[Tensor]] = None) -> List[Tensor]:
    """Backpropagate from a scalar ``root``.

    Gradients accumulate into ``.grad`` as usual. When ``params`` is given the
    list of their gradients is returned, with zeros for parameters the root does
    not depend on (including a constant root).
    """
    if root.numel() != 1:
        raise NonScalarRoot(f"backward root must be scalar, got shape {tuple(root.shape)}")
    op = type(root.grad_fn).__name__ if root.grad_fn is not None else "leaf"
    check_finite(root.detach(), op)
    params = list(params) if params is not None else []
    if root.requires_grad:
        root.backward()
    out = []
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        check_finite(p.grad, f"backward into {tuple(p.shape)} parameter")
        out.append(p.grad)
    return out


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-6,
    exclude: Optional[np.ndarray] = None,
) -> float:
    """Compare autograd against central finite differences.

    ``f`` maps a float64 tensor shaped like ``x`` to a scalar. Coordinates where
    ``exclude`` is True (e.g. near a kink) are skipped.

    Returns:
        ``max |analytic - numeric| / max(1, |numeric|)`` over the coordinates.
    """
    x0 = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone()
    xv = x0.clone().requires_grad_(True)
    y = f(xv)
    if y.numel() != 1:
        raise NonScalarRoot("grad_check needs a scalar function")
    check_finite(y.detach(), "grad_check forward")
    (analytic,) = torch.autograd.grad(y, xv, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    check_finite(analytic, "grad_check backward")
    flat = x0.reshape(-1)
    skip = None if exclude is None else np.asarray(exclude, dtype=bool).reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            if skip is not None and skip[i]:
                continue
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += eps
            xm[i] -= eps
            fp = float(f(xp.reshape(x0.shape)))
            fm = float(f(xm.reshape(x0.shape)))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteValue("grad_check perturbation produced a non-finite value", op="grad_check")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst


def straight_through_sample(
    logits: Tensor,
    tau: float,
    generator: Optional[torch.Generator] = None,
    hard: bool = True,
) -> Tuple[Tensor, Tensor]:
    """Temperature-relaxed categorical sample over the last axis.

    Returns ``(sample, soft)``. With ``hard`` the forward value of ``sample``
    is the one-hot argmax of the relaxed draw while its gradient is that of
    ``soft``.
    """
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
    gumbel = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
    soft = torch.softmax((logits + gumbel) / tau, dim=-1)
    if not hard:
        return soft, soft
    index = soft.argmax(dim=-1, keepdim=True)
    onehot = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    return onehot - soft.detach() + soft, soft


def make_optimizer(params: Iterable[Tensor], lr: float = 1e-3, weight_decay: float = 0.0) -> torch.optim.Optimizer:
    """Adam; with ``weight_decay`` > 0, Adam with decoupled weight decay (AdamW)."""
    if weight_decay > 0:
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    return torch.optim.Adam(params, lr=lr)


# --------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, raw <f4 payloads


def save_checkpoint(path, tensors: Dict[str, Tensor], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    entries = []
    payload = []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4"})
        payload.append(arr.tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payload:
            fh.write(blob)
    return path


def load_checkpoint(path) -> Tuple[Dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a numgame checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        out = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(4 * count), dtype=entry["dtype"]).reshape(shape)
            out[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out, header.get("meta", {})
