"""Differentiable tensor ops used by the model, on top of torch autograd.

Each op validates shapes up front and raises :class:`DimensionError` naming
both operand shapes. Broadcasting is limited to a trailing-shape operand
(bias-style) or a 2-D right operand of ``matmul``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def _shape(t) -> tuple:
    return tuple(t.shape)


def _require(cond: bool, op: str, *tensors) -> None:
    if not cond:
        shapes = " vs ".join(str(_shape(t)) for t in tensors)
        raise DimensionError(f"{op}: incompatible shapes {shapes}")


def _trailing(a: Tensor, b: Tensor) -> bool:
    return b.dim() <= a.dim() and _shape(a)[a.dim() - b.dim():] == _shape(b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.dim() >= 2 and b.dim() >= 2 and a.shape[-1] == b.shape[-2], "matmul", a, b)
    _require(b.dim() == 2 or _shape(a)[:-2] == _shape(b)[:-2], "matmul", a, b)
    return torch.matmul(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(_trailing(a, b), "add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(_trailing(a, b), "mul", a, b)
    return a * b


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _require(_shape(gamma) == _shape(beta) == _shape(x)[-1:], "layer_norm", x, gamma, beta)
    return F.layer_norm(x, _shape(gamma), gamma, beta, eps)


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    _require(table.dim() == 2, "embedding_lookup", table, ids)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: id out of range for table {_shape(table)}")
    return table[ids]


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = tensors[0]
    ax = axis % ref.dim()
    for t in tensors[1:]:
        _require(t.dim() == ref.dim() and all(
            t.shape[i] == ref.shape[i] for i in range(ref.dim()) if i != ax), "concat", ref, t)
    return torch.cat(list(tensors), dim=axis)


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise DimensionError(f"slice: [{start}:{stop}] outside axis {axis} of shape {_shape(x)}")
    return x.narrow(axis, start, stop - start)


def transpose(x: Tensor, a0: int = -2, a1: int = -1) -> Tensor:
    return x.transpose(a0, a1)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return x.reshape(*shape)
    except RuntimeError:
        raise DimensionError(f"reshape: cannot view {_shape(x)} as {tuple(shape)}") from None


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def rowwise_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with a per-row reduction order independent of the row count.

    The sum runs left to right over input features as elementwise ops, so no
    vectorised reduction can reorder it differently for different batch shapes.
    """
    _require(x.shape[-1] == w.shape[0] and _shape(b) == _shape(w)[1:], "rowwise_linear", x, w, b)
    acc = x[..., :1] * w[0]
    for k in range(1, w.shape[0]):
        acc = acc + x[..., k:k + 1] * w[k]
    return acc + b


ROW_LANES = 64


def rowwise_sigmoid(x: Tensor) -> Tensor:
    """Sigmoid whose per-row result does not depend on the number of rows.

    torch evaluates whole SIMD chunks with a vectorised exp and the leftover
    tail with the scalar one, and the two can differ in the last bit. Padding
    every row to ``ROW_LANES`` puts each row on whole chunks whatever the batch.
    """
    n = x.shape[-1]
    pad = -n % ROW_LANES
    if pad:
        x = F.pad(x, (0, pad))
    return torch.sigmoid(x.contiguous())[..., :n]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None,
                         causal: bool = False) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` is True where attention is allowed; ``causal`` applies the
    lower-triangular mask without materialising it.
    """
    _require(q.dim() == k.dim() == v.dim() and q.shape[-1] == k.shape[-1]
             and k.shape[-2] == v.shape[-2] and _shape(q)[:-2] == _shape(k)[:-2] == _shape(v)[:-2],
             "scaled_dot_attention", q, k, v)
    if mask is not None:
        _require(_shape(mask) == (q.shape[-2], k.shape[-2]), "scaled_dot_attention(mask)", q, k, mask)
    if causal:
        _require(mask is None and q.shape[-2] == k.shape[-2], "scaled_dot_attention(causal)", q, k)
        return F.scaled_dot_product_attention(q, k, v, is_causal=True)
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)


def cross_entropy(logits: Tensor, targets: Tensor, ignore_mask: Tensor | None = None) -> Tensor:
    """Mean NLL over positions whose ignore flag is 0.

    Ignored rows are removed before the softmax, so they carry exactly zero
    loss and zero gradient. With every position ignored the result is an
    exact zero that still participates in autograd.
    """
    _require(logits.dim() == 2 and targets.dim() == 1 and logits.shape[0] == targets.shape[0],
             "cross_entropy", logits, targets)
    if ignore_mask is None:
        keep = torch.ones_like(targets, dtype=torch.bool)
    else:
        _require(_shape(ignore_mask) == _shape(targets), "cross_entropy(ignore_mask)", targets, ignore_mask)
        keep = ~ignore_mask.bool()
    if not bool(keep.any()):
        return logits.sum() * 0.0
    rows = logits[keep]
    logp = torch.log_softmax(rows, dim=-1)
    return -logp.gather(1, targets[keep].unsqueeze(1)).mean()


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor | None], state: AdamState,
              lr: float = 3e-4, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``; missing grads count as zero."""
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise TrainingError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------

def numeric_grad(fn: Callable[[], Tensor], x: Tensor, index: tuple, h: float = 1e-4) -> float:
    """Central difference of scalar ``fn()`` w.r.t. one element of ``x`` (perturbed in place)."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + h
        fp = float(fn())
        x[index] = orig - h
        fm = float(fn())
        x[index] = orig
    return (fp - fm) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[], Tensor], inputs: dict[str, Tensor], h: float = 1e-4,
                    samples_per_tensor: int | None = None, seed: int = 0) -> tuple[float, str]:
    """Compare autograd against central differences; returns (max relative error, where).

    ``inputs`` must be f64 leaf tensors with ``requires_grad``. With
    ``samples_per_tensor`` only that many random elements of each are probed.
    """
    for t in inputs.values():
        t.grad = None
    out = fn()
    names = list(inputs)
    grads = torch.autograd.grad(out, [inputs[n] for n in names], allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst, where = 0.0, ""
    for name, g in zip(names, grads):
        x = inputs[name]
        if g is None:
            g = torch.zeros_like(x)
        n = x.numel()
        flat = range(n) if samples_per_tensor is None or samples_per_tensor >= n else \
            torch.randperm(n, generator=gen)[:samples_per_tensor].tolist()
        for i in flat:
            idx = tuple(int(v) for v in torch.unravel_index(torch.tensor(i), x.shape))
            num = numeric_grad(fn, x, idx, h)
            err = relative_error(float(g[idx]), num)
            if err > worst:
                worst, where = err, f"{name}{list(idx)}"
    return worst, where
