"""Differentiable building blocks on top of torch autograd.

The ops here accept a leading batch dimension and nothing fancier: shapes
must otherwise match exactly.  ``freeze`` is the single primitive used to
take a value out of the gradient graph.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float64
CHECKPOINT_VERSION = 1


def _check_same(a: torch.Tensor, b: torch.Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``x @ w`` with ``w`` a 2-d weight and ``x`` any (..., in) tensor."""
    if w.dim() != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul: cannot multiply {tuple(x.shape)} by {tuple(w.shape)}")
    return x @ w


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape and not (b.dim() == 1 and b.shape[0] == a.shape[-1]):
        raise ValueError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def scale(x: torch.Tensor, c: float) -> torch.Tensor:
    return x * c


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b, "mul")
    return a * b


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * weight + bias


def masked_softmax(logits: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis; disallowed entries get exactly zero weight.

    Every row must allow at least one entry.
    """
    if allowed.dim() > logits.dim() or allowed.shape != logits.shape[logits.dim() - allowed.dim():]:
        raise ValueError(f"masked_softmax: mask {tuple(allowed.shape)} vs logits {tuple(logits.shape)}")
    if not bool(allowed.any(dim=-1).all()):
        raise ValueError("masked_softmax: a row has no allowed entries")
    return torch.softmax(logits.masked_fill(~allowed, float("-inf")), dim=-1)


def concat(parts: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    return torch.cat(list(parts), dim=dim)


def take(x: torch.Tensor, index: slice | int, dim: int = -1) -> torch.Tensor:
    sl = [slice(None)] * x.dim()
    sl[dim] = index
    return x[tuple(sl)]


def embedding(table: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    if index.dtype not in (torch.int64, torch.int32):
        raise ValueError("embedding index must be integer")
    return table[index]


def freeze(x: torch.Tensor) -> torch.Tensor:
    """Copy of ``x`` outside the gradient graph."""
    return x.detach()


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1 or loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def masked_mean(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return x.mean()
    _check_same(x, mask, "masked_mean")
    m = mask.to(x.dtype)
    return (x * m).sum() / m.sum().clamp_min(1.0)


def expectile_loss(pred: torch.Tensor, target: torch.Tensor, tau: float,
                   mask: torch.Tensor | None = None) -> torch.Tensor:
    """Asymmetric squared error: weight ``tau`` where target >= pred."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    _check_same(pred, target, "expectile_loss")
    residual = target - pred
    weight = torch.where(residual >= 0, torch.full_like(residual, tau), torch.full_like(residual, 1.0 - tau))
    return masked_mean(weight * residual * residual, mask)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)

    def hyper(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "betas": list(self.betas), "eps": self.eps,
                "step": self.step}


@torch.no_grad()
def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: OptimizerState) -> None:
    """Decoupled weight decay Adam, updating ``params`` in place."""
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(state.exp_avg) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError("gradient / moment shape does not match parameter")
        if state.weight_decay:
            p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)


@torch.no_grad()
def clip_grad_norm(grads: Iterable[torch.Tensor | None], max_norm: float) -> float:
    grads = [g for g in grads if g is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(factor)
    return total


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@torch.no_grad()
def numeric_grad(fn: Callable[[], torch.Tensor], param: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat, gflat = param.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + step
        hi = float(fn())
        flat[i] = orig - step
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both are below ``floor``."""
    diff = float(torch.linalg.vector_norm(analytic - numeric))
    size = max(float(torch.linalg.vector_norm(analytic)), float(torch.linalg.vector_norm(numeric)))
    if size < floor:
        return 0.0 if diff < floor else math.inf
    return diff / size


def gradcheck(fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor], step: float = 1e-3) -> dict[str, float]:
    """Per-parameter relative error between autograd and central differences."""
    for p in params.values():
        p.grad = None
    backward(fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        errors[name] = relative_error(analytic, numeric_grad(fn, p, step))
    return errors


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _tensor_record(t: torch.Tensor) -> dict:
    return {"shape": list(t.shape), "data": t.detach().cpu().to(torch.float64).reshape(-1).tolist()}


def _tensor_from(rec: dict, dtype) -> torch.Tensor:
    return torch.tensor(rec["data"], dtype=dtype).reshape(rec["shape"])


def save_checkpoint(path: str | Path, params: dict[str, torch.Tensor], opt: OptimizerState | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(params)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "params": {n: _tensor_record(params[n]) for n in names},
        "meta": meta or {},
    }
    if opt is not None:
        doc["optimizer"] = {
            **opt.hyper(),
            "exp_avg": {n: _tensor_record(m) for n, m in zip(names, opt.exp_avg)},
            "exp_avg_sq": {n: _tensor_record(v) for n, v in zip(names, opt.exp_avg_sq)},
        }
    path.write_text(json.dumps(doc))
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, dtype=DEFAULT_DTYPE):
    """Returns ``(params, optimizer_state_or_None, meta)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')}")
    params = {n: _tensor_from(r, dtype) for n, r in doc["params"].items()}
    opt = None
    if "optimizer" in doc:
        o = doc["optimizer"]
        opt = OptimizerState(lr=o["lr"], weight_decay=o["weight_decay"], betas=tuple(o["betas"]), eps=o["eps"],
                             step=o["step"],
                             exp_avg=[_tensor_from(o["exp_avg"][n], dtype) for n in params],
                             exp_avg_sq=[_tensor_from(o["exp_avg_sq"][n], dtype) for n in params])
    return params, opt, doc.get("meta", {})
