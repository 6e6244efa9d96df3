"""Dense float64 kernel: affine maps, ReLU, MAE/RMSE, Adam, finite-difference checks.

Backward passes are explicit adjoint rules; there is no tape. Parameters are
`Tensor`s whose `grad` slot accumulates until an optimizer step zeroes it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad")

    def __init__(self, values):
        self.values = np.array(values, dtype=np.float64, ndmin=2)
        if self.values.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {self.values.shape}")
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _vals(a) -> np.ndarray:
    return a.values if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def affine(x, W, b=None) -> np.ndarray:
    """x @ W + b, with b broadcast over rows."""
    xv, Wv = _vals(x), _vals(W)
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0]:
        raise ShapeError(f"affine: x {xv.shape} incompatible with W {Wv.shape}")
    out = xv @ Wv
    if b is not None:
        bv = _vals(b)
        if bv.shape != (1, Wv.shape[1]):
            raise ShapeError(f"affine: bias shape {bv.shape}, expected (1, {Wv.shape[1]})")
        out += bv
    return out


def affine_backward(dout: np.ndarray, x, W, b=None, need_dx: bool = True) -> np.ndarray | None:
    """Accumulate dL/dW (and dL/db) into the Tensors' grads; return dL/dx."""
    xv, Wv = _vals(x), _vals(W)
    if isinstance(W, Tensor):
        W.grad += xv.T @ dout
    if isinstance(b, Tensor):
        b.grad += dout.sum(axis=0, keepdims=True)
    dx = dout @ Wv.T if (need_dx or isinstance(x, Tensor)) else None
    if isinstance(x, Tensor):
        x.grad += dx
    return dx if need_dx else None


def relu(x) -> np.ndarray:
    return np.maximum(_vals(x), 0.0)


def relu_backward(dout: np.ndarray, pre: np.ndarray) -> np.ndarray:
    # subgradient 0 at pre == 0
    return dout * (pre > 0.0)


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p, t = np.asarray(_vals(pred), float).ravel(), np.asarray(_vals(target), float).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"prediction length {p.size} != target length {t.size}")
    if p.size == 0:
        raise ShapeError("need at least one prediction")
    return p, t


def mae_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient w.r.t. pred (sign / n, 0 at ties)."""
    p, t = _pair(pred, target)
    diff = p - t
    return float(np.mean(np.abs(diff))), (np.sign(diff) / diff.size).reshape(np.shape(_vals(pred)))


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update from the accumulated grads; zeroes the grads."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        g = p.grad
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        np.multiply(g, g, out=g)
        v += (1.0 - state.beta2) * g
        # g is reused as scratch: step = lr * m_hat / (sqrt(v_hat) + eps)
        np.divide(v, c2, out=g)
        np.sqrt(g, out=g)
        g += state.eps
        np.divide(m, g, out=g)
        g *= state.lr / c1
        p.values -= g
        p.zero_grad()
    return state


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def grad_check(
    loss_and_grad: Callable[[Mapping[str, Tensor]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic grads and central differences.

    `loss_and_grad(params)` returns the scalar loss and a name -> gradient map.
    Every tensor contributes at least a few entries; the rest are sampled at random
    (all entries are checked when there are no more than `n_samples`).
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    rng = np.random.default_rng(seed)
    _, analytic = loss_and_grad(params)
    analytic = {k: np.array(v, dtype=float) for k, v in analytic.items()}
    names = list(params)
    total = sum(params[k].values.size for k in names)
    picks: list[tuple[str, int]] = []
    if total <= n_samples:
        picks = [(k, i) for k in names for i in range(params[k].values.size)]
    else:
        for k in names:
            size = params[k].values.size
            picks += [(k, int(i)) for i in rng.choice(size, size=min(size, 4), replace=False)]
        flat = [(k, i) for k in names for i in range(params[k].values.size)]
        chosen = set(picks)
        extra = [flat[j] for j in rng.permutation(len(flat)) if flat[j] not in chosen]
        picks += extra[: max(0, n_samples - len(picks))]

    worst = 0.0
    for k, i in picks:
        vals = params[k].values.reshape(-1)
        old = vals[i]
        vals[i] = old + h
        lp, _ = loss_and_grad(params)
        vals[i] = old - h
        lm, _ = loss_and_grad(params)
        vals[i] = old
        num = (lp - lm) / (2.0 * h)
        a = analytic[k].reshape(-1)[i]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    for p in params.values():
        p.zero_grad()
    return worst


CHECKPOINT_MAGIC = b"RNPARAMS"
CHECKPOINT_VERSION = 1


def save_params(path, params: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """Binary checkpoint: magic, u32 version, u64 header length, JSON header, little-endian float64 data."""
    entries, offset = [], 0
    for name in sorted(params):
        shape = list(params[name].shape)
        entries.append({"name": name, "shape": shape, "offset": offset})
        offset += shape[0] * shape[1]
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name in sorted(params):
            fh.write(np.ascontiguousarray(params[name].values, dtype="<f8").tobytes())


def load_params(path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen])
    data = np.frombuffer(blob[20 + hlen:], dtype="<f8")
    params = {}
    for e in header["tensors"]:
        r, c = e["shape"]
        params[e["name"]] = Tensor(data[e["offset"]:e["offset"] + r * c].reshape(r, c).copy())
    return params, header["meta"]
