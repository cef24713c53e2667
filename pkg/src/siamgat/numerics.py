"""Differentiable building blocks on float64 numpy arrays.

Tensors are plain ``np.ndarray`` objects in channels-last layout (``[..., C]``).
Every op follows the same contract::

    out, cache = op.forward(*inputs, training=...)
    dinputs = op.backward(dout, cache)

Parameter gradients accumulate into ``op.grads`` under the same keys as
``op.params``.  Because the forward state lives in the returned cache rather
than on the op, one op can be applied several times before any backward call,
which is how the Siamese branches share weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterator

import numpy as np

DTYPE = np.float64


class EmptyTemplateError(ValueError):
    """Raised when a softmax support has no active entries."""


class DiffOp:
    """Base class for ops with explicit forward/backward."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, DiffOp] = {}
        self.frozen = False

    def add(self, name: str, op: "DiffOp") -> "DiffOp":
        self.children[name] = op
        return op

    def forward(self, *inputs, training: bool = False):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def named_ops(self, prefix: str = "") -> Iterator[tuple[str, "DiffOp"]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_ops(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, op in self.named_ops(prefix):
            for k, v in op.params.items():
                yield path + k, v

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, op in self.named_ops(prefix):
            for k, v in op.buffers.items():
                yield path + k, v

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        """Yield ``(path, param, grad)`` for every non-frozen parameter."""
        for path, op in self.named_ops(prefix):
            if op.frozen:
                continue
            for k, v in op.params.items():
                g = op.grads.get(k)
                if g is None:
                    g = np.zeros_like(v)
                yield path + k, v, g

    def zero_grad(self) -> None:
        for _, op in self.named_ops():
            op.grads = {}

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if self.frozen:
            return
        if name in self.grads:
            self.grads[name] = self.grads[name] + grad
        else:
            self.grads[name] = np.array(grad, dtype=DTYPE)

    def set_frozen(self, frozen: bool = True) -> None:
        for _, op in self.named_ops():
            op.frozen = frozen

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        seen = set()
        for path, op in self.named_ops():
            for store in (op.params, op.buffers):
                for k in store:
                    key = path + k
                    if key not in state:
                        if strict:
                            raise KeyError(f"missing entry {key!r} in state")
                        continue
                    value = np.asarray(state[key], dtype=DTYPE)
                    if value.shape != store[k].shape:
                        raise ValueError(
                            f"shape mismatch for {key!r}: {value.shape} vs {store[k].shape}"
                        )
                    store[k] = value.copy()
                    seen.add(key)
        extra = set(state) - seen
        if strict and extra:
            raise KeyError(f"unexpected entries in state: {sorted(extra)}")


# --------------------------------------------------------------------------
# 1x1 convolution


def conv1x1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Apply ``weight @ x[..., :] + bias`` at every grid cell."""
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"dimension mismatch: input has {x.shape[-1]} channels, weight is {weight.shape}"
        )
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


class Conv1x1(DiffOp):
    def __init__(self, cin: int, cout: int, bias: bool = True, rng=None, std: float | None = None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        std = np.sqrt(2.0 / cin) if std is None else std
        self.params["weight"] = rng.normal(0.0, std, size=(cout, cin))
        if bias:
            self.params["bias"] = np.zeros(cout)

    @property
    def cin(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def cout(self) -> int:
        return self.params["weight"].shape[0]

    def forward(self, x, training: bool = False):
        return conv1x1(x, self.params["weight"], self.params.get("bias")), x

    def backward(self, dout, cache):
        x = cache
        g2 = dout.reshape(-1, dout.shape[-1])
        self.accumulate("weight", g2.T @ x.reshape(-1, x.shape[-1]))
        if "bias" in self.params:
            self.accumulate("bias", g2.sum(axis=0))
        return dout @ self.params["weight"]


# --------------------------------------------------------------------------
# Batch normalisation


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   momentum, epsilon)


def batchnorm(x: np.ndarray, state: BatchNormState, mode: str = "train") -> np.ndarray:
    """Functional batch norm over all leading axes; train mode updates ``state``."""
    op = BatchNorm(state.gamma.shape[0], momentum=state.momentum, epsilon=state.epsilon)
    op.params.update(gamma=state.gamma, beta=state.beta)
    op.buffers.update(running_mean=state.running_mean, running_var=state.running_var)
    out, _ = op.forward(x, training=mode == "train")
    state.running_mean = op.buffers["running_mean"]
    state.running_var = op.buffers["running_var"]
    return out


class BatchNorm(DiffOp):
    """Per-channel batch norm.  Statistics reduce over every axis but the last.

    ``momentum=None`` switches the running statistics to a cumulative average,
    used when calibrating a freshly initialised network.
    """

    def __init__(self, channels: int, momentum: float | None = 0.1, epsilon: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.epsilon = epsilon
        self.num_batches = 0
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, training: bool = False):
        C = self.params["gamma"].shape[0]
        if x.shape[-1] != C:
            raise ValueError(f"dimension mismatch: expected {C} channels, got {x.shape[-1]}")
        n = x.size // C if x.ndim else 0
        if n == 0:
            raise ValueError("batch norm received an empty batch")
        gamma, beta = self.params["gamma"], self.params["beta"]
        x2 = x.reshape(-1, C)
        if training and not self.frozen:
            if n < 2:
                raise ValueError("batch norm in train mode needs at least 2 values per channel")
            mean = x2.mean(axis=0)
            xc = x2 - mean
            var = np.einsum("ij,ij->j", xc, xc) / n
            self._update_running(mean, var * n / (n - 1))
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat = xc * inv_std
            return (xhat * gamma + beta).reshape(x.shape), ("train", xhat, inv_std)
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.epsilon)
        xhat = (x2 - self.buffers["running_mean"]) * inv_std
        return (xhat * gamma + beta).reshape(x.shape), ("infer", xhat, inv_std)

    def _update_running(self, mean, var) -> None:
        m = self.momentum
        if m is None:
            m = 1.0 / (self.num_batches + 1)
        self.num_batches += 1
        self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
        self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var

    def backward(self, dout, cache):
        mode, xhat, inv_std = cache
        C = xhat.shape[1]
        g2 = dout.reshape(-1, C)
        self.accumulate("gamma", np.einsum("ij,ij->j", g2, xhat))
        self.accumulate("beta", g2.sum(axis=0))
        dxhat = g2 * self.params["gamma"]
        if mode == "infer":
            return (dxhat * inv_std).reshape(dout.shape)
        n = g2.shape[0]
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                              - xhat * np.einsum("ij,ij->j", dxhat, xhat))
        return dx.reshape(dout.shape)


class ReLU(DiffOp):
    def forward(self, x, training: bool = False):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, cache):
        return dout * cache


# --------------------------------------------------------------------------
# Masked softmax


def masked_softmax(v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis restricted to entries where ``mask`` is set.

    Masked-out entries are exactly zero.  Max subtraction keeps it stable.
    """
    v = np.asarray(v, dtype=DTYPE)
    if mask is None:
        mask = np.ones(v.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    if v.shape[-1] == 0 or not mask.any(axis=-1).all():
        raise EmptyTemplateError("empty template node set")
    peak = np.where(mask, v, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, v - peak, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (y * dy).sum(axis=-1, keepdims=True))


class MaskedSoftmax(DiffOp):
    def forward(self, v, mask=None, training: bool = False):
        y = masked_softmax(v, mask)
        return y, y

    def backward(self, dout, cache):
        return masked_softmax_backward(cache, dout)


class Sequential(DiffOp):
    def __init__(self, *ops: DiffOp):
        super().__init__()
        for i, op in enumerate(ops):
            self.add(str(i), op)

    def forward(self, x, training: bool = False):
        caches = []
        for op in self.children.values():
            x, c = op.forward(x, training=training)
            caches.append(c)
        return x, caches

    def backward(self, dout, cache):
        for op, c in zip(reversed(list(self.children.values())), reversed(cache)):
            dout = op.backward(dout, c)
        return dout


# --------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str
    checked: int


def _is_diff_input(x: Any) -> bool:
    return isinstance(x, np.ndarray) and x.dtype == DTYPE


def grad_check(
    op: DiffOp,
    inputs: list,
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    training: bool = True,
    atol: float = 1e-5,
    wrt_inputs: bool = True,
) -> GradCheckReport:
    """Compare ``op.backward`` against central differences.

    The output is reduced to a scalar through a fixed-seed random projection;
    the two perturbed outputs are differenced elementwise before projecting,
    which keeps the roundoff of the difference quotient small.
    Every float64 array among ``inputs`` and every parameter of ``op`` is
    perturbed coordinate by coordinate.  The relative error of a coordinate
    is ``|a - n| / max(|a|, |n|, atol)``.  ``wrt_inputs=False`` checks only
    parameters, for ops that do not return input gradients.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = {path: (dict(o.buffers), o.num_batches if isinstance(o, BatchNorm) else None)
             for path, o in op.named_ops()}
    inputs = [np.array(x, dtype=DTYPE) if _is_diff_input(x) else x for x in inputs]

    def restore():
        for path, o in op.named_ops():
            bufs, nb = saved[path]
            o.buffers = dict(bufs)
            if nb is not None:
                o.num_batches = nb

    def run():
        out, cache = op.forward(*inputs, training=training)
        restore()
        out = np.asarray(out, dtype=DTYPE)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite forward value during gradient check")
        return out, cache

    out, cache = run()
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def output() -> np.ndarray:
        return run()[0]

    op.zero_grad()
    dins = op.backward(proj, cache)
    if not isinstance(dins, tuple):
        dins = (dins,)
    analytic: list[tuple[str, np.ndarray, np.ndarray]] = []
    diff_idx = [i for i, x in enumerate(inputs) if _is_diff_input(x)] if wrt_inputs else []
    for k, i in enumerate(diff_idx):
        analytic.append((f"input{i}", inputs[i], np.asarray(dins[k])))
    for path, p, g in op.named_grads():
        analytic.append((path, p, g))

    worst, worst_name, count = 0.0, "", 0
    for name, arr, grad in analytic:
        flat = arr.reshape(-1)
        gflat = np.broadcast_to(grad, arr.shape).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            op_ = output()
            flat[j] = orig - eps
            om = output()
            flat[j] = orig
            num = float(((op_ - om) * proj).sum()) / (2 * eps)
            a = gflat[j]
            err = abs(a - num) / max(abs(a), abs(num), atol)
            count += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{j}]"
    restore()
    op.zero_grad()
    return GradCheckReport(worst, bool(worst <= tol), worst_name, count)
