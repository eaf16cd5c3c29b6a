"""Minimal reverse-mode autodiff over dense f64 tensors, plus Adam.

Define-by-run: ops executed inside a `with Tape()` block append backward
rules in execution order, so the entry list is already topologically
sorted and `backward` is a single reverse sweep. Outside any tape, ops
compute values only (cheap inference mode).
"""

from __future__ import annotations

import math

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


class AutodiffError(ValueError):
    """Shape or usage error in a tape op."""


class NumericsError(RuntimeError):
    """NaN/Inf detected where finite values are required."""


class Tensor:
    """Dense row-major float64 array, optionally a gradient leaf."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered op record; append order doubles as topological order."""

    def __init__(self):
        self.entries = []  # (out, inputs, backward_fn)
        self._live = set()  # ids of tensors carrying gradient flow

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise AutodiffError("nested tapes are not supported")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False


_ACTIVE: Tape | None = None


def _tracked(*tensors) -> bool:
    if _ACTIVE is None:
        return False
    for t in tensors:
        if isinstance(t, Tensor) and (t.requires_grad or id(t) in _ACTIVE._live):
            return True
    return False


def _record(out: Tensor, inputs, backward_fn):
    _ACTIVE.entries.append((out, inputs, backward_fn))
    _ACTIVE._live.add(id(out))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if _tracked(a, b):
        def bwd(g, grads):
            _accum(grads, a, g @ b.data.T)
            _accum(grads, b, a.data.T @ g)
        _record(out, (a, b), bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise AutodiffError(f"add_broadcast: incompatible shapes {a.data.shape} + {b.data.shape}")
    if _tracked(a, b):
        def bwd(g, grads):
            _accum(grads, a, _unbroadcast(g, a.data.shape))
            _accum(grads, b, _unbroadcast(g, b.data.shape))
        _record(out, (a, b), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise AutodiffError(f"sub: incompatible shapes {a.data.shape} - {b.data.shape}")
    if _tracked(a, b):
        def bwd(g, grads):
            _accum(grads, a, _unbroadcast(g, a.data.shape))
            _accum(grads, b, _unbroadcast(-g, b.data.shape))
        _record(out, (a, b), bwd)
    return out


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, -g)
        _record(out, (a,), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise AutodiffError(f"elementwise_mul: incompatible shapes {a.data.shape} * {b.data.shape}")
    if _tracked(a, b):
        def bwd(g, grads):
            _accum(grads, a, _unbroadcast(g * b.data, a.data.shape))
            _accum(grads, b, _unbroadcast(g * a.data, b.data.shape))
        _record(out, (a, b), bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, g * c)
        _record(out, (a,), bwd)
    return out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    if _tracked(a):
        keep = a.data > 0.0
        def bwd(g, grads):
            _accum(grads, a, g * keep)
        _record(out, (a,), bwd)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    out = Tensor(y)
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, g * y * (1.0 - y))
        _record(out, (a,), bwd)
    return out


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    out = Tensor(y)
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, g * _sigmoid(a.data))
        _record(out, (a,), bwd)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise AutodiffError(f"softmax_rows: expected 2-d input, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)
    if _tracked(a):
        def bwd(g, grads):
            dot = (g * y).sum(axis=1, keepdims=True)
            _accum(grads, a, y * (g - dot))
        _record(out, (a,), bwd)
    return out


def logsumexp_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise AutodiffError(f"logsumexp_rows: expected 2-d input, got {a.data.shape}")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = Tensor(m + np.log(s))
    if _tracked(a):
        soft = e / s
        def bwd(g, grads):
            _accum(grads, a, g * soft)
        _record(out, (a,), bwd)
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, g / a.data)
        _record(out, (a,), bwd)
    return out


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, g * y)
        _record(out, (a,), bwd)
    return out


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, g * 2.0 * a.data)
        _record(out, (a,), bwd)
    return out


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _tracked(a):
        def bwd(g, grads):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(grads, a, np.broadcast_to(g, a.data.shape).copy())
        _record(out, (a,), bwd)
    return out


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if _tracked(a):
        def bwd(g, grads):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(grads, a, np.broadcast_to(g, a.data.shape) / count)
        _record(out, (a,), bwd)
    return out


def concat_cols(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors:
        if t.data.ndim != 2:
            raise AutodiffError(f"concat_cols: expected 2-d inputs, got {t.data.shape}")
    rows = {t.data.shape[0] for t in tensors}
    if len(rows) != 1:
        raise AutodiffError(f"concat_cols: row counts differ {[t.data.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    if _tracked(*tensors):
        widths = [t.data.shape[1] for t in tensors]
        def bwd(g, grads):
            at = 0
            for t, w in zip(tensors, widths):
                _accum(grads, t, g[:, at:at + w])
                at += w
        _record(out, tuple(tensors), bwd)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.data.shape[1]):
        raise AutodiffError(f"slice_cols: [{start}:{stop}] invalid for shape {a.data.shape}")
    out = Tensor(a.data[:, start:stop].copy())
    if _tracked(a):
        def bwd(g, grads):
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accum(grads, a, full)
        _record(out, (a,), bwd)
    return out


def take_rows(mat: Tensor, idx) -> Tensor:
    """Select rows of a 2-d tensor by integer index (embedding lookup)."""
    mat = as_tensor(mat)
    idx = np.asarray(idx, dtype=np.int64)
    if mat.data.ndim != 2:
        raise AutodiffError(f"take_rows: expected 2-d matrix, got {mat.data.shape}")
    out = Tensor(mat.data[idx])
    if _tracked(mat):
        def bwd(g, grads):
            full = np.zeros_like(mat.data)
            np.add.at(full, idx, g)
            _accum(grads, mat, full)
        _record(out, (mat,), bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise AutodiffError(f"transpose: expected 2-d input, got {a.data.shape}")
    out = Tensor(a.data.T.copy())
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, g.T)
        _record(out, (a,), bwd)
    return out


def concat_rows(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    cols = {t.data.shape[1] for t in tensors if t.data.ndim == 2}
    if len(cols) != 1 or any(t.data.ndim != 2 for t in tensors):
        raise AutodiffError(f"concat_rows: need 2-d inputs with equal widths, "
                            f"got {[t.data.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    if _tracked(*tensors):
        heights = [t.data.shape[0] for t in tensors]
        def bwd(g, grads):
            at = 0
            for t, h in zip(tensors, heights):
                _accum(grads, t, g[at:at + h])
                at += h
        _record(out, tuple(tensors), bwd)
    return out


def sum_segments(a: Tensor, n_segments: int) -> Tensor:
    """Sum S equal stacked blocks: (S*B, K) -> (B, K)."""
    a = as_tensor(a)
    rows = a.data.shape[0]
    if a.data.ndim != 2 or n_segments < 1 or rows % n_segments:
        raise AutodiffError(f"sum_segments: {n_segments} segments do not tile "
                            f"shape {a.data.shape}")
    b = rows // n_segments
    out = Tensor(a.data.reshape(n_segments, b, -1).sum(axis=0))
    if _tracked(a):
        def bwd(g, grads):
            _accum(grads, a, np.tile(g, (n_segments, 1)))
        _record(out, (a,), bwd)
    return out


def take_per_row(mat: Tensor, idx) -> Tensor:
    """Per-row column pick: out[n, 0] = mat[n, idx[n]]."""
    mat = as_tensor(mat)
    idx = np.asarray(idx, dtype=np.int64)
    if mat.data.ndim != 2 or idx.shape != (mat.data.shape[0],):
        raise AutodiffError(f"take_per_row: matrix {mat.data.shape} vs index {idx.shape}")
    rows = np.arange(mat.data.shape[0])
    out = Tensor(mat.data[rows, idx][:, None])
    if _tracked(mat):
        def bwd(g, grads):
            full = np.zeros_like(mat.data)
            np.add.at(full, (rows, idx), g[:, 0])
            _accum(grads, mat, full)
        _record(out, (mat,), bwd)
    return out


_OPS = {
    "matmul": matmul,
    "add_broadcast": add,
    "elementwise_mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_rows": softmax_rows,
    "log": log,
    "exp": exp,
    "square": square,
    "sum": tsum,
    "mean": tmean,
    "concat_cols": concat_cols,
    "slice_cols": slice_cols,
    "neg": neg,
    "sub": sub,
    "scale": scale,
    "softplus": softplus,
    "logsumexp_rows": logsumexp_rows,
    "take_rows": take_rows,
    "take_per_row": take_per_row,
    "transpose": transpose,
    "concat_rows": concat_rows,
    "sum_segments": sum_segments,
}


def forward_op(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a forward op by name; unknown kinds are usage errors."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise AutodiffError(f"unknown op kind {kind!r}") from None
    if kind in ("concat_cols", "concat_rows"):
        return fn(operands[0] if len(operands) == 1 else list(operands), **kwargs)
    return fn(*operands, **kwargs)


# ----------------------------------------------------------- backward

def _accum(grads: dict, t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad += g
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def backward(tape: Tape, loss: Tensor):
    """Reverse sweep; leaf gradients accumulate into Tensor.grad."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss.grad += np.ones_like(loss.data)
    for out, _inputs, bwd in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        bwd(g, grads)
    tape.entries.clear()
    tape._live.clear()


# ----------------------------------------------------------- parameters

class ParamSet:
    """Named gradient-leaf tensors of one model (or model part)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for t in self._params.values():
            t.grad[...] = 0.0

    def check_finite(self, context: str = ""):
        for name, t in self._params.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericsError(f"non-finite values in parameter {name!r} {context}".strip())

    def state_dict(self) -> dict:
        return {
            name: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
            for name, t in self._params.items()
        }

    def load_state_dict(self, state: dict):
        for name, entry in state.items():
            arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
            if name in self._params:
                self._params[name].data[...] = arr
            else:
                self.add(name, arr)


class AdamState:
    """Bias-corrected Adam moments for one ParamSet."""

    def __init__(self, params: ParamSet, lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: ParamSet, state: AdamState):
    """One Adam update (gradient descent direction); zeroes gradients."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grads()


# ----------------------------------------------------- layer helpers

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(params: ParamSet, prefix: str, sizes, rng: np.random.Generator,
             zero: bool = False):
    """Register weight/bias pairs {prefix}.W{i} / {prefix}.b{i} for each layer."""
    for i in range(len(sizes) - 1):
        w = np.zeros((sizes[i], sizes[i + 1])) if zero else glorot(rng, sizes[i], sizes[i + 1])
        params.add(f"{prefix}.W{i}", w)
        params.add(f"{prefix}.b{i}", np.zeros(sizes[i + 1]))


def mlp_forward(params: ParamSet, prefix: str, x: Tensor, n_layers: int,
                hidden_activation=relu, output_activation=None) -> Tensor:
    """Apply the registered layers; ReLU between layers by default."""
    h = x
    for i in range(n_layers):
        h = add(matmul(h, params[f"{prefix}.W{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = hidden_activation(h)
    if output_activation is not None:
        h = output_activation(h)
    return h


# ------------------------------------------------------ gradient check

def gradient_check(params: ParamSet, forward, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `forward` must be a deterministic closure over `params` returning a
    scalar Tensor when called with no arguments.
    """
    params.zero_grads()
    with Tape() as tape:
        loss = forward()
        backward(tape, loss)
    analytic = {name: t.grad.copy() for name, t in params.items()}
    params.zero_grads()

    worst = 0.0
    for name, t in params.items():
        flat = t.data.ravel()
        an = analytic[name].ravel()
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            up = float(forward().data)
            flat[j] = keep - step
            dn = float(forward().data)
            flat[j] = keep
            numeric = (up - dn) / (2.0 * step)
            denom = abs(an[j]) + abs(numeric) + 1e-12
            worst = max(worst, abs(an[j] - numeric) / denom)
    return worst


def gaussian_log_density(x: Tensor, mean: Tensor, logvar: Tensor) -> Tensor:
    """Elementwise log N(x; mean, exp(logvar)), built from tape ops."""
    diff = sub(x, mean)
    quad = mul(square(diff), exp(neg(logvar)))
    inner = add(add(logvar, quad), Tensor(np.full(1, _LOG_2PI)))
    return scale(inner, -0.5)


def gaussian_kl(mean_q: Tensor, logvar_q: Tensor, mean_p: Tensor, logvar_p: Tensor) -> Tensor:
    """Elementwise KL(N(mean_q, var_q) || N(mean_p, var_p)) for diagonals."""
    var_ratio = exp(sub(logvar_q, logvar_p))
    quad = mul(square(sub(mean_q, mean_p)), exp(neg(logvar_p)))
    inner = add(add(var_ratio, quad), sub(logvar_p, logvar_q))
    return scale(add(inner, Tensor(np.full(1, -1.0))), 0.5)
