"""Small reverse-mode autodiff over numpy float64 arrays.

Only the operations the density models, the critic and the training losses
need are provided. Every op records a closure that pushes the output
gradient back to its parents; ``Tensor.backward`` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar output, got shape {self.shape} from op {self.op!r}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # drop intermediate grads so repeated backward passes on leaves accumulate cleanly
        for node in order:
            if node._parents:
                node.grad = None

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward):
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


# -- elementwise binary ----------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", bw)


def neg(a):
    def bw(g):
        _acc(a, -g)

    return _make(-a.data, (a,), "neg", bw)


def affine(a, scale, shift):
    """Element-wise ``a * scale + shift`` with constant (non-tensor) coefficients."""
    scale = np.asarray(scale, dtype=np.float64)

    def bw(g):
        _acc(a, _unbroadcast(g * scale, a.shape))

    return _make(a.data * scale + shift, (a,), "affine", bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", bw)


# -- elementwise unary -----------------------------------------------------
def exp(a):
    out = np.exp(a.data)

    def bw(g):
        _acc(a, g * out)

    return _make(out, (a,), "exp", bw)


def log(a):
    def bw(g):
        _acc(a, g / a.data)

    return _make(np.log(a.data), (a,), "log", bw)


def tanh(a):
    out = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - out * out))

    return _make(out, (a,), "tanh", bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _acc(a, g * mask)

    return _make(a.data * mask, (a,), "relu", bw)


def square(a):
    def bw(g):
        _acc(a, 2.0 * g * a.data)

    return _make(a.data * a.data, (a,), "square", bw)


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _make(out, (a,), "sigmoid", bw)


def softplus(a):
    """log(1 + exp(a)), stable for large |a|."""
    out = np.logaddexp(0.0, a.data)

    def bw(g):
        _acc(a, g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return _make(out, (a,), "softplus", bw)


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _acc(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), "clip", bw)


# -- reductions ------------------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return affine(tsum(a, axis, keepdims), 1.0 / n, 0.0)


def logsumexp(a, axis=-1, keepdims=False):
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    soft = s / tot

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, g * soft)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), "logsumexp", bw)


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis=axis))


# -- shape ops -------------------------------------------------------------
def getitem(a, idx):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _acc(a, full)

    return _make(a.data[idx], (a,), "getitem", bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", bw)


def reshape(a, shape):
    def bw(g):
        _acc(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _acc(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), "transpose", bw)


def broadcast_to(a, shape):
    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape), (a,), "broadcast_to", bw)


# -- layers ----------------------------------------------------------------
ACTIVATIONS = {"tanh": tanh, "relu": relu}


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class MLP:
    """Affine + activation stack with a linear last layer.

    ``stack`` keeps K independent copies of the network in one set of
    batched weights of shape ``(K, fan_in, fan_out)``; inputs then carry a
    leading K axis (or broadcast to it).
    """

    def __init__(self, sizes, activation="tanh", rng=None, stack=None, zero_last=False):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.stack = stack
        lead = () if stack is None else (stack,)
        self.weights = []
        self.biases = []
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if zero_last and i == len(self.sizes) - 2:
                w = np.zeros(lead + (fi, fo))
            else:
                w = glorot(rng, fi, fo, lead + (fi, fo))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(lead + (1, fo) if stack else (fo,)), requires_grad=True))

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def __call__(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"MLP: input width {x.shape[-1]} != expected {self.in_dim}")
        act = ACTIVATIONS[self.activation]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = add(matmul(x, w), b)
            if i < n - 1:
                x = act(x)
        return x

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out


def mlp_apply(params: MLP, x):
    return params(x)


class Adam:
    """Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("adam_step: gradient list length does not match parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.m = [np.array(m, dtype=np.float64) for m in state["m"]]
        self.v = [np.array(v, dtype=np.float64) for v in state["v"]]


def adam_step(state: Adam, params, grads):
    """Functional wrapper: apply one Adam update to ``params`` using ``grads``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("adam_step: parameter list does not match optimizer state")
    state.step(grads)
    return params, state


# -- checkpoints -----------------------------------------------------------
def params_to_dict(named, tag, hyper=None):
    return {
        "format_version": FORMAT_VERSION,
        "model": tag,
        "hyperparameters": hyper or {},
        "params": {
            k: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()} for k, t in named.items()
        },
    }


def load_params_dict(named, payload):
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    stored = payload["params"]
    missing = set(named) - set(stored)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    for k, t in named.items():
        entry = stored[k]
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != t.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
        t.data = arr


def save_checkpoint(path, named, tag, hyper=None):
    Path(path).write_text(json.dumps(params_to_dict(named, tag, hyper)))


def read_checkpoint(path):
    return json.loads(Path(path).read_text())
