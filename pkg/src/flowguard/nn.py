"""Small reverse-mode autodiff layer over numpy float64 arrays.

Every op builds a :class:`Tensor` that remembers its parents and a closure
that pushes the output gradient back to them. :func:`backward` walks that
tape once in reverse topological order. The recurrent layer is a single
fused op (masked GRU over a whole sequence, hand-written BPTT) so the tape
stays short for T=50 sequences.

RNG: all randomness goes through ``numpy.random.Generator`` backed by PCG64,
whose stream for a given seed is fixed across numpy versions and platforms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "consumed")

    def __init__(self, value, parents: tuple = (), backward_fn=None, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.consumed = False

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(value, parents, fn) -> Tensor:
    return Tensor(value, parents, fn)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is released afterwards; calling this twice on the same graph
    raises, since intermediate gradients would be double counted.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss.consumed:
        raise RuntimeError("backward() already ran on this graph; rebuild the forward pass")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    for node in order:
        if node.backward_fn is not None:
            node.grad = None
            node.parents = ()
            node.backward_fn = None
    loss.consumed = True


# -- elementwise / linear algebra ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _node(a.value + b.value, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _node(a.value * b.value, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.value * c, (a,), lambda g: _accum(a, g * c))


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of shape (..., k) and b of shape (k, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.value.ndim != 2 or a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")

    def fn(g):
        _accum(a, g @ b.value.T)
        k, m = b.value.shape
        _accum(b, a.value.reshape(-1, k).T @ g.reshape(-1, m))

    return _node(a.value @ b.value, (a, b), fn)


def relu(a: Tensor) -> Tensor:
    on = a.value > 0
    return _node(np.where(on, a.value, 0.0), (a,), lambda g: _accum(a, g * on))


def sum_all(a: Tensor) -> Tensor:
    return _node(a.value.sum(), (a,), lambda g: _accum(a, np.broadcast_to(g, a.value.shape)))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    sizes = [t.value.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        for t, part in zip(ts, np.split(g, cuts, axis=axis)):
            _accum(t, part)

    return _node(np.concatenate([t.value for t in ts], axis=axis), tuple(ts), fn)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise IndexError("embedding index out of range")

    def fn(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx.ravel(), g.reshape(-1, table.value.shape[1]))
        _accum(table, full)

    return _node(table.value[idx], (table,), fn)


def repeat_steps(a: Tensor, steps: int) -> Tensor:
    """(N, F) -> (N, steps, F), same vector at every step."""
    out = np.repeat(a.value[:, None, :], steps, axis=1)
    return _node(out, (a,), lambda g: _accum(a, g.sum(axis=1)))


def select_step(a: Tensor, t: int) -> Tensor:
    def fn(g):
        full = np.zeros_like(a.value)
        full[:, t] = g
        _accum(a, full)

    return _node(a.value[:, t].copy(), (a,), fn)


def linear_forward(x, W, b) -> Tensor:
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if W.value.ndim != 2 or b.value.shape != (W.value.shape[1],):
        raise ShapeError(f"bad linear params W{W.value.shape} b{b.value.shape}")
    return add(matmul(x, W), b)


# -- probabilities and losses -----------------------------------------------------


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    s = v - v.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def sigmoid(x):
    # tanh form: no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[label] over rows of (N, C) logits.

    ``weights`` is a 0/1 row mask; masked rows contribute neither value nor
    gradient and the mean runs over unmasked rows only.
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, C) logits and (N,) labels, got {z.shape}, {labels.shape}")
    if z.shape[0] == 0:
        raise ValueError("cross_entropy on an empty batch")
    w = np.ones(z.shape[0]) if weights is None else np.asarray(weights, dtype=DTYPE)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no unmasked rows")
    safe = np.where(w > 0, labels, 0)
    if safe.min() < 0 or safe.max() >= z.shape[1]:
        raise ValueError("label out of range")
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    value = -(w * logp[rows, safe]).sum() / total

    def fn(g):
        d = np.exp(logp)
        d[rows, safe] -= 1.0
        _accum(logits, d * (w / total)[:, None] * g)

    return _node(value, (logits,), fn)


def cross_entropy_loss(logits, labels) -> Tensor:
    return cross_entropy(_as_tensor(logits), labels)


def mse_loss(a, b) -> Tensor:
    """Mean over the batch (first axis) of the squared L2 distance between rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mse shape mismatch {a.value.shape} vs {b.value.shape}")
    n = a.value.shape[0] if a.value.ndim else 1
    diff = a.value - b.value

    def fn(g):
        d = 2.0 * diff / n * g
        _accum(a, d)
        _accum(b, -d)

    return _node((diff**2).sum() / n, (a, b), fn)


# -- GRU ----------------------------------------------------------------------------
#
# Packed layout: W (F, 3H), U (H, 3H), b (3H,) with column blocks [z | r | h].


def gru_cell_forward(x_t, h_prev, W, U, b) -> np.ndarray:
    """One GRU step (plain numpy, no tape).

    z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
    h~ = tanh(x W_h + (r * h) U_h + b_h), h_t = (1 - z) * h + z * h~.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
    h_prev = np.atleast_2d(np.asarray(h_prev, dtype=DTYPE))
    W, U, b = (np.asarray(a, dtype=DTYPE) for a in (W, U, b))
    H = U.shape[0]
    if W.shape != (x_t.shape[1], 3 * H) or U.shape != (H, 3 * H) or b.shape != (3 * H,) or h_prev.shape[1] != H:
        raise ShapeError("gru_cell_forward: parameter shapes do not conform")
    a = x_t @ W + b
    zr = sigmoid(a[:, : 2 * H] + h_prev @ U[:, : 2 * H])
    z, r = zr[:, :H], zr[:, H:]
    hc = np.tanh(a[:, 2 * H :] + (r * h_prev) @ U[:, 2 * H :])
    return (1.0 - z) * h_prev + z * hc


def gru_sequence(x: Tensor, mask: np.ndarray, W: Tensor, U: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run a GRU over (N, T, F) inputs; returns the (N, T, H) state at every step.

    Steps where ``mask`` is False carry the previous state through unchanged,
    so the last column (forward) or first column (reverse) holds the state
    after the last valid step.
    """
    X = x.value
    N, T, F = X.shape
    H = U.value.shape[0]
    if W.value.shape != (F, 3 * H) or U.value.shape != (H, 3 * H) or b.value.shape != (3 * H,):
        raise ShapeError(f"gru_sequence: W{W.value.shape} U{U.value.shape} b{b.value.shape} vs input width {F}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (N, T):
        raise ShapeError(f"mask shape {mask.shape} != {(N, T)}")
    Wv, Uv = W.value, U.value
    Uzr, Uh = Uv[:, : 2 * H], Uv[:, 2 * H :]
    XW = X @ Wv + b.value
    steps = range(T - 1, -1, -1) if reverse else range(T)
    out = np.empty((N, T, H))
    h = np.zeros((N, H))
    cache = []
    for t in steps:
        a = XW[:, t]
        zr = sigmoid(a[:, : 2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        hc = np.tanh(a[:, 2 * H :] + (r * h) @ Uh)
        hn = (1.0 - z) * h + z * hc
        cache.append((h, z, r, hc))
        h = np.where(mask[:, t, None], hn, h)
        out[:, t] = h

    def fn(g):
        dXW = np.zeros((N, T, 3 * H))
        dU = np.zeros_like(Uv)
        dh = np.zeros((N, H))
        for (hp, z, r, hc), t in zip(reversed(cache), reversed(steps)):
            dh = dh + g[:, t]
            m = mask[:, t, None]
            dhn = np.where(m, dh, 0.0)
            dhp = np.where(m, 0.0, dh) + dhn * (1.0 - z)
            dz = dhn * (hc - hp)
            dah = dhn * z * (1.0 - hc**2)
            drh = dah @ Uh.T
            dr = drh * hp
            dhp += drh * r
            dazr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            dhp += dazr @ Uzr.T
            dU[:, : 2 * H] += hp.T @ dazr
            dU[:, 2 * H :] += (r * hp).T @ dah
            dXW[:, t, : 2 * H] = dazr
            dXW[:, t, 2 * H :] = dah
            dh = dhp
        flat = dXW.reshape(-1, 3 * H)
        _accum(x, dXW @ Wv.T)
        _accum(W, X.reshape(-1, F).T @ flat)
        _accum(U, dU)
        _accum(b, flat.sum(axis=0))

    return _node(out, (x, W, U, b), fn)


# -- parameters and optimisation ---------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class ParamStore:
    """Named parameters with Adam moment buffers and a step counter."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self.params):
            yield name, self.params[name]

    def __len__(self):
        return len(self.params)

    def n_values(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.value)) for n, p in self}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Parameters and optimiser moments, keyed for serialisation."""
        out = {}
        for n, p in self:
            out[n] = p.value
            out[f"{n}@m"] = self.m[n]
            out[f"{n}@v"] = self.v[n]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for n, p in self:
            for key, cur in ((n, p.value), (f"{n}@m", self.m[n]), (f"{n}@v", self.v[n])):
                if key not in arrays:
                    raise KeyError(f"missing array {key!r}")
                if arrays[key].shape != cur.shape:
                    raise ShapeError(f"{key}: stored shape {arrays[key].shape} != expected {cur.shape}")
        for n, p in self:
            p.value = np.array(arrays[n], dtype=DTYPE)
            self.m[n] = np.array(arrays[f"{n}@m"], dtype=DTYPE)
            self.v[n] = np.array(arrays[f"{n}@v"], dtype=DTYPE)
            p.grad = None
        self.step = int(step)


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if all(p.grad is None for p in store.params.values()):
        raise RuntimeError("adam_step called with no gradients; run backward() first")
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, p in store:
        g = p.grad if p.grad is not None else 0.0
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        p.value = p.value - lr * (store.m[name] / c1) / (np.sqrt(store.v[name] / c2) + eps)
        p.grad = None


# -- bidirectional stacks -----------------------------------------------------------


def init_bi_gru_stack(store: ParamStore, prefix: str, input_dim: int, hidden: int, layers: int, rng) -> None:
    width = input_dim
    for layer in range(layers):
        for d in ("fwd", "bwd"):
            key = f"{prefix}.l{layer}.{d}"
            store.add(f"{key}.W", np.concatenate([glorot(rng, width, hidden, (width, hidden)) for _ in range(3)], axis=1))
            store.add(f"{key}.U", np.concatenate([glorot(rng, hidden, hidden, (hidden, hidden)) for _ in range(3)], axis=1))
            store.add(f"{key}.b", np.zeros(3 * hidden))
        width = 2 * hidden


def bi_gru_stack_forward(x: Tensor, mask, store: ParamStore, prefix: str, layers: int) -> tuple[Tensor, Tensor]:
    """Stacked bidirectional GRU.

    Returns (top-layer per-step outputs (N, T, 2H), final states (N, 2*layers*H)).
    Final states are ordered layer by layer as [last valid forward, first valid
    backward].
    """
    finals = []
    h = x
    T = x.value.shape[1]
    for layer in range(layers):
        key = f"{prefix}.l{layer}"
        fwd = gru_sequence(h, mask, store[f"{key}.fwd.W"], store[f"{key}.fwd.U"], store[f"{key}.fwd.b"])
        bwd = gru_sequence(h, mask, store[f"{key}.bwd.W"], store[f"{key}.bwd.U"], store[f"{key}.bwd.b"], reverse=True)
        finals += [select_step(fwd, T - 1), select_step(bwd, 0)]
        h = concat([fwd, bwd], axis=-1)
    return h, concat(finals, axis=-1)


# -- finite-difference checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    loss_fn: Callable[[], Tensor],
    store: ParamStore,
    tolerance: float = 1e-5,
    step: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int = 5,
) -> GradCheckReport:
    """Compare tape gradients with central finite differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. ``max_coords`` caps how many coordinates per parameter get
    probed (chosen with ``rng``); by default every coordinate is checked.

    ``stencil`` is 3 (f(x+h) - f(x-h)) / 2h, truncation O(h^2)) or 5 (the
    four-neighbour central formula, truncation O(h^4)). The 5-point form
    tolerates a larger step, which keeps float64 rounding (about 1e-16 / h
    relative to the loss) small next to gradients of order 1e-8.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    store.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("non-finite loss")
    backward(loss)
    analytic = {n: g.copy() for n, g in store.grads().items()}
    store.zero_grad()
    rng = rng if rng is not None else make_rng(0)
    per_param = {}
    n_checked = 0
    for name, p in store:
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]

            def at(offset):
                flat[i] = orig + offset
                return loss_fn().item()

            if stencil == 3:
                vals = (at(step), at(-step))
                num = (vals[0] - vals[1]) / (2.0 * step)
            else:
                vals = (at(2 * step), at(step), at(-step), at(-2 * step))
                # differences first: a locally constant loss must give exactly zero
                num = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * step)
            flat[i] = orig
            if not all(math.isfinite(v) for v in vals):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
            n_checked += 1
        per_param[name] = worst
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, tolerance, n_checked)
