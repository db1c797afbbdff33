"""A small reverse-mode autodiff over numpy arrays.

Only the handful of fused operations needed by the graph encoder and the
denoiser are provided. Activations are laid out as ``(batch, tokens, d)``:
token vectors are rows here, whereas node records store them as columns.

Usage::

    tape = ParamTape(params)
    y = linear(x, tape.p("w"), tape.p("b"))
    loss = mse(y, target)
    tape.backward(loss)
    tape.grads["w"]
"""

from __future__ import annotations

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)


class TapeError(RuntimeError):
    pass


class Var:
    """An array plus its (lazily allocated) gradient."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape=None):
        self.value = value
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def const(value) -> Var:
    return Var(np.asarray(value, dtype=np.float64))


class ParamTape:
    """Named parameters, their gradient buffers and the recorded forward ops.

    With ``record=False`` the tape only hands out parameters; nothing is
    recorded and ``backward`` is unavailable.
    """

    def __init__(self, params: dict, record: bool = True):
        self.params = params
        self.record = record
        self.grads = {name: np.zeros_like(v) for name, v in params.items()} if record else {}
        self._ops = []
        self._leaves = {}

    def p(self, name: str) -> Var:
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = Var(self.params[name], self if self.record else None)
            self._leaves[name] = leaf
        return leaf

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def reset(self) -> None:
        """Forget recorded ops so the tape can be reused for a new forward pass."""
        self._ops.clear()
        self._leaves.clear()

    def backward(self, root: Var, grad=None) -> dict:
        if not self.record:
            raise TapeError("tape was created with record=False")
        if not self._ops:
            raise TapeError("backward called before any forward op was recorded")
        root.grad = np.ones_like(root.value) if grad is None else np.asarray(grad, dtype=np.float64)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)
        for name, leaf in self._leaves.items():
            if leaf.grad is not None:
                self.grads[name] += leaf.grad
        self._ops.clear()
        self._leaves.clear()
        return self.grads


def backward(tape: ParamTape, root: Var, loss_gradient=None) -> dict:
    return tape.backward(root, loss_gradient)


def _tape_of(*vs):
    for v in vs:
        if v is not None and v.tape is not None:
            return v.tape
    return None


def _out(value, parents, fn) -> Var:
    tape = _tape_of(*parents)
    out = Var(value, tape)
    if tape is not None:
        tape._ops.append((out, fn))
    return out


def _acc(v: Var, g) -> None:
    if v is None or v.tape is None:
        return
    if v.grad is None:
        v.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        v.grad += g


def _sum_to(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --
# Elementwise / structural


def add(a: Var, b: Var) -> Var:
    def fn(g):
        _acc(a, _sum_to(g, a.shape))
        _acc(b, _sum_to(g, b.shape))

    return _out(a.value + b.value, (a, b), fn)


def scale_batch(x: Var, flags) -> Var:
    """Multiply each batch item by a constant (non-differentiable) factor."""
    f = np.asarray(flags, dtype=np.float64).reshape((-1,) + (1,) * (x.value.ndim - 1))

    def fn(g):
        _acc(x, g * f)

    return _out(x.value * f, (x,), fn)


def concat(vs, axis: int = 1) -> Var:
    sizes = [v.shape[axis] for v in vs]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        for v, lo, hi in zip(vs, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(v, g[tuple(idx)])

    return _out(np.concatenate([v.value for v in vs], axis=axis), tuple(vs), fn)


def reshape(x: Var, shape) -> Var:
    def fn(g):
        _acc(x, g.reshape(x.shape))

    return _out(x.value.reshape(shape), (x,), fn)


def broadcast_batch(x: Var, batch: int) -> Var:
    """Tile a ``(tokens, d)`` parameter to ``(batch, tokens, d)``."""

    def fn(g):
        _acc(x, g.sum(axis=0))

    return _out(np.broadcast_to(x.value, (batch,) + x.shape).copy(), (x,), fn)


def gather_rows(table: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        _acc(table, full)

    return _out(table.value[idx], (table,), fn)


# --
# Layers


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    y = x.value @ w.value
    if b is not None:
        y = y + b.value

    def fn(g):
        _acc(x, g @ w.value.T)
        xs = x.value.reshape(-1, x.shape[-1])
        _acc(w, xs.T @ g.reshape(-1, g.shape[-1]))
        if b is not None:
            _acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _out(y, (x, w, b), fn)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.value + bias.value

    def fn(g):
        _acc(gain, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        _acc(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))
        gh = g * gain.value
        n = x.shape[-1]
        dx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        _acc(x, dx)

    return _out(y, (x, gain, bias), fn)


def gelu(x: Var) -> Var:
    """Tanh approximation of GELU (smooth everywhere)."""
    v = x.value
    inner = GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(inner)
    y = 0.5 * v * (1.0 + th)

    def fn(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * dinner
        _acc(x, g * d)

    return _out(y, (x,), fn)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction.

    Entries equal to ``-inf`` get probability 0; a row with no finite entry
    becomes all zeros instead of NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    mx = x.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(x - mx)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def attention(q: Var, k: Var, v: Var, heads: int, mask=None):
    """Scaled dot-product attention split over ``heads``.

    ``q`` is ``(B, Lq, d)``, ``k``/``v`` are ``(B, Lk, d)``; ``mask`` is an
    optional ``(B, Lk)`` boolean array of valid keys. Returns the
    concatenated head outputs and the ``(B, heads, Lq, Lk)`` weights.
    """
    B, Lq, d = q.shape
    Lk = k.shape[1]
    if k.shape[-1] != d or v.shape[-1] != d or v.shape[1] != Lk:
        raise ValueError("attention dimension mismatch")
    if d % heads:
        raise ValueError(f"d={d} not divisible by heads={heads}")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.value.reshape(B, Lq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.value.reshape(B, Lk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.value.reshape(B, Lk, heads, dh).transpose(0, 2, 1, 3)
    scores = qh @ kh.transpose(0, 1, 3, 2) * scale
    if mask is not None:
        scores = np.where(np.asarray(mask, dtype=bool)[:, None, None, :], scores, -np.inf)
    probs = softmax_rows(scores)
    oh = probs @ vh
    out = oh.transpose(0, 2, 1, 3).reshape(B, Lq, d)

    def fn(g):
        gh = g.reshape(B, Lq, heads, dh).transpose(0, 2, 1, 3)
        dprobs = gh @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ gh
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 1, 3, 2) @ qh
        _acc(q, dqh.transpose(0, 2, 1, 3).reshape(B, Lq, d))
        _acc(k, dkh.transpose(0, 2, 1, 3).reshape(B, Lk, d))
        _acc(v, dvh.transpose(0, 2, 1, 3).reshape(B, Lk, d))

    return _out(out, (q, k, v), fn), probs


def mse(pred: Var, target) -> Var:
    """Squared error summed over features, averaged over the batch."""
    t = np.asarray(target, dtype=np.float64)
    diff = pred.value - t
    n = diff.shape[0]
    loss = np.array((diff * diff).sum() / n)

    def fn(g):
        _acc(pred, g * 2.0 * diff / n)

    return _out(loss, (pred,), fn)


def weighted_sum(x: Var, weights) -> Var:
    """Scalar ``sum(x * weights)``; a convenient probe loss."""
    w = np.asarray(weights, dtype=np.float64)

    def fn(g):
        _acc(x, g * np.broadcast_to(w, x.value.shape))

    return _out(np.array((x.value * w).sum()), (x,), fn)


# --
# Composite blocks


def attention_params(prefix: str, d: int, rng: np.random.Generator, zero_out: bool = True) -> dict:
    s = 1.0 / math.sqrt(d)
    p = {
        f"{prefix}.ln_g": np.ones(d),
        f"{prefix}.ln_b": np.zeros(d),
        f"{prefix}.wq": rng.standard_normal((d, d)) * s,
        f"{prefix}.bq": np.zeros(d),
        f"{prefix}.wk": rng.standard_normal((d, d)) * s,
        f"{prefix}.bk": np.zeros(d),
        f"{prefix}.wv": rng.standard_normal((d, d)) * s,
        f"{prefix}.bv": np.zeros(d),
        f"{prefix}.wo": np.zeros((d, d)) if zero_out else rng.standard_normal((d, d)) * s,
        f"{prefix}.bo": np.zeros(d),
    }
    return p


def ffn_params(prefix: str, d: int, rng: np.random.Generator, zero_out: bool = True, mult: int = 4) -> dict:
    h = mult * d
    return {
        f"{prefix}.ln_g": np.ones(d),
        f"{prefix}.ln_b": np.zeros(d),
        f"{prefix}.w1": rng.standard_normal((d, h)) / math.sqrt(d),
        f"{prefix}.b1": np.zeros(h),
        f"{prefix}.w2": np.zeros((h, d)) if zero_out else rng.standard_normal((h, d)) / math.sqrt(h),
        f"{prefix}.b2": np.zeros(d),
    }


def multi_head_attention(tape: ParamTape, prefix: str, x: Var, kv: Var | None = None,
                         mask=None, heads: int = 2):
    """Pre-LN attention block with residual: ``x + W_o attn(LN(x), kv)``.

    Self-attention when ``kv`` is None; otherwise queries attend to ``kv``
    (not normalised). Returns the block output and the attention weights.
    """
    P = tape.p
    h = layer_norm(x, P(f"{prefix}.ln_g"), P(f"{prefix}.ln_b"))
    src = h if kv is None else kv
    q = linear(h, P(f"{prefix}.wq"), P(f"{prefix}.bq"))
    k = linear(src, P(f"{prefix}.wk"), P(f"{prefix}.bk"))
    v = linear(src, P(f"{prefix}.wv"), P(f"{prefix}.bv"))
    a, probs = attention(q, k, v, heads, mask)
    return add(x, linear(a, P(f"{prefix}.wo"), P(f"{prefix}.bo"))), probs


def feed_forward(tape: ParamTape, prefix: str, x: Var) -> Var:
    P = tape.p
    h = layer_norm(x, P(f"{prefix}.ln_g"), P(f"{prefix}.ln_b"))
    h = gelu(linear(h, P(f"{prefix}.w1"), P(f"{prefix}.b1")))
    return add(x, linear(h, P(f"{prefix}.w2"), P(f"{prefix}.b2")))


def round_to_float32(params: dict) -> dict:
    """Round every tensor to the nearest float32 value (kept as float64)."""
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in params.items()}


# --
# Gradient checking


def numerical_grad(loss_fn, params: dict, name: str, index, step: float = 1e-5) -> float:
    """Central difference of ``loss_fn(params)`` w.r.t. one parameter entry."""
    arr = params[name]
    old = arr[index]
    arr[index] = old + step
    up = float(loss_fn(params))
    arr[index] = old - step
    down = float(loss_fn(params))
    arr[index] = old
    return (up - down) / (2 * step)


def relative_error(a: float, b: float, floor: float = 1e-5) -> float:
    """``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps structurally zero gradients (a key bias shifts every
    score of a query equally) from dividing rounding noise by ~0.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(loss_fn, grad_fn, params: dict, names, probes: int, rng: np.random.Generator,
              step: float = 1e-5) -> dict:
    """Compare analytic and central-difference gradients at random entries.

    ``loss_fn(params) -> float``; ``grad_fn(params) -> dict`` of analytic
    gradients. Returns the worst relative error per parameter name.
    """
    analytic = grad_fn(params)
    worst = {}
    for name in names:
        arr = params[name]
        err = 0.0
        for _ in range(probes):
            index = tuple(int(rng.integers(0, n)) for n in arr.shape)
            num = numerical_grad(loss_fn, params, name, index, step)
            err = max(err, relative_error(float(analytic[name][index]), num))
        worst[name] = err
    return worst
