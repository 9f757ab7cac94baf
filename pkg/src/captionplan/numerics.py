"""Dense-tensor math with reverse-mode gradients.

A small computation-graph autodiff layer over numpy: every op returns a
`Tensor` that remembers its parents and how to push gradients back to them.
`backprop` walks the graph in reverse topological order. Backward formulas
are hand-derived per op; `finite_diff_check` is the correctness contract.

Training runs in float32 for speed; gradient tests build float64 graphs.
"""

from __future__ import annotations

import json
import os
import struct
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# graph core
# ---------------------------------------------------------------------------

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus the graph edges needed for reverse mode."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def tensor(data, requires_grad=False):
    return Tensor(np.asarray(data), requires_grad=requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents, backward_fn):
    """Build a graph node; collapses to a leaf when recording is off."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, requires_grad=True)
    return Tensor(data)


def _acc(t, g):
    """Accumulate gradient g into t.grad (lazily allocated)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backprop(loss):
    """Reverse-accumulate gradients from a scalar loss into every leaf."""
    if loss.data.size != 1:
        raise ShapeError("backprop expects a scalar loss")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def scale(a, s):
    a = _lift(a)
    out_data = a.data * s

    def bw(g):
        _acc(a, g * s)

    return _make(out_data, (a,), bw)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            ga, gb = g * bd, g * ad
        elif ad.ndim == 1:
            # (n,) @ (..., n, m) -> (..., m)
            ga = np.matmul(g[..., None, :], np.swapaxes(bd, -1, -2))[..., 0, :]
            gb = np.matmul(ad[:, None], g[..., None, :])
        elif bd.ndim == 1:
            # (..., n, m) @ (m,) -> (..., n)
            ga = np.matmul(g[..., :, None], bd[None, :])
            gb = np.matmul(np.swapaxes(ad, -1, -2), g[..., None])[..., 0]
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        _acc(a, _unbroadcast(ga, ad.shape))
        _acc(b, _unbroadcast(gb, bd.shape))

    return _make(out_data, (a, b), bw)


def tanh(a):
    a = _lift(a)
    out_data = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def sigmoid(a):
    a = _lift(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def relu(a):
    a = _lift(a)
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        _acc(a, g * (a.data > 0))

    return _make(out_data, (a,), bw)


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - dot))

    return _make(out_data, (a,), bw)


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bw)


def mean_(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts, axis=-1):
    parts = [_lift(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offsets = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            _acc(p, g[tuple(idx)])

    return _make(out_data, tuple(parts), bw)


def reshape(a, shape):
    a = _lift(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bw)


def transpose(a, axes):
    a = _lift(a)
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        _acc(a, np.transpose(g, inv))

    return _make(out_data, (a,), bw)


def embedding(table, ids):
    """First-axis gather: table[ids]. Works as row selection on any tensor."""
    table = _lift(table)
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(out_data, (table,), bw)


def gather_time(x, steps):
    """Pick one timestep per batch row: x[i, steps[i], :] from (B, T, D)."""
    x = _lift(x)
    steps = np.asarray(steps)
    rows = np.arange(x.data.shape[0])
    out_data = x.data[rows, steps]

    def bw(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (rows, steps), g)

    return _make(out_data, (x,), bw)


def max_axis(a, axis):
    """Row- or column-wise max of a 2-D array; gradient flows to argmaxes."""
    a = _lift(a)
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError("max_axis supports 2-D inputs with axis 0 or 1")
    idx = a.data.argmax(axis=axis)
    ar = np.arange(a.data.shape[1 - axis])
    loc = (idx, ar) if axis == 0 else (ar, idx)
    out_data = a.data[loc]

    def bw(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, loc, g)

    return _make(out_data, (a,), bw)


def l2_normalize(a, axis=-1, eps=1e-12):
    a = _lift(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)) + eps
    out_data = a.data / norm

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, (g - out_data * dot) / norm)

    return _make(out_data, (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        d = x.data.shape[-1]
        _acc(gain, _unbroadcast(g * xhat, gain.data.shape))
        _acc(bias, _unbroadcast(g, bias.data.shape))
        gx = g * gain.data
        gsum = gx.sum(axis=-1, keepdims=True)
        gdot = (gx * xhat).sum(axis=-1, keepdims=True)
        _acc(x, inv * (gx - gsum / d - xhat * gdot / d))

    return _make(out_data, (x, gain, bias), bw)


def lstm_cell(x, h, c, w, b):
    """One step of a standard LSTM.

    x: (..., d_in), h, c: (..., d_h). w: (d_in + d_h, 4*d_h) with gate order
    input, forget, cell, output; b: (4*d_h,).
    """
    x, h, c, w, b = _lift(x), _lift(h), _lift(c), _lift(w), _lift(b)
    d_h = h.data.shape[-1]
    if w.data.shape != (x.data.shape[-1] + d_h, 4 * d_h):
        raise ShapeError(
            f"lstm weight shape {w.data.shape} does not match input "
            f"{x.data.shape[-1]} + hidden {d_h}"
        )
    xh = np.concatenate([x.data, h.data], axis=-1)
    z = xh @ w.data + b.data
    i = 1.0 / (1.0 + np.exp(-z[..., :d_h]))
    f = 1.0 / (1.0 + np.exp(-z[..., d_h : 2 * d_h]))
    g_ = np.tanh(z[..., 2 * d_h : 3 * d_h])
    o = 1.0 / (1.0 + np.exp(-z[..., 3 * d_h :]))
    c_new = f * c.data + i * g_
    tc = np.tanh(c_new)
    h_new = o * tc

    # single joint node so the backward matmul runs once for (h', c')
    def bw(g):
        grad_h = g[..., :d_h]
        grad_c = g[..., d_h:]
        dc = grad_h * o * (1.0 - tc * tc) + grad_c
        di = dc * g_ * i * (1.0 - i)
        df = dc * c.data * f * (1.0 - f)
        dg = dc * i * (1.0 - g_ * g_)
        do = grad_h * tc * o * (1.0 - o)
        dz = np.concatenate([di, df, dg, do], axis=-1)
        dxh = dz @ w.data.T
        _acc(x, dxh[..., : x.data.shape[-1]])
        _acc(h, dxh[..., x.data.shape[-1] :])
        _acc(c, dc * f)
        dz2 = dz.reshape(-1, 4 * d_h)
        _acc(w, xh.reshape(-1, xh.shape[-1]).T @ dz2)
        _acc(b, dz2.sum(axis=0))

    joint = _make(np.concatenate([h_new, c_new], axis=-1), (x, h, c, w, b), bw)
    h_out = _slice_last(joint, 0, d_h)
    c_out = _slice_last(joint, d_h, 2 * d_h)
    return h_out, c_out


def _slice_last(a, lo, hi):
    out_data = a.data[..., lo:hi]

    def bw(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        _acc(a, full)

    return _make(out_data, (a,), bw)


def attention_core(q_proj, k_proj, values, va):
    """Additive attention with pre-projected query and key rows.

    q_proj: (d_a,) or (B, d_a); k_proj: (R, d_a) or (B, R, d_a); values has
    matching row structure. Scores e_r = va . tanh(q + k_r); weights are a
    softmax over rows; context is the weight-averaged value rows.
    """
    q, k = _lift(q_proj), _lift(k_proj)
    if k.data.shape[-2] == 0:
        raise ShapeError("attention requires at least one key row")
    if k.data.ndim == q.data.ndim + 1:
        q = reshape(q, q.data.shape[:-1] + (1, q.data.shape[-1]))
    scores = matmul(tanh(add(q, k)), reshape(va, (-1, 1)))
    scores = reshape(scores, scores.data.shape[:-1])
    weights = softmax(scores, axis=-1)
    w_exp = reshape(weights, weights.data.shape + (1,))
    context = sum_(mul(w_exp, values), axis=-2)
    return context, weights


def additive_attention(query, keys, values, wq, wk, va):
    """Single-query attention over key/value rows (see attention_core)."""
    return attention_core(matmul(query, wq), matmul(keys, wk), values, va)


def cross_entropy_sum(logits, targets, mask=None):
    """Summed token-level NLL with max-subtracted softmax.

    logits: (N, V); targets: int (N,); mask: optional float (N,) where 0
    drops a position (padding). Returns (loss Tensor, total weight).
    """
    logits = _lift(logits)
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.min(initial=0) < 0 or (n and targets.max(initial=0) >= v):
        raise IndexError("target id outside vocabulary")
    m = np.ones(n, dtype=logits.data.dtype) if mask is None else np.asarray(mask, dtype=logits.data.dtype)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    rows = np.arange(n)
    nll = -(shifted[rows, targets] - np.log(z[:, 0]))
    loss_val = np.asarray((nll * m).sum())

    def bw(g):
        gl = p.copy()
        gl[rows, targets] -= 1.0
        gl *= (m * g)[:, None]
        _acc(logits, gl)

    return _make(loss_val, (logits,), bw), float(m.sum())


def softmax_xent(logits, target):
    """Stable cross entropy for one logit vector; returns (loss, grad).

    The closed-form gradient softmax(logits) - one_hot(target) is returned
    directly; no graph is built.
    """
    logits = np.asarray(logits, dtype=np.float64)
    v = logits.shape[0]
    if v < 2:
        raise ShapeError("need at least two classes")
    if not 0 <= target < v:
        raise IndexError(f"target {target} out of range for {v} classes")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    z = e.sum()
    loss = -(shifted[target] - np.log(z))
    grad = e / z
    grad[target] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters with paired gradient buffers and Adam moments."""

    def __init__(self, seed=0, dtype=np.float32):
        self.params = {}
        self._m = {}
        self._v = {}
        self.step_count = 0
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)

    def add(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def add_uniform(self, name, shape, bound):
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def add_embedding(self, name, shape):
        return self.add(name, self.rng.uniform(-0.1, 0.1, size=shape))

    def add_matrix(self, name, shape):
        # fan-in scaled uniform
        return self.add_uniform(name, shape, 1.0 / np.sqrt(shape[0]))

    def add_zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grad_norm(self):
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_arrays(self, arrays):
        for name, arr in arrays.items():
            t = self.params[name]
            if t.data.shape != arr.shape:
                raise ShapeError(f"shape mismatch loading {name!r}")
            t.data = np.asarray(arr, dtype=self.dtype)


def adam_step(store, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=10.0):
    """Adaptive-moment update with bias correction and global norm clipping."""
    norm = store.grad_norm()
    if not np.isfinite(norm):
        raise TrainingDivergence("non-finite gradient norm")
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / norm
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        if p.grad is None:
            continue
        g = p.grad * factor
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

class FiniteDiffReport:
    def __init__(self, tolerance):
        self.tolerance = tolerance
        self.blocks = {}

    def record(self, name, rel_err, n_checked):
        self.blocks[name] = (rel_err, n_checked)

    @property
    def max_rel_err(self):
        return max((e for e, _ in self.blocks.values()), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance

    def __str__(self):
        lines = [f"finite-diff check (tol {self.tolerance:g}):"]
        for name, (err, n) in sorted(self.blocks.items()):
            mark = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"  {name:40s} max rel err {err:.3e} over {n} coords [{mark}]")
        return "\n".join(lines)


def finite_diff_check(closure, store, tolerance=1e-4, samples_per_block=8,
                      step=1e-5, seed=0, floor=1e-6):
    """Compare analytic gradients against central differences.

    `closure()` must be a pure, deterministic function of the store's
    parameters returning a scalar Tensor. A seeded sample of coordinates is
    checked per parameter block (full enumeration is quadratic in model
    size). Relative error is |fd - an| / max(|fd|, |an|, floor); the floor
    keeps roundoff on near-zero components (central differences resolve
    |loss| * eps / step at best) from masquerading as gradient bugs.
    """
    store.zero_grad()
    loss = closure()
    backprop(loss)
    analytic = {name: (None if p.grad is None else p.grad.copy())
                for name, p in store.params.items()}
    rng = np.random.default_rng(seed)
    report = FiniteDiffReport(tolerance)
    for name, p in store.params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(samples_per_block, n), replace=False)
        an = analytic[name]
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            with no_grad():
                f_plus = closure().item()
            flat[c] = orig - step
            with no_grad():
                f_minus = closure().item()
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = 0.0 if an is None else float(an.reshape(-1)[c])
            rel = abs(fd - a) / max(abs(fd), abs(a), floor)
            worst = max(worst, rel)
        report.record(name, worst, len(coords))
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"CPCKPT1\n"


def save_checkpoint(path, store, metadata):
    """Self-describing container: JSON header + raw little-endian tensors."""
    header = {
        "metadata": metadata,
        "tensors": [],
    }
    blobs = []
    offset = 0
    for name in sorted(store.params):
        arr = store.params[name].data
        raw = np.ascontiguousarray(arr, dtype="<f8" if arr.dtype == np.float64 else "<f4")
        blob = raw.tobytes()
        header["tensors"].append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(raw.dtype),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (arrays dict, metadata dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    arrays = {}
    for spec in header["tensors"]:
        raw = body[spec["offset"] : spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype=spec["dtype"]).reshape(spec["shape"])
        arrays[spec["name"]] = arr.copy()
    return arrays, header["metadata"]
