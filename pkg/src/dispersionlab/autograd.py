"""Tape-based reverse-mode differentiation over the tensor op set.

A Tape records nodes in creation order (which is a topological order), each
holding its numpy value, parent indices, and whatever the adjoint needs.
backward() walks the tape once in reverse, accumulating gradients additively
across fan-out, and returns the gradient of every leaf. First-order only:
no higher derivatives, no checkpointing.

gradcheck() compares a traced scalar function's backward gradients against
central finite differences coordinate by coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DifferentiationError, DimensionError
from .posenc import depthwise_conv_grid
from .rng import rng_for


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    ctx: dict = field(default_factory=dict)


class Tape:
    """Recording of one forward computation; single-threaded by design."""

    def __init__(self):
        self.nodes: list[Node] = []

    def push(self, op: str, parents: tuple[int, ...], value: np.ndarray,
             ctx: dict | None = None) -> "TracedValue":
        self.nodes.append(Node(op, parents, np.asarray(value, dtype=np.float64),
                               ctx or {}))
        return TracedValue(self, len(self.nodes) - 1)


class TracedValue:
    """Handle to one tape node; supports +, -, *, @ against same-tape values."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def leaf(tape: Tape, value) -> TracedValue:
    """Register an input (differentiable) tensor on the tape."""
    return tape.push("leaf", (), np.asarray(value, dtype=np.float64))


def _pair(a: TracedValue, b: TracedValue) -> Tape:
    if a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    return a.tape


def _same_shape(a: TracedValue, b: TracedValue, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes differ {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# primitive forwards


def add(a, b):
    _same_shape(a, b, "add")
    return _pair(a, b).push("add", (a.idx, b.idx), a.value + b.value)


def sub(a, b):
    _same_shape(a, b, "sub")
    return _pair(a, b).push("sub", (a.idx, b.idx), a.value - b.value)


def mul(a, b):
    """Elementwise (Hadamard) product."""
    _same_shape(a, b, "mul")
    return _pair(a, b).push("mul", (a.idx, b.idx), a.value * b.value)


def div(a, b):
    _same_shape(a, b, "div")
    return _pair(a, b).push("div", (a.idx, b.idx), a.value / b.value)


def scale(a, c: float):
    return a.tape.push("scale", (a.idx,), a.value * c, {"c": float(c)})


def add_scalar(a, c: float):
    return a.tape.push("add_scalar", (a.idx,), a.value + c)


def matmul(a, b):
    if a.value.shape[-1] != b.value.shape[0]:
        raise DimensionError(f"matmul: {a.value.shape} x {b.value.shape}")
    return _pair(a, b).push("matmul", (a.idx, b.idx), a.value @ b.value)


def transpose(a):
    return a.tape.push("transpose", (a.idx,), a.value.T.copy())


def exp(a):
    return a.tape.push("exp", (a.idx,), np.exp(a.value))


def log(a):
    return a.tape.push("log", (a.idx,), np.log(a.value))


def relu(a):
    return a.tape.push("relu", (a.idx,), np.maximum(a.value, 0.0))


def elu_plus_one(a):
    out = np.where(a.value > 0, a.value + 1.0, np.exp(np.minimum(a.value, 0.0)))
    return a.tape.push("elu_plus_one", (a.idx,), out)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a):
    """Tanh-form gelu: 0.5 x (1 + tanh(c (x + a x^3)))."""
    x = a.value
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return a.tape.push("gelu", (a.idx,), 0.5 * x * (1.0 + t), {"t": t})


def power_int(a, p: int):
    if p < 1:
        raise ValueError("power must be >= 1")
    return a.tape.push("power_int", (a.idx,), a.value ** p, {"p": int(p)})


def sum_all(a):
    """Total over all entries, as a 1x1 tensor."""
    return a.tape.push("sum_all", (a.idx,), np.array([[a.value.sum()]]))


def sum_cols(a):
    """Row sums: n x d -> n x 1."""
    return a.tape.push("sum_cols", (a.idx,), a.value.sum(axis=1, keepdims=True))


def mean_rows(a):
    return a.tape.push("mean_rows", (a.idx,), a.value.mean(axis=0, keepdims=True))


def broadcast_row(a, n: int):
    if a.value.shape[0] != 1:
        raise DimensionError(f"broadcast_row expects 1 x d, got {a.value.shape}")
    return a.tape.push("broadcast_row", (a.idx,), np.repeat(a.value, n, axis=0))


def softmax_rows(a):
    z = np.exp(a.value - a.value.max(axis=1, keepdims=True))
    y = z / z.sum(axis=1, keepdims=True)
    return a.tape.push("softmax_rows", (a.idx,), y)


def mul_rowvec(a, s):
    """Scale each row of a (n x d) by the matching entry of s (n x 1)."""
    if s.value.shape != (a.value.shape[0], 1):
        raise DimensionError(f"mul_rowvec: scale shape {s.value.shape}")
    return _pair(a, s).push("mul_rowvec", (a.idx, s.idx), a.value * s.value)


def div_rowvec(a, s):
    if s.value.shape != (a.value.shape[0], 1):
        raise DimensionError(f"div_rowvec: scale shape {s.value.shape}")
    return _pair(a, s).push("div_rowvec", (a.idx, s.idx), a.value / s.value)


def row_l2norm(a):
    """Euclidean norm of each row: n x d -> n x 1."""
    out = np.linalg.norm(a.value, axis=1, keepdims=True)
    return a.tape.push("row_l2norm", (a.idx,), out)


def rows(a, lo: int, hi: int):
    return a.tape.push("rows", (a.idx,), a.value[lo:hi].copy(), {"lo": lo, "hi": hi})


def cols(a, lo: int, hi: int):
    return a.tape.push("cols", (a.idx,), a.value[:, lo:hi].copy(), {"lo": lo, "hi": hi})


def concat_rows(parts):
    tape = parts[0].tape
    sizes = [p.value.shape[0] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=0)
    return tape.push("concat_rows", tuple(p.idx for p in parts), value, {"sizes": sizes})


def concat_cols(parts):
    tape = parts[0].tape
    sizes = [p.value.shape[1] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=1)
    return tape.push("concat_cols", tuple(p.idx for p in parts), value, {"sizes": sizes})


def permute_rows(a, perm):
    perm = np.asarray(perm, dtype=np.intp)
    return a.tape.push("permute_rows", (a.idx,), a.value[perm], {"perm": perm})


def gather_rows(a, indices):
    indices = np.asarray(indices, dtype=np.intp)
    return a.tape.push("gather_rows", (a.idx,), a.value[indices],
                       {"indices": indices, "n": a.value.shape[0]})


def group_rows(a, group: int):
    """Reshape (n, d) -> (n/group, group*d), row-major."""
    n, d = a.value.shape
    if n % group != 0:
        raise DimensionError(f"group {group} does not divide {n} rows")
    return a.tape.push("group_rows", (a.idx,), a.value.reshape(n // group, group * d),
                       {"n": n, "d": d})


def rope_rotate(a, angles: np.ndarray):
    """Rotate consecutive dim pairs by fixed angles (n x d/2); an isometry."""
    x = a.value
    c, s = np.cos(angles), np.sin(angles)
    out = np.empty_like(x)
    out[:, 0::2] = x[:, 0::2] * c - x[:, 1::2] * s
    out[:, 1::2] = x[:, 0::2] * s + x[:, 1::2] * c
    return a.tape.push("rope_rotate", (a.idx,), out, {"cos": c, "sin": s})


def depthwise_conv(v, taps, height: int, width: int):
    """Per-channel k x k grid convolution; differentiable in v and taps.

    Rows may stack several grids (row count a multiple of height*width);
    each grid is convolved independently.
    """
    n, d = v.value.shape
    per = height * width
    if n % per != 0:
        raise DimensionError(f"rows {n} not a multiple of grid size {per}")
    batched = v.value.reshape(n // per, per, d)
    out = depthwise_conv_grid(batched, taps.value, height, width).reshape(n, d)
    return _pair(v, taps).push("depthwise_conv", (v.idx, taps.idx), out,
                               {"height": height, "width": width})


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Per-row normalization with learned scale and shift (1 x d each)."""
    mu = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = xhat * gamma.value + beta.value
    tape = _pair(x, gamma)
    return tape.push("layer_norm", (x.idx, gamma.idx, beta.idx), out,
                     {"xhat": xhat, "inv": inv})


def blocked_softmax_attention(q, k, v, block: int):
    """Softmax attention applied independently to consecutive row blocks.

    block == n is full softmax attention; smaller blocks give the windowed
    form. One node for the whole partition keeps tapes small.
    """
    n, d = q.value.shape
    if n % block != 0:
        raise DimensionError(f"block {block} does not divide {n} rows")
    nb = n // block
    qb = q.value.reshape(nb, block, d)
    kb = k.value.reshape(nb, block, d)
    vb = v.value.reshape(nb, block, v.value.shape[1])
    logits = qb @ kb.transpose(0, 2, 1)
    z = np.exp(logits - logits.max(axis=2, keepdims=True))
    coeff = z / z.sum(axis=2, keepdims=True)
    out = (coeff @ vb).reshape(n, v.value.shape[1])
    tape = _pair(q, k)
    return tape.push("blocked_softmax_attention", (q.idx, k.idx, v.idx), out,
                     {"coeff": coeff, "block": block})


def blocked_linear_attention(u, w, v, block: int):
    """Identity-kernel attention over row blocks of already-featured u, w.

    Callers must pass positive feature maps (e.g. elu+1 outputs) so every
    block-row weight sum is positive.
    """
    n, d = u.value.shape
    if n % block != 0:
        raise DimensionError(f"block {block} does not divide {n} rows")
    nb = n // block
    ub = u.value.reshape(nb, block, d)
    wb = w.value.reshape(nb, block, d)
    vb = v.value.reshape(nb, block, v.value.shape[1])
    logits = ub @ wb.transpose(0, 2, 1)
    den = logits.sum(axis=2, keepdims=True)
    coeff = logits / den
    out = (coeff @ vb).reshape(n, v.value.shape[1])
    tape = _pair(u, w)
    return tape.push("blocked_linear_attention", (u.idx, w.idx, v.idx), out,
                     {"coeff": coeff, "den": den, "block": block})


def blocked_mean_broadcast(v, block: int):
    """Mean of each row block broadcast back over the block.

    block == n is the homogeneous mixing term; per-sample blocks let a
    batch share one tape.
    """
    n, d = v.value.shape
    if n % block != 0:
        raise DimensionError(f"block {block} does not divide {n} rows")
    vb = v.value.reshape(n // block, block, d)
    out = np.repeat(vb.mean(axis=1, keepdims=True), block, axis=1).reshape(n, d)
    return v.tape.push("blocked_mean_broadcast", (v.idx,), out, {"block": block})


def cross_entropy(logits, labels) -> TracedValue:
    """Mean negative log-likelihood of integer labels, as a 1x1 scalar."""
    labels = np.asarray(labels, dtype=np.intp)
    x = logits.value
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(x.shape[0]), labels].mean()
    probs = np.exp(logp)
    return logits.tape.push("cross_entropy", (logits.idx,), np.array([[loss]]),
                            {"probs": probs, "labels": labels})


# ---------------------------------------------------------------------------
# adjoints


def _adj_matmul(node, g, vals):
    a, b = vals
    return g @ b.T, a.T @ g


def _adj_softmax_rows(node, g, vals):
    y = node.value
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _adj_layer_norm(node, g, vals):
    x, gamma, _ = vals
    xhat, inv = node.ctx["xhat"], node.ctx["inv"]
    d = x.shape[1]
    dxhat = g * gamma
    dx = inv / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)


def _adj_depthwise_conv(node, g, vals):
    v, taps = vals
    h, w = node.ctx["height"], node.ctx["width"]
    n, d = v.shape
    b = n // (h * w)
    gb = g.reshape(b, h * w, d)
    # input grad: correlate the output grad with the spatially flipped taps
    dv = depthwise_conv_grid(gb, taps[:, ::-1, ::-1], h, w).reshape(n, d)
    k = taps.shape[1]
    pad = k // 2
    vi = v.reshape(b, h, w, d)
    gi = g.reshape(b, h, w, d)
    padded = np.zeros((b, h + 2 * pad, w + 2 * pad, d))
    padded[:, pad : pad + h, pad : pad + w] = vi
    dtaps = np.empty_like(taps)
    for dr in range(k):
        for dc in range(k):
            dtaps[:, dr, dc] = (padded[:, dr : dr + h, dc : dc + w] * gi).sum(axis=(0, 1, 2))
    return dv, dtaps


def _adj_blocked_softmax(node, g, vals):
    q, k, v = vals
    coeff, block = node.ctx["coeff"], node.ctx["block"]
    n, d = q.shape
    dv_cols = v.shape[1]
    nb = n // block
    gb = g.reshape(nb, block, dv_cols)
    qb = q.reshape(nb, block, d)
    kb = k.reshape(nb, block, d)
    vb = v.reshape(nb, block, dv_cols)
    dv = (coeff.transpose(0, 2, 1) @ gb).reshape(n, dv_cols)
    dcoeff = gb @ vb.transpose(0, 2, 1)
    dlogits = coeff * (dcoeff - (dcoeff * coeff).sum(axis=2, keepdims=True))
    dq = (dlogits @ kb).reshape(n, d)
    dk = (dlogits.transpose(0, 2, 1) @ qb).reshape(n, d)
    return dq, dk, dv


def _adj_blocked_linear(node, g, vals):
    u, w, v = vals
    coeff, den, block = node.ctx["coeff"], node.ctx["den"], node.ctx["block"]
    n, d = u.shape
    dv_cols = v.shape[1]
    nb = n // block
    gb = g.reshape(nb, block, dv_cols)
    ub = u.reshape(nb, block, d)
    wb = w.reshape(nb, block, d)
    vb = v.reshape(nb, block, dv_cols)
    dv = (coeff.transpose(0, 2, 1) @ gb).reshape(n, dv_cols)
    dcoeff = gb @ vb.transpose(0, 2, 1)
    dlogits = (dcoeff - (dcoeff * coeff).sum(axis=2, keepdims=True)) / den
    du = (dlogits @ wb).reshape(n, d)
    dw = (dlogits.transpose(0, 2, 1) @ ub).reshape(n, d)
    return du, dw, dv


def _adj_focused_map(node, g, vals):
    (x,) = vals
    p = node.ctx["p"]
    r = np.maximum(x, 0.0)
    rp = r**p
    norm_r = np.linalg.norm(r, axis=1, keepdims=True)
    norm_rp = np.linalg.norm(rp, axis=1, keepdims=True)
    live = (norm_rp > 0).astype(np.float64)
    safe_r = np.where(norm_r > 0, norm_r, 1.0)
    safe_rp = np.where(norm_rp > 0, norm_rp, 1.0)
    c = np.where(norm_rp > 0, norm_r / safe_rp, 0.0)
    rp1 = r ** (p - 1)
    # y = c * r^p with c = |r| / |r^p|; product + quotient rules per row
    g_dot_rp = (g * rp).sum(axis=1, keepdims=True)
    dc = g_dot_rp * live
    dr = c * g * p * rp1
    dr = dr + dc * (r / safe_r / safe_rp) * live
    dr = dr - dc * (norm_r / safe_rp**2) * (rp * p * rp1 / safe_rp) * live
    return (dr * (x > 0),)


def focused_map_rows(a, p: int):
    """Norm-preserving power features of relu(x), rowwise (zero rows map to 0)."""
    r = np.maximum(a.value, 0.0)
    rp = r**p
    norm_r = np.linalg.norm(r, axis=1, keepdims=True)
    norm_rp = np.linalg.norm(rp, axis=1, keepdims=True)
    scale_ = np.divide(norm_r, norm_rp, out=np.zeros_like(norm_r), where=norm_rp > 0)
    return a.tape.push("focused_map", (a.idx,), rp * scale_, {"p": int(p)})


ADJOINTS = {
    "leaf": None,
    "add": lambda node, g, vals: (g, g),
    "sub": lambda node, g, vals: (g, -g),
    "mul": lambda node, g, vals: (g * vals[1], g * vals[0]),
    "div": lambda node, g, vals: (g / vals[1], -g * vals[0] / vals[1] ** 2),
    "scale": lambda node, g, vals: (g * node.ctx["c"],),
    "add_scalar": lambda node, g, vals: (g,),
    "matmul": _adj_matmul,
    "transpose": lambda node, g, vals: (g.T,),
    "exp": lambda node, g, vals: (g * node.value,),
    "log": lambda node, g, vals: (g / vals[0],),
    "relu": lambda node, g, vals: (g * (vals[0] > 0),),
    "elu_plus_one": lambda node, g, vals: (
        g * np.where(vals[0] > 0, 1.0, np.exp(np.minimum(vals[0], 0.0))),
    ),
    "gelu": lambda node, g, vals: (
        g * (0.5 * (1.0 + node.ctx["t"])
             + 0.5 * vals[0] * (1.0 - node.ctx["t"] ** 2)
             * _GELU_C * (1.0 + 3.0 * _GELU_A * vals[0] ** 2)),
    ),
    "power_int": lambda node, g, vals: (
        g * node.ctx["p"] * vals[0] ** (node.ctx["p"] - 1),
    ),
    "sum_all": lambda node, g, vals: (np.full_like(vals[0], g[0, 0]),),
    "sum_cols": lambda node, g, vals: (np.repeat(g, vals[0].shape[1], axis=1),),
    "mean_rows": lambda node, g, vals: (
        np.repeat(g, vals[0].shape[0], axis=0) / vals[0].shape[0],
    ),
    "broadcast_row": lambda node, g, vals: (g.sum(axis=0, keepdims=True),),
    "softmax_rows": _adj_softmax_rows,
    "mul_rowvec": lambda node, g, vals: (
        g * vals[1],
        (g * vals[0]).sum(axis=1, keepdims=True),
    ),
    "div_rowvec": lambda node, g, vals: (
        g / vals[1],
        -(g * vals[0]).sum(axis=1, keepdims=True) / vals[1] ** 2,
    ),
    "row_l2norm": lambda node, g, vals: (
        g * np.divide(vals[0], node.value, out=np.zeros_like(vals[0]),
                      where=node.value > 0),
    ),
    "rows": lambda node, g, vals: (_scatter_rows(g, vals[0].shape, node.ctx["lo"]),),
    "cols": lambda node, g, vals: (_scatter_cols(g, vals[0].shape, node.ctx["lo"]),),
    "concat_rows": lambda node, g, vals: tuple(
        piece for piece in _split(g, node.ctx["sizes"], axis=0)
    ),
    "concat_cols": lambda node, g, vals: tuple(
        piece for piece in _split(g, node.ctx["sizes"], axis=1)
    ),
    "permute_rows": lambda node, g, vals: (_unpermute(g, node.ctx["perm"]),),
    "gather_rows": lambda node, g, vals: (_scatter_add(g, node.ctx),),
    "group_rows": lambda node, g, vals: (g.reshape(node.ctx["n"], node.ctx["d"]),),
    "rope_rotate": lambda node, g, vals: (_rotate_back(g, node.ctx),),
    "depthwise_conv": _adj_depthwise_conv,
    "layer_norm": _adj_layer_norm,
    "blocked_softmax_attention": _adj_blocked_softmax,
    "blocked_linear_attention": _adj_blocked_linear,
    "blocked_mean_broadcast": lambda node, g, vals: (
        _blocked_mean_value(g, node.ctx["block"]),
    ),
    "cross_entropy": lambda node, g, vals: (_adj_cross_entropy(node, g),),
    "focused_map": _adj_focused_map,
}


def _scatter_rows(g, shape, lo):
    out = np.zeros(shape)
    out[lo : lo + g.shape[0]] = g
    return out


def _scatter_cols(g, shape, lo):
    out = np.zeros(shape)
    out[:, lo : lo + g.shape[1]] = g
    return out


def _split(g, sizes, axis):
    pieces, start = [], 0
    for s in sizes:
        sl = [slice(None), slice(None)]
        sl[axis] = slice(start, start + s)
        pieces.append(g[tuple(sl)].copy())
        start += s
    return pieces


def _unpermute(g, perm):
    out = np.empty_like(g)
    out[perm] = g
    return out


def _scatter_add(g, ctx):
    out = np.zeros((ctx["n"], g.shape[1]))
    np.add.at(out, ctx["indices"], g)
    return out


def _rotate_back(g, ctx):
    c, s = ctx["cos"], ctx["sin"]
    out = np.empty_like(g)
    out[:, 0::2] = g[:, 0::2] * c + g[:, 1::2] * s
    out[:, 1::2] = -g[:, 0::2] * s + g[:, 1::2] * c
    return out


def _blocked_mean_value(g, block):
    n, d = g.shape
    gb = g.reshape(n // block, block, d)
    return np.repeat(gb.mean(axis=1, keepdims=True), block, axis=1).reshape(n, d)


def _adj_cross_entropy(node, g):
    probs, labels = node.ctx["probs"], node.ctx["labels"]
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return g[0, 0] * (probs - onehot) / probs.shape[0]


def backward(loss: TracedValue) -> dict[int, np.ndarray]:
    """Gradient of a 1x1 traced scalar with respect to every leaf.

    Returns a map from leaf node index to gradient array. Visits each node
    exactly once, in reverse creation (= reverse topological) order.
    """
    if loss.value.shape != (1, 1):
        raise DimensionError(f"loss must be a 1x1 scalar, got shape {loss.value.shape}")
    nodes = loss.tape.nodes
    grads: dict[int, np.ndarray] = {loss.idx: np.ones((1, 1))}
    for idx in range(loss.idx, -1, -1):
        node = nodes[idx]
        g = grads.pop(idx, None)
        if g is None or node.op == "leaf":
            if g is not None and node.op == "leaf":
                grads[idx] = g
            continue
        adj = ADJOINTS.get(node.op)
        if adj is None:
            raise DifferentiationError(f"no adjoint registered for op {node.op!r}")
        vals = tuple(nodes[p].value for p in node.parents)
        parent_grads = adj(node, g, vals)
        for p, pg in zip(node.parents, parent_grads):
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = np.asarray(pg, dtype=np.float64)
    return {i: g for i, g in grads.items() if nodes[i].op == "leaf"}


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    per_input: list[float]


def gradcheck(f, inputs, step: float = 1e-5, tol: float = 1e-5,
              sample_seed: int = 0) -> GradcheckReport:
    """Compare backward gradients of a traced scalar function to central
    finite differences.

    f takes traced leaves (one per input array) and returns a traced 1x1
    scalar. Inputs with more than 512 entries are checked on 64 seeded
    random coordinates instead of all of them. Relative error uses
    max(|analytic|, |numeric|, 1e-8) as the denominator. Failures are
    reported, never raised.
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]

    def run(arrs):
        tape = Tape()
        leaves = [leaf(tape, a) for a in arrs]
        out = f(*leaves)
        return out, leaves

    out, leaves = run(arrays)
    grads = backward(out)
    analytic = [grads.get(lv.idx, np.zeros_like(a)) for lv, a in zip(leaves, arrays)]

    per_input = []
    for which, base in enumerate(arrays):
        size = base.size
        if size > 512:
            rng = rng_for(sample_seed, "gradcheck", which)
            coords = rng.choice(size, size=64, replace=False)
        else:
            coords = np.arange(size)
        worst = 0.0
        for flat_idx in coords:
            idx = np.unravel_index(int(flat_idx), base.shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[which][idx] += step
            minus[which][idx] -= step
            f_plus = run(plus)[0].value[0, 0]
            f_minus = run(minus)[0].value[0, 0]
            numeric = (f_plus - f_minus) / (2.0 * step)
            a_val = analytic[which][idx]
            denom = max(abs(a_val), abs(numeric), 1e-8)
            worst = max(worst, abs(a_val - numeric) / denom)
        per_input.append(worst)
    max_err = max(per_input) if per_input else 0.0
    return GradcheckReport(max_rel_err=max_err, passed=max_err < tol, per_input=per_input)
