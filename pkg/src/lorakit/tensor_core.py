"""Dense float64 linear algebra: reverse-mode autodiff on a tape, one-sided
Jacobi SVD, and an AdamW optimizer.

Matrices are plain ``numpy.ndarray`` values.  Autodiff values are wrapped in
:class:`Node` objects that remember how they were produced; only nodes that
depend on a trainable leaf are recorded, so frozen weights never get adjoint
storage.
"""
from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

Matrix = np.ndarray


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values)."""

    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


def as_matrix(data, dtype=np.float64) -> Matrix:
    m = np.array(data, dtype=dtype)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


# ---------------------------------------------------------------------------
# Plain matrix routines
# ---------------------------------------------------------------------------

def frobenius_norm(m: Matrix) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(math.sqrt(np.sum(m * m)))


@dataclass(frozen=True)
class SvdResult:
    U: Matrix
    S: np.ndarray
    V: Matrix

    def reconstruct(self) -> Matrix:
        return (self.U * self.S) @ self.V.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one Jacobi sweep; each round holds disjoint column pairs."""
    players = list(range(n if n % 2 == 0 else n + 1))
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(Q: Matrix, valid: np.ndarray) -> Matrix:
    """Replace columns flagged invalid with an orthonormal completion."""
    Q = Q.copy()
    m = Q.shape[0]
    good = [Q[:, j] for j in range(Q.shape[1]) if valid[j]]
    candidates = iter(np.eye(m))
    for j in range(Q.shape[1]):
        if valid[j]:
            continue
        while True:
            e = next(candidates)
            v = e.copy()
            for _ in range(2):
                for g in good:
                    v -= (g @ v) * g
            nv = np.linalg.norm(v)
            if nv > 1e-6:
                v /= nv
                break
        Q[:, j] = v
        good.append(v)
    return Q


def _jacobi_columns(M: Matrix, tol: float, max_sweeps: int):
    """One-sided Jacobi: orthogonalize the columns of M (rows >= cols)."""
    G = M.copy()
    n = G.shape[1]
    V = np.eye(n)
    rounds = _round_robin(n)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in rounds:
            gp, gq = G[:, p], G[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            scale = np.sqrt(alpha * beta)
            act = (np.abs(gamma) > tol * scale) & (scale > 0)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = G[:, p], G[:, q]
            G[:, p], G[:, q] = c * gp - s * gq, s * gp + c * gq
            vp, vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return G, V, sweep
    raise NumericError(f"Jacobi SVD did not converge after {max_sweeps} sweeps", max_sweeps)


def svd(m: Matrix, tol: float = 1e-12, max_sweeps: int | None = None) -> SvdResult:
    """Thin SVD ``m = U diag(S) V^T`` by one-sided Jacobi rotations.

    ``U`` is m x p, ``V`` is n x p with p = min(m, n).  Singular values are
    non-increasing and each column of ``U`` has its largest-magnitude entry
    non-negative, which makes the factorization unique for distinct values.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise DimensionError(f"svd needs a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("svd input contains non-finite entries")
    transposed = a.shape[0] < a.shape[1]
    work = a.T if transposed else a
    n = work.shape[1]
    if max_sweeps is None:
        max_sweeps = 10 * n * n
    G, V, _ = _jacobi_columns(work, tol, max_sweeps)

    S = np.linalg.norm(G, axis=0)
    order = np.argsort(-S, kind="stable")
    S, G, V = S[order], G[:, order], V[:, order]
    cutoff = max(S[0], 1.0) * 1e-13 * max(work.shape) if S.size else 0.0
    valid = S > cutoff
    U = np.zeros_like(G)
    U[:, valid] = G[:, valid] / S[valid]
    if not valid.all():
        S = np.where(valid, S, 0.0)
        U = _complete_basis(U, valid)

    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    U, V = U * signs, V * signs
    if transposed:
        # svd(a^T) = U S V^T  =>  a = V S U^T; re-apply the sign rule to the new U.
        U, V = V, U
        idx = np.argmax(np.abs(U), axis=0)
        signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
        U, V = U * signs, V * signs
    return SvdResult(U=U, S=S, V=V)


# ---------------------------------------------------------------------------
# Reverse-mode autodiff
# ---------------------------------------------------------------------------

_op_counter: Counter | None = None


@contextlib.contextmanager
def count_ops():
    """Count primitive operations executed inside the block."""
    global _op_counter
    prev, _op_counter = _op_counter, Counter()
    try:
        yield _op_counter
    finally:
        _op_counter = prev


class Node:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "tape", "name", "trainable")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False,
                 tape=None, name=None, trainable=False):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.tape = tape
        self.name = name
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records the operations of one forward pass in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, *, trainable: bool = False, name: str | None = None) -> Node:
        node = Node(np.asarray(value), tape=self, name=name, trainable=trainable,
                    requires_grad=trainable)
        if trainable:
            self.nodes.append(node)
        return node

    def params(self, arrays: dict[str, np.ndarray], trainable: Iterable[str] = ()) -> dict[str, Node]:
        train = set(trainable)
        return {k: self.leaf(v, trainable=k in train, name=k) for k, v in arrays.items()}


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x))


def _record(op: str, value, parents: Sequence[Node], backward_fn: Callable) -> Node:
    if _op_counter is not None:
        _op_counter[op] += 1
    tape = next((p.tape for p in parents if p.tape is not None), None)
    req = any(p.requires_grad for p in parents)
    if not req:
        # Nothing upstream is trainable: keep the value only, so inference
        # does not retain the whole activation graph.
        return Node(value, tape=tape)
    node = Node(value, parents=tuple(parents), backward_fn=backward_fn, requires_grad=True, tape=tape)
    if tape is not None:
        tape.nodes.append(node)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim < 1 or b.value.ndim < 1 or a.value.shape[-1] != b.value.shape[-2 if b.value.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")
    if a.value.ndim > 2 and b.value.ndim == 2:
        # one large GEMM instead of numpy's per-batch loop
        out = (a.value.reshape(-1, a.value.shape[-1]) @ b.value).reshape(a.value.shape[:-1] + b.value.shape[1:])
    else:
        out = a.value @ b.value

    def backward(g):
        av, bv = a.value, b.value
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if av.ndim > 2 and bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record("matmul", out, (a, b), backward)


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, a.value.shape),
                                                  _unbroadcast(g, b.value.shape)))


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value
    return _record("mul", out, (a, b), lambda g: (_unbroadcast(g * b.value, a.value.shape),
                                                  _unbroadcast(g * a.value, b.value.shape)))


def scale(a, c: float) -> Node:
    a = _wrap(a)
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


def transpose(a, axes: Sequence[int] | None = None) -> Node:
    a = _wrap(a)
    if axes is None:
        axes = tuple(range(a.value.ndim - 2)) + (a.value.ndim - 1, a.value.ndim - 2)
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(a.value, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Node:
    a = _wrap(a)
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),))


def total(a) -> Node:
    """Sum of all entries, as a 0-d node."""
    a = _wrap(a)
    return _record("sum", np.asarray(a.value.sum()), (a,),
                   lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def relu(a) -> Node:
    a = _wrap(a)
    mask = a.value > 0
    return _record("relu", a.value * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Node:
    """tanh approximation of GELU."""
    a = _wrap(a)
    x = a.value
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record("gelu", out, (a,), backward)


def softmax(a, mask: np.ndarray | None = None) -> Node:
    """Softmax over the last axis; positions where ``mask`` is False get zero weight."""
    a = _wrap(a)
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (a,), backward)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Node:
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.value.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.value.shape)
        if x.requires_grad:
            gh = g * gamma.value
            n = xv.shape[-1]
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record("layernorm", out, (x, gamma, beta), backward)


def embedding(table, ids: np.ndarray) -> Node:
    """Row lookup ``table[ids]``."""
    table = _wrap(table)
    ids = np.asarray(ids)
    out = table.value[ids]

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        return (gt,)

    return _record("embedding", out, (table,), backward)


def where(mask: np.ndarray, a, b) -> Node:
    """Elementwise select: ``a`` where mask is True, else ``b``."""
    a, b = _wrap(a), _wrap(b)
    out = np.where(mask, a.value, b.value)
    return _record("where", out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.value.shape),
                                                    _unbroadcast(np.where(mask, 0.0, g), b.value.shape)))


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray) -> Node:
    """Weighted mean negative log-likelihood of integer ``targets``.

    ``weights`` (same shape as targets) selects which positions are scored.
    """
    logits = _wrap(logits)
    x = logits.value
    targets = np.asarray(targets)
    w = np.asarray(weights, dtype=x.dtype)
    denom = w.sum()
    if denom <= 0:
        raise ContractError("cross_entropy: no scored positions (empty target span)")
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * w).sum() / denom)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * (w / denom)[..., None],)

    return _record("cross_entropy", out, (logits,), backward)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [_wrap(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, nodes, backward)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Propagate adjoints from a scalar ``loss``.

    Returns gradients keyed by leaf name, for trainable leaves only.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        if node.backward_fn is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for node in tape.nodes:
        if node.trainable:
            g = grads.get(id(node))
            out[node.name] = g if g is not None else np.zeros_like(node.value)
    return out


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def num_scalars(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, hyper: AdamWHyper, lr: float | None = None):
    """One AdamW update with decoupled weight decay.

    Only keys present in ``grads`` are updated.  Returns new param and state
    objects; input arrays are not modified.
    """
    lr = hyper.lr if lr is None else lr
    step = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    bc1 = 1.0 - hyper.beta1 ** step
    bc2 = 1.0 - hyper.beta2 ** step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        mi = m.get(name)
        vi = v.get(name)
        if mi is None:
            mi = np.zeros_like(p)
            vi = np.zeros_like(p)
        elif mi.shape != p.shape:
            raise DimensionError(f"optimizer state for {name!r} has shape {mi.shape}, parameter {p.shape}")
        mi = hyper.beta1 * mi + (1.0 - hyper.beta1) * g
        vi = hyper.beta2 * vi + (1.0 - hyper.beta2) * g * g
        update = (mi / bc1) / (np.sqrt(vi / bc2) + hyper.eps)
        new_params[name] = p * (1.0 - lr * hyper.weight_decay) - lr * update
        m[name], v[name] = mi, vi
    return new_params, AdamWState(m=m, v=v, step=step)
