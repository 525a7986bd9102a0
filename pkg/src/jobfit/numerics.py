"""Dense float32 arrays on a reverse-mode autodiff tape, AdamW, and the LR schedule.

Every operation takes and returns ``Node`` handles bound to one ``Tape``.
Values are 2-D row-major float32 throughout; any non-finite result raises.
The tape records nodes in creation order, which is already a topological
order, so ``backward`` is a single reverse sweep visiting each node once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

F32 = np.float32


class NumericsError(ValueError):
    pass


def as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=F32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise NumericsError(f"expected a 2-D array, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericsError(f"non-finite result in {op}")


class Node:
    """One tape entry: a forward value plus vector-Jacobian closures per parent."""

    __slots__ = ("tape", "value", "parents", "vjps", "requires_grad", "grad")

    def __init__(self, tape: "Tape", value: np.ndarray, parents: tuple["Node", ...],
                 vjps: tuple[Callable[[np.ndarray], np.ndarray], ...], requires_grad: bool):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, data, requires_grad: bool = False) -> Node:
        node = Node(self, as_f32(data), (), (), requires_grad)
        self.nodes.append(node)
        return node

    def _record(self, value: np.ndarray, parents: tuple[Node, ...],
                vjps: tuple[Callable[[np.ndarray], np.ndarray], ...], op: str) -> Node:
        _check_finite(value, op)
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, value.astype(F32, copy=False), parents, vjps, requires_grad)
        self.nodes.append(node)
        return node


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    if any(n.tape is not tape for n in nodes):
        raise NumericsError("operands belong to different tapes")
    return tape


def matmul(a: Node, b: Node, transpose_b: bool = False) -> Node:
    tape = _same_tape(a, b)
    bv = b.value.T if transpose_b else b.value
    if a.value.shape[1] != bv.shape[0]:
        raise NumericsError(f"matmul shape mismatch {a.shape} x {b.shape} (transpose_b={transpose_b})")
    out = a.value @ bv
    if transpose_b:
        vjps = (lambda g: g @ b.value, lambda g: g.T @ a.value)
    else:
        vjps = (lambda g: g @ b.value.T, lambda g: a.value.T @ g)
    return tape._record(out, (a, b), vjps, "matmul")


def add(a: Node, b: Node) -> Node:
    """Elementwise add; ``b`` may be a 1-row bias broadcast over a's rows."""
    tape = _same_tape(a, b)
    if a.shape == b.shape:
        vjp_b = lambda g: g
    elif b.shape == (1, a.shape[1]):
        vjp_b = lambda g: g.sum(axis=0, keepdims=True)
    else:
        raise NumericsError(f"add shape mismatch {a.shape} + {b.shape}")
    return tape._record(a.value + b.value, (a, b), (lambda g: g, vjp_b), "add")


def mul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise NumericsError(f"mul shape mismatch {a.shape} * {b.shape}")
    return tape._record(a.value * b.value, (a, b),
                        (lambda g: g * b.value, lambda g: g * a.value), "mul")


def scale(a: Node, s: float) -> Node:
    s = F32(s)
    return a.tape._record(a.value * s, (a,), (lambda g: g * s,), "scale")


def row_softmax(a: Node) -> Node:
    x = a.value
    shifted = x - x.max(axis=1, keepdims=True)  # stability: max subtraction
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g, y=y):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return a.tape._record(y, (a,), (vjp,), "row_softmax")


def row_log_softmax(a: Node) -> Node:
    x = a.value
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def vjp(g, sm=sm):
        return g - sm * g.sum(axis=1, keepdims=True)

    return a.tape._record(y, (a,), (vjp,), "row_log_softmax")


def mean_rows(a: Node) -> Node:
    """Mean over rows: (r, c) -> (1, c)."""
    r = a.shape[0]
    out = a.value.mean(axis=0, keepdims=True)

    def vjp(g, r=r, shape=a.shape):
        return np.broadcast_to(g / r, shape)

    return a.tape._record(out, (a,), (vjp,), "mean_rows")


def concat_rows(a: Node) -> Node:
    """Row-major flatten: (r, c) -> (1, r*c), rows laid out side by side."""
    shape = a.shape
    out = a.value.reshape(1, -1)
    return a.tape._record(out.copy(), (a,), (lambda g: g.reshape(shape),), "concat_rows")


def stack_rows(nodes: Sequence[Node]) -> Node:
    """Stack 1-row nodes into an (n, c) matrix."""
    if not nodes:
        raise NumericsError("stack_rows needs at least one row")
    tape = _same_tape(*nodes)
    cols = nodes[0].shape[1]
    for n in nodes:
        if n.shape != (1, cols):
            raise NumericsError(f"stack_rows expects (1, {cols}) rows, got {n.shape}")
    out = np.concatenate([n.value for n in nodes], axis=0)
    vjps = tuple((lambda g, i=i: g[i:i + 1]) for i in range(len(nodes)))
    return tape._record(out, tuple(nodes), vjps, "stack_rows")


def inner_product(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.shape != b.shape or a.shape[0] != 1:
        raise NumericsError(f"inner_product expects equal 1-row shapes, got {a.shape} and {b.shape}")
    out = np.array([[np.dot(a.value[0], b.value[0])]], dtype=F32)
    return tape._record(out, (a, b),
                        (lambda g: g * b.value, lambda g: g * a.value), "inner_product")


def layer_norm_rows(a: Node, eps: float = 1e-5) -> Node:
    """Per-row normalization to zero mean and unit variance (no learned affine)."""
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + F32(eps))
    y = (x - mu) * inv

    def vjp(g, y=y, inv=inv):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return inv * (g - gm - y * gym)

    return a.tape._record(y.astype(F32), (a,), (vjp,), "layer_norm_rows")


def gather_rows(table: Node, indices: Sequence[int]) -> Node:
    """Select rows of an embedding table; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise NumericsError("gather_rows needs a non-empty 1-D index list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise NumericsError("gather_rows index out of range")
    out = table.value[idx]

    def vjp(g, idx=idx, shape=table.shape):
        acc = np.zeros(shape, dtype=F32)
        np.add.at(acc, idx, g)
        return acc

    return table.tape._record(out, (table,), (vjp,), "gather_rows")


def sum_all(a: Node) -> Node:
    out = np.array([[a.value.sum(dtype=np.float64)]], dtype=F32)

    def vjp(g, shape=a.shape):
        return np.broadcast_to(g, shape).astype(F32)

    return a.tape._record(out, (a,), (vjp,), "sum_all")


def backward(tape: Tape, loss: Node) -> None:
    """Reverse-mode sweep seeding d(loss)/d(loss) = 1; fills ``grad`` on
    every node that requires gradients. ``loss`` must be 1x1."""
    if loss.shape != (1, 1):
        raise NumericsError(f"loss must be a 1x1 scalar node, got shape {loss.shape}")
    if loss.tape is not tape:
        raise NumericsError("loss node does not belong to this tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones((1, 1), dtype=F32)
    for node in reversed(tape.nodes):
        if node.grad is None or not node.parents:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = contrib.astype(F32, copy=True)
            else:
                parent.grad = parent.grad + contrib.astype(F32, copy=False)


def grad_check(f: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
               params: dict[str, np.ndarray], h: float = 1e-3) -> tuple[float, float]:
    """Compare autodiff gradients of ``f`` against central finite differences.

    ``f`` maps a parameter dict to ``(loss_value, grads)``. Every entry of
    every array is perturbed by +-h; relative error uses a
    ``max(|a|, |b|, 1e-8)`` denominator. Returns ``(max_err, median_err)``.
    """
    base_loss, grads = f(params)
    if not np.isfinite(base_loss):
        raise NumericsError("loss is non-finite at the base point")
    errs = []
    for name in sorted(params):
        arr = params[name]
        grad = grads[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = F32(orig + h)
            hi_val = flat[i]
            loss_hi, _ = f(params)
            flat[i] = F32(orig - h)
            lo_val = flat[i]
            loss_lo, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(loss_hi) and np.isfinite(loss_lo)):
                raise NumericsError(f"loss is non-finite probing {name}[{i}]")
            # use the realized f32 step, not 2h, to cancel quantization error
            fd = (loss_hi - loss_lo) / float(hi_val - lo_val)
            ad = float(grad.reshape(-1)[i])
            errs.append(abs(ad - fd) / max(abs(ad), abs(fd), 1e-8))
    errs_arr = np.asarray(errs)
    return float(errs_arr.max()), float(np.median(errs_arr))


@dataclass
class AdamWState:
    """AdamW moments and step counter, one moment pair per parameter array."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    base_lr: float = 1e-3
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float | None = None) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    if lr is None:
        lr = state.base_lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise NumericsError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / F32(bc1)
        v_hat = v / F32(bc2)
        # decoupled decay uses the pre-step parameter value
        p -= F32(lr * state.weight_decay) * p
        p -= F32(lr) * (m_hat / (np.sqrt(v_hat) + F32(state.eps)))


def lr_at(step: int, total_steps: int, warmup_frac: float, base_lr: float) -> float:
    """Linear warmup from 0 over ceil(warmup_frac * total) steps, then linear
    decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise NumericsError(f"step {step} outside [0, {total_steps}]")
    if not 0.0 < warmup_frac < 1.0:
        raise NumericsError("warmup_frac must be in (0, 1)")
    warmup_steps = int(np.ceil(warmup_frac * total_steps))
    if step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)
