"""Array-valued reverse-mode differentiation, dense layers and Adam.

Every operation records a :class:`Node` on a :class:`Tape`. Nodes are
appended in evaluation order, so walking the list backwards is a valid
topological order and each node's backward rule runs exactly once.

Shapes are explicit: elementwise binary ops need equal shapes or a Python
scalar; the only broadcast is :func:`add_bias` (row vector onto a batch).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

LN10 = math.log(10.0)


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 parameter blocks with gradient and Adam state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter block {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> ParamStore:
        out = ParamStore()
        for k in self.params:
            out.params[k] = self.params[k].copy()
            out.grads[k] = self.grads[k].copy()
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out

    # flat views, used by gradient checks and checkpoints
    def flat(self, which: str = "params") -> np.ndarray:
        src = getattr(self, which)
        return np.concatenate([src[k].ravel() for k in self.params]) if self.params else np.zeros(0)

    def set_flat(self, vec, which: str = "params"):
        dst = getattr(self, which)
        off = 0
        for k in self.params:
            n = self.params[k].size
            dst[k][...] = np.asarray(vec[off : off + n]).reshape(self.params[k].shape)
            off += n
        if off != len(vec):
            raise ShapeError(f"flat vector has {len(vec)} entries, store holds {off}")


def save_store(store: ParamStore, path, extra: dict | None = None) -> None:
    """Write ``meta.json`` (block registry) and little-endian float64 payloads."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blocks, off = [], 0
    for k, p in store.params.items():
        blocks.append({"name": k, "shape": list(p.shape), "offset": off})
        off += p.size
    meta = {"blocks": blocks, "size": off, "adam_step": store.step}
    if extra:
        meta.update(extra)
    for which, fname in (("params", "params.f64"), ("m", "adam_m.f64"), ("v", "adam_v.f64")):
        (path / fname).write_bytes(store.flat(which).astype("<f8").tobytes())
    (path / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_store(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    store = ParamStore()
    for b in meta["blocks"]:
        store.add(b["name"], np.zeros(b["shape"]))
    for which, fname in (("params", "params.f64"), ("m", "adam_m.f64"), ("v", "adam_v.f64")):
        f = path / fname
        if which != "params" and not f.exists():
            continue
        vec = np.frombuffer(f.read_bytes(), dtype="<f8")
        if vec.size != meta["size"]:
            raise ShapeError(f"{f}: payload holds {vec.size} values, registry expects {meta['size']}")
        store.set_flat(vec, which)
    store.step = int(meta.get("adam_step", 0))
    return store, meta


# ---------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("value", "grad", "backward_fn", "tape", "param_name")

    def __init__(self, tape: Tape, value: np.ndarray, backward_fn=None, param_name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        # never mutate in place: the first incoming array may be shared with a sibling
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Tape:
    """Records operations for one backward pass over a :class:`ParamStore`."""

    def __init__(self, store: ParamStore | None = None):
        self.store = store
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}
        self.done = False

    def _record(self, value, backward_fn=None, param_name=None) -> Node:
        node = Node(self, value, backward_fn, param_name)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._record(np.asarray(value, dtype=np.float64))

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            node = self._record(self.store.params[name], param_name=name)
            self._param_nodes[name] = node
        return node

    def backward(self, loss: Node) -> None:
        """Propagate d(loss)/d(node) and add parameter gradients into the store."""
        if loss.tape is not self:
            raise ValueError("loss node was recorded on a different tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {loss.value.shape}")
        if self.done:
            raise RuntimeError("backward already ran on this tape")
        self.done = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            if node.backward_fn is not None:
                node.backward_fn(node.grad)
            elif node.param_name is not None and self.store is not None:
                self.store.grads[node.param_name] += node.grad
        # drop closures and interior grads so the graph's reference cycles do not pin memory;
        # leaf grads stay readable
        for node in self.nodes:
            if node.backward_fn is not None:
                node.backward_fn = None
                node.grad = None
        self.nodes.clear()
        self._param_nodes.clear()


def backward(tape: Tape, loss: Node) -> None:
    tape.backward(loss)


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def _check_same(a: Node, b: Node, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Node, b) -> Node:
    if not isinstance(b, Node):
        c = float(b)

        def bw(g):
            a.accumulate(g)

        return a.tape._record(a.value + c, bw)
    _check_same(a, b, "add")

    def bw(g):
        a.accumulate(g)
        b.accumulate(g)

    return a.tape._record(a.value + b.value, bw)


def neg(a: Node) -> Node:
    return a.tape._record(-a.value, lambda g: a.accumulate(-g))


def sub(a: Node, b) -> Node:
    if not isinstance(b, Node):
        return add(a, -float(b))
    return add(a, neg(b))


def mul(a: Node, b) -> Node:
    if not isinstance(b, Node):
        c = float(b)
        return a.tape._record(a.value * c, lambda g: a.accumulate(g * c))
    _check_same(a, b, "mul")

    def bw(g):
        a.accumulate(g * b.value)
        b.accumulate(g * a.value)

    return a.tape._record(a.value * b.value, bw)


def square(a: Node) -> Node:
    return a.tape._record(a.value * a.value, lambda g: a.accumulate(2.0 * a.value * g))


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    return a.tape._record(np.where(mask, a.value, 0.0), lambda g: a.accumulate(g * mask))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape._record(out, lambda g: a.accumulate(g * out))


def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return a.tape._record(out, lambda g: a.accumulate(g * out * (1.0 - out)))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sum_all(a: Node) -> Node:
    return a.tape._record(np.array(a.value.sum()), lambda g: a.accumulate(np.full(a.shape, float(g))))


def mean_all(a: Node) -> Node:
    n = a.value.size
    return a.tape._record(np.array(a.value.mean()), lambda g: a.accumulate(np.full(a.shape, float(g) / n)))


def weighted_sum(a: Node, w: np.ndarray) -> Node:
    """sum(a * w) for a constant weight array of the same shape."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: shapes {a.shape} and {w.shape} differ")
    return a.tape._record(np.array(np.sum(a.value * w)), lambda g: a.accumulate(float(g) * w))


def row_norm(a: Node) -> Node:
    """Euclidean norm of each row, shape (n, 1); zero rows get a zero subgradient."""
    nrm = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))

    def bw(g):
        safe = np.where(nrm > 0.0, nrm, 1.0)
        a.accumulate(np.where(nrm > 0.0, a.value / safe, 0.0) * g)

    return a.tape._record(nrm, bw)


def concat(parts: list[Node]) -> Node:
    """Concatenate (n, k_i) nodes along columns."""
    tape = parts[0].tape
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat: row counts differ {sorted(rows)}")
    widths = [p.shape[1] for p in parts]
    offs = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            p.accumulate(g[:, lo:hi])

    return tape._record(np.concatenate([p.value for p in parts], axis=1), bw)


def columns(a: Node, lo: int, hi: int) -> Node:
    def bw(g):
        full = np.zeros(a.shape)
        full[:, lo:hi] = g
        a.accumulate(full)

    return a.tape._record(a.value[:, lo:hi], bw)


def matmul(x: Node, w: Node) -> Node:
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {w.shape}")

    def bw(g):
        x.accumulate(g @ w.value.T)
        w.accumulate(x.value.T @ g)

    return x.tape._record(x.value @ w.value, bw)


def add_bias(x: Node, b: Node) -> Node:
    if b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")

    def bw(g):
        x.accumulate(g)
        b.accumulate(g.sum(axis=0))

    return x.tape._record(x.value + b.value, bw)


def clamp(a: Node, lo: float, hi: float) -> Node:
    inside = (a.value >= lo) & (a.value <= hi)
    return a.tape._record(np.clip(a.value, lo, hi), lambda g: a.accumulate(g * inside))


# ---------------------------------------------------------------------------
# layers


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "linear": lambda a: a}


def init_mlp(store: ParamStore, prefix: str, widths: list[int], rng: np.random.Generator, zero_last: bool = False):
    """He-uniform weights, zero biases; optionally a zero output layer."""
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if last and zero_last:
            w = np.zeros((n_in, n_out))
        else:
            bound = math.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        store.add(f"{prefix}.w{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(n_out))


def mlp_forward(tape: Tape, prefix: str, x: Node, widths: list[int], hidden: str = "relu") -> Node:
    """Affine layers with ``hidden`` activation between them; linear output."""
    if x.value.ndim != 2 or x.shape[1] != widths[0]:
        raise ShapeError(f"{prefix}: input width {x.shape} does not match {widths[0]}")
    act = ACTIVATIONS[hidden]
    h = x
    n_layers = len(widths) - 1
    for i in range(n_layers):
        h = add_bias(matmul(h, tape.param(f"{prefix}.w{i}")), tape.param(f"{prefix}.b{i}"))
        if i < n_layers - 1:
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# optimisation


def adam_step(
    store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, lr_scale: dict | None = None
) -> None:
    """Bias-corrected Adam update on every block, then zero the gradients.

    ``lr_scale`` maps a block-name prefix (the part before the first dot) to a
    multiplier on ``lr`` for that block.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in block {name!r}; update aborted")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in store.params:
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        block_lr = lr * lr_scale.get(name.split(".", 1)[0], 1.0) if lr_scale else lr
        store.params[name] -= block_lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        g.fill(0.0)


def lr_schedule(step: int, total: int, lr0: float = 1e-4, lr_final: float = 1e-5) -> float:
    """Exponential decay from ``lr0`` at step 0 to ``lr_final`` at ``total``."""
    if total <= 0:
        return lr0
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (lr_final / lr0) ** (step / total)
