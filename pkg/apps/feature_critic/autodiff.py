"""Reverse-mode automatic differentiation over dense float64 matrices.

Operations record :class:`Node` objects on the active :class:`Tape`. Every
value is a 2-D ``float64`` array. :func:`backward` walks the tape in reverse
order; with ``create_graph=True`` the backward pass is itself recorded on the
tape, so its results can be differentiated again (reverse-over-reverse). That
is what :func:`grad_through_update` uses to differentiate through a gradient
step.

relu uses the subgradient relu'(0) = 0 and a zero second derivative.
"""

import contextvars
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    MissingGradient,
    NoActiveTape,
    NonDifferentiablePath,
    NonFiniteValue,
    NonScalarRoot,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, Sequence[float]]

_ACTIVE: contextvars.ContextVar[Tuple["Tape", ...]] = contextvars.ContextVar(
    "active_tapes", default=()
)


class Node:
    """One recorded value and the operation that produced it."""

    __slots__ = ("tape", "id", "op_kind", "inputs", "value", "meta", "name")

    def __init__(
        self,
        tape: "Tape",
        node_id: int,
        op_kind: str,
        inputs: Tuple["Node", ...],
        value: np.ndarray,
        meta: Optional[dict] = None,
        name: Optional[str] = None,
    ):
        self.tape = tape
        self.id = node_id
        self.op_kind = op_kind
        self.inputs = inputs
        self.value = value
        self.meta = meta or {}
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise NonScalarRoot(f"node {self.id} has shape {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node({self.id}: {self.op_kind}{label} {self.shape})"


class Tape:
    """Ordered record of Nodes; inputs always precede the nodes using them.

    A tape has a single writer. Use it as a context manager to make it the
    target of recorded operations.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE.set(_ACTIVE.get() + (self,)))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        op_kind: str,
        inputs: Tuple[Node, ...],
        value: np.ndarray,
        meta: Optional[dict] = None,
        name: Optional[str] = None,
    ) -> Node:
        node = Node(self, len(self.nodes), op_kind, inputs, value, meta, name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value: ArrayLike) -> Node:
        """Record a named leaf that gradients can be taken with respect to."""
        return self.record("param", (), _as_matrix(value).copy(), name=name)

    def constant(self, value: ArrayLike) -> Node:
        return self.record("const", (), _as_matrix(value))

    def kink_margin(self) -> float:
        """Smallest |input| seen by any relu on this tape (inf if none)."""
        margin = np.inf
        for node in self.nodes:
            if node.op_kind == "relu":
                margin = min(margin, float(np.min(np.abs(node.inputs[0].value))))
        return margin


def active_tape() -> Tape:
    stack = _ACTIVE.get()
    if not stack:
        raise NoActiveTape("operations must run inside a `with Tape():` block")
    return stack[-1]


def _as_matrix(value: ArrayLike) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {array.shape}")
    return array


def constant(value: ArrayLike) -> Node:
    return active_tape().constant(value)


def lift(value: Union[Node, ArrayLike]) -> Node:
    """Return ``value`` as a Node, recording non-Node values as constants."""
    if isinstance(value, Node):
        return value
    return constant(value)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpRule:
    """Backward rule of one primitive.

    ``vjp(node, g)`` returns one contribution per input (None for inputs that
    carry no gradient). Contributions are built from recorded operations so
    they can themselves be differentiated when ``twice_differentiable``.
    """

    vjp: Callable[[Node, Node], Tuple[Optional[Node], ...]]
    twice_differentiable: bool = True


_RULES: Dict[str, OpRule] = {}


def _rule(op_kind: str, twice_differentiable: bool = True):
    def register(vjp):
        _RULES[op_kind] = OpRule(vjp, twice_differentiable)
        return vjp

    return register


def _record(op_kind: str, inputs: Tuple[Node, ...], value: np.ndarray, **meta) -> Node:
    return active_tape().record(op_kind, inputs, value, meta or None)


def _broadcast_kind(a: Node, b: Node, op_kind: str) -> str:
    if a.shape == b.shape:
        return "none"
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return "b_rows"
    if a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return "a_rows"
    raise ShapeMismatch(f"{op_kind}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _record("matmul", (a, b), a.value @ b.value)


@_rule("matmul")
def _matmul_vjp(node: Node, g: Node):
    a, b = node.inputs
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def add(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    kind = _broadcast_kind(a, b, "add")
    return _record("add", (a, b), a.value + b.value, broadcast=kind)


def _unbroadcast(g: Node, kind: str, side: str) -> Node:
    if (kind == "b_rows" and side == "b") or (kind == "a_rows" and side == "a"):
        return sum_rows(g)
    return g


@_rule("add")
def _add_vjp(node: Node, g: Node):
    kind = node.meta["broadcast"]
    return _unbroadcast(g, kind, "a"), _unbroadcast(g, kind, "b")


def sub(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    kind = _broadcast_kind(a, b, "sub")
    return _record("sub", (a, b), a.value - b.value, broadcast=kind)


@_rule("sub")
def _sub_vjp(node: Node, g: Node):
    kind = node.meta["broadcast"]
    return _unbroadcast(g, kind, "a"), scale(_unbroadcast(g, kind, "b"), -1.0)


def scale(a: Node, factor: float) -> Node:
    a = lift(a)
    factor = float(factor)
    return _record("scale", (a,), a.value * factor, factor=factor)


@_rule("scale")
def _scale_vjp(node: Node, g: Node):
    return (scale(g, node.meta["factor"]),)


def elementwise_mul(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"elementwise_mul: {a.shape} * {b.shape}")
    return _record("elementwise_mul", (a, b), a.value * b.value)


@_rule("elementwise_mul")
def _mul_vjp(node: Node, g: Node):
    a, b = node.inputs
    return elementwise_mul(g, b), elementwise_mul(g, a)


def relu(a: Node) -> Node:
    a = lift(a)
    return _record("relu", (a,), np.maximum(a.value, 0.0))


@_rule("relu")
def _relu_vjp(node: Node, g: Node):
    (a,) = node.inputs
    # relu'(0) := 0; the mask is a constant, so relu'' = 0
    mask = constant((a.value > 0.0).astype(np.float64))
    return (elementwise_mul(g, mask),)


def tanh(a: Node) -> Node:
    a = lift(a)
    return _record("tanh", (a,), np.tanh(a.value))


@_rule("tanh")
def _tanh_vjp(node: Node, g: Node):
    # g * (1 - y^2)
    return (sub(g, elementwise_mul(g, elementwise_mul(node, node))),)


def sigmoid(a: Node) -> Node:
    a = lift(a)
    x = a.value
    value = np.empty_like(x)
    positive = x >= 0
    value[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    value[~positive] = exp_x / (1.0 + exp_x)
    return _record("sigmoid", (a,), value)


@_rule("sigmoid")
def _sigmoid_vjp(node: Node, g: Node):
    gs = elementwise_mul(g, node)
    return (sub(gs, elementwise_mul(gs, node)),)


def softplus(a: Node) -> Node:
    a = lift(a)
    x = a.value
    return _record("softplus", (a,), np.logaddexp(0.0, x))


@_rule("softplus")
def _softplus_vjp(node: Node, g: Node):
    (a,) = node.inputs
    return (elementwise_mul(g, sigmoid(a)),)


def mean_rows(a: Node) -> Node:
    """Column means: (m, n) -> (1, n)."""
    a = lift(a)
    return _record("mean_rows", (a,), a.value.mean(axis=0, keepdims=True))


@_rule("mean_rows")
def _mean_rows_vjp(node: Node, g: Node):
    rows = node.inputs[0].shape[0]
    return (scale(broadcast_rows(g, rows), 1.0 / rows),)


def sum_rows(a: Node) -> Node:
    """Column sums: (m, n) -> (1, n)."""
    a = lift(a)
    return _record("sum_rows", (a,), a.value.sum(axis=0, keepdims=True))


@_rule("sum_rows")
def _sum_rows_vjp(node: Node, g: Node):
    return (broadcast_rows(g, node.inputs[0].shape[0]),)


def broadcast_rows(a: Node, rows: int) -> Node:
    """Repeat a (1, n) row ``rows`` times."""
    a = lift(a)
    if a.shape[0] != 1:
        raise ShapeMismatch(f"broadcast_rows expects one row, got {a.shape}")
    value = np.repeat(a.value, rows, axis=0)
    return _record("broadcast_rows", (a,), value, rows=rows)


@_rule("broadcast_rows")
def _broadcast_rows_vjp(node: Node, g: Node):
    return (sum_rows(g),)


def reduce_sum(a: Node) -> Node:
    """Sum of all entries as a 1x1 matrix."""
    a = lift(a)
    return _record("sum", (a,), np.array([[a.value.sum()]]))


@_rule("sum")
def _sum_vjp(node: Node, g: Node):
    rows, cols = node.inputs[0].shape
    row = matmul(g, constant(np.ones((1, cols))))
    return (broadcast_rows(row, rows),)


def transpose(a: Node) -> Node:
    a = lift(a)
    return _record("transpose", (a,), np.ascontiguousarray(a.value.T))


@_rule("transpose")
def _transpose_vjp(node: Node, g: Node):
    return (transpose(g),)


def gram(f: Node) -> Node:
    """F^T F for an (m, n) input, giving (n, n).

    Rows are summed in lexicographic order, so any row permutation of F gives
    a bit-identical result.
    """
    f = lift(f)
    rows = f.value[np.lexsort(f.value.T[::-1])]
    return _record("gram", (f,), rows.T @ rows)


@_rule("gram")
def _gram_vjp(node: Node, g: Node):
    (f,) = node.inputs
    return (matmul(f, add(g, transpose(g))),)


def reshape(a: Node, shape: Tuple[int, int]) -> Node:
    a = lift(a)
    shape = (int(shape[0]), int(shape[1]))
    if shape[0] * shape[1] != a.value.size:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}")
    return _record("reshape", (a,), a.value.reshape(shape), shape=shape)


@_rule("reshape")
def _reshape_vjp(node: Node, g: Node):
    return (reshape(g, node.inputs[0].shape),)


def flatten(a: Node) -> Node:
    """Row-major flatten to a single row."""
    a = lift(a)
    return _record("flatten", (a,), a.value.reshape(1, -1))


@_rule("flatten")
def _flatten_vjp(node: Node, g: Node):
    return (reshape(g, node.inputs[0].shape),)


def take(a: Node, index: np.ndarray) -> Node:
    """Gather ``a.ravel()[index]`` into a matrix shaped like ``index``."""
    a = lift(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2:
        raise ShapeMismatch(f"take index must be 2-D, got {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.value.size):
        raise ShapeMismatch("take index out of bounds")
    return _record("take", (a,), a.value.ravel()[index], index=index)


@_rule("take")
def _take_vjp(node: Node, g: Node):
    return (scatter_add(g, node.meta["index"], node.inputs[0].shape),)


def scatter_add(a: Node, index: np.ndarray, shape: Tuple[int, int]) -> Node:
    """Adjoint of :func:`take`: accumulate ``a`` into a zero matrix of ``shape``."""
    a = lift(a)
    if a.shape != index.shape:
        raise ShapeMismatch(f"scatter_add: values {a.shape} vs index {index.shape}")
    size = int(shape[0]) * int(shape[1])
    flat = np.bincount(index.ravel(), weights=a.value.ravel(), minlength=size)
    return _record(
        "scatter_add", (a,), flat.reshape(shape), index=index, shape=tuple(shape)
    )


@_rule("scatter_add")
def _scatter_add_vjp(node: Node, g: Node):
    return (take(g, node.meta["index"]),)


def softmax_ce(logits: Node, labels: np.ndarray) -> Node:
    """Per-row softmax cross-entropy, shape (m, 1).

    Labels must already be validated against the column count.
    """
    logits = lift(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    rows, _ = logits.shape
    if labels.shape[0] != rows:
        raise ShapeMismatch(f"softmax_ce: {rows} rows but {labels.shape[0]} labels")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    losses = -log_probs[np.arange(rows), labels].reshape(rows, 1)
    return _record(
        "softmax_ce", (logits,), losses, labels=labels, probs=np.exp(log_probs)
    )


@_rule("softmax_ce", twice_differentiable=False)
def _softmax_ce_vjp(node: Node, g: Node):
    probs = node.meta["probs"].copy()
    probs[np.arange(probs.shape[0]), node.meta["labels"]] -= 1.0
    spread = matmul(g, constant(np.ones((1, probs.shape[1]))))
    return (elementwise_mul(spread, constant(probs)),)


# ---------------------------------------------------------------------------
# Parameter containers and gradients
# ---------------------------------------------------------------------------


class ParamSet(OrderedDict):
    """Named float64 parameter matrices (theta, phi_j or omega)."""

    def __init__(self, *args, **kwargs):
        super().__init__()
        for name, value in OrderedDict(*args, **kwargs).items():
            self[name] = value

    def __setitem__(self, name: str, value: ArrayLike) -> None:
        super().__setitem__(name, _as_matrix(value))

    def copy(self) -> "ParamSet":
        return ParamSet((name, value.copy()) for name, value in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((name, np.zeros_like(value)) for name, value in self.items())

    def on_tape(self, tape: Tape, prefix: str = "") -> "OrderedDict[str, Node]":
        return OrderedDict(
            (name, tape.param(prefix + name, value)) for name, value in self.items()
        )

    def flat(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([value.ravel() for value in self.values()])

    def with_flat(self, vector: np.ndarray) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.size:
            raise ShapeMismatch(f"expected {self.size} entries, got {vector.size}")
        out, offset = ParamSet(), 0
        for name, value in self.items():
            out[name] = vector[offset : offset + value.size].reshape(value.shape)
            offset += value.size
        return out

    @property
    def size(self) -> int:
        return int(sum(value.size for value in self.values()))

    def shapes(self) -> Dict[str, Tuple[int, int]]:
        return {name: tuple(value.shape) for name, value in self.items()}

    def fingerprint(self) -> str:
        """SHA-256 over names, shapes and little-endian values."""
        digest = hashlib.sha256()
        for name, value in self.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.asarray(value.shape, dtype="<i8").tobytes())
            digest.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return digest.hexdigest()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for value in self.values())


class GradientMap(OrderedDict):
    """Parameter name -> gradient (array, or Node when recorded on a tape)."""

    def arrays(self) -> ParamSet:
        return ParamSet(
            (name, g.value if isinstance(g, Node) else g) for name, g in self.items()
        )


def backward(
    tape: Tape,
    root: Node,
    wrt: Optional[Mapping[str, Node]] = None,
    create_graph: bool = False,
) -> GradientMap:
    """Gradients of the scalar ``root`` with respect to the nodes in ``wrt``.

    ``wrt`` defaults to every ``param`` leaf recorded before ``root``.
    Unreachable entries get zeros. With ``create_graph`` the pass is recorded
    on ``tape`` and the map holds Nodes; otherwise it holds arrays and the
    tape is left untouched.
    """
    if root.tape is not tape or root.id >= len(tape.nodes):
        raise ShapeMismatch("root does not belong to the given tape")
    if root.shape != (1, 1):
        raise NonScalarRoot(f"root must be 1x1, got {root.shape}")
    if wrt is None:
        wrt = OrderedDict(
            (node.name, node)
            for node in tape.nodes[: root.id + 1]
            if node.op_kind == "param"
        )

    nodes = tape.nodes[: root.id + 1]
    targets: Dict[int, List[str]] = {}
    for key, node in wrt.items():
        if node.tape is not tape:
            raise ShapeMismatch(f"gradient target {key!r} lives on another tape")
        targets.setdefault(node.id, []).append(key)

    live = np.zeros(len(nodes), dtype=bool)
    for node in nodes:
        if node.id in targets:
            live[node.id] = True
            continue
        for inp in node.inputs:
            if inp.tape is tape and inp.id < len(nodes) and live[inp.id]:
                live[node.id] = True
                break

    found: Dict[str, Node] = {}
    work = tape if create_graph else Tape()
    with work:
        adjoint: Dict[int, Node] = {root.id: constant(np.ones((1, 1)))}
        for node in reversed(nodes):
            if not live[node.id]:
                continue
            g = adjoint.pop(node.id, None)
            if g is None:
                continue
            for key in targets.get(node.id, ()):
                found[key] = g
            if not node.inputs:
                continue
            rule = _RULES[node.op_kind]
            if create_graph and not rule.twice_differentiable:
                raise NonDifferentiablePath(
                    f"'{node.op_kind}' (node {node.id}) has no second derivative"
                )
            for inp, contribution in zip(node.inputs, rule.vjp(node, g)):
                if contribution is None or inp.tape is not tape or not live[inp.id]:
                    continue
                if contribution.shape != inp.shape:
                    raise ShapeMismatch(
                        f"{node.op_kind}: gradient {contribution.shape} "
                        f"for input {inp.shape}"
                    )
                previous = adjoint.get(inp.id)
                adjoint[inp.id] = (
                    contribution if previous is None else add(previous, contribution)
                )

        grads = GradientMap()
        for key, node in wrt.items():
            g = found.get(key)
            if create_graph:
                grads[key] = g if g is not None else constant(np.zeros(node.shape))
            else:
                grads[key] = g.value.copy() if g is not None else np.zeros(node.shape)
    return grads


def descend(
    params: Mapping[str, Union[np.ndarray, Node]],
    grads: Mapping[str, Union[np.ndarray, Node]],
    step_size: float,
) -> "OrderedDict[str, Union[np.ndarray, Node]]":
    """One plain gradient step ``p - step_size * g`` per named entry.

    Node gradients keep the result on the active tape so it stays
    differentiable; array gradients give arrays.
    """
    out = OrderedDict()
    for name, param in params.items():
        if name not in grads:
            raise MissingGradient(f"no gradient for parameter {name!r}")
        g = grads[name]
        if isinstance(g, Node) or isinstance(param, Node):
            out[name] = sub(lift(param), scale(lift(g), step_size))
        else:
            out[name] = param - step_size * g
    return out


@dataclass
class HypergradientResult:
    """Outcome of :func:`grad_through_update`."""

    omega_grad: ParamSet
    inner_grad: ParamSet
    inner_value: float
    outer_value: float
    theta_new: ParamSet


def grad_through_update(
    inner: Callable[[Mapping[str, Node], Mapping[str, Node]], Node],
    outer: Callable[[Mapping[str, Node]], Node],
    theta: ParamSet,
    omega: ParamSet,
    alpha: float,
    base: Optional[ParamSet] = None,
) -> HypergradientResult:
    """Gradient of ``outer(base - alpha * d inner / d theta)`` with respect to omega.

    ``inner(theta, omega)`` builds the scalar whose theta-gradient defines the
    step (evaluated at ``theta``); ``base`` is the point the step starts from
    and defaults to ``theta``. The inner backward pass is recorded on the tape
    and the outer backward pass differentiates through it.
    """
    base = theta if base is None else base
    tape = Tape()
    with tape:
        theta_nodes = theta.on_tape(tape, "theta/")
        omega_nodes = omega.on_tape(tape, "omega/")
        inner_root = inner(theta_nodes, omega_nodes)
        inner_grad = backward(tape, inner_root, theta_nodes, create_graph=True)
        base_nodes = OrderedDict(
            (name, constant(value)) for name, value in base.items()
        )
        theta_new = descend(base_nodes, inner_grad, alpha)
        outer_root = outer(theta_new)
        omega_grad = backward(tape, outer_root, omega_nodes)
    return HypergradientResult(
        omega_grad=omega_grad.arrays(),
        inner_grad=inner_grad.arrays(),
        inner_value=inner_root.item(),
        outer_value=outer_root.item(),
        theta_new=ParamSet((name, node.value) for name, node in theta_new.items()),
    )


def finite_difference(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    grad = np.zeros_like(x)
    for i in range(x.size):
        shifted = x.copy()
        shifted[i] = x[i] + eps
        upper = float(f(shifted))
        shifted[i] = x[i] - eps
        lower = float(f(shifted))
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NonFiniteValue(f"non-finite value around coordinate {i}")
        grad[i] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| scaled by the larger max-norm of the two (0 when both vanish)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale_ = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale_ == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale_)
