"""
Dense 2-D tensor arithmetic and a reverse-mode differentiation tape

Tensors are plain 2-D float64 numpy arrays. An OpTape records a small closed
set of differentiable primitives symbolically (shapes are inferred at record
time), is replayed by forward() with concrete inputs and parameters, and
back-propagates vector-Jacobian products with vjp().
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tabulate import tabulate

from .errors import ParameterError, ShapeError, TapeStateError, UnsupportedOpError
from .logger import get_logger

logger = get_logger("diffcore")

Tensor = np.ndarray
Shape = Tuple[int, int]


def as_tensor(data, name: str = 'tensor', check_finite: bool = False) -> Tensor:
    """Coerce data to a 2-D float64 array (scalars become 1x1, vectors 1xN)"""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(-1, name, [arr.shape], "tensors are 2-D")
    if check_finite and not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains NaN or Inf")
    return arr


class ParamStore:
    """Named parameter tensors with a stable, insertion-defined order"""

    def __init__(self, items: Optional[Dict[str, Any]] = None):
        self._params: Dict[str, Tensor] = {}
        for name, value in (items or {}).items():
            self.add(name, value)

    @staticmethod
    def _freeze(name: str, value) -> Tensor:
        arr = as_tensor(value, name=name, check_finite=True)
        arr.flags.writeable = False
        return arr

    def add(self, name: str, value) -> Tensor:
        """Register a new parameter; names must be unique"""
        if name in self._params:
            raise ParameterError(f"duplicate parameter name '{name}'")
        self._params[name] = self._freeze(name, value)
        return self._params[name]

    def set(self, name: str, value):
        """Replace the value of an existing parameter (same shape)"""
        if name not in self._params:
            raise ParameterError(f"unknown parameter '{name}'")
        new = self._freeze(name, value)
        if new.shape != self._params[name].shape:
            raise ParameterError(
                f"parameter '{name}' has shape {self._params[name].shape}, got {new.shape}")
        self._params[name] = new

    def get(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ParameterError(f"unknown parameter '{name}'") from None

    __getitem__ = get

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def shapes(self) -> Dict[str, Shape]:
        return {name: value.shape for name, value in self._params.items()}

    @property
    def count(self) -> int:
        """Total number of scalar parameters"""
        return int(sum(value.size for value in self._params.values()))

    def flatten(self, values: Optional[Dict[str, Tensor]] = None) -> np.ndarray:
        """Concatenate parameters (or a same-keyed dict, e.g. gradients) in store order"""
        source = self._params if values is None else values
        if not self._params:
            return np.zeros(0)
        return np.concatenate([np.asarray(source[name], dtype=np.float64).ravel()
                               for name in self._params])

    def unflatten(self, vector: np.ndarray) -> Dict[str, Tensor]:
        """Split a flat vector back into named tensors shaped like the store"""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.count:
            raise ParameterError(f"expected {self.count} values, got {vector.size}")
        out, offset = {}, 0
        for name, value in self._params.items():
            out[name] = vector[offset:offset + value.size].reshape(value.shape).copy()
            offset += value.size
        return out

    def assign_flat(self, vector: np.ndarray):
        for name, value in self.unflatten(vector).items():
            self.set(name, value)

    def zeros_like(self) -> Dict[str, Tensor]:
        return {name: np.zeros_like(value) for name, value in self._params.items()}

    def copy(self) -> 'ParamStore':
        return ParamStore({name: value.copy() for name, value in self._params.items()})


# ---------------------------------------------------------------------------
# Primitive rules: shape inference, evaluation and vector-Jacobian products
# ---------------------------------------------------------------------------

def _shape_affine(shapes, attrs):
    x, w = shapes[0], shapes[1]
    if x[1] != w[1]:
        return None
    if len(shapes) == 3 and shapes[2] != (1, w[0]):
        return None
    return (x[0], w[0])


def _eval_affine(vals, attrs):
    out = vals[0] @ vals[1].T
    if len(vals) == 3:
        out = out + vals[2]
    return out


def _vjp_affine(g, vals, out, attrs, wanted):
    gx = g @ vals[1] if wanted[0] else None
    gw = g.T @ vals[0] if wanted[1] else None
    if len(vals) == 3:
        gb = g.sum(axis=0, keepdims=True) if wanted[2] else None
        return gx, gw, gb
    return gx, gw


def _shape_same(shapes, attrs):
    return shapes[0] if all(s == shapes[0] for s in shapes) else None


def _vjp_tanh(g, vals, out, attrs, wanted):
    return (g * (1.0 - out * out),)


def _vjp_add(g, vals, out, attrs, wanted):
    return g, g


def _vjp_mul(g, vals, out, attrs, wanted):
    return (g * vals[1] if wanted[0] else None,
            g * vals[0] if wanted[1] else None)


def _vjp_scale(g, vals, out, attrs, wanted):
    return (g * attrs['factor'],)


def _shape_concat(shapes, attrs):
    axis = attrs['axis']
    other = 1 - axis
    if any(s[other] != shapes[0][other] for s in shapes):
        return None
    total = sum(s[axis] for s in shapes)
    return (total, shapes[0][1]) if axis == 0 else (shapes[0][0], total)


def _eval_concat(vals, attrs):
    return np.concatenate(vals, axis=attrs['axis'])


def _vjp_concat(g, vals, out, attrs, wanted):
    axis = attrs['axis']
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    pieces = np.split(g, bounds, axis=axis)
    return tuple(p if w else None for p, w in zip(pieces, wanted))


def _shape_gather(shapes, attrs):
    index = attrs['index']
    if index.size and (index.min() < 0 or index.max() >= shapes[0][0]):
        return None
    return (index.size, shapes[0][1])


def _vjp_gather(g, vals, out, attrs, wanted):
    grad = np.zeros_like(vals[0])
    np.add.at(grad, attrs['index'], g)
    return (grad,)


def _shape_segment(shapes, attrs):
    segments = attrs['segments']
    if segments.size != shapes[0][0]:
        return None
    if segments.size and (segments.min() < 0 or segments.max() >= attrs['count']):
        return None
    return (attrs['count'], shapes[0][1])


def _segment_sizes(attrs) -> np.ndarray:
    sizes = np.bincount(attrs['segments'], minlength=attrs['count']).astype(np.float64)
    return np.maximum(sizes, 1.0)[:, None]


def _eval_segment(vals, attrs):
    out = np.zeros((attrs['count'], vals[0].shape[1]))
    np.add.at(out, attrs['segments'], vals[0])
    if attrs['mode'] == 'mean':
        out = out / _segment_sizes(attrs)
    return out


def _vjp_segment(g, vals, out, attrs, wanted):
    if attrs['mode'] == 'mean':
        g = g / _segment_sizes(attrs)
    return (g[attrs['segments']],)


def _shape_broadcast(shapes, attrs):
    return (attrs['rows'], shapes[0][1]) if shapes[0][0] == 1 else None


def _vjp_broadcast(g, vals, out, attrs, wanted):
    return (g.sum(axis=0, keepdims=True),)


def _vjp_total(g, vals, out, attrs, wanted):
    return (np.full(vals[0].shape, g[0, 0]),)


@dataclass(frozen=True)
class OpRule:
    """Shape inference, evaluation and VJP for one primitive"""
    arity: Optional[int]
    shape: Callable
    evaluate: Callable
    vjp: Callable


OP_RULES: Dict[str, OpRule] = {
    'affine': OpRule(None, _shape_affine, _eval_affine, _vjp_affine),
    'tanh': OpRule(1, _shape_same, lambda v, a: np.tanh(v[0]), _vjp_tanh),
    'add': OpRule(2, _shape_same, lambda v, a: v[0] + v[1], _vjp_add),
    'mul': OpRule(2, _shape_same, lambda v, a: v[0] * v[1], _vjp_mul),
    'scale': OpRule(1, _shape_same, lambda v, a: v[0] * a['factor'], _vjp_scale),
    'concat': OpRule(None, _shape_concat, _eval_concat, _vjp_concat),
    'gather': OpRule(1, _shape_gather, lambda v, a: v[0][a['index']], _vjp_gather),
    'segment_reduce': OpRule(1, _shape_segment, _eval_segment, _vjp_segment),
    'broadcast': OpRule(1, _shape_broadcast,
                        lambda v, a: np.repeat(v[0], a['rows'], axis=0), _vjp_broadcast),
    'total': OpRule(1, lambda s, a: (1, 1), lambda v, a: v[0].sum().reshape(1, 1), _vjp_total),
}

_LEAF_KINDS = ('input', 'param', 'const')


@dataclass
class _Record:
    kind: str
    args: Tuple[int, ...]
    attrs: Dict[str, Any]
    shape: Shape
    needs_grad: bool


class OpTape:
    """
    Ordered record of primitive operations.

    Nodes are integer handles returned by the recording methods. The tape is
    symbolic: nothing is computed until forward() replays it.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.input_nodes: List[int] = []
        self.outputs: List[int] = []
        self._param_nodes: Dict[str, int] = {}
        self._values: Optional[List[Tensor]] = None

    # -- leaves -----------------------------------------------------------
    def input(self, shape: Shape) -> int:
        node = self._append('input', (), {'slot': len(self.input_nodes)}, tuple(shape), True)
        self.input_nodes.append(node)
        return node

    def param(self, name: str, shape: Shape) -> int:
        """Reference a named parameter; repeated references share one node"""
        if name in self._param_nodes:
            node = self._param_nodes[name]
            if self.records[node].shape != tuple(shape):
                raise ShapeError(node, 'param', [self.records[node].shape, shape],
                                 f"parameter '{name}' referenced with two shapes")
            return node
        node = self._append('param', (), {'name': name}, tuple(shape), True)
        self._param_nodes[name] = node
        return node

    def const(self, value) -> int:
        value = as_tensor(value, name='const')
        return self._append('const', (), {'value': value}, value.shape, False)

    # -- primitives -------------------------------------------------------
    def affine(self, x: int, w: int, b: Optional[int] = None) -> int:
        args = (x, w) if b is None else (x, w, b)
        return self.record('affine', args)

    def tanh(self, x: int) -> int:
        return self.record('tanh', (x,))

    def add(self, a: int, b: int) -> int:
        return self.record('add', (a, b))

    def mul(self, a: int, b: int) -> int:
        return self.record('mul', (a, b))

    def scale(self, x: int, factor: float) -> int:
        return self.record('scale', (x,), factor=float(factor))

    def concat(self, nodes: Sequence[int], axis: int = 1) -> int:
        return self.record('concat', tuple(nodes), axis=int(axis))

    def gather(self, x: int, index) -> int:
        return self.record('gather', (x,), index=np.asarray(index, dtype=np.int64))

    def segment_reduce(self, x: int, segments, count: int, mode: str = 'sum') -> int:
        if mode not in ('sum', 'mean'):
            raise UnsupportedOpError(f"segment_reduce mode '{mode}'")
        return self.record('segment_reduce', (x,),
                           segments=np.asarray(segments, dtype=np.int64),
                           count=int(count), mode=mode)

    def broadcast(self, x: int, rows: int) -> int:
        return self.record('broadcast', (x,), rows=int(rows))

    def total(self, x: int) -> int:
        return self.record('total', (x,))

    def record(self, kind: str, args: Tuple[int, ...], **attrs) -> int:
        """Append a primitive after checking it belongs to the closed op set"""
        rule = OP_RULES.get(kind)
        if rule is None:
            raise UnsupportedOpError(
                f"'{kind}' is not a differentiable primitive (known: {', '.join(OP_RULES)})")
        if rule.arity is not None and len(args) != rule.arity:
            raise UnsupportedOpError(f"'{kind}' takes {rule.arity} argument(s), got {len(args)}")
        if not args or any(a < 0 or a >= len(self.records) for a in args):
            raise TapeStateError(f"'{kind}' references an unknown node")
        shapes = [self.records[a].shape for a in args]
        index = len(self.records)
        shape = rule.shape(shapes, attrs)
        if shape is None:
            raise ShapeError(index, kind, shapes)
        needs_grad = any(self.records[a].needs_grad for a in args)
        return self._append(kind, tuple(args), attrs, tuple(shape), needs_grad)

    def _append(self, kind, args, attrs, shape, needs_grad) -> int:
        self.records.append(_Record(kind, args, attrs, shape, needs_grad))
        self._values = None
        return len(self.records) - 1

    def mark_output(self, *nodes: int):
        self.outputs.extend(nodes)

    def shape(self, node: int) -> Shape:
        return self.records[node].shape

    @property
    def param_names(self) -> List[str]:
        return list(self._param_nodes)

    @property
    def param_shapes(self) -> Dict[str, Shape]:
        return {name: self.records[node].shape for name, node in self._param_nodes.items()}

    @property
    def evaluated(self) -> bool:
        return self._values is not None

    # -- replay -----------------------------------------------------------
    def forward(self, inputs: Sequence[Tensor], params: Optional[ParamStore] = None) -> Tensor:
        """Replay the tape; returns the first output (see output_values())"""
        if not self.outputs:
            raise TapeStateError("tape has no marked outputs")
        if len(inputs) != len(self.input_nodes):
            raise ShapeError(self.input_nodes[0] if self.input_nodes else 0, 'input',
                             [np.shape(x) for x in inputs],
                             f"expected {len(self.input_nodes)} input(s)")
        values: List[Optional[Tensor]] = [None] * len(self.records)
        for index, rec in enumerate(self.records):
            if rec.kind == 'input':
                value = np.asarray(inputs[rec.attrs['slot']], dtype=np.float64)
                if value.shape != rec.shape:
                    raise ShapeError(index, 'input', [rec.shape, value.shape],
                                     "input does not match the recorded shape")
            elif rec.kind == 'param':
                if params is None:
                    raise ParameterError(f"tape needs parameter '{rec.attrs['name']}'")
                value = params.get(rec.attrs['name'])
                if value.shape != rec.shape:
                    raise ShapeError(index, 'param', [rec.shape, value.shape],
                                     f"parameter '{rec.attrs['name']}'")
            elif rec.kind == 'const':
                value = rec.attrs['value']
            else:
                value = OP_RULES[rec.kind].evaluate([values[a] for a in rec.args], rec.attrs)
            values[index] = value
        self._values = values
        return values[self.outputs[0]]

    def output_values(self) -> List[Tensor]:
        if self._values is None:
            raise TapeStateError("tape has not been evaluated")
        return [self._values[node] for node in self.outputs]

    def vjp(self, cotangent: Union[Tensor, Sequence[Optional[Tensor]]]
            ) -> Tuple[List[Tensor], Dict[str, Tensor]]:
        """
        Back-propagate cotangents of the outputs.

        Args:
            cotangent: one array for a single-output tape, or one entry per
                output (None means zero)

        Returns:
            (input cotangents in input order, parameter cotangents by name)
        """
        if self._values is None:
            raise TapeStateError("vjp called before forward")
        if isinstance(cotangent, np.ndarray):
            cotangents: List[Optional[Tensor]] = [cotangent] + [None] * (len(self.outputs) - 1)
        else:
            cotangents = list(cotangent)
        if len(cotangents) != len(self.outputs):
            raise TapeStateError(f"expected {len(self.outputs)} cotangent(s), got {len(cotangents)}")

        values = self._values
        grads: List[Optional[Tensor]] = [None] * len(self.records)
        for node, cot in zip(self.outputs, cotangents):
            if cot is None:
                continue
            cot = np.asarray(cot, dtype=np.float64)
            if cot.shape != self.records[node].shape:
                raise ShapeError(node, 'cotangent', [self.records[node].shape, cot.shape])
            grads[node] = cot if grads[node] is None else grads[node] + cot

        for index in range(len(self.records) - 1, -1, -1):
            g = grads[index]
            rec = self.records[index]
            if g is None or rec.kind in _LEAF_KINDS:
                continue
            wanted = tuple(self.records[a].needs_grad for a in rec.args)
            arg_grads = OP_RULES[rec.kind].vjp(g, [values[a] for a in rec.args],
                                               values[index], rec.attrs, wanted)
            for arg, arg_grad, want in zip(rec.args, arg_grads, wanted):
                if not want or arg_grad is None:
                    continue
                grads[arg] = arg_grad if grads[arg] is None else grads[arg] + arg_grad

        input_grads = [grads[n] if grads[n] is not None else np.zeros(self.records[n].shape)
                       for n in self.input_nodes]
        param_grads = {name: grads[n] if grads[n] is not None else np.zeros(self.records[n].shape)
                       for name, n in self._param_nodes.items()}
        return input_grads, param_grads


def forward(tape: OpTape, inputs: Sequence[Tensor], params: Optional[ParamStore] = None) -> Tensor:
    """Replay a recorded computation"""
    return tape.forward(inputs, params)


def vjp(tape: OpTape, cotangent) -> Tuple[List[Tensor], Dict[str, Tensor]]:
    """Vector-Jacobian product of the last forward() of a tape"""
    return tape.vjp(cotangent)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    size: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    """Per-tensor comparison of reverse-mode and central-difference gradients"""
    tolerance: float
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_table(self) -> str:
        rows = [(e.name, e.size, f"{e.max_rel_error:.3e}",
                 "ok" if e.max_rel_error < self.tolerance else "FAIL")
                for e in self.entries]
        return tabulate(rows, headers=["tensor", "size", "max rel err", "status"])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(1, |a|, |n|): relative for large entries, absolute near zero"""
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def grad_check(tape: OpTape, tolerance: float = 1e-4, rng: Optional[np.random.Generator] = None,
               params: Optional[ParamStore] = None, inputs: Optional[Sequence[Tensor]] = None,
               step: float = 1e-5) -> GradCheckReport:
    """
    Compare vjp() against central differences at a random point.

    Inputs default to uniform draws in [-2, 2]; parameters default to standard
    normal draws shaped like the tape's parameter references. The scalar being
    differentiated is a random projection of every output.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if inputs is None:
        inputs = [rng.uniform(-2.0, 2.0, size=tape.shape(n)) for n in tape.input_nodes]
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    if params is None:
        params = ParamStore({name: rng.standard_normal(shape)
                             for name, shape in tape.param_shapes.items()})
    params = params.copy()

    projections = [rng.uniform(-1.0, 1.0, size=tape.shape(n)) for n in tape.outputs]

    def objective(xs, store) -> float:
        tape.forward(xs, store)
        return float(sum(np.sum(p * y) for p, y in zip(projections, tape.output_values())))

    tape.forward(inputs, params)
    input_grads, param_grads = tape.vjp(projections)

    report = GradCheckReport(tolerance=tolerance)
    for slot, analytic in enumerate(input_grads):
        numeric = np.zeros_like(inputs[slot])
        for idx in np.ndindex(*numeric.shape):
            original = inputs[slot][idx]
            inputs[slot][idx] = original + step
            upper = objective(inputs, params)
            inputs[slot][idx] = original - step
            lower = objective(inputs, params)
            inputs[slot][idx] = original
            numeric[idx] = (upper - lower) / (2.0 * step)
        report.entries.append(GradCheckEntry(f"input[{slot}]", numeric.size,
                                             float(relative_error(analytic, numeric).max(initial=0.0))))

    for name in tape.param_names:
        base = params.get(name).copy()
        numeric = np.zeros_like(base)
        for idx in np.ndindex(*base.shape):
            bumped = base.copy()
            bumped[idx] += step
            params.set(name, bumped)
            upper = objective(inputs, params)
            bumped[idx] = base[idx] - step
            params.set(name, bumped)
            lower = objective(inputs, params)
            numeric[idx] = (upper - lower) / (2.0 * step)
        params.set(name, base)
        report.entries.append(GradCheckEntry(name, numeric.size,
                                             float(relative_error(param_grads[name], numeric).max(initial=0.0))))

    tape.forward(inputs, params)
    logger.debug(f"grad_check: max relative error {report.max_error:.3e} (tolerance {tolerance:g})")
    return report
