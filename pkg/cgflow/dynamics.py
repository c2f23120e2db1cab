"""
Graph message-passing vector field

F(X, t)_i = unary(x_i, t) + g({ f_type(x_i, x_j, t) : (j, type) in S(i) })

Every sub-function is a small fully connected tanh network whose parameters
are shared across all node pairs of the same edge type. Evaluations are
recorded once per neighbourhood object on an OpTape and replayed.
"""

from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import OpTape, ParamStore, Tensor
from .errors import ConfigError, GraphError, ShapeError
from .graphdata import Neighborhoods
from .logger import get_logger

logger = get_logger("dynamics")

AGGREGATORS = ('sum', 'mean')
FINAL_LAYER_SCALE = 0.01


def layer_sizes(in_dim: int, hidden: int, out_dim: int, n_layers: int) -> List[Tuple[int, int]]:
    """(out, in) weight shapes of an n-layer fully connected network"""
    dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
    return [(dims[i + 1], dims[i]) for i in range(n_layers)]


def init_field_params(params: ParamStore, prefix: str, dim: int, hidden: int,
                      n_edge_types: int, n_layers: int,
                      rng: Optional[np.random.Generator] = None):
    """
    Register unary and per-edge-type network parameters.

    Weights are drawn from N(0, 1/fan_in) with the final layer scaled by 0.01
    so the initial flow is close to the identity; biases start at zero. With
    rng=None every parameter is zero.
    """
    nets = [('unary', dim + 1)] + [(f'edge{k}', 2 * dim + 1) for k in range(n_edge_types)]
    for net, in_dim in nets:
        shapes = layer_sizes(in_dim, hidden, dim, n_layers)
        for layer, (fan_out, fan_in) in enumerate(shapes):
            if rng is None:
                weight = np.zeros((fan_out, fan_in))
            else:
                weight = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
                if layer == n_layers - 1:
                    weight = weight * FINAL_LAYER_SCALE
            params.add(f"{prefix}{net}.W{layer}", weight)
            params.add(f"{prefix}{net}.b{layer}", np.zeros((1, fan_out)))


class DynamicsField:
    """
    Parameterized vector field over typed graph variables.

    Tapes are cached per Neighborhoods object (identity) and are stateful, so
    a single DynamicsField must not be evaluated from several threads at once.
    """

    def __init__(self, params: ParamStore, dim: int, hidden: int = 32, n_edge_types: int = 1,
                 n_layers: int = 2, aggregator: str = 'sum', prefix: str = '',
                 cache_size: int = 32):
        if aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got '{aggregator}'")
        if dim < 1 or hidden < 1 or n_layers < 1 or n_edge_types < 1:
            raise ConfigError("dim, hidden, n_layers and n_edge_types must all be >= 1")
        self.params = params
        self.dim = dim
        self.hidden = hidden
        self.n_edge_types = n_edge_types
        self.n_layers = n_layers
        self.aggregator = aggregator
        self.prefix = prefix
        self.cache_size = cache_size
        self._tapes: "OrderedDict[Tuple[Neighborhoods, int], OpTape]" = OrderedDict()

        for name, shape in self.parameter_shapes().items():
            if name not in params:
                raise ConfigError(f"parameter store is missing '{name}'")
            if params.get(name).shape != shape:
                raise ShapeError(-1, 'param', [params.get(name).shape, shape], name)

    @classmethod
    def create(cls, dim: int, hidden: int = 32, n_edge_types: int = 1, n_layers: int = 2,
               aggregator: str = 'sum', rng: Optional[np.random.Generator] = None,
               params: Optional[ParamStore] = None, prefix: str = '') -> 'DynamicsField':
        """Register fresh parameters (zeros when rng is None) and build the field"""
        params = params if params is not None else ParamStore()
        init_field_params(params, prefix, dim, hidden, n_edge_types, n_layers, rng)
        return cls(params, dim, hidden, n_edge_types, n_layers, aggregator, prefix)

    def parameter_shapes(self) -> Dict[str, Tuple[int, int]]:
        shapes = {}
        nets = [('unary', self.dim + 1)] + [(f'edge{k}', 2 * self.dim + 1)
                                            for k in range(self.n_edge_types)]
        for net, in_dim in nets:
            for layer, shape in enumerate(layer_sizes(in_dim, self.hidden, self.dim,
                                                      self.n_layers)):
                shapes[f"{self.prefix}{net}.W{layer}"] = shape
                shapes[f"{self.prefix}{net}.b{layer}"] = (1, shape[0])
        return shapes

    @property
    def param_names(self) -> List[str]:
        return list(self.parameter_shapes())

    # -- tape construction -------------------------------------------------
    def _tape(self, nbrs: Neighborhoods, probes: int) -> OpTape:
        key = (nbrs, probes)
        tape = self._tapes.get(key)
        if tape is not None:
            self._tapes.move_to_end(key)
            return tape
        if nbrs.num_pairs and nbrs.types.max() >= self.n_edge_types:
            raise GraphError(f"neighbourhoods use edge type {nbrs.types.max()} but the field "
                             f"has {self.n_edge_types} edge function(s)")
        tape = self._record(nbrs, probes)
        self._tapes[key] = tape
        # Bounded cache: drop the least recently used tapes
        while len(self._tapes) > self.cache_size:
            self._tapes.popitem(last=False)
        logger.debug(f"recorded field tape: n={nbrs.n}, pairs={nbrs.num_pairs}, "
                     f"probes={probes}, ops={len(tape.records)}")
        return tape

    def tape_for(self, nbrs: Neighborhoods, probes: int = 0) -> OpTape:
        """The cached tape: inputs (X, t, eps_1..eps_probes), outputs F and q if probes > 0"""
        return self._tape(nbrs, probes)

    def _mlp(self, tape: OpTape, net: str, h: int, tangents: List[int]) -> Tuple[int, List[int]]:
        """Fully connected tanh network; tangents are pushed forward alongside"""
        for layer in range(self.n_layers):
            w_name = f"{self.prefix}{net}.W{layer}"
            shape = self.params.get(w_name).shape
            w = tape.param(w_name, shape)
            b = tape.param(f"{self.prefix}{net}.b{layer}", (1, shape[0]))
            a = tape.affine(h, w, b)
            tangents = [tape.affine(d, w) for d in tangents]
            if layer < self.n_layers - 1:
                h = tape.tanh(a)
                # d tanh(a) = da - tanh(a)^2 * da
                sq = tape.mul(h, h)
                tangents = [tape.add(d, tape.scale(tape.mul(sq, d), -1.0)) for d in tangents]
            else:
                h = a
        return h, tangents

    def _record(self, nbrs: Neighborhoods, probes: int) -> OpTape:
        tape = OpTape()
        n, m = nbrs.n, self.dim
        x = tape.input((n, m))
        t = tape.input((1, 1))
        eps = [tape.input((n, m)) for _ in range(probes)]

        zero_col = tape.const(np.zeros((n, 1))) if probes else None
        unary_in = tape.concat([x, tape.broadcast(t, n)])
        unary_tan = [tape.concat([e, zero_col]) for e in eps]
        out, out_tan = self._mlp(tape, 'unary', unary_in, unary_tan)

        if nbrs.num_pairs:
            messages, message_tan, receivers = [], [[] for _ in eps], []
            for k in range(self.n_edge_types):
                mask = nbrs.types == k
                if not mask.any():
                    continue
                recv, send = nbrs.receivers[mask], nbrs.senders[mask]
                pairs = int(recv.size)
                edge_in = tape.concat([tape.gather(x, recv), tape.gather(x, send),
                                       tape.broadcast(t, pairs)])
                zeros = tape.const(np.zeros((pairs, 1))) if probes else None
                edge_tan = [tape.concat([tape.gather(e, recv), tape.gather(e, send), zeros])
                            for e in eps]
                msg, msg_tan = self._mlp(tape, f'edge{k}', edge_in, edge_tan)
                messages.append(msg)
                for slot, d in enumerate(msg_tan):
                    message_tan[slot].append(d)
                receivers.append(recv)

            segments = np.concatenate(receivers)
            stacked = messages[0] if len(messages) == 1 else tape.concat(messages, axis=0)
            out = tape.add(out, tape.segment_reduce(stacked, segments, n, self.aggregator))
            for slot, parts in enumerate(message_tan):
                stacked_tan = parts[0] if len(parts) == 1 else tape.concat(parts, axis=0)
                agg_tan = tape.segment_reduce(stacked_tan, segments, n, self.aggregator)
                out_tan[slot] = tape.add(out_tan[slot], agg_tan)

        tape.mark_output(out)
        if probes:
            ones = tape.const(np.ones((1, m)))
            estimates = []
            for e, d in zip(eps, out_tan):
                rows = tape.affine(tape.mul(e, d), ones)
                estimates.append(tape.segment_reduce(rows, nbrs.components,
                                                     nbrs.n_components, 'sum'))
            q = estimates[0]
            for extra in estimates[1:]:
                q = tape.add(q, extra)
            if probes > 1:
                q = tape.scale(q, 1.0 / probes)
            tape.mark_output(q)
        return tape

    @staticmethod
    def _time(t: float) -> Tensor:
        return np.array([[float(t)]])

    # -- evaluation ----------------------------------------------------------
    def evaluate(self, X: Tensor, nbrs: Neighborhoods, t: float) -> Tensor:
        return self._tape(nbrs, 0).forward([X, self._time(t)], self.params)

    def vjp(self, X: Tensor, nbrs: Neighborhoods, t: float, cotangent: Tensor
            ) -> Tuple[Tensor, Tensor, Dict[str, Tensor]]:
        """Returns (F, cotangent^T dF/dX, cotangent^T dF/dtheta)"""
        tape = self._tape(nbrs, 0)
        value = tape.forward([X, self._time(t)], self.params)
        (x_bar, _), param_bar = tape.vjp(cotangent)
        return value, x_bar, param_bar

    def trace_tangent(self, X: Tensor, nbrs: Neighborhoods, t: float,
                      noise: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
        """
        Returns (F, q) where q[c] = mean over probes of eps^T (dF/dX) eps summed
        over the variables of component c (shape n_components x 1).
        """
        tape = self._tape(nbrs, len(noise))
        tape.forward([X, self._time(t)] + list(noise), self.params)
        value, q = tape.output_values()
        return value, q

    def trace_tangent_vjp(self, X: Tensor, nbrs: Neighborhoods, t: float,
                          noise: Sequence[Tensor], value_bar: Optional[Tensor],
                          q_bar: Optional[Tensor]) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Cotangents of <value_bar, F> + <q_bar, q> w.r.t. X and the parameters"""
        tape = self._tape(nbrs, len(noise))
        tape.forward([X, self._time(t)] + list(noise), self.params)
        input_bar, param_bar = tape.vjp([value_bar, q_bar])
        return input_bar[0], param_bar

    def jacobian(self, X: Tensor, nbrs: Neighborhoods, t: float) -> np.ndarray:
        """Dense (n*m x n*m) Jacobian from one forward and n*m basis vjps"""
        tape = self._tape(nbrs, 0)
        value = tape.forward([X, self._time(t)], self.params)
        size = value.size
        jac = np.zeros((size, size))
        basis = np.zeros_like(value)
        for row in range(size):
            basis.flat[row] = 1.0
            (x_bar, _), _ = tape.vjp(basis)
            jac[row] = x_bar.ravel()
            basis.flat[row] = 0.0
        return jac

    def exact_trace(self, X: Tensor, nbrs: Neighborhoods, t: float) -> Tuple[Tensor, Tensor]:
        """(F, tr(dF/dX) per component) without estimator noise"""
        tape = self._tape(nbrs, 0)
        value = tape.forward([X, self._time(t)], self.params)
        diag = np.zeros_like(value)
        basis = np.zeros_like(value)
        for idx in range(value.size):
            basis.flat[idx] = 1.0
            (x_bar, _), _ = tape.vjp(basis)
            diag.flat[idx] = x_bar.flat[idx]
            basis.flat[idx] = 0.0
        trace = np.zeros((nbrs.n_components, 1))
        np.add.at(trace[:, 0], nbrs.components, diag.sum(axis=1))
        return value, trace


def eval_field(field: DynamicsField, X: Tensor, nbrs: Neighborhoods, t: float) -> Tensor:
    """Vector field value at (X, t)"""
    return field.evaluate(X, nbrs, t)


def field_vjp(field: DynamicsField, X: Tensor, nbrs: Neighborhoods, t: float,
              cotangent: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
    """(cotangent^T dF/dX, cotangent^T dF/dtheta)"""
    _, x_bar, param_bar = field.vjp(X, nbrs, t, cotangent)
    return x_bar, param_bar
