"""
Continuous Graph Flow model

Stacked CGF blocks with an optional multi-scale factor-out schedule and a
standard-normal base distribution. Data lives at t1 and the base at t0:
log_prob runs the blocks data -> base (each block integrates its reversed
field over [t0, t1]); sampling runs them base -> data.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import ModelSpec, SolverSpec
from .diffcore import ParamStore, Tensor
from .dynamics import DynamicsField, init_field_params
from .errors import ConfigError, FlowError, SolverError
from .graphdata import DequantConfig, Neighborhoods
from .logger import get_logger
from .odeint import (
    EXACT,
    NoiseVector,
    ReversedField,
    SolverConfig,
    accumulate_grads,
    adjoint_grad,
    backprop_tracked,
    integrate,
    integrate_tracked,
    integrate_with_logdet,
)

logger = get_logger("flow")

_LOG_2PI = math.log(2.0 * math.pi)
DEQUANT_MEAN = 'dequant.mean'
DEQUANT_LOG_STD = 'dequant.log_std'


def gaussian_log_density(X: Tensor, nbrs: Neighborhoods) -> np.ndarray:
    """Standard-normal log-density of each component's rows, shape (n_components,)"""
    rows = -0.5 * np.sum(X * X + _LOG_2PI, axis=1)
    out = np.zeros(nbrs.n_components)
    np.add.at(out, nbrs.components, rows)
    return out


@dataclass
class CGFBlock:
    """One continuous flow block: a dynamics field and its evaluation solver"""
    field: DynamicsField
    solver: SolverConfig

    @property
    def dim(self) -> int:
        return self.field.dim

    def reversed_field(self) -> ReversedField:
        return ReversedField(self.field, self.solver.t0, self.solver.t1)


@dataclass(frozen=True)
class MultiScaleSchedule:
    """Per-boundary factor-out fractions; boundary b sits between blocks b and b+1"""
    fractions: Tuple[float, ...]
    m: int

    def __post_init__(self):
        if any(f not in (0.0, 0.5) for f in self.fractions):
            raise ConfigError("factor-out fractions must be 0 or 0.5")

    @property
    def blocks(self) -> int:
        return len(self.fractions) + 1

    def factored(self) -> List[int]:
        """Coordinates dropped to the base at each boundary"""
        sizes, dim = [], self.m
        for fraction in self.fractions:
            k = int(dim * fraction)
            sizes.append(k)
            dim -= k
        return sizes

    def block_dims(self) -> List[int]:
        dims, dim = [self.m], self.m
        for k in self.factored():
            dim -= k
            dims.append(dim)
        return dims


@dataclass
class LogProbTerms:
    """Per-component pieces of a log-likelihood evaluation (all in nats)"""
    log_prob: np.ndarray
    block_deltas: List[np.ndarray]
    factored_terms: List[np.ndarray]
    base_term: np.ndarray
    z: Tensor

    @property
    def total(self) -> float:
        return float(np.sum(self.log_prob))


@dataclass
class LossGrad:
    log_prob: np.ndarray
    grads: Dict[str, Tensor]
    state_cotangent: Tensor


class FlowModel:
    """Stacked CGF blocks sharing one ParamStore"""

    def __init__(self, spec: ModelSpec, params: ParamStore, solver_spec: Optional[SolverSpec] = None):
        self.spec = spec
        self.params = params
        self.solver_spec = solver_spec or SolverSpec()
        self.schedule = MultiScaleSchedule(tuple(spec.boundary_fractions()), spec.m)
        eval_solver = self.solver_spec.eval_config()
        self.blocks: List[CGFBlock] = []
        for b, dim in enumerate(self.schedule.block_dims()):
            dynamics = DynamicsField(params, dim, spec.hidden, spec.n_edge_types, spec.layers,
                                     spec.aggregator, prefix=f"block{b}.")
            self.blocks.append(CGFBlock(dynamics, eval_solver))
        if spec.dequant == 'variational':
            for name in (DEQUANT_MEAN, DEQUANT_LOG_STD):
                if name not in params:
                    raise ConfigError(f"parameter store is missing '{name}'")

    @classmethod
    def from_spec(cls, spec: ModelSpec, rng: Optional[np.random.Generator] = None,
                  solver_spec: Optional[SolverSpec] = None) -> 'FlowModel':
        """Fresh model; rng=None gives all-zero parameters (the identity flow)"""
        params = ParamStore()
        schedule = MultiScaleSchedule(tuple(spec.boundary_fractions()), spec.m)
        for b, dim in enumerate(schedule.block_dims()):
            init_field_params(params, f"block{b}.", dim, spec.hidden, spec.n_edge_types,
                              spec.layers, rng)
        if spec.dequant == 'variational':
            params.add(DEQUANT_MEAN, 0.0)
            params.add(DEQUANT_LOG_STD, 0.0)
        model = cls(spec, params, solver_spec)
        logger.info(f"flow model: {len(model.blocks)} block(s), dims {schedule.block_dims()}, "
                    f"{params.count} parameters")
        return model

    @property
    def m(self) -> int:
        return self.spec.m

    def dequant_config(self) -> Optional[DequantConfig]:
        if self.spec.dequant == 'none':
            return None
        if self.spec.dequant == 'uniform':
            return DequantConfig('uniform')
        return DequantConfig('variational', float(self.params[DEQUANT_MEAN][0, 0]),
                             float(self.params[DEQUANT_LOG_STD][0, 0]))

    def _check(self, X: Tensor, nbrs: Neighborhoods):
        X = np.asarray(X, dtype=np.float64)
        if X.shape != (nbrs.n, self.m):
            raise FlowError(0, f"expected states of shape {(nbrs.n, self.m)}, got {X.shape}")
        return X

    @staticmethod
    def _ensure_finite(block: int, *arrays):
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise FlowError(block, "non-finite intermediate state")

    # -- density ------------------------------------------------------------
    def log_prob_terms(self, X: Tensor, nbrs: Neighborhoods, trace: str = 'auto',
                       rng: Optional[np.random.Generator] = None, probes: int = 16,
                       exact_limit: int = 64,
                       solver: Optional[SolverConfig] = None) -> LogProbTerms:
        """
        Data -> base pass accumulating per-block log-density changes.

        trace: 'exact', 'stochastic' (needs rng; `probes` Rademacher vectors per
        block) or 'auto' (exact when n*m <= exact_limit).
        """
        Y = self._check(X, nbrs)
        if trace == 'auto':
            trace = 'exact' if Y.size <= exact_limit else 'stochastic'
        if trace not in ('exact', 'stochastic'):
            raise ConfigError(f"unknown trace mode '{trace}'")
        if trace == 'stochastic' and rng is None:
            raise ConfigError("stochastic trace estimation needs an rng")

        deltas, factored, pieces = [], [], []
        sizes = self.schedule.factored()
        for b, block in enumerate(self.blocks):
            noise = (EXACT if trace == 'exact' else
                     NoiseVector.sample(Y.shape, rng, self.solver_spec.noise, probes))
            try:
                aug = integrate_with_logdet(block.reversed_field(), Y, nbrs,
                                            solver or block.solver, noise)
            except SolverError as e:
                raise FlowError(b, str(e)) from None
            self._ensure_finite(b, aug.X, aug.delta)
            deltas.append(aug.delta)
            Y = aug.X
            if b < len(sizes) and sizes[b]:
                out, Y = Y[:, :sizes[b]], Y[:, sizes[b]:]
                factored.append(gaussian_log_density(out, nbrs))
                pieces.append(out)
        base = gaussian_log_density(Y, nbrs)
        log_prob = base + sum(factored, np.zeros_like(base)) - sum(deltas, np.zeros_like(base))
        z = np.hstack(pieces + [Y]) if pieces else Y
        return LogProbTerms(log_prob, deltas, factored, base, z)

    def log_prob(self, X: Tensor, nbrs: Neighborhoods, trace: str = 'auto',
                 rng: Optional[np.random.Generator] = None, probes: int = 16) -> float:
        """Log-likelihood in nats summed over the components of nbrs"""
        return self.log_prob_terms(X, nbrs, trace, rng, probes).total

    # -- transport ----------------------------------------------------------
    def reverse(self, X: Tensor, nbrs: Neighborhoods,
                solver: Optional[SolverConfig] = None) -> Tensor:
        """Data -> base; factored coordinates lead the returned base point"""
        Y = self._check(X, nbrs)
        pieces = []
        sizes = self.schedule.factored()
        for b, block in enumerate(self.blocks):
            Y = integrate(block.reversed_field(), Y, nbrs, solver or block.solver)
            self._ensure_finite(b, Y)
            if b < len(sizes) and sizes[b]:
                pieces.append(Y[:, :sizes[b]])
                Y = Y[:, sizes[b]:]
        return np.hstack(pieces + [Y]) if pieces else Y

    def forward(self, z: Tensor, nbrs: Neighborhoods,
                solver: Optional[SolverConfig] = None) -> Tensor:
        """Base -> data, injecting factored coordinates at their boundaries"""
        z = self._check(z, nbrs)
        sizes = self.schedule.factored()
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        Y = z[:, offsets[-1]:]
        for b in range(len(self.blocks) - 1, -1, -1):
            block = self.blocks[b]
            Y = integrate(block.field, Y, nbrs, solver or block.solver)
            self._ensure_finite(b, Y)
            if b > 0 and sizes[b - 1]:
                Y = np.hstack([z[:, offsets[b - 1]:offsets[b]], Y])
        return Y

    def sample(self, n_vars: int, nbrs: Neighborhoods, rng: np.random.Generator,
               solver: Optional[SolverConfig] = None) -> Tensor:
        """Draw z ~ N(0, I) and transport it to data space"""
        if nbrs.n != n_vars:
            raise ConfigError(f"neighbourhoods describe {nbrs.n} variables, not {n_vars}")
        z = rng.standard_normal((n_vars, self.m))
        return self.forward(z, nbrs, solver)

    def conditional_sample(self, observed: Mapping[int, Sequence[float]], n_vars: int,
                           nbrs: Neighborhoods, rng: np.random.Generator,
                           solver: Optional[SolverConfig] = None) -> Tensor:
        """
        Map the observed variables to the base through their induced subgraph,
        draw fresh base values for the rest and transport the joint point.
        Observed variables are not clamped and may drift.
        """
        if nbrs.n != n_vars:
            raise ConfigError(f"neighbourhoods describe {nbrs.n} variables, not {n_vars}")
        index = sorted(int(i) for i in observed)
        if len(set(index)) != len(observed) or any(not 0 <= i < n_vars for i in index):
            raise ConfigError("observed indices must be distinct and < n_vars")
        z = rng.standard_normal((n_vars, self.m))
        if index:
            values = np.array([np.reshape(observed[i], -1) for i in index], dtype=np.float64)
            if values.shape != (len(index), self.m):
                raise ConfigError(f"observed values must have {self.m} entr(ies) each")
            z[index] = self.reverse(values, nbrs.induced(index), solver)
        return self.forward(z, nbrs, solver)

    # -- training -----------------------------------------------------------
    def loss_and_grad(self, X: Tensor, nbrs: Neighborhoods, weights: np.ndarray,
                      rng: np.random.Generator, solver: Optional[SolverConfig] = None,
                      gradient: str = 'discretize') -> LossGrad:
        """
        Gradient of sum_c weights[c] * log p(X_c) w.r.t. every block parameter
        and the states, using one Rademacher/Gaussian probe per block solve.

        gradient='discretize' back-propagates through fixed-step RK4;
        gradient='adjoint' uses the continuous adjoint with the trace term.
        """
        Y = self._check(X, nbrs)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.size != nbrs.n_components:
            raise ConfigError("one weight per component is required")
        solver = solver or self.solver_spec.train_config()
        sizes = self.schedule.factored()
        row_weights = weights[nbrs.components][:, None]

        records, factored, deltas, outs = [], [], [], []
        for b, block in enumerate(self.blocks):
            noise = NoiseVector.sample(Y.shape, rng, self.solver_spec.noise, 1)
            field = block.reversed_field()
            if gradient == 'discretize':
                tracked = integrate_tracked(field, Y, nbrs, solver, noise)
                records.append((field, Y, noise, tracked))
                Y_next, delta = tracked.X, tracked.delta
            else:
                aug = integrate_with_logdet(field, Y, nbrs, solver, noise)
                records.append((field, Y, noise, None))
                Y_next, delta = aug.X, aug.delta
            self._ensure_finite(b, Y_next, delta)
            deltas.append(delta)
            Y = Y_next
            if b < len(sizes) and sizes[b]:
                out, Y = Y[:, :sizes[b]], Y[:, sizes[b]:]
                factored.append(gaussian_log_density(out, nbrs))
                outs.append(out)
            else:
                outs.append(None)
        base = gaussian_log_density(Y, nbrs)
        log_prob = base + sum(factored, np.zeros_like(base)) - sum(deltas, np.zeros_like(base))

        grads: Dict[str, Tensor] = {}
        Y_bar = -row_weights * Y
        for b in range(len(self.blocks) - 1, -1, -1):
            if outs[b] is not None:
                Y_bar = np.hstack([-row_weights * outs[b], Y_bar])
            field, Y_in, noise, tracked = records[b]
            if gradient == 'discretize':
                Y_bar, block_grads = backprop_tracked(field, tracked, nbrs, Y_bar, -weights)
            else:
                result = adjoint_grad(field, Y_in, nbrs, solver, Y_bar, -weights, noise)
                Y_bar, block_grads = result.state_cotangent, result.param_grads
            accumulate_grads(grads, block_grads)
        return LossGrad(log_prob, grads, Y_bar)
