"""
ODE integration for graph states

Fixed-step RK4 and adaptive Dormand-Prince 4(5) over flat state vectors,
the augmented (state, log-density) system with stochastic or exact trace
accumulation, discretize-then-optimize back-propagation through RK4 and the
continuous adjoint method. Integrators accept any object that satisfies the
VectorField protocol and work in either time direction.
"""

import math
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .diffcore import Tensor
from .errors import ConfigError, SolverError
from .graphdata import Neighborhoods
from .logger import get_logger

logger = get_logger("odeint")

_METHOD_ALIASES = {
    'rk4': 'rk4-fixed',
    'rk4-fixed': 'rk4-fixed',
    'dopri5': 'dopri5',
    'dopri5-adaptive': 'dopri5',
}

NOISE_DISTRIBUTIONS = ('rademacher', 'gaussian')
EXACT = 'exact'


@dataclass(frozen=True)
class SolverConfig:
    """Integration method and interval; rk4-fixed uses `steps`, dopri5 uses rtol/atol"""
    method: str = 'dopri5'
    steps: int = 20
    rtol: float = 1e-5
    atol: float = 1e-7
    t0: float = 0.0
    t1: float = 1.0
    max_evals: int = 100_000

    def __post_init__(self):
        method = _METHOD_ALIASES.get(self.method)
        if method is None:
            raise ConfigError(f"unknown solver method '{self.method}' "
                              f"(choose from {', '.join(sorted(_METHOD_ALIASES))})")
        object.__setattr__(self, 'method', method)
        if self.t0 == self.t1:
            raise ConfigError("solver interval is empty (t0 == t1)")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.max_evals < 1:
            raise ConfigError("max_evals must be >= 1")

    @property
    def adaptive(self) -> bool:
        return self.method == 'dopri5'

    def reversed(self) -> 'SolverConfig':
        return replace(self, t0=self.t1, t1=self.t0)


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

class VectorField(Protocol):
    """What the integrators need from a field"""

    @property
    def param_names(self) -> List[str]: ...

    def evaluate(self, X: Tensor, nbrs: Neighborhoods, t: float) -> Tensor: ...

    def vjp(self, X: Tensor, nbrs: Neighborhoods, t: float, cotangent: Tensor
            ) -> Tuple[Tensor, Tensor, Dict[str, Tensor]]: ...

    def trace_tangent(self, X: Tensor, nbrs: Neighborhoods, t: float,
                      noise: Sequence[Tensor]) -> Tuple[Tensor, Tensor]: ...

    def trace_tangent_vjp(self, X: Tensor, nbrs: Neighborhoods, t: float,
                          noise: Sequence[Tensor], value_bar: Optional[Tensor],
                          q_bar: Optional[Tensor]) -> Tuple[Tensor, Dict[str, Tensor]]: ...

    def exact_trace(self, X: Tensor, nbrs: Neighborhoods, t: float
                    ) -> Tuple[Tensor, Tensor]: ...


def _component_sum(values: np.ndarray, nbrs: Neighborhoods) -> np.ndarray:
    """Row values (n,) summed per component -> (n_components, 1)"""
    out = np.zeros((nbrs.n_components, 1))
    np.add.at(out[:, 0], nbrs.components, values)
    return out


class LinearField:
    """Per-node linear dynamics x' = A x + offset (no parameters)"""

    def __init__(self, A, offset=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if self.A.shape[0] != self.A.shape[1]:
            raise ConfigError(f"LinearField needs a square matrix, got {self.A.shape}")
        self.offset = (np.zeros((1, self.A.shape[0])) if offset is None
                       else np.asarray(offset, dtype=np.float64).reshape(1, -1))
        self.params = None

    @property
    def param_names(self) -> List[str]:
        return []

    def evaluate(self, X, nbrs, t):
        return X @ self.A.T + self.offset

    def vjp(self, X, nbrs, t, cotangent):
        return self.evaluate(X, nbrs, t), cotangent @ self.A, {}

    def trace_tangent(self, X, nbrs, t, noise):
        q = sum(_component_sum(np.sum(e * (e @ self.A.T), axis=1), nbrs) for e in noise)
        return self.evaluate(X, nbrs, t), q / len(noise)

    def trace_tangent_vjp(self, X, nbrs, t, noise, value_bar, q_bar):
        if value_bar is None:
            return np.zeros_like(X), {}
        return value_bar @ self.A, {}

    def exact_trace(self, X, nbrs, t):
        rows = np.full(X.shape[0], np.trace(self.A))
        return self.evaluate(X, nbrs, t), _component_sum(rows, nbrs)


class ReversedField:
    """G(Y, s) = -F(Y, t0 + t1 - s): integrating G forward runs F backward in time"""

    def __init__(self, inner: VectorField, t0: float = 0.0, t1: float = 1.0):
        self.inner = inner
        self.t0 = t0
        self.t1 = t1

    @property
    def params(self):
        return getattr(self.inner, 'params', None)

    @property
    def param_names(self) -> List[str]:
        return self.inner.param_names

    def _t(self, s: float) -> float:
        return self.t0 + self.t1 - s

    def evaluate(self, X, nbrs, s):
        return -self.inner.evaluate(X, nbrs, self._t(s))

    def vjp(self, X, nbrs, s, cotangent):
        value, x_bar, param_bar = self.inner.vjp(X, nbrs, self._t(s), cotangent)
        return -value, -x_bar, {k: -v for k, v in param_bar.items()}

    def trace_tangent(self, X, nbrs, s, noise):
        value, q = self.inner.trace_tangent(X, nbrs, self._t(s), noise)
        return -value, -q

    def trace_tangent_vjp(self, X, nbrs, s, noise, value_bar, q_bar):
        return self.inner.trace_tangent_vjp(
            X, nbrs, self._t(s), noise,
            None if value_bar is None else -value_bar,
            None if q_bar is None else -q_bar)

    def exact_trace(self, X, nbrs, s):
        value, trace = self.inner.exact_trace(X, nbrs, self._t(s))
        return -value, -trace


@dataclass
class NoiseVector:
    """Hutchinson probe vectors, fixed for a whole solve"""
    probes: List[Tensor]
    distribution: str = 'rademacher'

    def __post_init__(self):
        if self.distribution not in NOISE_DISTRIBUTIONS:
            raise ConfigError(f"unknown noise distribution '{self.distribution}'")
        if not self.probes:
            raise ConfigError("NoiseVector needs at least one probe")
        self.probes = [np.asarray(p, dtype=np.float64) for p in self.probes]
        if self.distribution == 'rademacher' and not all(
                np.all(np.abs(p) == 1.0) for p in self.probes):
            raise ConfigError("rademacher probes must have entries in {-1, +1}")

    @classmethod
    def sample(cls, shape: Tuple[int, int], rng: np.random.Generator,
               distribution: str = 'rademacher', probes: int = 1) -> 'NoiseVector':
        if distribution == 'rademacher':
            draws = [rng.choice(np.array([-1.0, 1.0]), size=shape) for _ in range(probes)]
        else:
            draws = [rng.standard_normal(shape) for _ in range(probes)]
        return cls(draws, distribution)

    @property
    def eps(self) -> Tensor:
        return self.probes[0]

    @property
    def count(self) -> int:
        return len(self.probes)


@dataclass
class AugmentedState:
    """States at the end of a solve plus the accumulated log-density change"""
    X: Tensor
    delta: np.ndarray  # one entry per connected component

    @property
    def delta_logp(self) -> float:
        return float(np.sum(self.delta))


# ---------------------------------------------------------------------------
# Flat-vector solver cores
# ---------------------------------------------------------------------------

class _Packer:
    """Concatenate a fixed list of array shapes into one flat vector and back"""

    def __init__(self, shapes: Sequence[Tuple[int, ...]]):
        self.shapes = [tuple(s) for s in shapes]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.bounds = np.cumsum(self.sizes)[:-1]

    def pack(self, *arrays) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])

    def unpack(self, vector: np.ndarray) -> List[np.ndarray]:
        return [piece.reshape(shape) for piece, shape in
                zip(np.split(vector, self.bounds), self.shapes)]


@dataclass
class SolveStats:
    evals: int = 0
    accepted: int = 0
    rejected: int = 0


def _rk4(func: Callable, y0: np.ndarray, t0: float, t1: float, steps: int,
         stats: SolveStats) -> np.ndarray:
    h = (t1 - t0) / steps
    y = y0
    for i in range(steps):
        t = t0 + i * h
        k1 = func(t, y)
        k2 = func(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = func(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = func(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        stats.evals += 4
        stats.accepted += 1
    return y


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_B_LOW = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b - bl for b, bl in zip(_B + (0.0,), _B_LOW))

_SAFETY = 0.9
_ALPHA = 0.7 / 5
_BETA = 0.4 / 5
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _initial_step(func, t0, y0, f0, direction, span, rtol, atol) -> float:
    """Starting step size estimate (Hairer, Norsett and Wanner)"""
    scale = atol + rtol * np.abs(y0)
    d0, d1 = _rms(y0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = func(t0 + direction * h0, y0 + direction * h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100.0 * h0, h1, span)


def _dopri5(func: Callable, y0: np.ndarray, t0: float, t1: float, rtol: float, atol: float,
            stats: SolveStats) -> np.ndarray:
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t, y = t0, y0
    k1 = func(t, y)
    h = _initial_step(func, t, y, k1, direction, span, rtol, atol)
    err_prev = 1e-4
    rejected_last = False

    while direction * (t1 - t) > 0:
        remaining = abs(t1 - t)
        last = h >= remaining
        step = direction * min(h, remaining)
        if abs(step) <= 10.0 * np.finfo(float).eps * max(abs(t), 1.0):
            raise SolverError(f"step size underflow at t={t:.6g}")

        k = [k1]
        for stage in range(1, 6):
            increment = sum(a * kj for a, kj in zip(_A[stage], k))
            k.append(func(t + _C[stage] * step, y + step * increment))
        y_new = y + step * sum(b * kj for b, kj in zip(_B, k))
        k7 = func(t + step, y_new)
        err_vec = step * sum(e * kj for e, kj in zip(_E, k + [k7]))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(err_vec / scale)
        if not math.isfinite(err) or not np.all(np.isfinite(y_new)):
            err = math.inf

        if err <= 1.0:
            t = t1 if last else t + step
            y, k1 = y_new, k7
            stats.accepted += 1
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * err ** -_ALPHA * err_prev ** _BETA
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            if rejected_last:
                factor = min(1.0, factor)
            err_prev = max(err, 1e-4)
            rejected_last = False
        else:
            stats.rejected += 1
            factor = _MIN_FACTOR if math.isinf(err) else max(_MIN_FACTOR,
                                                            _SAFETY * err ** -_ALPHA)
            rejected_last = True
            logger.debug(f"dopri5: rejected step h={abs(step):.3e} at t={t:.6g} (err={err:.3g})")
        h = abs(step) * factor
    return y


def _solve(func: Callable, y0: np.ndarray, cfg: SolverConfig) -> Tuple[np.ndarray, SolveStats]:
    stats = SolveStats()

    def counted(t, y):
        if stats.evals >= cfg.max_evals:
            raise SolverError(f"exceeded the budget of {cfg.max_evals} function evaluations")
        stats.evals += 1
        return func(t, y)

    if cfg.adaptive:
        y1 = _dopri5(counted, y0, cfg.t0, cfg.t1, cfg.rtol, cfg.atol, stats)
    else:
        y1 = _rk4(func, y0, cfg.t0, cfg.t1, cfg.steps, stats)
    logger.debug(f"{cfg.method}: t {cfg.t0:g} -> {cfg.t1:g}, {stats.evals} evals, "
                 f"{stats.accepted} accepted, {stats.rejected} rejected")
    return y1, stats


# ---------------------------------------------------------------------------
# Public integrators
# ---------------------------------------------------------------------------

def integrate(field: VectorField, X0: Tensor, nbrs: Neighborhoods, cfg: SolverConfig) -> Tensor:
    """Solve X' = F(X, t) from cfg.t0 to cfg.t1"""
    X0 = np.asarray(X0, dtype=np.float64)
    shape = X0.shape

    def rhs(t, y):
        return field.evaluate(y.reshape(shape), nbrs, t).ravel()

    y1, _ = _solve(rhs, X0.ravel().copy(), cfg)
    return y1.reshape(shape)


def reverse_integrate(field: VectorField, X1: Tensor, nbrs: Neighborhoods,
                      cfg: SolverConfig) -> Tensor:
    """Solve the same field from cfg.t1 back to cfg.t0"""
    return integrate(field, X1, nbrs, cfg.reversed())


def stochastic_trace(field: VectorField, X: Tensor, nbrs: Neighborhoods, t: float,
                     noise: NoiseVector) -> Tuple[Tensor, np.ndarray]:
    """(F, mean over probes of eps^T (dF/dX) eps per component), one vjp per probe"""
    total = np.zeros((nbrs.n_components, 1))
    value = None
    for eps in noise.probes:
        value, x_bar, _ = field.vjp(X, nbrs, t, eps)
        total += _component_sum(np.sum(eps * x_bar, axis=1), nbrs)
    return value, total / noise.count


def integrate_with_logdet(field: VectorField, X0: Tensor, nbrs: Neighborhoods,
                          cfg: SolverConfig,
                          noise: Union[NoiseVector, str] = EXACT) -> AugmentedState:
    """
    Integrate X' = F and delta' = -tr(dF/dX) jointly.

    With a NoiseVector the trace is the Hutchinson estimate eps^T (dF/dX) eps
    using the same probes at every stage; with noise='exact' it is assembled
    from n*m basis vjps and is deterministic.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    exact = isinstance(noise, str)
    if exact and noise != EXACT:
        raise ConfigError(f"noise must be a NoiseVector or '{EXACT}'")
    components = nbrs.n_components
    packer = _Packer([X0.shape, (components,)])

    def rhs(t, y):
        X, _ = packer.unpack(y)
        if exact:
            value, trace = field.exact_trace(X, nbrs, t)
        else:
            value, trace = stochastic_trace(field, X, nbrs, t, noise)
        return packer.pack(value, -trace[:, 0])

    y1, _ = _solve(rhs, packer.pack(X0, np.zeros(components)), cfg)
    X1, delta = packer.unpack(y1)
    if not np.all(np.isfinite(delta)):
        raise SolverError("log-density accumulator became non-finite")
    return AugmentedState(X1, delta.copy())


def accumulate_grads(total: Dict[str, Tensor], grads: Dict[str, Tensor], scale: float = 1.0):
    """In-place total[name] += scale * grads[name]"""
    for name, value in grads.items():
        if name in total:
            total[name] = total[name] + scale * value
        else:
            total[name] = scale * value


@dataclass
class AdjointResult:
    state_cotangent: Tensor
    param_grads: Dict[str, Tensor]
    final_state: Tensor
    delta: Optional[np.ndarray] = None


def _param_shapes(field: VectorField) -> List[Tuple[str, Tuple[int, int]]]:
    params = getattr(field, 'params', None)
    return [(name, params.get(name).shape) for name in field.param_names]


def adjoint_grad(field: VectorField, X0: Tensor, nbrs: Neighborhoods, cfg: SolverConfig,
                 state_cotangent: Tensor, logp_cotangent: Optional[np.ndarray] = None,
                 noise: Optional[NoiseVector] = None) -> AdjointResult:
    """
    Continuous adjoint gradients of a loss L(X(t1), delta(t1)).

    The backward solve replays the state, the adjoint a' = -a^T dF/dX and the
    parameter accumulator without storing the forward trajectory. Passing a
    per-component logp_cotangent (dL/ddelta) adds the trace term, which needs
    the same NoiseVector as the forward solve.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    with_logp = logp_cotangent is not None
    if with_logp:
        if not isinstance(noise, NoiseVector):
            raise ConfigError("the log-density adjoint needs a NoiseVector")
        aug = integrate_with_logdet(field, X0, nbrs, cfg, noise)
        X1, delta = aug.X, aug.delta
        q_bar = -np.asarray(logp_cotangent, dtype=np.float64).reshape(-1, 1)
    else:
        X1, delta, q_bar = integrate(field, X0, nbrs, cfg), None, None

    shapes = _param_shapes(field)
    packer = _Packer([X0.shape, X0.shape] + [shape for _, shape in shapes])

    def rhs(t, y):
        X, a = packer.unpack(y)[:2]
        if with_logp:
            value = field.evaluate(X, nbrs, t)
            a_dot, param_bar = field.trace_tangent_vjp(X, nbrs, t, noise.probes, a, q_bar)
        else:
            value, a_dot, param_bar = field.vjp(X, nbrs, t, a)
        grads = [-param_bar[name] if name in param_bar else np.zeros(shape)
                 for name, shape in shapes]
        return packer.pack(value, -a_dot, *grads)

    start = packer.pack(X1, state_cotangent, *[np.zeros(shape) for _, shape in shapes])
    y0, stats = _solve(rhs, start, cfg.reversed())
    pieces = packer.unpack(y0)
    param_grads = {name: piece.copy() for (name, _), piece in zip(shapes, pieces[2:])}
    logger.debug(f"adjoint solve finished after {stats.evals} evaluations")
    return AdjointResult(pieces[1].copy(), param_grads, X1, delta)


# ---------------------------------------------------------------------------
# Discretize-then-optimize through fixed-step RK4
# ---------------------------------------------------------------------------

_RK4_WEIGHTS = (1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0)


@dataclass
class TrackedSolve:
    """RK4 solve of the augmented system with step-start checkpoints kept for backprop"""
    X: Tensor
    delta: np.ndarray
    step: float
    noise: NoiseVector
    checkpoints: List[Tuple[float, Tensor]] = dataclass_field(default_factory=list)

    @property
    def delta_logp(self) -> float:
        return float(np.sum(self.delta))


def integrate_tracked(field: VectorField, X0: Tensor, nbrs: Neighborhoods, cfg: SolverConfig,
                      noise: NoiseVector) -> TrackedSolve:
    """Augmented RK4 solve whose trace term is differentiable (forward-mode tangents)"""
    if cfg.adaptive:
        raise ConfigError("discretize-then-optimize needs the rk4-fixed solver")
    h = (cfg.t1 - cfg.t0) / cfg.steps
    X = np.asarray(X0, dtype=np.float64)
    delta = np.zeros((nbrs.n_components, 1))
    tracked = TrackedSolve(X, delta[:, 0], h, noise)
    for i in range(cfg.steps):
        t = cfg.t0 + i * h
        tracked.checkpoints.append((t, X))
        k1, q1 = field.trace_tangent(X, nbrs, t, noise.probes)
        k2, q2 = field.trace_tangent(X + 0.5 * h * k1, nbrs, t + 0.5 * h, noise.probes)
        k3, q3 = field.trace_tangent(X + 0.5 * h * k2, nbrs, t + 0.5 * h, noise.probes)
        k4, q4 = field.trace_tangent(X + h * k3, nbrs, t + h, noise.probes)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        delta = delta - (h / 6.0) * (q1 + 2.0 * q2 + 2.0 * q3 + q4)
    tracked.X = X
    tracked.delta = delta[:, 0].copy()
    return tracked


def backprop_tracked(field: VectorField, tracked: TrackedSolve, nbrs: Neighborhoods,
                     state_cotangent: Tensor, delta_cotangent: np.ndarray
                     ) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Exact gradients of the discrete RK4 map: stage states are recomputed
    from each checkpoint and every stage costs one tape vjp.
    """
    h = tracked.step
    probes = tracked.noise.probes
    x_bar = np.array(state_cotangent, dtype=np.float64)
    d_bar = np.asarray(delta_cotangent, dtype=np.float64).reshape(-1, 1)
    grads: Dict[str, Tensor] = {}
    # stage i reads k_{i-1} with these coefficients
    feed = (0.0, 0.5 * h, 0.5 * h, h)

    for t, X in reversed(tracked.checkpoints):
        k1 = field.evaluate(X, nbrs, t)
        Y2 = X + 0.5 * h * k1
        k2 = field.evaluate(Y2, nbrs, t + 0.5 * h)
        Y3 = X + 0.5 * h * k2
        k3 = field.evaluate(Y3, nbrs, t + 0.5 * h)
        Y4 = X + h * k3
        stages = ((X, t), (Y2, t + 0.5 * h), (Y3, t + 0.5 * h), (Y4, t + h))

        k_bar = [h * w * x_bar for w in _RK4_WEIGHTS]
        step_bar = x_bar.copy()
        for i in (3, 2, 1, 0):
            Y, ts = stages[i]
            # delta_new = delta - h * sum(w_i q_i)
            y_bar, param_bar = field.trace_tangent_vjp(Y, nbrs, ts, probes, k_bar[i],
                                                       -h * _RK4_WEIGHTS[i] * d_bar)
            accumulate_grads(grads, param_bar)
            step_bar = step_bar + y_bar
            if i > 0:
                k_bar[i - 1] = k_bar[i - 1] + feed[i] * y_bar
        x_bar = step_bar
    return x_bar, grads
