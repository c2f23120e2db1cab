"""
Built-in diagnostics

Each check compares one measured error against a tolerance: gradient checks
of the message networks and of the end-to-end training gradient, analytic
solver tests, change-of-variables exactness, trace-estimator consistency and
unbiasedness, model invertibility, and adjoint vs discretize-then-optimize.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from .config import ModelSpec, SolverSpec
from .diffcore import ParamStore, grad_check, relative_error
from .dynamics import AGGREGATORS, DynamicsField
from .errors import CGFError
from .flow import FlowModel
from .graphdata import Neighborhoods, grid_neighborhoods, line_graph_of_complete
from .logger import get_logger
from .odeint import LinearField, SolverConfig, integrate, integrate_with_logdet

logger = get_logger("selftest")


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    passed: bool
    detail: str = ''


@dataclass
class SelfTestReport:
    seed: int
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> Dict:
        return {'seed': self.seed, 'passed': self.passed,
                'checks': [asdict(c) for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n'

    def to_table(self) -> str:
        rows = [(c.name, f"{c.error:.3e}", f"{c.tolerance:.1e}", "ok" if c.passed else "FAIL")
                for c in self.checks]
        return tabulate(rows, headers=["check", "error", "tolerance", "status"])


def _result(name: str, error: float, tolerance: float, detail: str = '') -> CheckResult:
    error = float(error)
    return CheckResult(name, error, tolerance, bool(math.isfinite(error) and error <= tolerance),
                       detail)


def _randomize(params: ParamStore, rng: np.random.Generator, scale: float = 0.5):
    for name, value in list(params.items()):
        params.set(name, scale * rng.standard_normal(value.shape))


def _path3() -> Neighborhoods:
    return Neighborhoods([[(1, 0)], [(0, 0), (2, 0)], [(1, 0)]], 1)


_SINGLE = Neighborhoods([[]], 1)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_message_grads(rng: np.random.Generator) -> CheckResult:
    """Finite differences on the field tape (values and trace tangent) for each aggregator"""
    nbrs = grid_neighborhoods(2, 2)
    worst, detail = 0.0, ''
    for aggregator in AGGREGATORS:
        dynamics = DynamicsField.create(2, hidden=6, n_edge_types=4, n_layers=2,
                                        aggregator=aggregator, rng=rng)
        report = grad_check(dynamics.tape_for(nbrs, 1), tolerance=1e-4, rng=rng)
        if report.max_error >= worst:
            worst = report.max_error
            bad = max(report.entries, key=lambda e: e.max_rel_error)
            detail = f"{aggregator}: {bad.name}"
    return _result('message-network-gradients', worst, 1e-4, detail)


def check_training_grads(rng: np.random.Generator) -> CheckResult:
    """loss_and_grad against central differences of its own objective"""
    spec = ModelSpec(m=2, blocks=2, hidden=4, layers=2, factor_out=[0.5], dequant='none')
    model = FlowModel.from_spec(spec, rng, SolverSpec(train_steps=4))
    _randomize(model.params, rng, 0.4)
    nbrs = Neighborhoods.union([_path3(), Neighborhoods([[(1, 0)], [(0, 0)]], 1)])
    X = rng.standard_normal((nbrs.n, spec.m))
    weights = np.array([0.5, 1.0])
    seed = int(rng.integers(2 ** 31))

    def objective(states) -> float:
        lg = model.loss_and_grad(states, nbrs, weights, np.random.default_rng(seed))
        return float(np.dot(weights, lg.log_prob))

    analytic = model.loss_and_grad(X, nbrs, weights, np.random.default_rng(seed))
    step = 1e-5
    worst, where = 0.0, ''

    names = model.params.names()
    for pick in rng.choice(len(names), size=6, replace=False):
        name = names[int(pick)]
        base = model.params.get(name).copy()
        idx = tuple(int(rng.integers(s)) for s in base.shape)
        bumped = base.copy()
        bumped[idx] += step
        model.params.set(name, bumped)
        upper = objective(X)
        bumped[idx] = base[idx] - step
        model.params.set(name, bumped)
        lower = objective(X)
        model.params.set(name, base)
        numeric = (upper - lower) / (2.0 * step)
        err = float(relative_error(np.array(analytic.grads[name][idx]), np.array(numeric)))
        if err >= worst:
            worst, where = err, f"{name}{list(idx)}"

    for _ in range(3):
        idx = (int(rng.integers(X.shape[0])), int(rng.integers(X.shape[1])))
        bumped = X.copy()
        bumped[idx] += step
        upper = objective(bumped)
        bumped[idx] = X[idx] - step
        lower = objective(bumped)
        numeric = (upper - lower) / (2.0 * step)
        err = float(relative_error(np.array(analytic.state_cotangent[idx]), np.array(numeric)))
        if err >= worst:
            worst, where = err, f"X{list(idx)}"
    return _result('training-gradient', worst, 1e-3, where)


def check_dopri5_exp(rng: np.random.Generator) -> CheckResult:
    cfg = SolverConfig('dopri5', rtol=1e-8, atol=1e-10)
    x1 = integrate(LinearField([[1.0]]), np.ones((1, 1)), _SINGLE, cfg)
    return _result('dopri5-exponential', abs(x1[0, 0] - math.e), 1e-6)


def _rk4_exp_error(steps: int) -> float:
    x1 = integrate(LinearField([[1.0]]), np.ones((1, 1)), _SINGLE, SolverConfig('rk4', steps))
    return abs(x1[0, 0] - math.e)


def check_rk4_exp(rng: np.random.Generator) -> CheckResult:
    return _result('rk4-exponential', _rk4_exp_error(100), 1e-5)


def check_rk4_order(rng: np.random.Generator) -> CheckResult:
    """Halving the step should cut the error by 2^4 (within a factor of 2)"""
    ratio = _rk4_exp_error(10) / _rk4_exp_error(20)
    order = math.log2(ratio)
    return _result('rk4-order', abs(order - 4.0), 1.0, f"observed order {order:.3f}")


def check_rotation(rng: np.random.Generator) -> CheckResult:
    X0 = rng.standard_normal((1, 2))
    cfg = SolverConfig('dopri5', rtol=1e-8, atol=1e-10, t1=2.0 * math.pi)
    X1 = integrate(LinearField([[0.0, -1.0], [1.0, 0.0]]), X0, _SINGLE, cfg)
    return _result('dopri5-rotation', np.max(np.abs(X1 - X0)), 1e-6)


def check_linear_logdet(rng: np.random.Generator) -> CheckResult:
    """Exact trace of diag(0.5, -0.3) integrated over [0, 1]"""
    aug = integrate_with_logdet(LinearField(np.diag([0.5, -0.3])), rng.standard_normal((1, 2)),
                                _SINGLE, SolverConfig('dopri5'))
    return _result('linear-logdet', abs(aug.delta_logp + 0.2), 1e-8)


def _trace_setup(rng: np.random.Generator):
    nbrs = grid_neighborhoods(2, 2)
    dynamics = DynamicsField.create(2, hidden=8, n_edge_types=4, rng=rng)
    _randomize(dynamics.params, rng)
    X = rng.standard_normal((nbrs.n, 2))
    return dynamics, nbrs, X, dynamics.jacobian(X, nbrs, 0.3)


def check_trace_tangent(rng: np.random.Generator) -> CheckResult:
    """Forward-mode q and exact_trace agree with the dense Jacobian"""
    dynamics, nbrs, X, jac = _trace_setup(rng)
    _, trace = dynamics.exact_trace(X, nbrs, 0.3)
    worst = abs(trace[0, 0] - np.trace(jac))
    for _ in range(4):
        eps = rng.choice(np.array([-1.0, 1.0]), size=X.shape)
        _, q = dynamics.trace_tangent(X, nbrs, 0.3, [eps])
        worst = max(worst, abs(q[0, 0] - eps.ravel() @ jac @ eps.ravel()))
    return _result('trace-tangent', worst, 1e-8)


def check_trace_unbiased(rng: np.random.Generator, draws: int = 10_000) -> CheckResult:
    """Mean of Rademacher estimates within 3 standard errors of the exact trace"""
    _, _, _, jac = _trace_setup(rng)
    eps = rng.choice(np.array([-1.0, 1.0]), size=(draws, jac.shape[0]))
    estimates = np.einsum('ki,ij,kj->k', eps, jac, eps)
    stderr = estimates.std(ddof=1) / math.sqrt(draws)
    z = abs(estimates.mean() - np.trace(jac)) / max(stderr, 1e-300)
    return _result('trace-unbiased', z, 3.0, f"{draws} draws, z-score")


def check_invertibility(rng: np.random.Generator) -> CheckResult:
    """reverse then forward through random 2-block models recovers the input"""
    cases = [
        (ModelSpec(m=1, blocks=2, hidden=16, dequant='none'), line_graph_of_complete(4).nbrs),
        (ModelSpec(m=2, blocks=2, hidden=16, factor_out=[0.5], n_edge_types=4, dequant='none'),
         grid_neighborhoods(2, 3)),
    ]
    worst = 0.0
    for spec, nbrs in cases:
        model = FlowModel.from_spec(spec, rng)
        _randomize(model.params, rng, 0.3)
        X = rng.uniform(0.0, 1.0, size=(nbrs.n, spec.m))
        back = model.forward(model.reverse(X, nbrs), nbrs)
        worst = max(worst, float(np.max(np.abs(back - X))))
    return _result('invertibility', worst, 1e-3)


def check_adjoint(rng: np.random.Generator) -> CheckResult:
    """Continuous adjoint vs exact gradients of the RK4 map on a 3-node path"""
    spec = ModelSpec(m=1, blocks=1, hidden=8, dequant='none')
    model = FlowModel.from_spec(spec, rng, SolverSpec(train_steps=20))
    _randomize(model.params, rng, 0.3)
    nbrs = _path3()
    X = rng.standard_normal((3, 1))
    seed = int(rng.integers(2 ** 31))
    grads = {}
    for mode in ('discretize', 'adjoint'):
        lg = model.loss_and_grad(X, nbrs, np.ones(1), np.random.default_rng(seed),
                                 gradient=mode)
        grads[mode] = model.params.flatten(lg.grads)
    reference = grads['discretize']
    rel = np.linalg.norm(grads['adjoint'] - reference) / max(np.linalg.norm(reference), 1e-12)
    return _result('adjoint-vs-discretize', rel, 0.01)


CHECKS: Sequence[Tuple[str, Callable[[np.random.Generator], CheckResult]]] = (
    ('message-network-gradients', check_message_grads),
    ('training-gradient', check_training_grads),
    ('dopri5-exponential', check_dopri5_exp),
    ('rk4-exponential', check_rk4_exp),
    ('rk4-order', check_rk4_order),
    ('dopri5-rotation', check_rotation),
    ('linear-logdet', check_linear_logdet),
    ('trace-tangent', check_trace_tangent),
    ('trace-unbiased', check_trace_unbiased),
    ('invertibility', check_invertibility),
    ('adjoint-vs-discretize', check_adjoint),
)


def run_selftest(seed: int = 0, only: Optional[Sequence[str]] = None) -> SelfTestReport:
    """Run every check (or the named subset); a check that raises counts as failed"""
    report = SelfTestReport(seed)
    for index, (name, check) in enumerate(CHECKS):
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, index])
        try:
            result = check(rng)
        except (CGFError, FloatingPointError, ValueError) as e:
            result = CheckResult(name, float('inf'), 0.0, False, f"{type(e).__name__}: {e}")
        level = logger.info if result.passed else logger.error
        level(f"{name}: error {result.error:.3e} (tolerance {result.tolerance:g})")
        report.checks.append(result)
    return report
