#!/usr/bin/env python3
"""
Test the ODE integrators, log-density accumulation and gradient paths
"""

import itertools
import math
import sys
import unittest
from pathlib import Path

import numpy as np
from scipy.linalg import expm

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))
from tests.conftest import test_utils

from cgflow.errors import ConfigError, SolverError
from cgflow.graphdata import Neighborhoods
from cgflow.odeint import (
    LinearField,
    NoiseVector,
    ReversedField,
    SolverConfig,
    adjoint_grad,
    backprop_tracked,
    integrate,
    integrate_tracked,
    integrate_with_logdet,
    reverse_integrate,
)

TIGHT = SolverConfig('dopri5', rtol=1e-10, atol=1e-12)


def _bump(params, name, index, h):
    value = np.array(params[name])
    value.flat[index] += h
    params.set(name, value)


class TestIntegrators(unittest.TestCase):
    """rk4-fixed and dopri5 against closed-form solutions"""

    def test_exponential_decay(self):
        field = LinearField([[-1.0]])
        nbrs = test_utils.path_neighborhoods(1)
        for cfg, tol in ((SolverConfig('rk4', steps=100), 1e-8),
                         (SolverConfig('dopri5', rtol=1e-8, atol=1e-10), 1e-6)):
            x1 = integrate(field, np.array([[1.0]]), nbrs, cfg)
            self.assertAlmostEqual(float(x1[0, 0]), math.exp(-1.0), delta=tol)
        print("✅ Both solvers reproduce exp(-1)")

    def test_rk4_is_fourth_order(self):
        field = LinearField([[-1.0]])
        nbrs = test_utils.path_neighborhoods(1)
        errors = [abs(float(integrate(field, np.array([[1.0]]), nbrs,
                                      SolverConfig('rk4', steps=s))[0, 0]) - math.exp(-1.0))
                  for s in (10, 20)]
        self.assertAlmostEqual(math.log2(errors[0] / errors[1]), 4.0, delta=0.5)
        print("✅ Halving the RK4 step divides the error by ~16")

    def test_rotation_returns_to_start(self):
        field = LinearField([[0.0, -1.0], [1.0, 0.0]])
        nbrs = test_utils.path_neighborhoods(1)
        cfg = SolverConfig('dopri5', rtol=1e-10, atol=1e-12, t1=2 * math.pi)
        x1 = integrate(field, np.array([[1.0, 0.0]]), nbrs, cfg)
        test_utils.assert_close(x1, [[1.0, 0.0]], 1e-6)
        print("✅ A full rotation returns to the starting point")

    def test_matrix_exponential_on_many_rows(self):
        A = np.array([[-0.5, 0.3], [0.1, 0.2]])
        X0 = test_utils.rng(0).standard_normal((4, 2))
        x1 = integrate(LinearField(A), X0, test_utils.path_neighborhoods(4), TIGHT)
        test_utils.assert_close(x1, X0 @ expm(A).T, 1e-8)
        print("✅ Row-wise linear dynamics match expm(A)")

    def test_reverse_integration_inverts(self):
        rng = test_utils.rng(1)
        field = test_utils.small_field(rng, dim=2)
        nbrs = test_utils.path_neighborhoods(3)
        X0 = rng.standard_normal((3, 2))
        X1 = integrate(field, X0, nbrs, TIGHT)
        test_utils.assert_close(reverse_integrate(field, X1, nbrs, TIGHT), X0, 1e-7)
        reversed_field = ReversedField(field, TIGHT.t0, TIGHT.t1)
        test_utils.assert_close(integrate(reversed_field, X1, nbrs, TIGHT), X0, 1e-7)
        print("✅ Backward solves and the reversed field both invert the flow")

    def test_round_trip_error_shrinks_with_tolerance(self):
        rng = test_utils.rng(2)
        field = test_utils.small_field(rng, dim=2, scale=1.0)
        nbrs = test_utils.path_neighborhoods(4)
        X0 = rng.standard_normal((4, 2))
        errors = []
        for rtol in (1e-3, 1e-5, 1e-7):
            cfg = SolverConfig('dopri5', rtol=rtol, atol=rtol * 1e-2)
            back = reverse_integrate(field, integrate(field, X0, nbrs, cfg), nbrs, cfg)
            errors.append(float(np.max(np.abs(back - X0))))
        self.assertEqual(errors, sorted(errors, reverse=True))
        self.assertEqual(len(set(errors)), 3)
        self.assertLess(errors[-1], 1e-6)
        print(f"✅ Round-trip error shrinks as tolerances tighten: {errors}")

    def test_config_validation(self):
        self.assertEqual(SolverConfig('rk4').method, 'rk4-fixed')
        self.assertEqual(SolverConfig('dopri5-adaptive').method, 'dopri5')
        with self.assertRaises(ConfigError):
            SolverConfig('euler')
        with self.assertRaises(ConfigError):
            SolverConfig(t0=1.0, t1=1.0)
        with self.assertRaises(ConfigError):
            SolverConfig(rtol=0.0)
        print("✅ SolverConfig normalises aliases and rejects bad settings")

    def test_evaluation_budget(self):
        field = LinearField([[-50.0]])
        cfg = SolverConfig('dopri5', rtol=1e-12, atol=1e-14, max_evals=20)
        with self.assertRaises(SolverError):
            integrate(field, np.array([[1.0]]), test_utils.path_neighborhoods(1), cfg)
        print("✅ Exceeding max_evals raises SolverError")


class TestLogDensity(unittest.TestCase):

    def test_linear_logdet_per_component(self):
        """delta = -(t1 - t0) * tr(A) * (variables in the component)"""
        A = np.diag([0.5, -0.3])
        nbrs = Neighborhoods.union([test_utils.path_neighborhoods(3),
                                    test_utils.path_neighborhoods(1)])
        X0 = test_utils.rng(2).standard_normal((4, 2))
        exact = integrate_with_logdet(LinearField(A), X0, nbrs, TIGHT)
        test_utils.assert_close(exact.delta, [-0.6, -0.2], 1e-8)
        self.assertAlmostEqual(exact.delta_logp, -0.8, places=8)

        noise = NoiseVector.sample(X0.shape, test_utils.rng(3))
        stochastic = integrate_with_logdet(LinearField(A), X0, nbrs, TIGHT, noise)
        # Rademacher probes are exact for diagonal Jacobians
        test_utils.assert_close(stochastic.delta, exact.delta, 1e-8)
        print("✅ Log-density change is kept per component")

    def test_exact_trace_matches_probe_average(self):
        """Averaging over every sign pattern gives E[eps eps^T] = I exactly"""
        rng = test_utils.rng(4)
        field = test_utils.small_field(rng, dim=2)
        nbrs = test_utils.path_neighborhoods(3)
        X0 = rng.standard_normal((3, 2))
        cfg = SolverConfig('rk4', steps=4)
        exact = integrate_with_logdet(field, X0, nbrs, cfg)
        patterns = [np.array(signs).reshape(3, 2)
                    for signs in itertools.product([-1.0, 1.0], repeat=6)]
        averaged = integrate_with_logdet(field, X0, nbrs, cfg, NoiseVector(patterns))
        test_utils.assert_close(averaged.delta, exact.delta, 1e-10)
        test_utils.assert_close(averaged.X, exact.X, 1e-12)
        print("✅ Hutchinson probes averaged over all sign patterns equal the exact trace")

    def test_noise_validation(self):
        with self.assertRaises(ConfigError):
            NoiseVector([np.array([[0.5, 1.0]])], 'rademacher')
        with self.assertRaises(ConfigError):
            NoiseVector([], 'gaussian')
        with self.assertRaises(ConfigError):
            integrate_with_logdet(LinearField([[1.0]]), np.zeros((1, 1)),
                                  test_utils.path_neighborhoods(1), TIGHT, noise='sampled')
        print("✅ Malformed noise settings raise ConfigError")


class TestGradients(unittest.TestCase):
    """Adjoint and discretize-then-optimize gradients"""

    def test_adjoint_state_cotangent_is_exact_for_linear_fields(self):
        A = np.array([[-0.5, 0.3], [0.1, 0.2]])
        C = test_utils.rng(6).standard_normal((3, 2))
        result = adjoint_grad(LinearField(A), np.zeros((3, 2)), test_utils.path_neighborhoods(3),
                              TIGHT, C)
        test_utils.assert_close(result.state_cotangent, C @ expm(A), 1e-7)
        print("✅ Adjoint of x' = Ax is C expm(A)")

    def test_adjoint_parameter_grads(self):
        rng = test_utils.rng(7)
        field = test_utils.small_field(rng, dim=2, hidden=6)
        nbrs = test_utils.path_neighborhoods(3)
        X0 = rng.standard_normal((3, 2))
        C = rng.standard_normal((3, 2))
        cfg = SolverConfig('rk4', steps=40)
        result = adjoint_grad(field, X0, nbrs, cfg, C)

        h = 1e-5
        for name in ('unary.W0', 'edge0.W1', 'edge0.b0'):
            _bump(field.params, name, 1, h)
            upper = float(np.sum(C * integrate(field, X0, nbrs, cfg)))
            _bump(field.params, name, 1, -2 * h)
            lower = float(np.sum(C * integrate(field, X0, nbrs, cfg)))
            _bump(field.params, name, 1, h)
            numeric = (upper - lower) / (2 * h)
            self.assertAlmostEqual(float(result.param_grads[name].flat[1]), numeric,
                                   delta=1e-4 * max(1.0, abs(numeric)))
        print("✅ Adjoint parameter gradients match finite differences")

    def test_adjoint_with_log_density(self):
        rng = test_utils.rng(8)
        field = test_utils.small_field(rng, dim=1, hidden=6)
        nbrs = test_utils.path_neighborhoods(3)
        X0 = rng.standard_normal((3, 1))
        C = rng.standard_normal((3, 1))
        weight = np.array([0.7])
        noise = NoiseVector.sample(X0.shape, test_utils.rng(9))
        cfg = SolverConfig('rk4', steps=60)

        def loss(X):
            aug = integrate_with_logdet(field, X, nbrs, cfg, noise)
            return float(np.sum(C * aug.X) + weight @ aug.delta)

        result = adjoint_grad(field, X0, nbrs, cfg, C, weight, noise)
        h = 1e-5
        for i in range(3):
            bump = np.zeros_like(X0)
            bump[i, 0] = h
            numeric = (loss(X0 + bump) - loss(X0 - bump)) / (2 * h)
            self.assertAlmostEqual(float(result.state_cotangent[i, 0]), numeric, delta=1e-5)
        with self.assertRaises(ConfigError):
            adjoint_grad(field, X0, nbrs, cfg, C, weight)
        print("✅ Log-density adjoint includes the trace term")

    def test_backprop_tracked_is_exact_for_the_discrete_map(self):
        rng = test_utils.rng(10)
        field = test_utils.small_field(rng, dim=2, hidden=6, n_edge_types=1)
        nbrs = Neighborhoods.union([test_utils.path_neighborhoods(2),
                                    test_utils.path_neighborhoods(3)])
        X0 = rng.standard_normal((5, 2))
        C = rng.standard_normal((5, 2))
        D = np.array([0.4, -1.1])
        noise = NoiseVector.sample(X0.shape, test_utils.rng(11))
        cfg = SolverConfig('rk4', steps=5)

        def loss(X):
            tracked = integrate_tracked(field, X, nbrs, cfg, noise)
            return float(np.sum(C * tracked.X) + D @ tracked.delta)

        tracked = integrate_tracked(field, X0, nbrs, cfg, noise)
        self.assertEqual(len(tracked.checkpoints), 5)
        x_bar, grads = backprop_tracked(field, tracked, nbrs, C, D)

        h = 1e-6
        for index in (0, 3, 7):
            bump = np.zeros(X0.size)
            bump[index] = h
            bump = bump.reshape(X0.shape)
            numeric = (loss(X0 + bump) - loss(X0 - bump)) / (2 * h)
            self.assertAlmostEqual(float(x_bar.flat[index]), numeric, delta=1e-6)
        for name in ('unary.W1', 'edge0.W0'):
            _bump(field.params, name, 0, h)
            upper = loss(X0)
            _bump(field.params, name, 0, -2 * h)
            lower = loss(X0)
            _bump(field.params, name, 0, h)
            self.assertAlmostEqual(float(grads[name].flat[0]), (upper - lower) / (2 * h),
                                   delta=1e-6)
        print("✅ Discretize-then-optimize gradients are exact for RK4")

    def test_tracked_solve_needs_fixed_steps(self):
        field = LinearField([[1.0]])
        noise = NoiseVector.sample((1, 1), test_utils.rng(0))
        with self.assertRaises(ConfigError):
            integrate_tracked(field, np.zeros((1, 1)), test_utils.path_neighborhoods(1), TIGHT,
                              noise)
        print("✅ integrate_tracked rejects adaptive solvers")


def run_odeint_tests():
    """Run all solver tests"""
    suite = unittest.TestSuite()
    for case in (TestIntegrators, TestLogDensity, TestGradients):
        suite.addTests(unittest.TestLoader().loadTestsFromTestCase(case))
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    return result.wasSuccessful()


if __name__ == '__main__':
    success = run_odeint_tests()
    if success:
        print("\n🎉 All solver tests passed!")
    else:
        print("\n❌ Some solver tests failed!")
    sys.exit(0 if success else 1)
