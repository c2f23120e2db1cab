#!/usr/bin/env python3
"""
Test the message-passing vector field
"""

import sys
import unittest
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))
from tests.conftest import test_utils

from cgflow.diffcore import ParamStore, grad_check
from cgflow.dynamics import DynamicsField, field_vjp, init_field_params, layer_sizes
from cgflow.errors import ConfigError, GraphError
from cgflow.graphdata import Neighborhoods, grid_neighborhoods


def _reference_field(field: DynamicsField, X, nbrs, t):
    """Loop-over-nodes evaluation straight from the definition"""

    def mlp(net, h):
        for layer in range(field.n_layers):
            W = field.params[f"{field.prefix}{net}.W{layer}"]
            b = field.params[f"{field.prefix}{net}.b{layer}"]
            h = h @ W.T + b[0]
            if layer < field.n_layers - 1:
                h = np.tanh(h)
        return h

    out = np.zeros_like(X)
    for i in range(nbrs.n):
        out[i] = mlp('unary', np.concatenate([X[i], [t]]))
        messages = [mlp(f'edge{k}', np.concatenate([X[i], X[j], [t]])) for j, k in nbrs.lists[i]]
        if messages:
            agg = np.sum(messages, axis=0)
            if field.aggregator == 'mean':
                agg = agg / len(messages)
            out[i] += agg
    return out


class TestDynamicsField(unittest.TestCase):
    """Evaluation, derivatives and structure of F(X, t)"""

    def test_parameter_layout(self):
        params = ParamStore()
        init_field_params(params, 'block0.', dim=2, hidden=8, n_edge_types=2, n_layers=3,
                          rng=test_utils.rng(0))
        self.assertEqual(layer_sizes(5, 8, 2, 3), [(8, 5), (8, 8), (2, 8)])
        self.assertEqual(params['block0.edge1.W0'].shape, (8, 5))
        self.assertEqual(params['block0.unary.W2'].shape, (2, 8))
        self.assertEqual(float(np.abs(params['block0.unary.b0']).max()), 0.0)
        # the last layer starts 100x smaller than N(0, 1/fan_in)
        self.assertLess(float(np.abs(params['block0.unary.W2']).max()), 0.05)
        print("✅ Parameters follow the prefix.net.W<l>/b<l> layout")

    def test_matches_reference_for_each_aggregator(self):
        rng = test_utils.rng(1)
        nbrs = grid_neighborhoods(2, 3)
        X = rng.standard_normal((6, 2))
        for aggregator in ('sum', 'mean'):
            field = test_utils.small_field(rng, dim=2, n_edge_types=4, aggregator=aggregator)
            test_utils.assert_close(field.evaluate(X, nbrs, 0.4),
                                    _reference_field(field, X, nbrs, 0.4), 1e-12,
                                    f"{aggregator} aggregation differs")
        print("✅ Tape evaluation matches the per-node definition (sum and mean)")

    def test_zero_parameters_give_zero_field(self):
        field = DynamicsField.create(3, hidden=4)
        X = test_utils.rng(2).standard_normal((4, 3))
        test_utils.assert_close(field.evaluate(X, test_utils.path_neighborhoods(4), 0.1),
                                np.zeros((4, 3)), 0.0)
        print("✅ rng=None initialisation is the zero field")

    def test_permutation_equivariance(self):
        rng = test_utils.rng(3)
        field = test_utils.small_field(rng, dim=2)
        nbrs = test_utils.path_neighborhoods(5)
        X = rng.standard_normal((5, 2))
        perm = np.array([3, 0, 4, 1, 2])
        PX = np.zeros_like(X)
        PX[perm] = X
        expected = np.zeros_like(X)
        expected[perm] = field.evaluate(X, nbrs, 0.7)
        test_utils.assert_close(field.evaluate(PX, nbrs.permuted(perm), 0.7), expected, 1e-12)
        print("✅ Relabelling variables permutes the field")

    def test_disjoint_union_is_local(self):
        rng = test_utils.rng(4)
        field = test_utils.small_field(rng, dim=1)
        a, b = test_utils.path_neighborhoods(3), test_utils.path_neighborhoods(2)
        Xa, Xb = rng.standard_normal((3, 1)), rng.standard_normal((2, 1))
        union = Neighborhoods.union([a, b])
        F = field.evaluate(np.vstack([Xa, Xb]), union, 0.2)
        test_utils.assert_close(F[:3], field.evaluate(Xa, a, 0.2), 1e-12)
        test_utils.assert_close(F[3:], field.evaluate(Xb, b, 0.2), 1e-12)
        print("✅ Components of a disjoint union do not interact")

    def test_grad_check_with_trace_tangent(self):
        """Values and the forward-mode trace output both pass finite differences"""
        field = DynamicsField.create(2, hidden=5, n_edge_types=4, rng=test_utils.rng(5))
        report = grad_check(field.tape_for(grid_neighborhoods(2, 2), 1), tolerance=1e-4,
                            rng=test_utils.rng(6))
        output_file = test_utils.save_test_output(report.to_table(), "field_grad_check")
        self.assertTrue(report.passed, report.to_table())
        print(f"✅ Field tape passes gradient check - report saved to {output_file}")

    def test_vjp_matches_jacobian(self):
        rng = test_utils.rng(7)
        field = test_utils.small_field(rng, dim=2)
        nbrs = test_utils.path_neighborhoods(3)
        X = rng.standard_normal((3, 2))
        cot = rng.standard_normal((3, 2))
        jac = field.jacobian(X, nbrs, 0.5)
        x_bar, _ = field_vjp(field, X, nbrs, 0.5, cot)
        test_utils.assert_close(x_bar.ravel(), cot.ravel() @ jac, 1e-12)

        h = 1e-6
        numeric = np.zeros_like(jac)
        for col in range(X.size):
            bump = np.zeros(X.size)
            bump[col] = h
            upper = field.evaluate(X + bump.reshape(X.shape), nbrs, 0.5).ravel()
            lower = field.evaluate(X - bump.reshape(X.shape), nbrs, 0.5).ravel()
            numeric[:, col] = (upper - lower) / (2 * h)
        test_utils.assert_close(jac, numeric, 1e-7)
        print("✅ vjp and dense Jacobian agree with finite differences")

    def test_jacobian_is_neighbourhood_local(self):
        """dF_i/dx_k vanishes unless k is i or one of its neighbours"""
        rng = test_utils.rng(12)
        field = test_utils.small_field(rng, dim=2, scale=1.0)
        nbrs = test_utils.path_neighborhoods(5)
        jac = field.jacobian(rng.standard_normal((5, 2)), nbrs, 0.4)
        for i in range(5):
            for k in range(5):
                block = jac[2 * i:2 * i + 2, 2 * k:2 * k + 2]
                if abs(i - k) > 1:
                    self.assertEqual(float(np.abs(block).max()), 0.0, f"block ({i}, {k})")
                else:
                    self.assertGreater(float(np.abs(block).max()), 0.0, f"block ({i}, {k})")
        print("✅ The field only couples neighbouring variables")

    def test_trace_tangent_and_exact_trace(self):
        rng = test_utils.rng(8)
        field = test_utils.small_field(rng, dim=2, n_edge_types=4)
        nbrs = Neighborhoods.union([grid_neighborhoods(2, 2), grid_neighborhoods(1, 2)])
        X = rng.standard_normal((nbrs.n, 2))
        jac = field.jacobian(X, nbrs, 0.3)
        rows = np.repeat(nbrs.components, 2)

        F, trace = field.exact_trace(X, nbrs, 0.3)
        for c in range(nbrs.n_components):
            block = jac[np.ix_(rows == c, rows == c)]
            self.assertAlmostEqual(float(trace[c, 0]), float(np.trace(block)), places=10)

        probes = [rng.choice([-1.0, 1.0], size=X.shape) for _ in range(3)]
        F2, q = field.trace_tangent(X, nbrs, 0.3, probes)
        test_utils.assert_close(F2, F, 1e-12)
        for c in range(nbrs.n_components):
            mask = rows == c
            expected = np.mean([e.ravel()[mask] @ jac[np.ix_(mask, mask)] @ e.ravel()[mask]
                                for e in probes])
            self.assertAlmostEqual(float(q[c, 0]), float(expected), places=10)
        print("✅ Forward-mode trace tangents equal eps^T J eps per component")

    def test_trace_tangent_vjp(self):
        """Cotangent of <q_bar, q> w.r.t. X against central differences"""
        rng = test_utils.rng(9)
        field = test_utils.small_field(rng, dim=1)
        nbrs = test_utils.path_neighborhoods(4)
        X = rng.standard_normal((4, 1))
        eps = [rng.choice([-1.0, 1.0], size=X.shape)]
        q_bar = np.array([[1.5]])
        x_bar, _ = field.trace_tangent_vjp(X, nbrs, 0.0, eps, None, q_bar)
        h = 1e-6
        for i in range(4):
            bump = np.zeros_like(X)
            bump[i, 0] = h
            upper = field.trace_tangent(X + bump, nbrs, 0.0, eps)[1][0, 0]
            lower = field.trace_tangent(X - bump, nbrs, 0.0, eps)[1][0, 0]
            self.assertAlmostEqual(float(x_bar[i, 0]), 1.5 * (upper - lower) / (2 * h), places=6)
        print("✅ trace_tangent_vjp differentiates the trace estimate")

    def test_edge_type_and_config_errors(self):
        field = DynamicsField.create(2, hidden=4, n_edge_types=1)
        with self.assertRaises(GraphError):
            field.evaluate(np.zeros((4, 2)), grid_neighborhoods(2, 2), 0.0)
        with self.assertRaises(ConfigError):
            DynamicsField.create(2, aggregator='max')
        print("✅ Unknown edge types and aggregators are rejected")

    def test_tape_cache_is_bounded(self):
        field = DynamicsField.create(1, hidden=2)
        field.cache_size = 3
        for n in range(2, 8):
            field.evaluate(np.zeros((n, 1)), test_utils.path_neighborhoods(n), 0.0)
        self.assertEqual(len(field._tapes), 3)
        print("✅ Tape cache evicts least recently used entries")

    def test_isolated_variables(self):
        field = test_utils.small_field(test_utils.rng(10), dim=2)
        nbrs = Neighborhoods([[], []], 1)
        X = test_utils.rng(11).standard_normal((2, 2))
        test_utils.assert_close(field.evaluate(X, nbrs, 0.0), _reference_field(field, X, nbrs, 0.0),
                                1e-12)
        print("✅ Variables without neighbours use the unary term only")


def run_dynamics_tests():
    """Run all dynamics tests"""
    suite = unittest.TestLoader().loadTestsFromTestCase(TestDynamicsField)
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    return result.wasSuccessful()


if __name__ == '__main__':
    success = run_dynamics_tests()
    if success:
        print("\n🎉 All dynamics tests passed!")
    else:
        print("\n❌ Some dynamics tests failed!")
    sys.exit(0 if success else 1)
