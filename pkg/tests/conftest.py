"""
Test configuration and shared helpers for the cgflow tests
"""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np

# Add project root to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from cgflow.config import ModelSpec, SolverSpec
from cgflow.dynamics import DynamicsField
from cgflow.flow import FlowModel
from cgflow.graphdata import Graph, Neighborhoods


class TestUtils:
    """Utility functions for testing"""

    @staticmethod
    def rng(seed: int = 0) -> np.random.Generator:
        return np.random.default_rng(seed)

    @staticmethod
    def random_graph(rng: np.random.Generator, n: int, p: float = 0.4) -> Graph:
        """Erdos-Renyi G(n, p)"""
        edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
        return Graph.from_edges(n, edges)

    @staticmethod
    def path_neighborhoods(n: int) -> Neighborhoods:
        """Undirected path 0 - 1 - ... - (n-1), one edge type"""
        lists = [[(j, 0) for j in (i - 1, i + 1) if 0 <= j < n] for i in range(n)]
        return Neighborhoods(lists, 1)

    @staticmethod
    def small_field(rng=None, dim: int = 2, hidden: int = 8, n_edge_types: int = 1,
                    aggregator: str = 'sum', scale: float = 0.5) -> DynamicsField:
        """A dynamics field with O(1) random parameters (not the small default init)"""
        field = DynamicsField.create(dim, hidden, n_edge_types, aggregator=aggregator,
                                     rng=rng if rng is not None else np.random.default_rng(0))
        TestUtils.randomize(field.params, rng if rng is not None else np.random.default_rng(1),
                            scale)
        return field

    @staticmethod
    def randomize(params, rng: np.random.Generator, scale: float = 0.5):
        for name, value in list(params.items()):
            params.set(name, scale * rng.standard_normal(value.shape))

    @staticmethod
    def small_model(rng=None, scale: float = 0.3, **spec) -> FlowModel:
        """Random-parameter model; keyword arguments override the ModelSpec"""
        settings = dict(m=1, blocks=2, hidden=8, layers=2, dequant='none')
        settings.update(spec)
        solver = SolverSpec(train_steps=6)
        rng = rng if rng is not None else np.random.default_rng(0)
        model = FlowModel.from_spec(ModelSpec(**settings), rng, solver)
        TestUtils.randomize(model.params, rng, scale)
        return model

    @staticmethod
    def temp_dir() -> Path:
        return Path(tempfile.mkdtemp(prefix='cgflow_test_'))

    @staticmethod
    def save_test_output(text: str, test_name: str) -> str:
        """Save test output to file for inspection"""
        output_dir = Path(__file__).parent / "outputs"
        output_dir.mkdir(exist_ok=True)

        output_file = output_dir / f"{test_name}_output.txt"
        with open(output_file, 'w', encoding='utf-8') as f:
            f.write(text)

        return str(output_file)

    @staticmethod
    def assert_close(actual, expected, tol: float, message: str = "Values differ"):
        """Assert max |actual - expected| <= tol"""
        err = float(np.max(np.abs(np.asarray(actual, dtype=float) - np.asarray(expected, dtype=float))))
        assert err <= tol, f"{message}: max error {err:.3e} > {tol:.1e}"


# Global test utilities instance
test_utils = TestUtils()
