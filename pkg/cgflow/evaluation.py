"""
Graph statistics and MMD evaluation

Degree, clustering-coefficient and 4-node orbit histograms per graph, a
biased Gaussian-kernel MMD between sets of histograms, and the sampling
protocol that compares generated graphs with a test set.
"""

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from tabulate import tabulate

from .errors import ConfigError, OrbitBudgetError
from .graphdata import (
    Graph,
    TypedGraph,
    batch_union,
    decode_graph,
    line_graph_of_complete,
    requantize,
)
from .logger import get_logger

logger = get_logger("evaluation")

STAT_KINDS = ('degree', 'clustering', 'orbit')
ORBIT_LIMIT = 30
ORBIT_IDS = tuple(range(4, 15))


@dataclass
class StatDistribution:
    """Normalized per-graph histogram of one statistic (empty for an empty graph)"""
    kind: str
    hist: np.ndarray

    def as_dict(self) -> Dict[int, float]:
        return {i: float(v) for i, v in enumerate(self.hist) if v}


@dataclass(frozen=True)
class MMDConfig:
    sigma: float = 1.0
    distance: str = 'tv'

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("MMD bandwidth sigma must be positive")
        if self.distance not in ('tv', 'w1'):
            raise ConfigError(f"unknown MMD ground distance '{self.distance}'")


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def degree_hist(g: Graph) -> StatDistribution:
    if g.n == 0:
        return StatDistribution('degree', np.zeros(0))
    counts = np.bincount(g.degrees())
    return StatDistribution('degree', counts / g.n)


def local_clustering(g: Graph) -> np.ndarray:
    """Triangles through each node over its possible wedge closures (0 below degree 2)"""
    adj = g.adjacency().astype(np.float64)
    degrees = adj.sum(axis=1)
    triangles = np.einsum('ij,jk,ki->i', adj, adj, adj) / 2.0
    wedges = degrees * (degrees - 1.0) / 2.0
    return np.divide(triangles, wedges, out=np.zeros_like(triangles), where=wedges > 0)


def clustering_hist(g: Graph, bins: int = 100) -> StatDistribution:
    if bins < 1:
        raise ConfigError("clustering histogram needs at least one bin")
    if g.n == 0:
        return StatDistribution('clustering', np.zeros(0))
    counts, _ = np.histogram(local_clustering(g), bins=bins, range=(0.0, 1.0))
    return StatDistribution('clustering', counts / g.n)


# (edge count, sorted induced degrees) -> {induced degree: orbit id}
_GRAPHLETS = {
    (3, (1, 1, 2, 2)): {1: 4, 2: 5},            # path
    (3, (1, 1, 1, 3)): {1: 6, 3: 7},            # star
    (4, (2, 2, 2, 2)): {2: 8},                  # cycle
    (4, (1, 2, 2, 3)): {1: 9, 2: 10, 3: 11},    # triangle with pendant
    (5, (2, 2, 3, 3)): {2: 12, 3: 13},          # diamond
    (6, (3, 3, 3, 3)): {3: 14},                 # complete
}


def orbit4_node_counts(g: Graph) -> np.ndarray:
    """
    n x 11 matrix: how often each node occupies orbits 4..14 of the connected
    4-node induced subgraphs, by exhaustive enumeration of all 4-subsets.
    """
    if g.n > ORBIT_LIMIT:
        raise OrbitBudgetError(f"orbit counting enumerates C(n,4) subsets and is limited to "
                               f"n <= {ORBIT_LIMIT} (got n={g.n}); subsample the graph instead")
    counts = np.zeros((g.n, len(ORBIT_IDS)), dtype=np.int64)
    if g.n < 4:
        return counts
    adj = g.adjacency().astype(np.int64)
    subsets = np.array(list(combinations(range(g.n), 4)), dtype=np.int64)
    sub = adj[subsets[:, :, None], subsets[:, None, :]]
    degrees = sub.sum(axis=2)
    edges = degrees.sum(axis=1) // 2
    signature = np.sort(degrees, axis=1)
    for (n_edges, degs), orbit_of in _GRAPHLETS.items():
        mask = (edges == n_edges) & np.all(signature == degs, axis=1)
        if not mask.any():
            continue
        nodes, local = subsets[mask], degrees[mask]
        for degree, orbit in orbit_of.items():
            np.add.at(counts[:, orbit - ORBIT_IDS[0]], nodes[local == degree], 1)
    return counts


def orbit4_counts(g: Graph) -> StatDistribution:
    """Per-orbit totals over all nodes, normalized (empty when no connected 4-subset exists)"""
    totals = orbit4_node_counts(g).sum(axis=0).astype(np.float64)
    if totals.sum() == 0:
        return StatDistribution('orbit', np.zeros(0))
    return StatDistribution('orbit', totals / totals.sum())


_STATISTICS = {
    'degree': degree_hist,
    'clustering': clustering_hist,
    'orbit': orbit4_counts,
}


def graph_statistics(graphs: Sequence[Graph], kind: str) -> List[StatDistribution]:
    if kind not in _STATISTICS:
        raise ConfigError(f"unknown statistic '{kind}' (choose from {', '.join(STAT_KINDS)})")
    return [_STATISTICS[kind](g) for g in graphs]


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------

def _stack(dists: Sequence[StatDistribution], width: int) -> np.ndarray:
    out = np.zeros((len(dists), width))
    for row, dist in enumerate(dists):
        out[row, :dist.hist.size] = dist.hist
    return out


def mmd(set_a: Sequence[StatDistribution], set_b: Sequence[StatDistribution],
        cfg: Optional[MMDConfig] = None) -> float:
    """
    Biased squared MMD with k(p, q) = exp(-d(p, q)^2 / (2 sigma^2)); histograms
    are zero-padded to a common support first.
    """
    cfg = cfg or MMDConfig()
    if not set_a or not set_b:
        raise ConfigError("MMD needs two non-empty sets")
    width = max(1, max(d.hist.size for d in list(set_a) + list(set_b)))
    A, B = _stack(set_a, width), _stack(set_b, width)
    if cfg.distance == 'w1':
        A, B = np.cumsum(A, axis=1), np.cumsum(B, axis=1)
        scale = 1.0
    else:
        scale = 0.5

    def kernel(P, Q):
        d = cdist(P, Q, 'cityblock') * scale
        return np.exp(-d * d / (2.0 * cfg.sigma ** 2))

    value = kernel(A, A).mean() + kernel(B, B).mean() - 2.0 * kernel(A, B).mean()
    return max(0.0, float(value))


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    metrics: Dict[str, float]
    n_generated: int
    seed: Optional[int] = None
    summary: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        out = {f"{kind}_mmd": value for kind, value in self.metrics.items()}
        out.update({'n_generated': self.n_generated, 'seed': self.seed})
        if self.summary:
            out['summary'] = self.summary
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n'

    def to_table(self) -> str:
        rows = [(f"{kind} MMD", f"{value:.6f}") for kind, value in self.metrics.items()]
        rows += [(name, f"{value:.4g}") for name, value in self.summary.items()]
        return tabulate(rows, headers=["metric", "value"])


def summarize_graphs(graphs: Sequence[Graph]) -> Dict[str, float]:
    """Mean node count, edge count, degree and connected fraction of a graph set"""
    frame = pd.DataFrame({
        'nodes': [g.n for g in graphs],
        'edges': [g.num_edges for g in graphs],
        'degree': [2.0 * g.num_edges / g.n if g.n else 0.0 for g in graphs],
        'connected': [float(g.is_connected()) for g in graphs],
    })
    return {f"mean_{column}": float(value) for column, value in frame.mean().items()}


def compare_graph_sets(reference: Sequence[Graph], generated: Sequence[Graph],
                       metrics: Sequence[str] = STAT_KINDS,
                       cfg: Optional[MMDConfig] = None) -> Dict[str, float]:
    if not reference or not generated:
        raise ConfigError("both graph sets must be non-empty")
    out = {}
    for kind in metrics:
        out[kind] = mmd(graph_statistics(reference, kind), graph_statistics(generated, kind), cfg)
        logger.info(f"{kind} MMD: {out[kind]:.6f}")
    return out


def generate_graphs(model, sizes: Sequence[int], rng: np.random.Generator,
                    batch_size: int = 32, solver=None) -> List[Graph]:
    """
    Sample one graph per requested node count: base draws are transported
    over the line-graph template (batched as disjoint unions), requantized
    and decoded.
    """
    graphs: List[Graph] = []
    for start in range(0, len(sizes), batch_size):
        chunk = [int(n) for n in sizes[start:start + batch_size]]
        templates = [TypedGraph(np.zeros((line_graph_of_complete(n).num_variables, model.m)),
                                line_graph_of_complete(n).nbrs) for n in chunk]
        union = batch_union(templates)
        states = model.sample(union.n, union.nbrs, rng, solver)
        offset = 0
        for template in templates:
            rows = states[offset:offset + template.n]
            offset += template.n
            graphs.append(decode_graph(requantize(rows[:, :1])))
        logger.debug(f"sampled {len(graphs)}/{len(sizes)} graphs")
    return graphs


def evaluate_protocol(model, test_set: Sequence[Graph], n_generate: int,
                      rng: np.random.Generator, metrics: Sequence[str] = STAT_KINDS,
                      cfg: Optional[MMDConfig] = None, seed: Optional[int] = None,
                      batch_size: int = 32) -> MetricsReport:
    """
    Generate n_generate graphs whose sizes are drawn from the test-set size
    distribution and report the MMD of every requested statistic.
    """
    if n_generate < len(test_set):
        raise ConfigError(f"n_generate ({n_generate}) must be >= the test-set size "
                          f"({len(test_set)})")
    sizes = rng.choice(np.array([g.n for g in test_set]), size=n_generate)
    generated = generate_graphs(model, sizes, rng, batch_size)
    values = compare_graph_sets(test_set, generated, metrics, cfg)
    return MetricsReport(values, n_generate, seed, summarize_graphs(generated))
