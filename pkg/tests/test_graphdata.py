#!/usr/bin/env python3
"""
Test graphs, neighbourhoods, the line-graph encoding, dequantization,
dataset samplers and graph I/O
"""

import json
import math
import sys
import unittest
from math import comb
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.integrate import quad
from scipy.special import log_expit
from scipy.stats import norm

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))
from tests.conftest import test_utils

from cgflow.errors import DequantError, GraphError, GraphFormatError
from cgflow.graphdata import (
    DequantConfig,
    Graph,
    Neighborhoods,
    TypedGraph,
    batch_union,
    community_small_sampler,
    decode_graph,
    dequant_grad,
    dequantize,
    draw_dequantization,
    ego_small_sampler,
    encode_graph,
    filter_by_sizes,
    grid_neighborhoods,
    line_graph_of_complete,
    make_dataset,
    parse_size_spec,
    read_graphs,
    requantize,
    split_dataset,
    to_dot,
    toy_gaussian_dataset,
    write_dot,
    write_graphs,
)


class TestGraphs(unittest.TestCase):
    """Graph canonicalisation and neighbourhood structure"""

    def test_canonical_edges(self):
        g = Graph.from_edges(4, [(2, 1), (0, 3), (1, 2)])
        self.assertEqual(g.edges, ((0, 3), (1, 2)))
        with self.assertRaises(GraphError):
            Graph(3, ((0, 0),))
        with self.assertRaises(GraphError):
            Graph(3, ((0, 3),))
        print("✅ Edges are canonical; self-loops and out-of-range edges rejected")

    def test_neighborhood_arrays_and_union(self):
        path = test_utils.path_neighborhoods(3)
        union = Neighborhoods.union([path, path])
        self.assertEqual(union.n, 6)
        self.assertEqual(union.n_components, 2)
        self.assertEqual(list(union.components), [0, 0, 0, 1, 1, 1])
        self.assertEqual(list(union.degree()), [1, 2, 1, 1, 2, 1])
        self.assertEqual(union.lists[4], ((3, 0), (5, 0)))
        print("✅ Disjoint unions offset neighbours and tag components")

    def test_induced_and_permuted(self):
        path = test_utils.path_neighborhoods(4)
        sub = path.induced([2, 1])
        self.assertEqual(sub.lists, (((1, 0),), ((0, 0),)))
        perm = path.permuted([3, 2, 1, 0])
        self.assertEqual(perm.lists[3], ((2, 0),))
        print("✅ induced() and permuted() relabel neighbourhoods")

    def test_grid_edge_types(self):
        grid = grid_neighborhoods(2, 2)
        self.assertEqual(grid.edge_type_count, 4)
        self.assertEqual(grid.lists[0], ((1, 1), (2, 3)))
        self.assertEqual(grid.lists[3], ((2, 0), (1, 2)))
        print("✅ Grid neighbourhoods carry left/right/up/down types")

    def test_batch_union_requires_same_width(self):
        a = TypedGraph(np.zeros((3, 1)), test_utils.path_neighborhoods(3))
        b = TypedGraph(np.zeros((2, 2)), test_utils.path_neighborhoods(2))
        with self.assertRaises(GraphError):
            batch_union([a, b])
        print("✅ batch_union rejects mixed state widths")


class TestLineGraphEncoding(unittest.TestCase):

    def test_template_matches_networkx_line_graph(self):
        """Variables of K_n's line graph are adjacent iff their edges share an endpoint"""
        for n in range(2, 7):
            template = line_graph_of_complete(n)
            self.assertEqual(template.num_variables, comb(n, 2))
            reference = nx.line_graph(nx.complete_graph(n))
            for i, pair in enumerate(template.pairs):
                ours = {template.pairs[j] for j, _ in template.nbrs.lists[i]}
                theirs = {tuple(sorted(e)) for e in reference.neighbors(pair)}
                self.assertEqual(ours, theirs)
                self.assertEqual(len(ours), 2 * (n - 2))
        print("✅ Line-graph template agrees with networkx for n = 2..6")

    def test_neighbourhood_sizes_and_no_self_loops(self):
        """Each potential edge neighbours the 2(n-2) others sharing an endpoint, never itself"""
        self.assertEqual(len(line_graph_of_complete(2).nbrs.lists[0]), 0)
        for n in (3, 4, 7, 12):
            lists = line_graph_of_complete(n).nbrs.lists
            for i, nbrs in enumerate(lists):
                ids = [j for j, _ in nbrs]
                self.assertNotIn(i, ids)
                self.assertEqual(len(ids), len(set(ids)))
                self.assertEqual(len(ids), 2 * (n - 2))
        self.assertEqual([sorted(j for j, _ in nbrs)
                          for nbrs in line_graph_of_complete(3).nbrs.lists],
                         [[1, 2], [0, 2], [0, 1]])
        print("✅ Line-graph neighbourhoods have 2(n-2) members and exclude the variable itself")

    def test_encode_decode_round_trip(self):
        rng = test_utils.rng(4)
        for _ in range(100):
            n = int(rng.integers(4, 21))
            g = test_utils.random_graph(rng, n, float(rng.uniform(0.1, 0.9)))
            states = encode_graph(g)
            self.assertEqual(states.shape, (comb(n, 2), 1))
            self.assertEqual(decode_graph(states), g)
        self.assertEqual(decode_graph(encode_graph(Graph.from_edges(2, [(0, 1)]))),
                         Graph.from_edges(2, [(0, 1)]))
        print("✅ encode/decode round-trips 100 random graphs with 4-20 nodes")

    def test_decode_rejects_non_triangular_counts(self):
        with self.assertRaises(GraphError):
            decode_graph(np.zeros((4, 1)))
        print("✅ decode rejects state counts that are not C(n,2)")

    def test_requantize(self):
        test_utils.assert_close(requantize(np.array([[-0.3], [0.2], [1.7], [2.4]])),
                                [[0.0], [0.0], [1.0], [1.0]], 0.0)
        print("✅ requantize floors and clips to {0, 1}")


class TestDequantization(unittest.TestCase):

    def test_uniform_stays_in_open_unit_interval(self):
        states = np.array([[0.0], [1.0], [1.0], [0.0]] * 50)
        out, corr = dequantize(states, DequantConfig('uniform'), test_utils.rng(0))
        noise = out - states
        self.assertTrue(np.all((noise > 0.0) & (noise < 1.0)))
        self.assertEqual(corr, 0.0)
        test_utils.assert_close(requantize(out), states, 0.0)
        print("✅ Uniform dequantization keeps noise in (0, 1)")

    def test_rejects_non_binary(self):
        with self.assertRaises(DequantError):
            dequantize(np.array([[0.5]]), DequantConfig('uniform'), test_utils.rng(0))
        with self.assertRaises(DequantError):
            DequantConfig('gaussian')
        print("✅ Non-binary states and unknown modes raise DequantError")

    def test_variational_gradient_matches_finite_differences(self):
        states = np.array([[0.0], [1.0], [1.0]])
        cotangent = np.array([[0.3], [-1.2], [0.7]])
        weight = 0.4

        def objective(mean, log_std):
            sample = draw_dequantization(states, DequantConfig('variational', mean, log_std),
                                         test_utils.rng(9))
            return float(np.sum(cotangent * sample.states)) + weight * sample.correction

        cfg = DequantConfig('variational', 0.2, -0.5)
        sample = draw_dequantization(states, cfg, test_utils.rng(9))
        g_mean, g_log_std = dequant_grad(sample, cfg, cotangent, weight)
        h = 1e-6
        num_mean = (objective(0.2 + h, -0.5) - objective(0.2 - h, -0.5)) / (2 * h)
        num_log_std = (objective(0.2, -0.5 + h) - objective(0.2, -0.5 - h)) / (2 * h)
        self.assertAlmostEqual(g_mean, num_mean, places=6)
        self.assertAlmostEqual(g_log_std, num_log_std, places=6)
        print("✅ Variational dequantization gradients match finite differences")

    def test_variational_correction_matches_quadrature(self):
        """Mean correction per state equals E[log q(v) - log sigmoid'(v)] for v ~ N(0, 1)"""
        def integrand(v):
            return norm.pdf(v) * (norm.logpdf(v) - log_expit(v) - log_expit(-v))

        expected, _ = quad(integrand, -np.inf, np.inf)
        cfg = DequantConfig('variational', 0.0, 0.0)
        rng = test_utils.rng(11)
        states = np.tile([[0.0], [1.0]], (50, 1))
        # 1000 draws of 100 states: 10^5 noise values in all
        totals = np.array([draw_dequantization(states, cfg, rng).correction for _ in range(1000)])
        per_state = totals / states.size
        stderr = per_state.std(ddof=1) / math.sqrt(per_state.size)
        self.assertLessEqual(abs(per_state.mean() - expected), 3 * stderr)
        print(f"✅ Variational correction {per_state.mean():.4f} matches {expected:.4f}")


class TestDatasets(unittest.TestCase):

    def test_expected_edge_counts(self):
        """Mean edge counts over 10^4 draws are within 2% of the construction's expectation"""
        rng = test_utils.rng(12)
        community = np.mean([community_small_sampler(rng, (16, 16)).num_edges
                             for _ in range(10_000)])
        # two halves of 8 at p=0.7 plus ceil(0.05 * 16) bridges
        self.assertAlmostEqual(community / (2 * comb(8, 2) * 0.7 + 1), 1.0, delta=0.02)
        ego = np.mean([ego_small_sampler(rng, (10, 10)).num_edges for _ in range(10_000)])
        self.assertAlmostEqual(ego / (9 + 0.3 * comb(9, 2)), 1.0, delta=0.02)
        print(f"✅ Mean edge counts {community:.2f} (community) and {ego:.2f} (ego) as expected")

    def test_community_small_structure(self):
        rng = test_utils.rng(2)
        for _ in range(10):
            g = community_small_sampler(rng, (12, 16))
            self.assertTrue(12 <= g.n <= 16)
            self.assertTrue(g.is_connected())
            half = g.n // 2
            bridges = [e for e in g.edges if (e[0] < half) != (e[1] < half)]
            self.assertEqual(len(bridges), int(np.ceil(0.05 * g.n)))
        print("✅ community-small graphs are connected two-community graphs")

    def test_ego_small_structure(self):
        rng = test_utils.rng(3)
        for _ in range(10):
            g = ego_small_sampler(rng)
            self.assertTrue(4 <= g.n <= 18)
            self.assertEqual(int(g.degrees()[0]), g.n - 1)
        print("✅ ego-small graphs have a hub adjacent to every node")

    def test_sampler_range_envelope(self):
        with self.assertRaises(GraphError):
            community_small_sampler(test_utils.rng(0), (10, 14))
        with self.assertRaises(GraphError):
            make_dataset('barabasi', 5, 0)
        print("✅ Size ranges outside the generator envelope are rejected")

    def test_split_is_seeded(self):
        graphs = make_dataset('community-small', 20, seed=7, n_range=(12, 13))
        first = split_dataset(graphs, 7)
        second = split_dataset(make_dataset('community-small', 20, seed=7, n_range=(12, 13)), 7)
        self.assertEqual([len(s) for s in first], [16, 2, 2])
        self.assertEqual(first, second)
        print("✅ Dataset generation and splits are deterministic")

    def test_toy_gaussian_dataset(self):
        data = toy_gaussian_dataset(4000, 0.8, seed=1)
        draws = np.array([g.states[:, 0] for g in data])
        self.assertAlmostEqual(float(np.corrcoef(draws.T)[0, 1]), 0.8, delta=0.03)
        self.assertEqual(data[0].nbrs.lists, (((1, 0),), ((0, 0),)))
        print("✅ Toy Gaussian samples have the requested correlation")

    def test_size_filters(self):
        graphs = [Graph(n) for n in range(10, 18)]
        self.assertEqual([g.n for g in filter_by_sizes(graphs, '12-14')], [12, 13, 14])
        self.assertEqual([g.n for g in filter_by_sizes(graphs, 'odd')], [11, 13, 15, 17])
        self.assertEqual([g.n for g in filter_by_sizes(graphs, '10,15-16')], [10, 15, 16])
        self.assertEqual(len(filter_by_sizes(graphs, None)), 8)
        self.assertTrue(parse_size_spec('even')(12))
        with self.assertRaises(GraphError):
            parse_size_spec('small')
        print("✅ Size filters cover ranges, lists and parity")


class TestGraphIO(unittest.TestCase):

    def test_jsonl_round_trip_is_canonical(self):
        tmp = test_utils.temp_dir()
        graphs = [Graph.from_edges(3, [(2, 0), (1, 0)]), Graph(1)]
        write_graphs(tmp / 'g.jsonl', graphs)
        text = (tmp / 'g.jsonl').read_text(encoding='utf-8')
        self.assertEqual(text, '{"n":3,"edges":[[0,1],[0,2]]}\n{"n":1,"edges":[]}\n')
        self.assertEqual(read_graphs(tmp / 'g.jsonl'), graphs)
        print("✅ Graph JSONL is compact and canonical")

    def test_malformed_line_reports_line_number(self):
        tmp = test_utils.temp_dir()
        (tmp / 'bad.jsonl').write_text('{"n":2,"edges":[[0,1]]}\n{"n":2,"edges":[[0,2]]}\n',
                                       encoding='utf-8')
        with self.assertRaises(GraphFormatError) as ctx:
            read_graphs(tmp / 'bad.jsonl')
        self.assertEqual(ctx.exception.line_number, 2)
        (tmp / 'bad2.jsonl').write_text('not json\n', encoding='utf-8')
        with self.assertRaises(GraphFormatError):
            read_graphs(tmp / 'bad2.jsonl')
        print("✅ Malformed JSONL raises GraphFormatError with the line number")

    def test_booleans_are_not_node_ids(self):
        tmp = test_utils.temp_dir()
        for name, line in (('n.jsonl', '{"n":true,"edges":[]}'),
                           ('edge.jsonl', '{"n":3,"edges":[[false,true]]}')):
            (tmp / name).write_text('{"n":2,"edges":[[0,1]]}\n' + line + '\n', encoding='utf-8')
            with self.assertRaises(GraphFormatError, msg=name) as ctx:
                read_graphs(tmp / name)
            self.assertEqual(ctx.exception.line_number, 2)
        print("✅ JSON booleans are rejected as node counts and endpoints")

    def test_dot_output(self):
        g = Graph.from_edges(3, [(0, 1), (1, 2)])
        self.assertEqual(to_dot(g), "graph G {\n  0;\n  1;\n  2;\n  0 -- 1;\n  1 -- 2;\n}\n")
        tmp = test_utils.temp_dir()
        write_dot(g, tmp / 'g.dot', name='sample_0')
        text = (tmp / 'g.dot').read_text(encoding='utf-8')
        self.assertTrue(text.startswith('graph sample_0 {'))
        edges = {tuple(sorted(map(int, line.strip(' ;').split(' -- '))))
                 for line in text.splitlines() if '--' in line}
        self.assertEqual(edges, set(g.edges))
        print("✅ DOT output lists every node and edge")


def run_graphdata_tests():
    """Run all graphdata tests"""
    suite = unittest.TestSuite()
    for case in (TestGraphs, TestLineGraphEncoding, TestDequantization, TestDatasets,
                 TestGraphIO):
        suite.addTests(unittest.TestLoader().loadTestsFromTestCase(case))
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    return result.wasSuccessful()


if __name__ == '__main__':
    success = run_graphdata_tests()
    if success:
        print("\n🎉 All graphdata tests passed!")
    else:
        print("\n❌ Some graphdata tests failed!")
    sys.exit(0 if success else 1)
