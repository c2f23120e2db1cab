"""
Graph and dataset model

Graphs, typed neighbourhoods, the line-graph-of-K_n encoding used for graph
generation, dequantization of binary states, synthetic dataset samplers and
JSONL / DOT I/O.
"""

import json
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from .errors import DequantError, GraphError, GraphFormatError, SamplerExhaustedError
from .logger import get_logger

logger = get_logger("graphdata")

Edge = Tuple[int, int]
SizeRange = Tuple[int, int]


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph; edges are stored canonically (u < v, sorted)"""
    n: int
    edges: Tuple[Edge, ...] = ()

    def __post_init__(self):
        if self.n < 0:
            raise GraphError(f"node count must be non-negative, got {self.n}")
        canonical = []
        for edge in self.edges:
            u, v = int(edge[0]), int(edge[1])
            if u == v:
                raise GraphError(f"self-loop on node {u}")
            if u > v:
                u, v = v, u
            if u < 0 or v >= self.n:
                raise GraphError(f"edge ({u}, {v}) out of range for n={self.n}")
            canonical.append((u, v))
        canonical.sort()
        if any(a == b for a, b in zip(canonical, canonical[1:])):
            raise GraphError("duplicate edge")
        object.__setattr__(self, 'edges', tuple(canonical))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]]) -> 'Graph':
        """Build a graph, normalising orientation and dropping duplicate pairs"""
        unique = {(min(int(u), int(v)), max(int(u), int(v))) for u, v in edges}
        return cls(n, tuple(unique))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n), dtype=bool)
        if self.edges:
            idx = np.asarray(self.edges)
            adj[idx[:, 0], idx[:, 1]] = True
            adj[idx[:, 1], idx[:, 0]] = True
        return adj

    def degrees(self) -> np.ndarray:
        return self.adjacency().sum(axis=1).astype(np.int64)

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        adj = self.adjacency()
        seen = np.zeros(self.n, dtype=bool)
        frontier = [0]
        seen[0] = True
        while frontier:
            node = frontier.pop()
            for nxt in np.flatnonzero(adj[node] & ~seen):
                seen[nxt] = True
                frontier.append(int(nxt))
        return bool(seen.all())

    def relabel(self, perm: Sequence[int]) -> 'Graph':
        """Node i becomes perm[i]"""
        return Graph.from_edges(self.n, ((perm[u], perm[v]) for u, v in self.edges))

    def to_dict(self) -> Dict:
        return {"n": self.n, "edges": [list(e) for e in self.edges]}


class Neighborhoods:
    """
    Typed directed neighbourhoods S(i) over n variables.

    Each list holds (j, edge_type) pairs in a fixed order. Instances compare and
    hash by identity so they can key tape caches cheaply.
    """

    def __init__(self, lists: Sequence[Sequence[Tuple[int, int]]], edge_type_count: int = 1,
                 components: Optional[Sequence[int]] = None):
        if edge_type_count < 1:
            raise GraphError("edge_type_count must be >= 1")
        self.lists: Tuple[Tuple[Tuple[int, int], ...], ...] = tuple(
            tuple((int(j), int(k)) for j, k in nbrs) for nbrs in lists)
        self.edge_type_count = int(edge_type_count)
        n = len(self.lists)
        for i, nbrs in enumerate(self.lists):
            for j, k in nbrs:
                if not 0 <= j < n:
                    raise GraphError(f"neighbour {j} of variable {i} out of range (n={n})")
                if not 0 <= k < self.edge_type_count:
                    raise GraphError(f"edge type {k} of variable {i} out of range")

        pairs = [(i, j, k) for i, nbrs in enumerate(self.lists) for j, k in nbrs]
        arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
        self.receivers = arr[:, 0].copy()
        self.senders = arr[:, 1].copy()
        self.types = arr[:, 2].copy()

        if components is None:
            self.components = np.zeros(n, dtype=np.int64)
        else:
            self.components = np.asarray(components, dtype=np.int64)
            if self.components.shape != (n,):
                raise GraphError("one component id per variable is required")
        self.n_components = int(self.components.max()) + 1 if n else 0

    @property
    def n(self) -> int:
        return len(self.lists)

    @property
    def num_pairs(self) -> int:
        return int(self.receivers.size)

    def degree(self) -> np.ndarray:
        return np.bincount(self.receivers, minlength=self.n)

    def induced(self, indices: Sequence[int]) -> 'Neighborhoods':
        """Neighbourhoods restricted to `indices`, relabelled in the given order"""
        position = {int(v): p for p, v in enumerate(indices)}
        if len(position) != len(indices):
            raise GraphError("induced subgraph indices must be distinct")
        lists = [[(position[j], k) for j, k in self.lists[int(v)] if j in position]
                 for v in indices]
        return Neighborhoods(lists, self.edge_type_count,
                             self.components[np.asarray(indices, dtype=np.int64)]
                             if len(indices) else None)

    def permuted(self, perm: Sequence[int]) -> 'Neighborhoods':
        """Relabel variable i as perm[i]; each list keeps its order"""
        lists: List[List[Tuple[int, int]]] = [[] for _ in range(self.n)]
        components = np.zeros(self.n, dtype=np.int64)
        for i, nbrs in enumerate(self.lists):
            lists[perm[i]] = [(perm[j], k) for j, k in nbrs]
            components[perm[i]] = self.components[i]
        return Neighborhoods(lists, self.edge_type_count, components)

    @staticmethod
    def union(parts: Sequence['Neighborhoods']) -> 'Neighborhoods':
        """Disjoint union; component ids identify the part each variable came from"""
        if not parts:
            raise GraphError("cannot build the union of zero neighbourhoods")
        lists, components, offset = [], [], 0
        types = max(p.edge_type_count for p in parts)
        for index, part in enumerate(parts):
            lists.extend([(j + offset, k) for j, k in nbrs] for nbrs in part.lists)
            components.extend([index] * part.n)
            offset += part.n
        return Neighborhoods(lists, types, components)


@dataclass
class TypedGraph:
    """Node-state matrix (n x m) plus the neighbourhoods the flow passes messages over"""
    states: np.ndarray
    nbrs: Neighborhoods

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] != self.nbrs.n:
            raise GraphError(
                f"states shape {self.states.shape} does not match {self.nbrs.n} variables")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def m(self) -> int:
        return self.states.shape[1]


def batch_union(graphs: Sequence[TypedGraph]) -> TypedGraph:
    """Stack a batch of typed graphs into one disjoint union (no padding)"""
    if len({g.m for g in graphs}) != 1:
        raise GraphError("all graphs in a batch must share the state dimension")
    states = np.vstack([g.states for g in graphs])
    return TypedGraph(states, Neighborhoods.union([g.nbrs for g in graphs]))


# ---------------------------------------------------------------------------
# Line graph of K_n: one variable per potential edge
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LineGraphTemplate:
    n_nodes: int
    pairs: Tuple[Edge, ...]
    index: Dict[Edge, int] = field(repr=False)
    nbrs: Neighborhoods = field(repr=False)

    @property
    def num_variables(self) -> int:
        return len(self.pairs)


@lru_cache(maxsize=64)
def line_graph_of_complete(n: int) -> LineGraphTemplate:
    """
    Variables are the C(n,2) potential edges of K_n in lexicographic order;
    two variables are neighbours iff their edges share an endpoint.
    """
    if n < 2:
        raise GraphError(f"line graph template needs n >= 2, got {n}")
    pairs = tuple(combinations(range(n), 2))
    index = {pair: i for i, pair in enumerate(pairs)}
    incident: List[List[int]] = [[] for _ in range(n)]
    for i, (u, v) in enumerate(pairs):
        incident[u].append(i)
        incident[v].append(i)
    lists = []
    for i, (u, v) in enumerate(pairs):
        adjacent = sorted((set(incident[u]) | set(incident[v])) - {i})
        lists.append([(j, 0) for j in adjacent])
    return LineGraphTemplate(n, pairs, index, Neighborhoods(lists, 1))


def encode_graph(g: Graph) -> np.ndarray:
    """0/1 state per potential edge, canonical order, shape C(n,2) x 1"""
    template = line_graph_of_complete(g.n)
    states = np.zeros((template.num_variables, 1))
    for edge in g.edges:
        states[template.index[edge], 0] = 1.0
    return states


def _nodes_for_pairs(count: int) -> int:
    n = int(round((1 + math.sqrt(1 + 8 * count)) / 2))
    if n * (n - 1) // 2 != count:
        raise GraphError(f"{count} states is not C(n,2) for any n")
    return n


def decode_graph(states: np.ndarray, threshold: float = 0.5) -> Graph:
    """Threshold each potential-edge state and rebuild the graph"""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != 1:
        raise GraphError(f"decode expects C(n,2) x 1 states, got {states.shape}")
    template = line_graph_of_complete(_nodes_for_pairs(states.shape[0]))
    present = np.flatnonzero(states[:, 0] > threshold)
    return Graph(template.n_nodes, tuple(template.pairs[i] for i in present))


def encode_typed(g: Graph) -> TypedGraph:
    return TypedGraph(encode_graph(g), line_graph_of_complete(g.n).nbrs)


def requantize(states: np.ndarray) -> np.ndarray:
    """Map dequantized values back to {0, 1} (floor, clipped)"""
    return np.clip(np.floor(states), 0.0, 1.0)


def grid_neighborhoods(rows: int, cols: int) -> Neighborhoods:
    """Grid variables with four directed edge types: 0 left, 1 right, 2 up, 3 down"""
    if rows < 1 or cols < 1:
        raise GraphError("grid needs at least one row and column")
    lists = []
    for r in range(rows):
        for c in range(cols):
            nbrs = []
            if c > 0:
                nbrs.append((r * cols + c - 1, 0))
            if c < cols - 1:
                nbrs.append((r * cols + c + 1, 1))
            if r > 0:
                nbrs.append(((r - 1) * cols + c, 2))
            if r < rows - 1:
                nbrs.append(((r + 1) * cols + c, 3))
            lists.append(nbrs)
    return Neighborhoods(lists, edge_type_count=4)


# ---------------------------------------------------------------------------
# Dequantization
# ---------------------------------------------------------------------------

DEQUANT_MODES = ('uniform', 'variational')
_LOG_2PI = math.log(2.0 * math.pi)
_UNIT = 2.0 ** 53


@dataclass(frozen=True)
class DequantConfig:
    """uniform: u ~ U(0,1); variational: u = sigmoid(v), v ~ N(mean, exp(log_std)^2)"""
    mode: str = 'variational'
    mean: float = 0.0
    log_std: float = 0.0

    def __post_init__(self):
        if self.mode not in DEQUANT_MODES:
            raise DequantError(f"unknown dequantization mode '{self.mode}'")
        if not (math.isfinite(self.mean) and math.isfinite(self.log_std)):
            raise DequantError("dequantization mean/log_std must be finite")


@dataclass
class DequantSample:
    states: np.ndarray
    correction: float
    pre_sigmoid: Optional[np.ndarray] = None
    standard: Optional[np.ndarray] = None


def draw_dequantization(states: np.ndarray, cfg: DequantConfig,
                        rng: np.random.Generator) -> DequantSample:
    """Dequantize binary states and keep the noise needed for reparameterised gradients"""
    states = np.asarray(states, dtype=np.float64)
    if not np.all((states == 0.0) | (states == 1.0)):
        raise DequantError("dequantization expects states in {0, 1}")
    if cfg.mode == 'uniform':
        # integers in [1, 2^53) keep u strictly inside (0, 1)
        u = rng.integers(1, 2 ** 53, size=states.shape) / _UNIT
        return DequantSample(states + u, 0.0)

    standard = rng.standard_normal(states.shape)
    v = cfg.mean + math.exp(cfg.log_std) * standard
    u = np.clip(expit(v), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    log_q_v = -0.5 * standard ** 2 - cfg.log_std - 0.5 * _LOG_2PI
    log_sigmoid_jacobian = log_expit(v) + log_expit(-v)
    correction = float(np.sum(log_q_v - log_sigmoid_jacobian))
    return DequantSample(states + u, correction, v, standard)


def dequantize(states: np.ndarray, cfg: DequantConfig,
               rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """
    Returns (continuous states, correction) where the correction is log q(u)
    and must be subtracted from the model log-likelihood (ELBO).
    """
    sample = draw_dequantization(states, cfg, rng)
    return sample.states, sample.correction


def dequant_grad(sample: DequantSample, cfg: DequantConfig, states_bar: np.ndarray,
                 correction_weight: float = 1.0) -> Tuple[float, float]:
    """
    Gradient of (loss at the dequantized states + w * correction) w.r.t. (mean, log_std).

    states_bar is the loss gradient w.r.t. the dequantized states; the noise
    draws are held fixed (reparameterization).
    """
    if cfg.mode == 'uniform':
        return 0.0, 0.0
    v, standard = sample.pre_sigmoid, sample.standard
    sig = expit(v)
    dstate_dv = sig * (1.0 - sig)
    dcorr_dv = 2.0 * sig - 1.0
    dv_dlogstd = math.exp(cfg.log_std) * standard
    total_dv = states_bar * dstate_dv + correction_weight * dcorr_dv
    grad_mean = float(np.sum(total_dv))
    grad_log_std = float(np.sum(total_dv * dv_dlogstd)) - correction_weight * v.size
    return grad_mean, grad_log_std


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

COMMUNITY_RANGE: SizeRange = (12, 20)
EGO_RANGE: SizeRange = (4, 18)


def _check_range(n_range: SizeRange, envelope: SizeRange, name: str):
    lo, hi = n_range
    if lo > hi or lo < envelope[0] or hi > envelope[1]:
        raise GraphError(f"{name} size range {n_range} must lie within {envelope}")


def community_small_sampler(rng: np.random.Generator, n_range: SizeRange = COMMUNITY_RANGE,
                            p_intra: float = 0.7, inter_fraction: float = 0.05,
                            max_attempts: int = 50) -> Graph:
    """Two equal halves with dense intra-community edges and ceil(0.05 n) bridges"""
    _check_range(n_range, COMMUNITY_RANGE, 'community-small')
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    half = n // 2
    intra = [p for p in combinations(range(n), 2) if (p[0] < half) == (p[1] < half)]
    inter = [(u, v) for u in range(half) for v in range(half, n)]
    n_inter = math.ceil(inter_fraction * n)
    for attempt in range(max_attempts):
        keep = rng.random(len(intra)) < p_intra
        chosen = rng.choice(len(inter), size=n_inter, replace=False)
        edges = [e for e, k in zip(intra, keep) if k] + [inter[i] for i in chosen]
        graph = Graph.from_edges(n, edges)
        if graph.is_connected():
            return graph
        logger.debug(f"community-small: attempt {attempt + 1} disconnected, resampling")
    raise SamplerExhaustedError(f"no connected community graph after {max_attempts} attempts")


def ego_small_sampler(rng: np.random.Generator, n_range: SizeRange = EGO_RANGE,
                      p_periph: float = 0.3) -> Graph:
    """Hub node 0 joined to every peripheral node; peripheral pairs join with p=0.3"""
    _check_range(n_range, EGO_RANGE, 'ego-small')
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    spokes = [(0, v) for v in range(1, n)]
    periph = list(combinations(range(1, n), 2))
    keep = rng.random(len(periph)) < p_periph
    return Graph.from_edges(n, spokes + [e for e, k in zip(periph, keep) if k])


SAMPLERS: Dict[str, Callable[..., Graph]] = {
    'community-small': community_small_sampler,
    'ego-small': ego_small_sampler,
}


def make_dataset(generator: str, count: int, seed: int,
                 n_range: Optional[SizeRange] = None) -> List[Graph]:
    if generator not in SAMPLERS:
        raise GraphError(f"unknown generator '{generator}' (available: {', '.join(SAMPLERS)})")
    rng = np.random.default_rng(seed)
    sampler = SAMPLERS[generator]
    if n_range is None:
        return [sampler(rng) for _ in range(count)]
    return [sampler(rng, tuple(n_range)) for _ in range(count)]


def split_dataset(graphs: Sequence[Graph], seed: int,
                  fractions: Tuple[float, float] = (0.8, 0.1)
                  ) -> Tuple[List[Graph], List[Graph], List[Graph]]:
    """Seeded shuffle then train/val/test split (test takes the remainder)"""
    order = np.random.default_rng(seed).permutation(len(graphs))
    shuffled = [graphs[i] for i in order]
    n_train = int(len(graphs) * fractions[0])
    n_val = int(len(graphs) * fractions[1])
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


@lru_cache(maxsize=1)
def pair_neighborhoods() -> Neighborhoods:
    """Two variables joined by a single undirected edge"""
    return Neighborhoods([[(1, 0)], [(0, 0)]], 1)


def toy_gaussian_dataset(count: int, correlation: float, seed: int) -> List[TypedGraph]:
    """Samples of a zero-mean, unit-variance bivariate Gaussian as 2-variable graphs"""
    if not -1.0 < correlation < 1.0:
        raise GraphError(f"correlation must lie in (-1, 1), got {correlation}")
    rng = np.random.default_rng(seed)
    cov = np.array([[1.0, correlation], [correlation, 1.0]])
    draws = rng.multivariate_normal(np.zeros(2), cov, size=count)
    nbrs = pair_neighborhoods()
    return [TypedGraph(row.reshape(2, 1), nbrs) for row in draws]


_RANGE_RE = re.compile(r"^(\d+)-(\d+)$")


def parse_size_spec(spec: str) -> Callable[[int], bool]:
    """
    Size filter predicates: "12-14", "15,16", "odd", "even" and comma
    separated combinations such as "12-13,16".
    """
    tests: List[Callable[[int], bool]] = []
    for token in (t.strip() for t in str(spec).split(',')):
        if not token:
            continue
        match = _RANGE_RE.match(token)
        if token == 'odd':
            tests.append(lambda n: n % 2 == 1)
        elif token == 'even':
            tests.append(lambda n: n % 2 == 0)
        elif match:
            lo, hi = int(match.group(1)), int(match.group(2))
            tests.append(lambda n, lo=lo, hi=hi: lo <= n <= hi)
        elif token.isdigit():
            tests.append(lambda n, k=int(token): n == k)
        else:
            raise GraphError(f"bad size filter '{token}'")
    if not tests:
        raise GraphError("empty size filter")
    return lambda n: any(t(n) for t in tests)


def filter_by_sizes(graphs: Iterable[Graph], spec: Optional[str]) -> List[Graph]:
    if not spec:
        return list(graphs)
    keep = parse_size_spec(spec)
    return [g for g in graphs if keep(g.n)]


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def write_graphs(path: Union[str, Path], graphs: Iterable[Graph]):
    """One compact JSON object per line, canonical edge order, UTF-8, LF"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for g in graphs:
            f.write(json.dumps(g.to_dict(), separators=(',', ':')) + '\n')


def read_graphs(path: Union[str, Path]) -> List[Graph]:
    graphs = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise GraphFormatError(line_number, f"invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict) or 'n' not in obj or 'edges' not in obj:
                raise GraphFormatError(line_number, 'expected {"n": ..., "edges": [...]}')
            n, edges = obj['n'], obj['edges']
            # JSON true/false decode to bool, a subclass of int
            if type(n) is not int or not isinstance(edges, list):
                raise GraphFormatError(line_number, "n must be an int and edges a list")
            if any(not isinstance(e, list) or len(e) != 2
                   or not all(type(x) is int for x in e) for e in edges):
                raise GraphFormatError(line_number, "each edge must be a pair of ints")
            try:
                graphs.append(Graph(n, tuple(tuple(e) for e in edges)))
            except GraphError as e:
                raise GraphFormatError(line_number, str(e)) from None
    return graphs


def to_dot(g: Graph, name: str = 'G') -> str:
    lines = [f"graph {name} {{"]
    lines.extend(f"  {v};" for v in range(g.n))
    lines.extend(f"  {u} -- {v};" for u, v in g.edges)
    lines.append("}")
    return '\n'.join(lines) + '\n'


def write_dot(g: Graph, path: Union[str, Path], name: str = 'G'):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_dot(g, name), encoding='utf-8')
