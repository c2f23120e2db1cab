"""
Run configuration

A RunConfig is read from one JSON file; command-line overrides use dotted
key paths (e.g. --train.learning_rate 0.01). Every section validates itself
on construction so bad configurations fail before any work starts.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from .errors import ConfigError
from .graphdata import SAMPLERS
from .logger import get_logger
from .odeint import NOISE_DISTRIBUTIONS, SolverConfig

logger = get_logger("config")

TASKS = ('graph-gen', 'toy-gaussian')
GRADIENT_MODES = ('discretize', 'adjoint')


@dataclass
class DataSpec:
    """Dataset generation (make-data) and size filters; n_range None means the generator envelope"""
    generator: str = 'community-small'
    n_range: Optional[Tuple[int, int]] = None
    count: int = 200
    seed: int = 7
    directory: str = 'data'
    train_sizes: Optional[str] = None
    eval_sizes: Optional[str] = None
    correlation: float = 0.8

    def __post_init__(self):
        if self.generator not in SAMPLERS:
            raise ConfigError(f"data.generator must be one of {', '.join(SAMPLERS)}, "
                              f"got '{self.generator}'")
        if self.n_range is not None:
            self.n_range = tuple(int(v) for v in self.n_range)
            if len(self.n_range) != 2 or self.n_range[0] > self.n_range[1]:
                raise ConfigError(f"data.n_range must be [lo, hi], got {list(self.n_range)}")
        if self.count < 1:
            raise ConfigError("data.count must be >= 1")
        if not -1.0 < self.correlation < 1.0:
            raise ConfigError("data.correlation must lie in (-1, 1)")


@dataclass
class ModelSpec:
    """Flow architecture: blocks, message networks, factor-out schedule, dequantization"""
    m: int = 1
    blocks: int = 2
    hidden: int = 32
    layers: int = 2
    aggregator: str = 'sum'
    n_edge_types: int = 1
    factor_out: List[float] = field(default_factory=list)
    dequant: str = 'variational'
    init_seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.blocks < 1 or self.hidden < 1 or self.layers < 1:
            raise ConfigError("model.m, blocks, hidden and layers must all be >= 1")
        if self.aggregator not in ('sum', 'mean'):
            raise ConfigError(f"model.aggregator must be sum or mean, got '{self.aggregator}'")
        if self.n_edge_types < 1:
            raise ConfigError("model.n_edge_types must be >= 1")
        self.factor_out = [float(f) for f in self.factor_out]
        if self.factor_out and len(self.factor_out) != self.blocks - 1:
            raise ConfigError(f"model.factor_out needs {self.blocks - 1} entries (one per "
                              f"block boundary), got {len(self.factor_out)}")
        if any(f not in (0.0, 0.5) for f in self.factor_out):
            raise ConfigError("model.factor_out entries must be 0 or 0.5")
        if self.dequant not in ('uniform', 'variational', 'none'):
            raise ConfigError("model.dequant must be uniform, variational or none")

    def boundary_fractions(self) -> List[float]:
        return self.factor_out or [0.0] * (self.blocks - 1)


@dataclass
class SolverSpec:
    """Solvers for training (fixed-step) and for evaluation/sampling (adaptive)"""
    train_method: str = 'rk4-fixed'
    train_steps: int = 20
    eval_method: str = 'dopri5'
    eval_steps: int = 40
    rtol: float = 1e-5
    atol: float = 1e-7
    max_evals: int = 100_000
    t0: float = 0.0
    t1: float = 1.0
    noise: str = 'rademacher'
    gradient: str = 'discretize'

    def __post_init__(self):
        if self.noise not in NOISE_DISTRIBUTIONS:
            raise ConfigError(f"solver.noise must be one of {NOISE_DISTRIBUTIONS}")
        if self.gradient not in GRADIENT_MODES:
            raise ConfigError(f"solver.gradient must be one of {GRADIENT_MODES}")
        # Build both configs once so invalid values fail here
        train = self.train_config()
        self.eval_config()
        if self.gradient == 'discretize' and train.adaptive:
            raise ConfigError("discretize-then-optimize training needs train_method rk4-fixed")

    def train_config(self) -> SolverConfig:
        return SolverConfig(self.train_method, self.train_steps, self.rtol, self.atol,
                            self.t0, self.t1, self.max_evals)

    def eval_config(self) -> SolverConfig:
        return SolverConfig(self.eval_method, self.eval_steps, self.rtol, self.atol,
                            self.t0, self.t1, self.max_evals)


@dataclass
class TrainSpec:
    """Optimizer and loop settings"""
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    epochs: int = 20
    clip_norm: float = 10.0
    seed: int = 0
    eval_probes: int = 16
    exact_trace_limit: int = 64

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if len(self.betas) != 2 or not all(0.0 < b < 1.0 for b in self.betas):
            raise ConfigError("train.betas must be two decays in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.batch_size and train.epochs must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigError("train.clip_norm must be positive")
        if self.eval_probes < 1:
            raise ConfigError("train.eval_probes must be >= 1")


@dataclass
class RunConfig:
    task: str = 'graph-gen'
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    output_dir: str = 'runs/default'

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got '{self.task}'")
        if self.model.m != 1:
            # both tasks carry one scalar per variable (edge indicator or coordinate)
            raise ConfigError(f"task '{self.task}' has one state per variable; "
                              f"model.m must be 1, got {self.model.m}")
        if self.task == 'toy-gaussian' and self.model.dequant != 'none':
            # continuous toy data is never dequantized
            self.model.dequant = 'none'

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(asdict(self), sort_keys=True))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_SECTIONS = {'data': DataSpec, 'model': ModelSpec, 'solver': SolverSpec, 'train': TrainSpec}


def _build(cls, data: Dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"bad value in '{section}': {e}") from None


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    data = dict(data)
    sections = {name: _build(cls, data.pop(name, {}), name) for name, cls in _SECTIONS.items()}
    unknown = sorted(set(data) - {'task', 'output_dir'})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    return RunConfig(task=data.get('task', 'graph-gen'),
                     output_dir=data.get('output_dir', 'runs/default'), **sections)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set dotted keys ("train.learning_rate") in a nested dict; string values are JSON-parsed"""
    data = json.loads(json.dumps(data))
    for key, raw in overrides.items():
        value = _parse_value(raw) if isinstance(raw, str) else raw
        parts = key.split('.')
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}' descends into a non-object")
        node[parts[-1]] = value
    return data


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a JSON RunConfig (defaults when path is None) and apply overrides"""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if overrides:
        data = apply_overrides(data, overrides)
    config = run_config_from_dict(data)
    logger.debug(f"run config: {config.to_dict()}")
    return config


def parse_override_args(items: Optional[List[str]]) -> Dict[str, str]:
    """
    Dotted-key flags left over by argparse:
    ["--train.epochs", "5", "--model.hidden=16"] -> {"train.epochs": "5", "model.hidden": "16"}
    """
    overrides: Dict[str, str] = {}
    items = list(items or [])
    i = 0
    while i < len(items):
        item = items[i]
        if not item.startswith('--') or '.' not in item.split('=', 1)[0]:
            raise ConfigError(f"unrecognized argument '{item}' (overrides look like "
                              f"--section.key value)")
        key = item[2:]
        if '=' in key:
            key, value = key.split('=', 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"override '{item}' is missing a value")
            value = items[i + 1]
            i += 2
        overrides[key] = value
    return overrides
