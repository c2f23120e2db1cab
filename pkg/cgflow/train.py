"""
Maximum-likelihood training

Batches of variable-size graphs are stacked into one disjoint union so a
single solve serves the whole batch; per-component log-density terms keep the
likelihood of every graph exact. Adam with global-norm clipping, seeded
shuffling, a pandas loss curve and the "CGF1" checkpoint format live here.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import ModelSpec, SolverSpec, TrainSpec
from .diffcore import ParamStore, Tensor
from .errors import (
    CGFError,
    CheckpointError,
    ConfigError,
    FlowError,
    ParameterError,
    SolverError,
    TrainingDivergedError,
)
from .flow import DEQUANT_LOG_STD, DEQUANT_MEAN, FlowModel
from .graphdata import TypedGraph, batch_union, dequant_grad, draw_dequantization
from .logger import get_logger

logger = get_logger("train")

# The train section of a RunConfig
TrainConfig = TrainSpec

LN2 = math.log(2.0)
CHECKPOINT_MAGIC = b"CGF1"
CHECKPOINT_VERSION = 1


def nats_to_bits_per_dim(nats: float, dims: int) -> float:
    return nats / (dims * LN2)


def bivariate_entropy_per_variable(correlation: float) -> float:
    """Differential entropy (nats) of a unit-variance bivariate Gaussian, per variable"""
    return 0.5 * math.log(2.0 * math.pi * math.e) + 0.25 * math.log(1.0 - correlation ** 2)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moment estimates (shaped like the ParamStore) and step counter"""
    m: Dict[str, Tensor]
    v: Dict[str, Tensor]
    step: int = 0

    def copy(self) -> 'OptimizerState':
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()}, self.step)


def global_norm(grads: Dict[str, Tensor]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: Dict[str, Tensor], max_norm: float) -> Tuple[Dict[str, Tensor], float]:
    """Scale gradients so their global norm is at most max_norm; returns (grads, original norm)"""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


class Adam:
    """Adaptive moment estimation with bias correction and gradient clipping"""

    def __init__(self, params: ParamStore, lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float = 10.0, state: Optional[OptimizerState] = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = state or OptimizerState(params.zeros_like(), params.zeros_like(), 0)

    @classmethod
    def from_config(cls, params: ParamStore, cfg: TrainSpec,
                    state: Optional[OptimizerState] = None) -> 'Adam':
        return cls(params, cfg.learning_rate, cfg.betas, clip_norm=cfg.clip_norm, state=state)

    def step(self, grads: Dict[str, Tensor]) -> float:
        """Apply one update; returns the pre-clip gradient norm"""
        unknown = set(grads) - set(self.params.names())
        if unknown:
            raise ParameterError(f"gradients for unknown parameter(s): {sorted(unknown)}")
        full = {name: np.asarray(grads[name], dtype=np.float64) if name in grads
                else np.zeros(shape) for name, shape in self.params.shapes().items()}
        clipped, norm = clip_gradients(full, self.clip_norm)

        state = self.state
        state.step += 1
        correction1 = 1.0 - self.beta1 ** state.step
        correction2 = 1.0 - self.beta2 ** state.step
        for name, g in clipped.items():
            state.m[name] = self.beta1 * state.m[name] + (1.0 - self.beta1) * g
            state.v[name] = self.beta2 * state.v[name] + (1.0 - self.beta2) * g * g
            m_hat = state.m[name] / correction1
            v_hat = state.v[name] / correction2
            self.params.set(name, self.params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return norm


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _component_dims(nbrs, m: int) -> np.ndarray:
    return np.bincount(nbrs.components, minlength=nbrs.n_components) * m


def evaluate_nll(model: FlowModel, graphs: Sequence[TypedGraph], rng: np.random.Generator,
                 probes: int = 16, exact_limit: int = 64) -> float:
    """
    Mean bits/dim over graphs, one graph at a time: exact trace when
    n*m <= exact_limit, otherwise a `probes`-sample stochastic average.
    """
    if not graphs:
        raise ConfigError("cannot evaluate the NLL of an empty set")
    cfg = model.dequant_config()
    values = []
    for graph in graphs:
        states, correction = graph.states, 0.0
        if cfg is not None:
            sample = draw_dequantization(states, cfg, rng)
            states, correction = sample.states, sample.correction
        terms = model.log_prob_terms(states, graph.nbrs, 'auto', rng, probes, exact_limit)
        nll = -terms.total + correction
        if not math.isfinite(nll):
            raise TrainingDivergedError("non-finite negative log-likelihood")
        values.append(nats_to_bits_per_dim(nll, graph.states.size))
    return float(np.mean(values))


def nll_bits_per_dim(model: FlowModel, batch: Sequence[TypedGraph],
                     rng: Optional[np.random.Generator] = None) -> float:
    """Per-graph (-log p + dequantization correction) / (n m ln 2), averaged over the batch"""
    return evaluate_nll(model, batch, rng if rng is not None else np.random.default_rng(0))


@dataclass
class StepResult:
    loss: float
    grads: Dict[str, Tensor]
    grad_norm: float = 0.0


def batch_loss_and_grad(model: FlowModel, batch: Sequence[TypedGraph], rng: np.random.Generator,
                        gradient: str = 'discretize') -> StepResult:
    """Mean bits/dim of a batch (stochastic trace) and its gradient w.r.t. every parameter"""
    cfg = model.dequant_config()
    samples, continuous = [], []
    for graph in batch:
        if cfg is None:
            samples.append(None)
            continuous.append(TypedGraph(graph.states, graph.nbrs))
        else:
            sample = draw_dequantization(graph.states, cfg, rng)
            samples.append(sample)
            continuous.append(TypedGraph(sample.states, graph.nbrs))

    union = batch_union(continuous)
    dims = _component_dims(union.nbrs, model.m)
    weights = -1.0 / (dims * LN2 * len(batch))
    result = model.loss_and_grad(union.states, union.nbrs, weights, rng,
                                 gradient=gradient)
    corrections = np.array([s.correction if s is not None else 0.0 for s in samples])
    loss = float(np.mean((-result.log_prob + corrections) / (dims * LN2)))

    grads = dict(result.grads)
    if cfg is not None and cfg.mode == 'variational':
        grad_mean, grad_log_std = 0.0, 0.0
        offset = 0
        for c, sample in enumerate(samples):
            rows = sample.states.shape[0]
            states_bar = result.state_cotangent[offset:offset + rows]
            gm, gs = dequant_grad(sample, cfg, states_bar, -weights[c])
            grad_mean += gm
            grad_log_std += gs
            offset += rows
        grads[DEQUANT_MEAN] = np.array([[grad_mean]])
        grads[DEQUANT_LOG_STD] = np.array([[grad_log_std]])
    return StepResult(loss, grads)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FlowModel
    loss_curve: pd.DataFrame
    optimizer: Adam
    history: List[Dict[str, float]] = field(default_factory=list)


def train(model: FlowModel, dataset: Sequence[TypedGraph], cfg: TrainSpec,
          gradient: Optional[str] = None, optimizer: Optional[Adam] = None,
          checkpoint_path: Optional[Union[str, Path]] = None,
          checkpoint_meta: Optional[Dict[str, Any]] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """
    Seeded training loop.

    Each epoch shuffles the dataset, and every batch takes one clipped Adam
    step. With checkpoint_path, a checkpoint is written after every finite
    epoch; on divergence the parameters and Adam state are restored to the
    last finite epoch, that checkpoint is kept and TrainingDivergedError is raised.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    gradient = gradient or model.solver_spec.gradient
    rng = np.random.default_rng(cfg.seed)
    optimizer = optimizer or Adam.from_config(model.params, cfg)
    rows, history = [], []
    last_good, last_good_state = model.params.copy(), optimizer.state.copy()
    last_good_epoch: Optional[int] = None

    def restore():
        model.params.assign_flat(last_good.flatten())
        optimizer.state = last_good_state.copy()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
                step = batch_loss_and_grad(model, batch, rng, gradient)
                if not math.isfinite(step.loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}",
                                                last_good_epoch)
                norm = optimizer.step(step.grads)
                losses.append(step.loss)
                history.append({'epoch': epoch, 'step': optimizer.state.step,
                                'loss': step.loss, 'grad_norm': norm})
        except (FlowError, SolverError, ParameterError) as e:
            restore()
            raise TrainingDivergedError(f"epoch {epoch}: {e}", last_good_epoch) from e
        except TrainingDivergedError:
            restore()
            raise

        epoch_loss = float(np.mean(losses))
        rows.append({'epoch': epoch, 'step': optimizer.state.step,
                     'nll_bits_per_dim': epoch_loss})
        last_good, last_good_state = model.params.copy(), optimizer.state.copy()
        last_good_epoch = epoch
        logger.info(f"epoch {epoch}/{cfg.epochs}: {epoch_loss:.4f} bits/dim "
                    f"({optimizer.state.step} steps)")
        if checkpoint_path is not None:
            save_checkpoint(model, optimizer, checkpoint_path, checkpoint_meta)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)

    curve = pd.DataFrame(rows, columns=['epoch', 'step', 'nll_bits_per_dim'])
    return TrainResult(model, curve, optimizer, history)


def write_loss_curve(curve: pd.DataFrame, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve.to_csv(path, index=False, lineterminator='\n', float_format='%.10g')


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: FlowModel
    optimizer: Optional[Adam]
    header: Dict[str, Any]

    @property
    def meta(self) -> Dict[str, Any]:
        return self.header.get('meta', {})


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(',', ':')).encode('utf-8')


def checkpoint_bytes(model: FlowModel, optimizer: Optional[Adam] = None,
                     meta: Optional[Dict[str, Any]] = None) -> bytes:
    """Magic, uint64 LE header length, canonical JSON header, then '<f8' payloads"""
    names = model.params.names()
    header = {
        'format_version': CHECKPOINT_VERSION,
        'model': asdict(model.spec),
        'solver': asdict(model.solver_spec),
        'params': [{'name': name, 'shape': list(model.params[name].shape)} for name in names],
        'optimizer': None if optimizer is None else {
            'step': optimizer.state.step, 'lr': optimizer.lr,
            'betas': [optimizer.beta1, optimizer.beta2], 'eps': optimizer.eps,
            'clip_norm': optimizer.clip_norm},
        'meta': meta or {},
    }
    header_bytes = _canonical_json(header)
    chunks = [CHECKPOINT_MAGIC, struct.pack('<Q', len(header_bytes)), header_bytes]
    chunks.extend(np.ascontiguousarray(model.params[name], dtype='<f8').tobytes() for name in names)
    if optimizer is not None:
        for moments in (optimizer.state.m, optimizer.state.v):
            chunks.extend(np.ascontiguousarray(moments[name], dtype='<f8').tobytes()
                          for name in names)
    return b''.join(chunks)


def save_checkpoint(model: FlowModel, optimizer: Optional[Adam], path: Union[str, Path],
                    meta: Optional[Dict[str, Any]] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(model, optimizer, meta)
    # write-then-rename so an interrupted save never clobbers the previous checkpoint
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(data)
    tmp.replace(path)
    logger.debug(f"checkpoint written: {path} ({len(data)} bytes)")


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a CGF1 checkpoint")
    (header_len,) = struct.unpack('<Q', data[4:12])
    if len(data) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get('format_version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")

    entries = header['params']
    sizes = [int(np.prod(e['shape'])) for e in entries]
    total = sum(sizes)
    blocks = 3 if header.get('optimizer') else 1
    payload = data[12 + header_len:]
    if len(payload) != 8 * total * blocks:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, "
                              f"expected {8 * total * blocks} (truncated or corrupt)")
    flat = np.frombuffer(payload, dtype='<f8').astype(np.float64)

    def split(block: int) -> Dict[str, Tensor]:
        out, offset = {}, block * total
        for entry, size in zip(entries, sizes):
            out[entry['name']] = flat[offset:offset + size].reshape(entry['shape']).copy()
            offset += size
        return out

    try:
        params = ParamStore(split(0))
        spec = ModelSpec(**header['model'])
        solver_spec = SolverSpec(**header['solver'])
        model = FlowModel(spec, params, solver_spec)
    except (CGFError, TypeError, KeyError) as e:
        raise CheckpointError(f"{path}: checkpoint does not describe a valid model ({e})") from None

    optimizer = None
    opt = header.get('optimizer')
    if opt:
        state = OptimizerState(split(1), split(2), int(opt['step']))
        optimizer = Adam(params, opt['lr'], tuple(opt['betas']), opt['eps'], opt['clip_norm'], state)
    return Checkpoint(model, optimizer, header)


def load_checkpoint(path: Union[str, Path]) -> Tuple[FlowModel, Optional[Adam]]:
    checkpoint = read_checkpoint(path)
    return checkpoint.model, checkpoint.optimizer
