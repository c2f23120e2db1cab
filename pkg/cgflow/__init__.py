"""
cgflow: Continuous Graph Flow

Normalizing flows whose transformation is an ODE driven by graph message
passing. Exact (or Hutchinson-estimated) likelihoods for sets of interacting
variables, reversible sampling, and graph generation through the line graph
of K_n.
"""

__version__ = "0.2.0"
__author__ = "cgflow Team"
__description__ = "Continuous Graph Flow density estimation and graph generation"

import numpy as np

from .config import DataSpec, ModelSpec, RunConfig, SolverSpec, TrainSpec, load_run_config
from .diffcore import OpTape, ParamStore, grad_check
from .dynamics import DynamicsField
from .errors import CGFError
from .evaluation import MetricsReport, compare_graph_sets, evaluate_protocol, generate_graphs, mmd
from .flow import FlowModel
from .graphdata import Graph, Neighborhoods, TypedGraph, decode_graph, encode_graph
from .odeint import SolverConfig, integrate, integrate_with_logdet
from .train import load_checkpoint, save_checkpoint
from .train import train as train_model


def build_model(spec: ModelSpec = None, seed: int = 0, solver: SolverSpec = None) -> FlowModel:
    """Fresh model with parameters drawn from `seed`"""
    spec = spec or ModelSpec()
    return FlowModel.from_spec(spec, np.random.default_rng(seed), solver)


def log_prob(model: FlowModel, graph: TypedGraph, seed: int = 0) -> float:
    """Log-likelihood (nats) of one typed graph's continuous states"""
    return model.log_prob(graph.states, graph.nbrs, rng=np.random.default_rng(seed))


def sample_graphs(model: FlowModel, sizes, seed: int = 0):
    """One generated Graph per requested node count"""
    return generate_graphs(model, list(sizes), np.random.default_rng(seed))


__all__ = ['DataSpec', 'ModelSpec', 'RunConfig', 'SolverSpec', 'TrainSpec', 'load_run_config',
           'OpTape', 'ParamStore', 'grad_check', 'DynamicsField', 'CGFError',
           'MetricsReport', 'compare_graph_sets', 'evaluate_protocol', 'generate_graphs', 'mmd',
           'FlowModel',
           'Graph', 'Neighborhoods', 'TypedGraph', 'decode_graph', 'encode_graph',
           'SolverConfig', 'integrate', 'integrate_with_logdet', 'load_checkpoint',
           'save_checkpoint', 'train_model', 'build_model', 'log_prob', 'sample_graphs']
