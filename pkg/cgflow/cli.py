#!/usr/bin/env python3
"""
cgflow Command Line Interface
Build graph datasets, train Continuous Graph Flow models, sample, evaluate and self-test
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.special import expit

from .config import RunConfig, load_run_config, parse_override_args
from .errors import (
    CGFError,
    CheckpointError,
    ConfigError,
    GraphError,
    GraphFormatError,
    TrainingDivergedError,
)
from .evaluation import (
    STAT_KINDS,
    MMDConfig,
    MetricsReport,
    compare_graph_sets,
    evaluate_protocol,
    generate_graphs,
)
from .flow import FlowModel
from .graphdata import (
    SAMPLERS,
    Graph,
    TypedGraph,
    decode_graph,
    encode_typed,
    filter_by_sizes,
    line_graph_of_complete,
    make_dataset,
    pair_neighborhoods,
    read_graphs,
    requantize,
    split_dataset,
    toy_gaussian_dataset,
    write_dot,
    write_graphs,
)
from .logger import add_file_handler, get_logger, set_log_level
from .plotting import PlotWriter
from .selftest import run_selftest
from .train import (
    LN2,
    bivariate_entropy_per_variable,
    evaluate_nll,
    read_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)

logger = get_logger("cli")

SPLITS = ('train', 'val', 'test')
CHECKPOINT_NAME = 'checkpoint.cgf'


def _split_path(directory, split: str) -> Path:
    return Path(directory) / f"{split}.jsonl"


def _write_json(path, payload: Dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json.dumps(payload, sort_keys=True, indent=2) + '\n')


# ---------------------------------------------------------------------------
# make-data
# ---------------------------------------------------------------------------

# flag -> RunConfig key; flags given on the command line beat the config file
_MAKE_DATA_FLAGS = (('generator', 'data.generator'), ('count', 'data.count'),
                    ('seed', 'data.seed'), ('n_range', 'data.n_range'),
                    ('out', 'data.directory'))


def make_data_command(args):
    """Generate the configured synthetic dataset and write train/val/test JSONL splits"""
    overrides = parse_override_args(args.overrides)
    for flag, key in _MAKE_DATA_FLAGS:
        value = getattr(args, flag)
        if value is not None:
            # encoded so apply_overrides reads back exactly this value
            overrides[key] = json.dumps(list(value) if flag == 'n_range' else value)
    data = load_run_config(args.config, overrides).data
    try:
        graphs = make_dataset(data.generator, data.count, data.seed, data.n_range)
    except GraphError as e:
        print(f"❌ {e}")
        return 2
    splits = split_dataset(graphs, data.seed)
    out = Path(data.directory)
    for split, part in zip(SPLITS, splits):
        write_graphs(_split_path(out, split), part)
    _write_json(out / 'dataset.json', {
        'generator': data.generator,
        'count': data.count,
        'seed': data.seed,
        'n_range': list(data.n_range) if data.n_range else None,
        'splits': {split: len(part) for split, part in zip(SPLITS, splits)},
    })
    sizes = '/'.join(str(len(part)) for part in splits)
    print(f"✅ Wrote {data.count} '{data.generator}' graphs to '{out}' ({sizes} train/val/test)")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_split(config: RunConfig, split: str, sizes: Optional[str]) -> List[Graph]:
    path = _split_path(config.data.directory, split)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return filter_by_sizes(read_graphs(path), sizes)


def _training_sets(config: RunConfig):
    """(train set, held-out set) as TypedGraphs for the configured task"""
    data = config.data
    if config.task == 'toy-gaussian':
        return (toy_gaussian_dataset(data.count, data.correlation, data.seed),
                toy_gaussian_dataset(max(1, data.count // 4), data.correlation, data.seed + 1))
    train_graphs = _load_split(config, 'train', data.train_sizes)
    held_out_split = 'test' if _split_path(data.directory, 'test').exists() else 'val'
    held_out = _load_split(config, held_out_split, data.eval_sizes)
    if not train_graphs:
        raise ConfigError(f"no training graphs match size filter '{data.train_sizes}'")
    return [encode_typed(g) for g in train_graphs], [encode_typed(g) for g in held_out]


def train_command(args):
    """Train a flow model from a RunConfig"""
    overrides = parse_override_args(args.overrides)
    if args.train_sizes:
        overrides['data.train_sizes'] = args.train_sizes
    if args.eval_sizes:
        overrides['data.eval_sizes'] = args.eval_sizes
    if args.output_dir:
        overrides['output_dir'] = args.output_dir
    config = load_run_config(args.config, overrides)
    model = FlowModel.from_spec(config.model, np.random.default_rng(config.model.init_seed),
                                config.solver)

    if args.dry_run:
        print(f"✅ Config OK: task '{config.task}', {len(model.blocks)} block(s), "
              f"{model.params.count} parameters")
        return 0

    try:
        dataset, held_out = _training_sets(config)
    except FileNotFoundError as e:
        print(f"❌ Dataset file not found: {e}")
        print(f"💡 Create it with: cgflow make-data --config {args.config or '<this config>'}")
        return 2

    out = Path(config.output_dir)
    checkpoint_path = out / CHECKPOINT_NAME
    # node counts of every training graph, so sampling can follow their distribution
    meta = {'run_config': config.to_dict(),
            'train_sizes': (sorted(_nodes_of(g) for g in dataset)
                            if config.task == 'graph-gen' else [])}

    print(f"\n🚀 Training on {len(dataset)} example(s) for {config.train.epochs} epoch(s)...")
    try:
        result = train(model, dataset, config.train, checkpoint_path=checkpoint_path,
                       checkpoint_meta=meta,
                       on_epoch=lambda epoch, loss: print(
                           f"🔄 epoch {epoch}/{config.train.epochs}: {loss:.4f} bits/dim"))
    except TrainingDivergedError as e:
        print(f"❌ Training diverged: {e}")
        if checkpoint_path.exists():
            print(f"💾 Last good checkpoint kept at '{checkpoint_path}'")
        return 1

    write_loss_curve(result.loss_curve, out / 'loss_curve.csv')
    plot = PlotWriter(str(out)).loss_curve(result.loss_curve)

    final, which = float(result.loss_curve['nll_bits_per_dim'].iloc[-1]), 'training'
    if held_out:
        which = 'held-out'
        final = evaluate_nll(model, held_out, np.random.default_rng(config.train.seed),
                             config.train.eval_probes, config.train.exact_trace_limit)
    meta['final_bits_per_dim'] = final
    save_checkpoint(model, result.optimizer, checkpoint_path, meta)

    print(f"\n✅ Training finished: final NLL {final:.4f} bits/dim ({which})")
    if config.task == 'toy-gaussian':
        entropy = bivariate_entropy_per_variable(config.data.correlation)
        print(f"📐 {final * LN2:.4f} nats/variable vs analytic entropy {entropy:.4f}")
    print(f"💾 Checkpoint: '{checkpoint_path}'")
    print(f"📈 Loss curve: '{out / 'loss_curve.csv'}' and '{plot['file_path']}'")
    return 0


def _nodes_of(graph: TypedGraph) -> int:
    return int(round((1 + math.sqrt(1 + 8 * graph.n)) / 2))


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def _dequant_offset(model: FlowModel) -> float:
    """Continuous value a 0/1 state sits at in data space on average"""
    cfg = model.dequant_config()
    if cfg is None:
        return 0.0
    if cfg.mode == 'uniform':
        return 0.5
    return float(expit(cfg.mean))


def _read_conditional(path) -> Dict:
    """Observed-values JSON for --conditional; unreadable files are configuration errors"""
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as e:
        raise ConfigError(f"cannot read conditional file '{path}': {e.strerror or e}") from None
    except ValueError as e:
        raise ConfigError(f"conditional file '{path}' is not valid JSON: {e}") from None


def _observed_graph(spec: Dict, model: FlowModel):
    """{"n", "edges", "non_edges"} -> (n, {variable: [value]})"""
    try:
        n = int(spec['n'])
        template = line_graph_of_complete(n)
        offset = _dequant_offset(model)
        observed = {}
        for value, key in ((1.0, 'edges'), (0.0, 'non_edges')):
            for u, v in spec.get(key, []):
                observed[template.index[(min(u, v), max(u, v))]] = [value + offset]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad conditional spec: {e}") from None
    return n, observed


def _sample_graphs(model: FlowModel, args, sizes: List[int], rng) -> List[Graph]:
    if args.conditional:
        spec = _read_conditional(args.conditional)
        n, observed = _observed_graph(spec, model)
        template = line_graph_of_complete(n)
        graphs = []
        for _ in range(args.num):
            states = model.conditional_sample(observed, template.num_variables,
                                              template.nbrs, rng)
            graphs.append(decode_graph(requantize(states[:, :1])))
        return graphs
    if args.nodes:
        chosen = [args.nodes] * args.num
    else:
        if not sizes:
            raise ConfigError("checkpoint records no training sizes; pass --nodes")
        chosen = [int(s) for s in rng.choice(np.array(sizes), size=args.num)]
    return generate_graphs(model, chosen, rng)


def _sample_toy(model: FlowModel, args, rng) -> List[Dict]:
    nbrs = pair_neighborhoods()
    observed = {}
    if args.conditional:
        spec = _read_conditional(args.conditional)
        try:
            observed = {int(k): [float(v)] for k, v in spec['observed'].items()}
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f"bad conditional spec: {e}") from None
    rows = []
    for _ in range(args.num):
        if observed:
            x = model.conditional_sample(observed, nbrs.n, nbrs, rng)
        else:
            x = model.sample(nbrs.n, nbrs, rng)
        rows.append({'x': [float(v) for v in x[:, 0]]})
    return rows


def sample_command(args):
    """Draw samples from a trained checkpoint"""
    checkpoint = read_checkpoint(args.checkpoint)
    model = checkpoint.model
    task = checkpoint.meta.get('run_config', {}).get('task', 'graph-gen')
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if task == 'toy-gaussian':
        rows = _sample_toy(model, args, rng)
        with open(out, 'w', encoding='utf-8', newline='\n') as f:
            for row in rows:
                f.write(json.dumps(row, separators=(',', ':')) + '\n')
        print(f"✅ Wrote {len(rows)} sample(s) to '{out}'")
        return 0

    graphs = _sample_graphs(model, args, checkpoint.meta.get('train_sizes', []), rng)
    write_graphs(out, graphs)
    print(f"✅ Wrote {len(graphs)} graph(s) to '{out}'")
    if args.dot:
        for i, g in enumerate(graphs):
            write_dot(g, Path(args.dot) / f"sample_{i:04d}.dot", name=f"sample_{i}")
        print(f"🧩 DOT files in '{args.dot}'")
    if args.plot:
        info = PlotWriter(str(out.parent)).graph_gallery(graphs, Path(args.plot).name)
        print(f"📷 Gallery: '{info['file_path']}'")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def eval_command(args):
    """MMD statistics between a reference set and generated graphs"""
    metrics = args.metrics or list(STAT_KINDS)
    mmd_cfg = MMDConfig(args.sigma, args.distance)
    for path in filter(None, (args.reference, args.generated)):
        if not Path(path).exists():
            print(f"❌ File not found: {path}")
            return 2
    reference = read_graphs(args.reference)
    if not reference:
        print(f"❌ Reference set '{args.reference}' is empty")
        return 2

    if args.checkpoint:
        model = read_checkpoint(args.checkpoint).model
        report = evaluate_protocol(model, reference, args.num, np.random.default_rng(args.seed),
                                   metrics, mmd_cfg, seed=args.seed)
    else:
        if not args.generated:
            print("❌ Pass --generated FILE or --checkpoint FILE")
            return 2
        generated = read_graphs(args.generated)
        if not generated:
            print(f"❌ Generated set '{args.generated}' is empty")
            return 2
        values = compare_graph_sets(reference, generated, metrics, mmd_cfg)
        report = MetricsReport(values, len(generated))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding='utf-8')
    print(report.to_table())
    print(f"\n✅ Metrics written to '{out}'")
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def selftest_command(args):
    """Gradient, solver, trace and invertibility diagnostics"""
    report = run_selftest(args.seed, args.only)
    print(report.to_table())
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.to_json(), encoding='utf-8')
        print(f"📝 Report written to '{path}'")
    if not report.passed:
        print(f"\n❌ Self-test failed: {', '.join(report.failures)}")
        return 1
    print(f"\n✅ All {len(report.checks)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='cgflow - Continuous Graph Flow density estimation and graph generation',
        prog='cgflow'
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    parser.add_argument('--log-file', help='Also write debug logs to this file')

    subparsers = parser.add_subparsers(
        dest='command', help='Available commands')

    # make-data command
    data_parser = subparsers.add_parser(
        'make-data', help='Generate a synthetic graph dataset (reads the data section)')
    data_parser.add_argument('--config', help='RunConfig JSON file')
    data_parser.add_argument(
        '--generator', help=f"Graph generator ({', '.join(SAMPLERS)}; default community-small)")
    data_parser.add_argument('--count', type=int, help='Number of graphs (default 200)')
    data_parser.add_argument('--seed', type=int, help='Random seed (default 7)')
    data_parser.add_argument(
        '--n-range', type=int, nargs=2, metavar=('LO', 'HI'),
        help='Node-count range (default: the generator envelope)')
    data_parser.add_argument('-o', '--out', help='Output directory (default data.directory)')
    data_parser.set_defaults(func=make_data_command)

    # train command
    train_parser = subparsers.add_parser(
        'train', help='Train a model (extra --section.key VALUE flags override the config)')
    train_parser.add_argument('--config', help='RunConfig JSON file')
    train_parser.add_argument(
        '--dry-run', action='store_true',
        help='Validate the config and print the parameter count')
    train_parser.add_argument('--train-sizes', help='Train only on these sizes, e.g. 12-14')
    train_parser.add_argument('--eval-sizes', help='Evaluate on these sizes, e.g. 15,16')
    train_parser.add_argument('--output-dir', help='Run output directory')
    train_parser.set_defaults(func=train_command)

    # sample command
    sample_parser = subparsers.add_parser('sample', help='Sample from a checkpoint')
    sample_parser.add_argument('--checkpoint', required=True, help='Checkpoint file')
    sample_parser.add_argument('--num', type=int, default=16, help='Number of samples')
    sample_parser.add_argument('--seed', type=int, default=0, help='Random seed')
    sample_parser.add_argument('--nodes', type=int, help='Fixed node count per graph')
    sample_parser.add_argument('-o', '--out', default='samples.jsonl', help='Output JSONL')
    sample_parser.add_argument('--dot', help='Also write one DOT file per graph here')
    sample_parser.add_argument('--plot', help='Also write a PNG gallery with this name')
    sample_parser.add_argument(
        '--conditional', help='JSON file with observed values for conditional sampling')
    sample_parser.set_defaults(func=sample_command)

    # eval command
    eval_parser = subparsers.add_parser('eval', help='MMD evaluation of generated graphs')
    eval_parser.add_argument('--reference', required=True, help='Reference (test) JSONL')
    eval_parser.add_argument('--generated', help='Generated graphs JSONL')
    eval_parser.add_argument(
        '--checkpoint', help='Generate --num graphs from this checkpoint instead')
    eval_parser.add_argument('--num', type=int, default=1024, help='Graphs to generate')
    eval_parser.add_argument('--seed', type=int, default=0, help='Random seed')
    eval_parser.add_argument(
        '--metrics', nargs='+', choices=STAT_KINDS, help='Statistics (default: all)')
    eval_parser.add_argument('--sigma', type=float, default=1.0, help='Kernel bandwidth')
    eval_parser.add_argument(
        '--distance', choices=['tv', 'w1'], default='tv', help='Histogram ground distance')
    eval_parser.add_argument('-o', '--out', default='metrics.json', help='Metrics JSON')
    eval_parser.set_defaults(func=eval_command)

    # selftest command
    selftest_parser = subparsers.add_parser('selftest', help='Run built-in diagnostics')
    selftest_parser.add_argument('--seed', type=int, default=0, help='Random seed')
    selftest_parser.add_argument('--report', help='Write the JSON report here')
    selftest_parser.add_argument('--only', nargs='+', help='Run only these checks')
    selftest_parser.set_defaults(func=selftest_command)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)

    if not args.command:
        parser.print_help()
        return 2
    if extra and args.command not in ('train', 'make-data'):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    args.overrides = extra

    if args.verbose:
        set_log_level(logging.DEBUG)
    if args.log_file:
        add_file_handler(args.log_file)

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}")
        return 2
    except CheckpointError as e:
        print(f"❌ Checkpoint error: {e}")
        return 1
    except (GraphFormatError, FileNotFoundError) as e:
        print(f"❌ Input error: {e}")
        return 2
    except OSError as e:
        print(f"❌ I/O error: {e}")
        return 1
    except CGFError as e:
        print(f"❌ {type(e).__name__}: {e}")
        logger.debug("command failed", exc_info=True)
        return 1


if __name__ == '__main__':
    sys.exit(main())
