"""tcbmkit command line.

Every subcommand reads its inputs from files and writes its artifacts to the
output directory (--out-dir, current directory by default). Settings come
from CLI flags, then the --config file, then defaults. The effective config
is echoed into every artifact.
"""

import click
import os
import os.path
from typing import Callable, Dict, List, Optional, Tuple
from . import groups
from .annotation_client import EndpointConfig, annotate_micro_concepts, create_client, dump_annotations, label_macro_concept, load_annotations, normalize_topics, texts_of
from .concept_bank import BankConfig, PrecomputedReducer, build_macro_bank, check_embeddings_cover, cluster_micro_concepts, dump_micro_embeddings, embed_micro_concepts, load_bank, load_micro_embeddings, micro_vocabulary, save_bank
from .concept_geometry import fit_cavs, save_cavs
from .concept_importance import METHODS, ImportanceConfig, save_scores, score_concepts
from .context import Context, pass_context
from .data_model import ConceptMatrix, EmbeddingDataset, dump_concept_matrix, load_concept_matrix, load_dataset, load_head, split_view, validate_concept_matrix
from .eval_explain import EvalConfig, EvalReport, evaluate, export_global_explanation, format_summary_row, intervention_curve, load_attributions
from .exceptions import ValidationError
from .libs.chat_completions import CASSETTE_MODES, Cassette
from .pipeline import PipelineConfig, run_pipeline
from .tcbm import STRATEGIES, TrainConfig, load_model, save_model
from .utils import CONFIG_SECTIONS, canonical_dumps, load_config_file, merge_overrides, meta_line, normalize_config, write_json, write_ndjson

# CLI spelling of the stop rules.
STOP_RULE_FLAGS = {
    'performance-gap': 'performance_gap',
    'residual-ma': 'residual_importance_ma',
}


@groups.root()
@click.option('--config',
              'config_path',
              type=str,
              default=None,
              help='YAML config file.')
@click.option('--seed',
              type=int,
              default=None,
              help='Global seed, overrides every seed of the config file.')
@click.option('--out-dir',
              type=str,
              default=None,
              help='Directory artifacts are written to.')
@pass_context
def root(kctx: Context, config_path: Optional[str], seed: Optional[int],
         out_dir: Optional[str]):
    """Build Textual Concept Bottleneck Models from frozen text embeddings."""
    if config_path is not None:
        kctx.config = normalize_config(load_config_file(config_path))
    if seed is not None:
        kctx.config['seed'] = seed
        for section in ('bank', 'importance', 'train'):
            merge_overrides(kctx.config, section, seed=seed)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        kctx.out_dir = out_dir


def _require_file(path: str, what: str):
    if not os.path.isfile(path):
        raise ValidationError('%s not found: %s' % (what, path))


def _load_dataset(path: str) -> EmbeddingDataset:
    _require_file(path, 'dataset')
    return load_dataset(path)


def _load_matrix(path: str, dataset: EmbeddingDataset) -> ConceptMatrix:
    _require_file(path, 'concept matrix')
    return load_concept_matrix(path, dataset)


def _open_cassette(kctx: Context, path: Optional[str],
                   mode: str) -> Optional[Cassette]:
    if path is None:
        return None
    if mode == 'record':
        path = kctx.output_path(path)
    return Cassette(path, mode)


def _endpoint_config(kctx: Context, **flags) -> EndpointConfig:
    merge_overrides(kctx.config, 'endpoint', **flags)
    return EndpointConfig.from_dict(kctx.config['endpoint'])


def _effective_config(kctx: Context) -> Dict:
    return {k: kctx.config[k] for k in ('seed', ) + CONFIG_SECTIONS}


def _write_report(kctx: Context, name: str, report: EvalReport):
    payload = report.to_dict()
    payload['config'] = _effective_config(kctx)
    write_json(kctx.output_path(name), payload)


cassette_option = click.option('--cassette',
                               type=str,
                               default=None,
                               help='Record/replay file of endpoint responses.')
cassette_mode_option = click.option('--cassette-mode',
                                    type=click.Choice(CASSETTE_MODES),
                                    default='replay',
                                    show_default=True,
                                    help='Replay never touches the network.')


@root.task()
@click.option('--dataset', type=str, required=True, help='Dataset NDJSON.')
@click.option('--endpoint',
              type=str,
              default=None,
              help='Base URL of the chat-completion endpoint.')
@click.option('--model', type=str, default=None, help='Annotator model.')
@click.option('--max-in-flight',
              type=int,
              default=None,
              help='Maximum number of concurrent requests.')
@cassette_option
@cassette_mode_option
@click.option('--out',
              type=str,
              default='annotations.ndjson',
              show_default=True,
              help='Micro-annotation file, relative to the output directory.')
def annotate(kctx: Context, dataset: str, endpoint: Optional[str],
             model: Optional[str], max_in_flight: Optional[int],
             cassette: Optional[str], cassette_mode: str, out: str):
    """Extract micro concepts from every text of a dataset."""
    data = _load_dataset(dataset)
    cfg = _endpoint_config(kctx,
                           base_url=endpoint,
                           model=model,
                           max_in_flight=max_in_flight)
    if cfg.base_url is None and cassette is None:
        raise ValidationError('An endpoint or a cassette is needed.')

    store = _open_cassette(kctx, cassette, cassette_mode)
    client = create_client(cfg, store)
    annotations = annotate_micro_concepts(texts_of(data), cfg, client,
                                          kctx.dispatcher)

    dump_annotations(kctx.output_path(out), annotations, {
        'config': _effective_config(kctx),
        'dataset': data.fingerprint(),
    })
    if store is not None and store.mode == 'record':
        store.save()
    kctx.info('%d texts annotated, %d distinct micro concepts.' %
              (len(annotations), len(micro_vocabulary(annotations))))


@root.task()
@click.option('--dataset', type=str, required=True, help='Dataset NDJSON.')
@click.option('--annotations',
              type=str,
              required=True,
              help='Micro-annotation NDJSON.')
@click.option('--micro-embeddings',
              type=str,
              default=None,
              help='Embeddings of the micro concepts. They are fetched from '
              'the endpoint when not given.')
@click.option('--reduced',
              type=str,
              default=None,
              help='Precomputed low-dimensional coordinates of the micro '
              'concepts, used instead of PCA.')
@click.option('--endpoint',
              type=str,
              default=None,
              help='Base URL of the endpoint used for labeling (and '
              'embedding).')
@cassette_option
@cassette_mode_option
@click.option('--label/--no-label',
              default=True,
              show_default=True,
              help='Label concepts with the endpoint when one is available.')
@click.option('--min-cluster-size', type=int, default=None)
@click.option('--reduce-dims', type=int, default=None)
@click.option('--out-bank', type=str, default='bank.json', show_default=True)
@click.option('--out-matrix',
              type=str,
              default='concepts.ndjson',
              show_default=True)
def bank(kctx: Context, dataset: str, annotations: str,
         micro_embeddings: Optional[str], reduced: Optional[str],
         endpoint: Optional[str], cassette: Optional[str], cassette_mode: str,
         label: bool, min_cluster_size: Optional[int],
         reduce_dims: Optional[int], out_bank: str, out_matrix: str):
    """Cluster micro concepts into a macro-concept bank and write the concept
    presence matrix."""
    data = _load_dataset(dataset)
    _require_file(annotations, 'annotations')
    annotated = load_annotations(annotations, data, kctx.dispatcher)
    vocabulary = micro_vocabulary(annotated)

    merge_overrides(kctx.config,
                    'bank',
                    min_cluster_size=min_cluster_size,
                    reduce_dims=reduce_dims)
    bank_cfg = BankConfig.from_dict(kctx.config['bank'])
    endpoint_cfg = _endpoint_config(kctx, base_url=endpoint)

    client = None
    if endpoint_cfg.base_url is not None or cassette is not None:
        client = create_client(endpoint_cfg,
                               _open_cassette(kctx, cassette, cassette_mode))

    if micro_embeddings is not None:
        _require_file(micro_embeddings, 'micro-embeddings')
        entries = load_micro_embeddings(micro_embeddings)
        check_embeddings_cover(entries, annotated)
    elif client is not None:
        entries = embed_micro_concepts(vocabulary, client)
        dump_micro_embeddings(kctx.output_path('micro_embeddings.ndjson'),
                              entries)
    else:
        raise ValidationError(
            'Micro-concept embeddings are needed: pass --micro-embeddings, '
            'an endpoint or a cassette.')

    reducer = None
    if reduced is not None:
        _require_file(reduced, 'reduced coordinates')
        reducer = PrecomputedReducer.from_file(reduced)

    clusters = cluster_micro_concepts({m: entries[m]
                                       for m in vocabulary}, bank_cfg,
                                      reducer, kctx.dispatcher)

    labeler = None  # type: Optional[Callable[[List[str], int], str]]
    if label and client is not None:

        def labeler(samples: List[str], concept_id: int) -> str:
            return label_macro_concept(samples, endpoint_cfg, concept_id,
                                       client, kctx.dispatcher)

    built = build_macro_bank(clusters, annotated, data, labeler, bank_cfg,
                             kctx.dispatcher)

    config = _effective_config(kctx)
    save_bank(kctx.output_path(out_bank), built, config)
    dump_concept_matrix(built.matrix, data, kctx.output_path(out_matrix),
                        {'config': config})
    if client is not None and client.cassette is not None and \
            client.cassette.mode == 'record':
        client.cassette.save()
    kctx.info('%d macro concepts from %d micro concepts.' %
              (len(built.concepts), len(clusters.micros)))


@root.task()
@click.option('--dataset', type=str, required=True, help='Dataset NDJSON.')
@click.option('--head', type=str, required=True, help='Classifier head JSON.')
@click.option('--concepts',
              type=str,
              required=True,
              help='Concept presence matrix NDJSON.')
@click.option('--method', type=click.Choice(METHODS), default=None)
@click.option('--gradient-mode',
              type=click.Choice(('logit', 'log_softmax')),
              default=None)
@click.option('--ig-steps', type=int, default=None)
@click.option('--out', type=str, default='scores.json', show_default=True)
@click.option('--cavs-out', type=str, default='cavs.json', show_default=True)
def score(kctx: Context, dataset: str, head: str, concepts: str,
          method: Optional[str], gradient_mode: Optional[str],
          ig_steps: Optional[int], out: str, cavs_out: str):
    """Fit concept activation vectors and score every concept."""
    data = _load_dataset(dataset)
    _require_file(head, 'head')
    classifier = load_head(head, data)
    matrix = _load_matrix(concepts, data)

    merge_overrides(kctx.config,
                    'importance',
                    method=method,
                    gradient_mode=gradient_mode,
                    ig_steps=ig_steps)
    cfg = ImportanceConfig.from_dict(kctx.config['importance'])

    report = validate_concept_matrix(matrix, data, kctx.dispatcher)
    untrainable = set(report.untrainable)
    cavs = fit_cavs(data, matrix,
                    [c for c in matrix.concepts if c not in untrainable],
                    kctx.dispatcher)
    scores = score_concepts(cavs, data, classifier, matrix, cfg,
                            kctx.dispatcher)

    save_scores(kctx.output_path(out), scores, cfg,
                {'config': _effective_config(kctx)})
    save_cavs(kctx.output_path(cavs_out), cavs,
              {s.concept_id: s.to_dict()
               for s in scores})
    for s in scores:
        kctx.echo('%4d  importance %.4f  identifiability %.4f  score %.4f' %
                  (s.concept_id, s.importance, s.identifiability, s.combined))


@root.task()
@click.option('--dataset', type=str, required=True, help='Dataset NDJSON.')
@click.option('--head', type=str, required=True, help='Classifier head JSON.')
@click.option('--concepts',
              type=str,
              required=True,
              help='Concept presence matrix NDJSON.')
@click.option('--method', type=click.Choice(METHODS), default=None)
@click.option('--stop-rule',
              type=click.Choice(sorted(STOP_RULE_FLAGS)),
              default=None,
              help='Completeness criterion [default: performance-gap].')
@click.option('--window',
              type=int,
              default=None,
              help='Moving-average order of the residual-ma rule '
              '[default: 4].')
@click.option('--epsilon',
              type=float,
              default=None,
              help='Tolerated accuracy gap of the performance-gap rule '
              '[default: 0.05].')
@click.option('--max-iterations', type=int, default=None)
@click.option('--max-new-concepts',
              type=int,
              default=None,
              help='Cap on the concepts one iteration adds, 0 for no cap '
              '[default: 0].')
@click.option('--cooccurrence/--no-cooccurrence',
              default=None,
              help='Group co-occurring concepts before growing the '
              'bottleneck [default: on].')
@click.option('--identifiability/--no-identifiability',
              default=None,
              help='Weight concept importance by identifiability '
              '[default: on].')
@click.option('--strategy', type=click.Choice(STRATEGIES), default=None)
@click.option('--epochs', type=int, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--learning-rate', type=float, default=None)
@click.option('--lambda-concept', type=float, default=None)
@click.option('--lambda-en', type=float, default=None)
@click.option('--bank',
              'bank_path',
              type=str,
              default=None,
              help='Concept bank, used to label the selected concepts.')
@click.option('--label-embeddings',
              type=str,
              default=None,
              help='Embeddings of the concept labels, used to report the '
              'diversity of the selected concepts. Needs --bank.')
@click.option('--out-model', type=str, default='model.json', show_default=True)
@click.option('--out-trace',
              type=str,
              default='trace.ndjson',
              show_default=True)
def pipeline(kctx: Context, dataset: str, head: str, concepts: str,
             method: Optional[str], stop_rule: Optional[str],
             window: Optional[int], epsilon: Optional[float],
             max_iterations: Optional[int], max_new_concepts: Optional[int],
             cooccurrence: Optional[bool], identifiability: Optional[bool],
             strategy: Optional[str],
             epochs: Optional[int], batch_size: Optional[int],
             learning_rate: Optional[float], lambda_concept: Optional[float],
             lambda_en: Optional[float], bank_path: Optional[str],
             label_embeddings: Optional[str], out_model: str,
             out_trace: str):
    """Grow the concept bottleneck until it's complete, then evaluate the
    final model on dev and test."""
    data = _load_dataset(dataset)
    _require_file(head, 'head')
    classifier = load_head(head, data)
    matrix = _load_matrix(concepts, data)

    merge_overrides(kctx.config,
                    'importance',
                    method=method,
                    identifiability=identifiability)
    merge_overrides(kctx.config,
                    'pipeline',
                    stop_rule=STOP_RULE_FLAGS.get(stop_rule or ''),
                    window=window,
                    epsilon=epsilon,
                    max_iterations=max_iterations,
                    max_new_concepts=max_new_concepts,
                    cooccurrence=cooccurrence)
    merge_overrides(kctx.config,
                    'train',
                    strategy=strategy,
                    epochs=epochs,
                    batch_size=batch_size,
                    learning_rate=learning_rate,
                    lambda_concept=lambda_concept,
                    lambda_en=lambda_en)
    importance_cfg = ImportanceConfig.from_dict(kctx.config['importance'])
    pipeline_cfg = PipelineConfig.from_dict(kctx.config['pipeline'])
    train_cfg = TrainConfig.from_dict(kctx.config['train'])

    labels = {}  # type: Dict[int, str]
    if bank_path is not None:
        _require_file(bank_path, 'bank')
        labels = {c.id: c.label for c in load_bank(bank_path)}

    result = run_pipeline(data, matrix, classifier, importance_cfg, train_cfg,
                          pipeline_cfg, kctx.dispatcher)
    model = result.model

    diversity_embeddings = None
    if label_embeddings is not None:
        diversity_embeddings = _label_embeddings(label_embeddings, labels,
                                                 model.concept_ids)

    config = _effective_config(kctx)
    save_model(
        kctx.output_path(out_model), model, {
            'effective_config': config,
            'selected_iteration': result.selected_iteration,
            'labels': {str(c): labels[c]
                       for c in model.concept_ids if c in labels},
        })
    write_ndjson(kctx.output_path(out_trace), [
        meta_line({
            'config': config,
            'dataset': data.fingerprint()
        })
    ] + [r.to_dict() for r in result.trace])

    for split in ('dev', 'test'):
        view = split_view(data, split)
        if len(view) == 0:
            continue
        report = evaluate(model, view, matrix, split, diversity_embeddings)
        _write_report(kctx, 'report.%s.json' % split, report)
        kctx.echo(format_summary_row(report))


def _label_embeddings(path: str, labels: Dict[int, str],
                      concept_ids: List[int]):
    if not labels:
        raise ValidationError('--label-embeddings needs --bank.')
    _require_file(path, 'label embeddings')
    entries = load_micro_embeddings(path)
    rows = []
    for concept_id in concept_ids:
        key = normalize_topics([labels.get(concept_id, '')])
        if not key or key[0] not in entries:
            raise ValidationError('No embedding for the label of concept %d.'
                                  % concept_id)
        rows.append(entries[key[0]])
    return rows


@root.task()
@click.option('--dataset', type=str, required=True, help='Dataset NDJSON.')
@click.option('--concepts',
              type=str,
              required=True,
              help='Concept presence matrix NDJSON.')
@click.option('--model', type=str, required=True, help='TCBM checkpoint.')
@click.option('--split', type=click.Choice(('dev', 'test')), default=None)
@click.option('--k',
              'ks',
              type=int,
              multiple=True,
              help='Number of concepts corrected per text. Either repeated '
              '(--k 0 --k 1) or followed by more values (--k 0 1 2).')
@click.argument('more_ks', nargs=-1, type=int)
@click.option('--out',
              type=str,
              default='interventions.json',
              show_default=True)
def intervene(kctx: Context, dataset: str, concepts: str, model: str,
              split: Optional[str], ks: Tuple[int, ...],
              more_ks: Tuple[int, ...], out: str):
    """Accuracy after replacing the k most wrong concept activations by the
    ground truth, for each k."""
    data = _load_dataset(dataset)
    matrix = _load_matrix(concepts, data)
    _require_file(model, 'model')
    tcbm = load_model(model)

    requested = list(ks) + list(more_ks)
    merge_overrides(kctx.config,
                    'eval',
                    split=split,
                    intervention_ks=requested or None)
    cfg = EvalConfig.from_dict(kctx.config['eval'])
    counts = sorted(set(cfg.intervention_ks))
    if not requested:
        # Default counts are clipped to the bottleneck size.
        counts = [k for k in counts if k <= tcbm.num_concepts]

    view = split_view(data, cfg.split)
    curve = intervention_curve(tcbm, view, matrix, counts)
    write_json(
        kctx.output_path(out), {
            'split': cfg.split,
            'curve': [{
                'k': k,
                'acc': acc
            } for k, acc in curve],
            'config': _effective_config(kctx),
        })
    for k, acc in curve:
        kctx.echo('k=%-3d %%ACC %6.2f' % (k, acc))


@root.task()
@click.option('--model', type=str, required=True, help='TCBM checkpoint.')
@click.option('--attributions',
              type=str,
              default=None,
              help='Token attribution NDJSON {token, concept_id, score}.')
@click.option('--top-q',
              type=int,
              default=None,
              help='Tokens kept per concept [default: 8].')
@click.option('--bank',
              'bank_path',
              type=str,
              default=None,
              help='Concept bank, used to label concepts.')
@click.option('--out',
              type=str,
              default='explanation.json',
              show_default=True)
def explain(kctx: Context, model: str, attributions: Optional[str],
            top_q: Optional[int], bank_path: Optional[str], out: str):
    """Export the global explanation of a model: concept to class weights
    and, with attributions, the most important tokens of each concept."""
    _require_file(model, 'model')
    tcbm = load_model(model)
    merge_overrides(kctx.config, 'eval', top_q=top_q)
    cfg = EvalConfig.from_dict(kctx.config['eval'])

    records = None
    if attributions is not None:
        _require_file(attributions, 'attributions')
        records = load_attributions(attributions)
    labels = None
    if bank_path is not None:
        _require_file(bank_path, 'bank')
        labels = {c.id: c.label for c in load_bank(bank_path)}

    explanation = export_global_explanation(tcbm, records, cfg.top_q, labels)
    explanation['config'] = _effective_config(kctx)
    write_json(kctx.output_path(out), explanation)
    kctx.info('Explanation of %d concepts written.' % tcbm.num_concepts)


@root.task()
@click.option('--dataset', type=str, required=True, help='Dataset NDJSON.')
@click.option('--head', type=str, default=None, help='Classifier head JSON.')
@click.option('--concepts',
              type=str,
              default=None,
              help='Concept presence matrix NDJSON.')
def validate(kctx: Context, dataset: str, head: Optional[str],
             concepts: Optional[str]):
    """Check input files and print a validation report."""
    data = _load_dataset(dataset)
    summary = {
        'records': len(data),
        'dim': data.dim,
        'num_classes': data.num_classes,
        'splits': {s: data.splits.count(s)
                   for s in ('train', 'dev', 'test')},
    }  # type: Dict
    if head is not None:
        _require_file(head, 'head')
        summary['head'] = load_head(head, data).kind
    if concepts is not None:
        matrix = _load_matrix(concepts, data)
        summary['concepts'] = validate_concept_matrix(
            matrix, data, kctx.dispatcher).to_dict()
    kctx.echo(canonical_dumps(summary))
