"""Iterative growth of the concept bottleneck.

Concepts are scored once, the bottleneck is initialized to cover the train
set, then each iteration trains a simple TCBM and a residual TCBM on the
current bottleneck and decides whether the bottleneck is complete. When it
isn't, the best unused concept of each co-occurrence group is added.
"""

import numpy as np
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence
from .concept_bank import cooccurrence_clusters, init_cbl, next_concepts
from .concept_geometry import CAV, fit_cavs
from .concept_importance import ConceptScore, ImportanceConfig, score_concepts
from .data_model import ClassifierHead, ConceptMatrix, EmbeddingDataset, require_split, validate_concept_matrix
from .dispatcher import Dispatcher, emit, warn
from .exceptions import ValidationError
from .tcbm import TCBMModel, TrainConfig, accuracy, forward, train
from .utils import dataclass_from_dict

STOP_RULES = ('performance_gap', 'residual_importance_ma')


@dataclass
class PipelineConfig:
    epsilon: float = 0.05
    stop_rule: str = 'performance_gap'
    window: int = 4
    max_iterations: int = 20
    coverage_target: float = 0.99
    cooc_min_cluster_size: int = 2
    cooc_epsilon: float = 0.5
    cooccurrence: bool = True
    max_new_concepts: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValidationError('pipeline.epsilon must be in [0, 1].')
        if self.stop_rule not in STOP_RULES:
            raise ValidationError('Unknown stop rule "%s".' % self.stop_rule)
        if self.window < 1:
            raise ValidationError('pipeline.window must be >= 1.')
        if self.max_iterations < 1:
            raise ValidationError('pipeline.max_iterations must be >= 1.')
        if not 0 < self.coverage_target <= 1:
            raise ValidationError(
                'pipeline.coverage_target must be in (0, 1].')
        if self.cooc_min_cluster_size < 2:
            raise ValidationError(
                'pipeline.cooc_min_cluster_size must be >= 2.')
        if self.max_new_concepts < 0:
            raise ValidationError('pipeline.max_new_concepts must be >= 0.')

    @classmethod
    def from_dict(cls, raw: Optional[Dict]) -> 'PipelineConfig':
        return dataclass_from_dict(cls, raw, 'pipeline')

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class IterationRecord:
    iteration: int
    concept_ids: List[int]
    simple_dev_acc: float
    residual_dev_acc: float
    residual_importance: float
    residual_importance_dev: float
    stop: bool
    selected: bool = False
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> Dict:
        """Serializable form of the record. Wall time is left out, so that
        runs with the same seed give identical trace files."""
        raw = asdict(self)
        del raw['wall_time']
        return raw


class PipelineResult(NamedTuple):
    model: TCBMModel
    trace: List[IterationRecord]
    scores: List[ConceptScore]
    groups: List[List[int]]
    cavs: Dict[int, CAV]

    @property
    def selected_iteration(self) -> int:
        return next(r.iteration for r in self.trace if r.selected)


def residual_importances(model: TCBMModel, embedding: np.ndarray) -> np.ndarray:
    """I^k_r(x) for every class k (and every row of a batch):
    |<w_k, f(x)>| / (|<w_k, f(x)>| + <|a_k|, |c(x)|>), where c(x) are the
    concept activations fed to the classifier. Defined as 0 when both
    terms are 0.

    Raises:
        ValidationError: When the model has no residual layer.
    """
    if not model.residual:
        raise ValidationError('Residual importance needs a residual model.')
    Z = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
    A = forward(model, Z).activations
    residual = np.abs(Z @ model.params['residual_weight'].T)
    concepts = np.abs(A) @ np.abs(model.params['cls_weight']).T
    denominator = residual + concepts
    out = np.divide(residual,
                    denominator,
                    out=np.zeros_like(residual),
                    where=denominator > 0)
    return out


def residual_importance(model: TCBMModel, embedding: np.ndarray,
                        k: int) -> float:
    if not 0 <= k < model.num_classes:
        raise ValidationError('Invalid class %d.' % k)
    return float(residual_importances(model, embedding)[0, k])


def global_residual_importance(model: TCBMModel,
                               view: EmbeddingDataset) -> float:
    """Mean of I^k_r(x) over every x of the split and every class k."""
    if len(view) == 0:
        raise ValidationError('Cannot measure residual importance on an '
                              'empty split.')
    return float(residual_importances(model, view.embeddings).mean())


def should_stop_performance(simple_dev_acc: float, residual_dev_acc: float,
                            epsilon: float) -> bool:
    """The bottleneck is complete when the simple model reaches at least
    (1 - epsilon) times the accuracy of the residual model."""
    return simple_dev_acc >= (1 - epsilon) * residual_dev_acc


def moving_averages(history: Sequence[float], window: int) -> List[float]:
    return [
        float(np.mean(history[i - window:i]))
        for i in range(window,
                       len(history) + 1)
    ]


def should_stop_residual_ma(history: Sequence[float], window: int = 4) -> bool:
    """Stop once the moving average (of the given order) of the residual
    importance has stopped decreasing: the latest two moving-average steps
    are both non-decreasing.

    A single uptick is not enough, so there's no decision before window + 2
    values rather than window + 1. Stopping on the first non-decreasing step
    would stop [.5, .4, .3, .2, .2, .2, .2, .25] (window 4), a history that
    must keep growing, while the same history followed by .3 must stop."""
    averages = moving_averages(history, window)
    if len(averages) < 3:
        return False
    return averages[-1] >= averages[-2] and averages[-2] >= averages[-3]


def select_min_residual_iteration(history: Sequence[float]) -> int:
    """Return the (1-based) iteration with the lowest residual importance,
    the earliest one on ties."""
    return int(np.argmin(history)) + 1


def _best_so_far(trace: List[IterationRecord], rule: str) -> int:
    if rule == 'residual_importance_ma':
        return select_min_residual_iteration(
            [r.residual_importance for r in trace])
    best = max(trace, key=lambda r: (r.simple_dev_acc, -r.iteration))
    return best.iteration


def run_pipeline(dataset: EmbeddingDataset,
                 matrix: ConceptMatrix,
                 head: ClassifierHead,
                 importance_config: Optional[ImportanceConfig] = None,
                 train_config: Optional[TrainConfig] = None,
                 config: Optional[PipelineConfig] = None,
                 dispatcher: Optional[Dispatcher] = None) -> PipelineResult:
    """Build a complete TCBM.

    Concepts are scored once. The initial bottleneck covers the train set,
    then each iteration retrains a simple and a residual model from a fresh
    seeded initialization and evaluates the stop rule. Growth adds the best
    unused concept of every co-occurrence group (every concept is its own
    group when `cooccurrence` is off), at most `max_new_concepts` of them
    when that setting isn't 0. The returned model
    is the simple model (without residual layer) of the selected iteration.

    When every concept is used or max_iterations is reached without
    stopping, the best iteration so far is selected and a warning is
    emitted.
    """
    importance_config = importance_config or ImportanceConfig()
    train_config = train_config or TrainConfig()
    config = config or PipelineConfig()

    train_view = require_split(dataset, 'train')
    dev_view = require_split(dataset, 'dev')
    report = validate_concept_matrix(matrix, dataset, dispatcher)
    untrainable = set(report.untrainable)
    candidates = [c for c in matrix.concepts if c not in untrainable]

    cavs = fit_cavs(dataset, matrix, candidates, dispatcher)
    if not cavs:
        raise ValidationError('No concept can be learned from this matrix.')
    candidates = sorted(cavs)

    scores = score_concepts(cavs, dataset, head, matrix, importance_config,
                            dispatcher)
    score_map = {s.concept_id: s.combined for s in scores}

    if not config.cooccurrence:
        groups = [[c] for c in candidates]
    elif len(candidates) >= 2:
        groups = cooccurrence_clusters(
            matrix,
            train_view,
            candidates,
            min_cluster_size=config.cooc_min_cluster_size,
            epsilon=config.cooc_epsilon)
    else:
        groups = [candidates]
    emit(dispatcher,
         'info',
         message='%d candidate concepts in %d co-occurrence groups' %
         (len(candidates), len(groups)))

    cbl = init_cbl(score_map, groups, matrix, train_view,
                   config.coverage_target, dispatcher)

    simple_config = replace(train_config, residual=False)
    residual_config = replace(train_config, residual=True)
    trace = []  # type: List[IterationRecord]
    models = []  # type: List[TCBMModel]
    history = []  # type: List[float]
    selected = None  # type: Optional[int]

    for iteration in range(1, config.max_iterations + 1):
        started = time.perf_counter()
        simple = train(dataset, matrix, cbl, simple_config, cavs).model
        residual = train(dataset, matrix, cbl, residual_config, cavs).model

        simple_acc = accuracy(simple, dev_view)
        residual_acc = accuracy(residual, dev_view)
        importance = global_residual_importance(residual, train_view)
        history.append(importance)

        if config.stop_rule == 'performance_gap':
            stop = should_stop_performance(simple_acc, residual_acc,
                                           config.epsilon)
        else:
            stop = should_stop_residual_ma(history, config.window)

        record = IterationRecord(
            iteration=iteration,
            concept_ids=list(cbl),
            simple_dev_acc=simple_acc,
            residual_dev_acc=residual_acc,
            residual_importance=importance,
            residual_importance_dev=global_residual_importance(
                residual, dev_view),
            stop=stop,
            wall_time=time.perf_counter() - started)
        trace.append(record)
        models.append(simple)
        emit(dispatcher, 'pipeline.iteration', record=record)

        if stop:
            selected = iteration
            if config.stop_rule == 'residual_importance_ma':
                selected = select_min_residual_iteration(history)
            break

        added = next_concepts(groups, score_map, cbl)
        if config.max_new_concepts:
            added = added[:config.max_new_concepts]
        if not added:
            warn(dispatcher,
                 'every concept is in the bottleneck without meeting the '
                 'stop rule, keeping the best iteration so far')
            break
        cbl = cbl + added
    else:
        warn(
            dispatcher, 'max_iterations (%d) reached, keeping the best '
            'iteration so far' % config.max_iterations)

    if selected is None:
        selected = _best_so_far(trace, config.stop_rule)
    trace[selected - 1].selected = True

    return PipelineResult(models[selected - 1], trace, scores, groups, cavs)
