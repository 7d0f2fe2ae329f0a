"""Concept importance scores.

Importance measures how much the original classifier relies on a concept
direction. It's computed from the gradients of the classification head
(TCAV), from Integrated Gradients attributions projected onto the concept
direction (CIG), from the concept frequency, or drawn at random. The final
score of a concept is its importance times its identifiability.
"""

import numpy as np
from dataclasses import asdict, dataclass
from scipy.special import softmax
from typing import Dict, List, NamedTuple, Optional, Sequence
from .concept_geometry import CAV
from .data_model import ACTIVATIONS, ClassifierHead, ConceptMatrix, EmbeddingDataset, require_split
from .dispatcher import Dispatcher, warn
from .exceptions import ValidationError
from .utils import canonical_hash, dataclass_from_dict, write_json

METHODS = ('cig', 'tcav', 'frequency', 'random')
GRADIENT_MODES = ('logit', 'log_softmax')
TCAV_NORMALIZATIONS = ('class', 'global')


@dataclass
class ImportanceConfig:
    method: str = 'cig'
    gradient_mode: str = 'logit'
    ig_steps: int = 50
    tcav_normalization: str = 'class'
    identifiability: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError('Unknown importance method "%s".' %
                                  self.method)
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValidationError('Unknown gradient mode "%s".' %
                                  self.gradient_mode)
        if self.tcav_normalization not in TCAV_NORMALIZATIONS:
            raise ValidationError('Unknown TCAV normalization "%s".' %
                                  self.tcav_normalization)
        if self.ig_steps < 1:
            raise ValidationError('importance.ig_steps must be >= 1.')

    @classmethod
    def from_dict(cls, raw: Optional[Dict]) -> 'ImportanceConfig':
        return dataclass_from_dict(cls, raw, 'importance')

    def to_dict(self) -> Dict:
        return asdict(self)


class ConceptScore(NamedTuple):
    concept_id: int
    importance: float
    identifiability: float
    combined: float
    normalized_importance: Optional[float] = None

    def to_dict(self) -> Dict:
        raw = {
            'concept_id': self.concept_id,
            'importance': self.importance,
            'identifiability': self.identifiability,
            'combined': self.combined,
        }
        if self.normalized_importance is not None:
            raw['normalized_importance'] = self.normalized_importance
        return raw


def _check_classes(head: ClassifierHead, ks: np.ndarray):
    if np.any(ks < 0) or np.any(ks >= head.num_classes):
        raise ValidationError('Invalid class index for a head with %d '
                              'classes.' % head.num_classes)


def head_gradients(head: ClassifierHead,
                   Z: np.ndarray,
                   ks: np.ndarray,
                   mode: str = 'logit') -> np.ndarray:
    """Batched version of head_gradient(): row i is the gradient, at Z[i],
    of the logit (or log-softmax) of class ks[i]."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    ks = np.broadcast_to(np.asarray(ks, dtype=np.int64), (Z.shape[0], ))
    _check_classes(head, ks)
    if mode not in GRADIENT_MODES:
        raise ValidationError('Unknown gradient mode "%s".' % mode)

    # Gradient with respect to the input of the output layer.
    upstream = head.weight[ks]
    if mode == 'log_softmax':
        upstream = upstream - softmax(head.logits(Z), axis=1) @ head.weight

    if head.kind == 'linear':
        return upstream

    _, act_grad = ACTIVATIONS[head.activation]  # type: ignore
    local = act_grad(head.pre_activations(Z)) * upstream
    return local @ head.hidden_weight


def head_gradient(head: ClassifierHead,
                  z: np.ndarray,
                  k: int,
                  mode: str = 'logit') -> np.ndarray:
    """Gradient of the logit of class k (mode="logit") or of its log-softmax
    (mode="log_softmax") with respect to the embedding z.

    Raises:
        ValidationError: When k isn't a class of the head.
    """
    return head_gradients(head, np.asarray(z)[None, :], np.array([k]),
                          mode)[0]


def integrated_gradients_batch(head: ClassifierHead,
                               Z: np.ndarray,
                               baseline: np.ndarray,
                               ks: np.ndarray,
                               steps: int = 50,
                               mode: str = 'logit') -> np.ndarray:
    """Integrated Gradients of every row of Z with respect to its own target
    class, along the straight path from baseline. The path integral uses
    the midpoint rule; linear heads in logit mode use the exact closed
    form."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    baseline = np.asarray(baseline, dtype=np.float64)
    ks = np.broadcast_to(np.asarray(ks, dtype=np.int64), (Z.shape[0], ))
    if baseline.shape[-1] != Z.shape[1]:
        raise ValidationError('Baseline has dimension %d, expected %d.' %
                              (baseline.shape[-1], Z.shape[1]))

    delta = Z - baseline
    if head.kind == 'linear' and mode == 'logit':
        _check_classes(head, ks)
        return delta * head.weight[ks]

    total = np.zeros_like(Z)
    for i in range(steps):
        alpha = (i + 0.5) / steps
        total += head_gradients(head, baseline + alpha * delta, ks, mode)
    return delta * total / steps


def integrated_gradients(head: ClassifierHead,
                         z: np.ndarray,
                         baseline: np.ndarray,
                         k: int,
                         steps: int = 50,
                         mode: str = 'logit') -> np.ndarray:
    """Per-dimension (z_i - baseline_i) times the average gradient of the
    class k output along the path from baseline to z."""
    return integrated_gradients_batch(head,
                                      np.asarray(z)[None, :], baseline,
                                      np.array([k]), steps, mode)[0]


def cig_importance(direction: np.ndarray,
                   train: EmbeddingDataset,
                   head: ClassifierHead,
                   baseline: Optional[np.ndarray] = None,
                   config: Optional[ImportanceConfig] = None,
                   attributions: Optional[np.ndarray] = None) -> float:
    """Mean over train of |<direction, IG(f(x))>|, IG targeting the ground
    truth class of x.

    Args:
        attributions (Optional[np.ndarray]):
            Precomputed IG attributions of the train split. Attributions
            don't depend on the concept, so scoring a whole bank computes
            them once.
    """
    if len(train) == 0:
        raise ValidationError('The train split is empty.')
    config = config or ImportanceConfig()
    if attributions is None:
        if baseline is None:
            baseline = train.baseline
        attributions = integrated_gradients_batch(head, train.embeddings,
                                                  baseline, train.labels,
                                                  config.ig_steps,
                                                  config.gradient_mode)
    return float(np.mean(np.abs(attributions @ direction)))


def tcav_importance(direction: np.ndarray,
                    train: EmbeddingDataset,
                    head: ClassifierHead,
                    config: Optional[ImportanceConfig] = None,
                    dispatcher: Optional[Dispatcher] = None,
                    gradients: Optional[np.ndarray] = None) -> float:
    """Sum over classes k of the fraction of train texts of class k whose
    class-k gradient points in the concept direction.

    With the "class" normalization (default) each class is normalized by
    its own count, the result lies in [0, K]. With "global", counts are
    divided by the train size and the result lies in [0, 1].
    """
    if len(train) == 0:
        raise ValidationError('The train split is empty.')
    config = config or ImportanceConfig()
    if gradients is None:
        gradients = head_gradients(head, train.embeddings, train.labels,
                                   config.gradient_mode)

    positive = (gradients @ direction) > 0
    total = 0.0
    for k in range(head.num_classes):
        in_class = train.labels == k
        count = int(in_class.sum())
        if count == 0:
            warn(dispatcher,
                 'class %d is absent from train, it contributes 0' % k)
            continue
        denominator = count if config.tcav_normalization == 'class' else len(
            train)
        total += positive[in_class].sum() / denominator
    return float(total)


def frequency_importance(column: np.ndarray) -> float:
    """Fraction of (train) texts where the concept is present."""
    column = np.asarray(column)
    if column.size == 0:
        return 0.0
    return float(column.mean())


def score_concepts(cavs: Dict[int, CAV],
                   dataset: EmbeddingDataset,
                   head: ClassifierHead,
                   matrix: ConceptMatrix,
                   config: Optional[ImportanceConfig] = None,
                   dispatcher: Optional[Dispatcher] = None
                   ) -> List[ConceptScore]:
    """Score every concept having a CAV and return the scores sorted by
    descending combined score, ties broken by ascending concept id.

    The combined score is the importance times the identifiability of the
    concept, or the importance alone when `identifiability` is off."""
    config = config or ImportanceConfig()
    train = require_split(dataset, 'train')
    ids = sorted(cavs)

    importances = {}  # type: Dict[int, float]
    normalized = {}  # type: Dict[int, float]
    if config.method == 'cig':
        attributions = integrated_gradients_batch(head, train.embeddings,
                                                  dataset.baseline,
                                                  train.labels,
                                                  config.ig_steps,
                                                  config.gradient_mode)
        for c in ids:
            importances[c] = cig_importance(cavs[c].direction,
                                            train,
                                            head,
                                            config=config,
                                            attributions=attributions)
    elif config.method == 'tcav':
        gradients = head_gradients(head, train.embeddings, train.labels,
                                   config.gradient_mode)
        absent = [
            k for k in range(head.num_classes) if not np.any(train.labels == k)
        ]
        for k in absent:
            warn(dispatcher,
                 'class %d is absent from train, it contributes 0' % k)
        for c in ids:
            importances[c] = tcav_importance(cavs[c].direction,
                                             train,
                                             head,
                                             config,
                                             gradients=gradients)
            normalized[c] = importances[c] / head.num_classes
    elif config.method == 'frequency':
        for c in ids:
            importances[c] = frequency_importance(
                matrix.select(train, [c])[:, 0])
    else:
        rng = np.random.default_rng(config.seed)
        draws = rng.random(len(ids))
        importances = {c: float(v) for c, v in zip(ids, draws)}

    scores = []
    for c in ids:
        combined = importances[c]
        if config.identifiability:
            combined *= cavs[c].identifiability
        scores.append(
            ConceptScore(c, importances[c], cavs[c].identifiability,
                         combined, normalized.get(c)))
    return sorted(scores, key=lambda s: (-s.combined, s.concept_id))


def save_scores(path: str,
                scores: Sequence[ConceptScore],
                config: ImportanceConfig,
                meta: Optional[Dict] = None):
    payload = {
        'method': config.method,
        'config': config.to_dict(),
        'config_hash': canonical_hash(config.to_dict()),
        'scores': [s.to_dict() for s in scores],
    }
    if meta:
        payload['meta'] = meta
    write_json(path, payload)
