import numpy as np
from dataclasses import asdict, dataclass, field
from sklearn.metrics import f1_score
from sklearn.metrics.pairwise import cosine_similarity
from typing import Dict, List, Optional, Sequence, Tuple
from .data_model import ConceptMatrix, EmbeddingDataset
from .exceptions import ValidationError
from .tcbm import TCBMModel, forward, intervene
from .utils import dataclass_from_dict, iter_ndjson

DETECTION_THRESHOLD = 0.5


@dataclass
class EvalConfig:
    top_q: int = 8
    intervention_ks: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    split: str = 'test'

    def __post_init__(self):
        if self.top_q < 1:
            raise ValidationError('eval.top_q must be >= 1.')
        if any(k < 0 for k in self.intervention_ks):
            raise ValidationError('eval.intervention_ks must be >= 0.')
        if self.split not in ('dev', 'test'):
            raise ValidationError('eval.split must be dev or test.')

    @classmethod
    def from_dict(cls, raw: Optional[Dict]) -> 'EvalConfig':
        return dataclass_from_dict(cls, raw, 'eval')

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class EvalReport:
    split: str
    acc: float
    concept_f1: float
    concept_f1_micro: float
    num_concepts: int
    diversity: Optional[float] = None

    def to_dict(self) -> Dict:
        return asdict(self)


def _truth(model: TCBMModel, view: EmbeddingDataset,
           matrix: ConceptMatrix) -> np.ndarray:
    missing = [c for c in model.concept_ids if c not in matrix.concepts]
    if missing:
        raise ValidationError(
            'Concept truth is missing for bottleneck concept(s) %s.' %
            ', '.join(str(c) for c in missing))
    return matrix.select(view, model.concept_ids)


def evaluate(model: TCBMModel,
             view: EmbeddingDataset,
             matrix: ConceptMatrix,
             split: str = 'test',
             label_embeddings: Optional[np.ndarray] = None) -> EvalReport:
    """Classification accuracy and concept detection F1 (in percent).

    Concepts are detected where their activation exceeds 0.5. The concept
    F1 is macro-averaged over the bottleneck concepts; the micro average is
    reported alongside.

    Args:
        label_embeddings (Optional[np.ndarray]):
            Embeddings of the bottleneck concept labels, one row per
            concept. When given, the diversity of the bottleneck is
            reported too.
    """
    if len(view) == 0:
        raise ValidationError('Cannot evaluate on an empty %s split.' % split)

    truth = _truth(model, view, matrix)
    result = forward(model, view.embeddings)
    detected = (result.activations > DETECTION_THRESHOLD).astype(np.int64)

    acc = 100.0 * float(np.mean(np.argmax(result.logits, axis=1) == view.labels))
    per_concept = [
        f1_score(truth[:, j], detected[:, j], zero_division=0)
        for j in range(model.num_concepts)
    ]
    micro = f1_score(truth.ravel(), detected.ravel(), zero_division=0)

    report = EvalReport(split=split,
                        acc=acc,
                        concept_f1=100.0 * float(np.mean(per_concept)),
                        concept_f1_micro=100.0 * float(micro),
                        num_concepts=model.num_concepts)
    if label_embeddings is not None:
        report.diversity = 100.0 * diversity(label_embeddings)
    return report


def diversity(embeddings: np.ndarray) -> float:
    """1 minus the mean pairwise cosine similarity over every unordered pair
    of (label) embeddings.

    Raises:
        ValidationError: With fewer than 2 embeddings or a zero vector.
    """
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    k = E.shape[0]
    if k < 2:
        raise ValidationError('Diversity needs at least 2 embeddings.')
    if np.any(np.linalg.norm(E, axis=1) == 0):
        raise ValidationError('Diversity of a zero vector is undefined.')
    similarities = cosine_similarity(E)
    upper = similarities[np.triu_indices(k, 1)]
    return float(1.0 - upper.mean())


def intervention_curve(model: TCBMModel, view: EmbeddingDataset,
                       matrix: ConceptMatrix,
                       ks: Sequence[int]) -> List[Tuple[int, float]]:
    """Accuracy (in percent) after intervening on k concepts per example,
    for each requested k."""
    ks = list(ks)
    if ks and (min(ks) < 0 or max(ks) > model.num_concepts):
        raise ValidationError('Cannot intervene on %d concepts out of %d.' %
                              (max(ks), model.num_concepts))
    if len(view) == 0:
        raise ValidationError('Cannot intervene on an empty split.')

    truth = _truth(model, view, matrix)
    curve = []
    for k in ks:
        logits = intervene(model, view.embeddings, truth, k).logits
        acc = 100.0 * float(np.mean(np.argmax(logits, axis=1) == view.labels))
        curve.append((k, acc))
    return curve


def load_attributions(path: str) -> List[Tuple[str, int, float]]:
    """Load token attribution records, NDJSON `{"token", "concept_id",
    "score"}`."""
    records = []
    for lineno, row in iter_ndjson(path):
        try:
            records.append((str(row['token']), int(row['concept_id']),
                            float(row['score'])))
        except (KeyError, TypeError, ValueError):
            raise ValidationError('%s: line %d: malformed attribution record'
                                  % (path, lineno))
    return records


def export_global_explanation(
        model: TCBMModel,
        records: Optional[Sequence[Tuple[str, int, float]]] = None,
        top_q: int = 8,
        labels: Optional[Dict[int, str]] = None) -> Dict:
    """Global explanation of a model: the concept to class weights of the
    classifier and, when token attributions are given, the top_q tokens of
    each concept by mean attribution score (ties by token).

    Raises:
        ValidationError: When a record references a concept outside of the
            bottleneck.
    """
    weights = model.params['cls_weight']
    explanation = {
        'concept_ids': model.concept_ids,
        'num_classes': model.num_classes,
        'weights': weights.T,
        'links': [{
            'concept_id': c,
            'class': k,
            'weight': weights[k, j]
        } for j, c in enumerate(model.concept_ids)
                  for k in range(model.num_classes)],
    }  # type: Dict
    if labels:
        explanation['labels'] = {
            str(c): labels.get(c, 'cluster-%d' % c)
            for c in model.concept_ids
        }

    if records:
        known = set(model.concept_ids)
        sums = {}  # type: Dict[int, Dict[str, List[float]]]
        for token, concept_id, score in records:
            if concept_id not in known:
                raise ValidationError(
                    'Attribution record references unknown concept %d.' %
                    concept_id)
            sums.setdefault(concept_id, {}).setdefault(token,
                                                       []).append(score)

        tokens = {}
        for concept_id in model.concept_ids:
            means = [(t, float(np.mean(s)))
                     for t, s in sums.get(concept_id, {}).items()]
            means.sort(key=lambda item: (-item[1], item[0]))
            tokens[str(concept_id)] = [{
                'token': t,
                'score': s
            } for t, s in means[:top_q]]
        explanation['tokens'] = tokens

    return explanation


def format_summary_row(report: EvalReport) -> str:
    """Render a report as a `%ACC  %c  #c` row."""
    row = '%-6s %%ACC %6.2f  %%c %6.2f  #c %3d' % (
        report.split, report.acc, report.concept_f1, report.num_concepts)
    if report.diversity is not None:
        row += '  %%D %6.2f' % report.diversity
    return row
