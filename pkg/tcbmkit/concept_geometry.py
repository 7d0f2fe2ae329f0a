import numpy as np
from dataclasses import dataclass
from sklearn.metrics import f1_score
from typing import Dict, List, Optional, Sequence
from .data_model import ConceptMatrix, EmbeddingDataset, require_split
from .dispatcher import Dispatcher, warn
from .exceptions import ConceptError, ValidationError
from .utils import read_json, write_json


@dataclass
class CAV:
    """Concept Activation Vector of a concept, along with the median
    threshold and the identifiability score of the linear concept detector
    it defines."""
    concept_id: int
    direction: np.ndarray
    threshold: float = 0.0
    identifiability: float = 0.0

    def to_dict(self) -> Dict:
        return {
            'concept_id': self.concept_id,
            'direction': self.direction,
            'threshold': self.threshold,
            'identifiability': self.identifiability,
        }


def compute_cav(train: EmbeddingDataset,
                column: np.ndarray,
                concept_id: Optional[int] = None) -> np.ndarray:
    """Mean embedding of the train texts where the concept is present minus
    the mean embedding of those where it's absent.

    Args:
        train (EmbeddingDataset): The train split.
        column (np.ndarray): Presence of the concept, aligned to train.

    Raises:
        ConceptError: When the concept is present on every train text or on
            none of them.
    """
    column = np.asarray(column)
    if column.shape != (len(train), ):
        raise ValidationError('Concept column has %d rows, train has %d.' %
                              (column.shape[0], len(train)))
    positive = column == 1
    if positive.all() or not positive.any():
        raise ConceptError('unestimable CAV%s: the concept is %s in train' %
                           ('' if concept_id is None else
                            ' for concept %d' % concept_id,
                            'always present' if positive.all() else 'never present'),
                           concept_id=concept_id)

    X = train.embeddings
    return X[positive].mean(axis=0) - X[~positive].mean(axis=0)


def project(embedding: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Inner product of embedding(s) with a CAV direction. A batch of
    embeddings gives one projection per row."""
    embedding = np.asarray(embedding, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if embedding.shape[-1] != direction.shape[0]:
        raise ValidationError('Dimension mismatch: %d vs %d.' %
                              (embedding.shape[-1], direction.shape[0]))
    return embedding @ direction


def median_threshold(projections: Sequence[float]) -> float:
    projections = np.asarray(projections, dtype=np.float64)
    if projections.size == 0:
        raise ValidationError('Cannot compute a median threshold on an empty '
                              'dev split.')
    return float(np.median(projections))


def predict_concept_linear(embedding: np.ndarray, cav: CAV) -> np.ndarray:
    """1 where the projection strictly exceeds the threshold, 0 otherwise
    (ties count as absent)."""
    return (project(embedding, cav.direction) > cav.threshold).astype(
        np.int64)


def identifiability(cav: CAV,
                    dev: EmbeddingDataset,
                    truth: np.ndarray,
                    dispatcher: Optional[Dispatcher] = None) -> float:
    """Binary F1 of the linear concept detector against the ground truth on
    the dev split. F1 is 0 when precision + recall is 0."""
    truth = np.asarray(truth)
    if len(dev) == 0:
        raise ValidationError('The dev split is empty.')
    if not truth.any():
        warn(
            dispatcher,
            'concept %d has no positive on dev, identifiability set to 0' %
            cav.concept_id)
    predictions = predict_concept_linear(dev.embeddings, cav)
    return float(f1_score(truth, predictions, zero_division=0))


def cosine_projection(embedding: np.ndarray,
                      direction: np.ndarray) -> np.ndarray:
    """Cosine similarity between embedding(s) and a CAV direction.

    Raises:
        ValidationError: When the direction or an embedding has a zero norm.
    """
    embedding = np.asarray(embedding, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    direction_norm = np.linalg.norm(direction)
    norms = np.linalg.norm(embedding, axis=-1)
    if direction_norm == 0 or np.any(norms == 0):
        raise ValidationError('Cosine projection of a zero-norm vector.')
    return project(embedding, direction) / (norms * direction_norm)


def fit_cav(dataset: EmbeddingDataset,
            matrix: ConceptMatrix,
            concept_id: int,
            dispatcher: Optional[Dispatcher] = None) -> CAV:
    """Compute the direction on train, then the median threshold and the
    identifiability on dev."""
    train = require_split(dataset, 'train')
    dev = require_split(dataset, 'dev')

    direction = compute_cav(train,
                            matrix.select(train, [concept_id])[:, 0],
                            concept_id)
    cav = CAV(concept_id, direction)
    cav.threshold = median_threshold(project(dev.embeddings, direction))
    cav.identifiability = identifiability(
        cav, dev,
        matrix.select(dev, [concept_id])[:, 0], dispatcher)
    return cav


def fit_cavs(dataset: EmbeddingDataset,
             matrix: ConceptMatrix,
             concept_ids: Optional[Sequence[int]] = None,
             dispatcher: Optional[Dispatcher] = None) -> Dict[int, CAV]:
    """Fit the CAV of every concept. Concepts whose CAV can't be estimated
    are skipped with a warning."""
    cavs = {}
    ids = concept_ids if concept_ids is not None else matrix.concepts
    for concept_id in ids:
        try:
            cavs[concept_id] = fit_cav(dataset, matrix, concept_id,
                                       dispatcher)
        except ConceptError as err:
            warn(dispatcher, 'skipping untrainable concept %d: %s' %
                 (concept_id, err.message))
    return cavs


def save_cavs(path: str,
              cavs: Dict[int, CAV],
              scores: Optional[Dict[int, Dict]] = None):
    """Write the CAVSet checkpoint. scores maps concept ids to their
    importance and combined score, when already known."""
    entries = []  # type: List[Dict]
    for concept_id in sorted(cavs):
        entry = cavs[concept_id].to_dict()
        if scores and concept_id in scores:
            entry['importance'] = scores[concept_id]['importance']
            entry['score'] = scores[concept_id]['combined']
        entries.append(entry)
    write_json(path, entries)


def load_cavs(path: str) -> Dict[int, CAV]:
    raw = read_json(path)
    if not isinstance(raw, list):
        raise ValidationError('CAV file "%s" is malformed.' % path)
    cavs = {}
    for entry in raw:
        try:
            cav = CAV(int(entry['concept_id']),
                      np.array(entry['direction'], dtype=np.float64),
                      float(entry['threshold']),
                      float(entry['identifiability']))
        except (KeyError, TypeError, ValueError):
            raise ValidationError('CAV file "%s" is malformed.' % path)
        cavs[cav.concept_id] = cav
    return cavs
