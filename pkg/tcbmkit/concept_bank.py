"""Macro concept bank construction and bottleneck initialization.

Micro concepts (topic strings) are embedded upstream, reduced to a few
dimensions and clustered with HDBSCAN; each cluster becomes a macro concept
labeled from the micro concepts nearest to its centroid. The presence
matrix marks, for each text, the macro concepts one of its micro concepts
belongs to.
"""

import numpy as np
from dataclasses import asdict, dataclass
from sklearn.cluster import HDBSCAN
from sklearn.decomposition import PCA
from sklearn.metrics import pairwise_distances
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence
from .annotation_client import MicroAnnotation, normalize_topics
from .data_model import ConceptMatrix, EmbeddingDataset
from .dispatcher import Dispatcher, emit, warn
from .exceptions import ExternalError, ValidationError
from .utils import dataclass_from_dict, iter_ndjson, read_json, write_json, write_ndjson


@dataclass
class BankConfig:
    reduce_dims: int = 5
    min_cluster_size: int = 5
    label_samples: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.reduce_dims < 1:
            raise ValidationError('bank.reduce_dims must be >= 1.')
        if self.min_cluster_size < 2:
            raise ValidationError('bank.min_cluster_size must be >= 2.')
        if self.label_samples < 1:
            raise ValidationError('bank.label_samples must be >= 1.')

    @classmethod
    def from_dict(cls, raw: Optional[Dict]) -> 'BankConfig':
        return dataclass_from_dict(cls, raw, 'bank')

    def to_dict(self) -> Dict:
        return asdict(self)


def load_micro_embeddings(path: str) -> Dict[str, np.ndarray]:
    """Load a micro-embedding file: NDJSON `{"micro": str, "embedding": [...]}`.
    Micro concepts are normalized the same way annotations are.

    Raises:
        ValidationError: On malformed rows or inconsistent dimensions.
    """
    entries = {}  # type: Dict[str, np.ndarray]
    dim = None
    for lineno, row in iter_ndjson(path):
        if 'meta' in row:
            continue
        if not isinstance(row.get('micro'), str) or not isinstance(
                row.get('embedding'), list):
            raise ValidationError('%s: line %d: malformed record' %
                                  (path, lineno))
        key = normalize_topics([row['micro']])
        if not key:
            continue
        vector = np.array(row['embedding'], dtype=np.float64)
        if dim is None:
            dim = len(vector)
        if len(vector) != dim or dim == 0:
            raise ValidationError(
                '%s: line %d: dimension mismatch for "%s"' %
                (path, lineno, row['micro']))
        entries[key[0]] = vector
    return entries


def dump_micro_embeddings(path: str, entries: Dict[str, np.ndarray]):
    write_ndjson(path, [{
        'micro': micro,
        'embedding': entries[micro]
    } for micro in sorted(entries)])


def micro_vocabulary(annotations: Sequence[MicroAnnotation]) -> List[str]:
    return sorted({t for a in annotations for t in a.topics})


def check_embeddings_cover(entries: Dict[str, np.ndarray],
                           annotations: Sequence[MicroAnnotation]):
    missing = [m for m in micro_vocabulary(annotations) if m not in entries]
    if missing:
        raise ValidationError(
            '%d micro concept(s) have no embedding, e.g. %s.' %
            (len(missing), ', '.join('"%s"' % m for m in missing[:5])))


def embed_micro_concepts(micros: Sequence[str],
                         client,
                         batch_size: int = 64) -> Dict[str, np.ndarray]:
    """Fetch sentence embeddings of micro concepts from an embeddings
    endpoint (see ChatClient.embed())."""
    entries = {}
    micros = list(micros)
    for start in range(0, len(micros), batch_size):
        batch = micros[start:start + batch_size]
        for micro, vector in zip(batch, client.embed(batch)):
            entries[micro] = np.array(vector, dtype=np.float64)
    return entries


class Reducer(object):
    """Maps micro-concept embeddings to the low-dimensional space in which
    they're clustered."""
    def reduce(self, micros: Sequence[str], X: np.ndarray) -> np.ndarray:
        raise NotImplementedError()


class PCAReducer(Reducer):
    def __init__(self, n_components: int = 5):
        self.n_components = n_components

    def reduce(self, micros: Sequence[str], X: np.ndarray) -> np.ndarray:
        n_components = min(self.n_components, X.shape[0], X.shape[1])
        return PCA(n_components=n_components,
                   svd_solver='full').fit_transform(X)


class PrecomputedReducer(Reducer):
    """Coordinates computed upstream (e.g. by UMAP), read from a file in the
    micro-embedding format."""
    def __init__(self, coordinates: Dict[str, np.ndarray]):
        self.coordinates = coordinates

    @classmethod
    def from_file(cls, path: str) -> 'PrecomputedReducer':
        return cls(load_micro_embeddings(path))

    def reduce(self, micros: Sequence[str], X: np.ndarray) -> np.ndarray:
        missing = [m for m in micros if m not in self.coordinates]
        if missing:
            raise ValidationError(
                'No reduced coordinates for %d micro concept(s), e.g. "%s".' %
                (len(missing), missing[0]))
        return np.vstack([self.coordinates[m] for m in micros])


class MicroClusters(NamedTuple):
    micros: List[str]
    reduced: np.ndarray
    labels: np.ndarray
    clusters: List[List[str]]
    noise: List[str]

    @property
    def discard_rate(self) -> float:
        return len(self.noise) / len(self.micros)


def cluster_micro_concepts(embeds: Dict[str, np.ndarray],
                           config: Optional[BankConfig] = None,
                           reducer: Optional[Reducer] = None,
                           dispatcher: Optional[Dispatcher] = None
                           ) -> MicroClusters:
    """Reduce micro-concept embeddings and cluster them with HDBSCAN
    (Euclidean distance). Points labeled as noise are dropped.

    Micro concepts are processed in sorted order, which makes the outcome
    independent of the input mapping order.

    Raises:
        ValidationError: When there are fewer distinct micro concepts than
            min_cluster_size, or when all embeddings are identical.
    """
    config = config or BankConfig()
    micros = sorted(embeds)
    if len(micros) < config.min_cluster_size:
        raise ValidationError(
            'Got %d micro concepts, fewer than min_cluster_size (%d).' %
            (len(micros), config.min_cluster_size))

    X = np.vstack([embeds[m] for m in micros])
    if np.allclose(X, X[0]):
        raise ValidationError('Micro-concept embeddings have zero variance.')

    reducer = reducer or PCAReducer(config.reduce_dims)
    reduced = reducer.reduce(micros, X)
    labels = HDBSCAN(min_cluster_size=config.min_cluster_size,
                     metric='euclidean').fit_predict(reduced)

    clusters = [[m for m, l in zip(micros, labels) if l == label]
                for label in sorted(set(labels) - {-1})]
    noise = [m for m, l in zip(micros, labels) if l == -1]

    result = MicroClusters(micros, reduced, labels, clusters, noise)
    if noise:
        warn(dispatcher,
             'discarded %d noise micro concept(s) out of %d (%.1f%%)' %
             (len(noise), len(micros), 100 * result.discard_rate))
    return result


@dataclass
class MacroConcept:
    id: int
    label: str
    members: List[str]
    centroid: np.ndarray

    def to_dict(self) -> Dict:
        return {
            'id': self.id,
            'label': self.label,
            'members': self.members,
            'centroid': self.centroid,
        }


class ConceptBank(NamedTuple):
    concepts: List[MacroConcept]
    matrix: ConceptMatrix

    def by_id(self, concept_id: int) -> MacroConcept:
        for concept in self.concepts:
            if concept.id == concept_id:
                return concept
        raise ValidationError('Unknown concept id %d.' % concept_id)


def presence_matrix(concepts: Sequence[MacroConcept],
                    annotations: Sequence[MicroAnnotation],
                    dataset: EmbeddingDataset) -> ConceptMatrix:
    """matrix[i][j] = 1 iff one of the micro concepts of text i is a member
    of concept j."""
    owner = {}  # type: Dict[str, List[int]]
    for j, concept in enumerate(concepts):
        for member in concept.members:
            owner.setdefault(member, []).append(j)

    topics = {a.text_id: a.topics for a in annotations}
    presence = np.zeros((len(dataset), len(concepts)), dtype=np.int8)
    for i, record_id in enumerate(dataset.ids):
        for topic in topics.get(record_id, []):
            for j in owner.get(topic, []):
                presence[i, j] = 1

    return ConceptMatrix([c.id for c in concepts], presence)


def build_macro_bank(clusters: MicroClusters,
                     annotations: Sequence[MicroAnnotation],
                     dataset: EmbeddingDataset,
                     labeler: Optional[Callable[[List[str], int], str]],
                     config: Optional[BankConfig] = None,
                     dispatcher: Optional[Dispatcher] = None) -> ConceptBank:
    """Create one macro concept per cluster and the presence matrix.

    Each concept is labeled by calling labeler(samples, concept_id) with the
    label_samples micro concepts nearest its centroid in the reduced space
    (all members if there are fewer). A labeler raising an ExternalError, or
    no labeler at all, gives the "cluster-<id>" label.

    Raises:
        ValidationError: When there's no cluster, or when there are at least
            as many macro concepts as micro concepts.
    """
    config = config or BankConfig()
    if not clusters.clusters:
        raise ValidationError('No cluster to build a concept bank from.')
    if len(clusters.clusters) >= len(clusters.micros):
        raise ValidationError(
            'Got %d macro concepts for %d micro concepts.' %
            (len(clusters.clusters), len(clusters.micros)))

    position = {m: i for i, m in enumerate(clusters.micros)}
    concepts = []
    for concept_id, members in enumerate(clusters.clusters):
        points = clusters.reduced[[position[m] for m in members]]
        centroid = points.mean(axis=0)
        distances = np.linalg.norm(points - centroid, axis=1)
        nearest = np.argsort(distances, kind='stable')[:config.label_samples]
        samples = [members[i] for i in nearest]

        label = 'cluster-%d' % concept_id
        if labeler is not None:
            try:
                label = labeler(samples, concept_id)
            except ExternalError as err:
                warn(
                    dispatcher, 'labeling cluster %d failed (%s), using "%s"' %
                    (concept_id, err.message, label))

        concepts.append(MacroConcept(concept_id, label, sorted(members),
                                     centroid))
        emit(dispatcher,
             'bank.concept',
             concept_id=concept_id,
             label=label,
             size=len(members))

    return ConceptBank(concepts,
                       presence_matrix(concepts, annotations, dataset))


def save_bank(path: str, bank: ConceptBank, config: Optional[Dict] = None):
    write_json(path, {
        'concepts': [c.to_dict() for c in bank.concepts],
        'config': config or {},
    })


def load_bank(path: str) -> List[MacroConcept]:
    raw = read_json(path)
    if not isinstance(raw, dict) or not isinstance(raw.get('concepts'), list):
        raise ValidationError('Bank file "%s" is malformed.' % path)
    concepts = []
    for entry in raw['concepts']:
        try:
            concepts.append(
                MacroConcept(int(entry['id']), str(entry['label']),
                             list(entry['members']),
                             np.array(entry['centroid'], dtype=np.float64)))
        except (KeyError, TypeError, ValueError):
            raise ValidationError('Bank file "%s" is malformed.' % path)
    return concepts


def cooccurrence_clusters(matrix: ConceptMatrix,
                          rows: Optional[EmbeddingDataset] = None,
                          concept_ids: Optional[Sequence[int]] = None,
                          min_cluster_size: int = 2,
                          epsilon: float = 0.5,
                          metric: str = 'jaccard') -> List[List[int]]:
    """Group concepts whose presence columns co-occur.

    Each concept is represented by its presence column (restricted to the
    given rows), distances between columns are Jaccard distances, and the
    distance matrix is clustered with HDBSCAN. Clusters merging below
    `epsilon` are kept whole; noise concepts become singleton groups.

    Returns:
        List[List[int]]: Groups of concept ids, each sorted by id, groups
        sorted by their smallest id.
    """
    ids = list(concept_ids) if concept_ids is not None else list(
        matrix.concepts)
    if len(ids) < 2:
        raise ValidationError('Co-occurrence clustering needs >= 2 concepts.')

    columns = matrix.select(rows, ids).T.astype(bool)
    distances = pairwise_distances(columns, metric=metric)
    labels = HDBSCAN(min_cluster_size=min_cluster_size,
                     metric='precomputed',
                     cluster_selection_epsilon=epsilon,
                     allow_single_cluster=True).fit_predict(distances)

    groups = []  # type: List[List[int]]
    for label in sorted(set(labels) - {-1}):
        groups.append(sorted(c for c, l in zip(ids, labels) if l == label))
    groups.extend([c] for c, l in zip(ids, labels) if l == -1)

    return sorted(groups, key=lambda g: g[0])


def _best_unused(group: Sequence[int], scores: Dict[int, float],
                 used: set) -> Optional[int]:
    candidates = [c for c in group if c not in used]
    if not candidates:
        return None
    return min(candidates, key=lambda c: (-scores[c], c))


def init_cbl(scores: Dict[int, float],
             groups: Sequence[Sequence[int]],
             matrix: ConceptMatrix,
             train: EmbeddingDataset,
             coverage_target: float = 0.99,
             dispatcher: Optional[Dispatcher] = None) -> List[int]:
    """Pick the initial bottleneck concepts.

    Concepts are taken in rounds over the co-occurrence groups: each round
    takes the best unused concept of every group, groups being visited by
    descending score of that concept (ties by id). Selection stops as soon
    as the fraction of train texts with at least one selected concept
    present reaches coverage_target.

    Returns:
        List[int]: Selected concept ids, in selection order. When the target
        can't be reached, every grouped concept is returned and a warning is
        emitted.
    """
    if len(train) == 0:
        raise ValidationError('The train split is empty.')

    presence = matrix.select(train)
    covered = np.zeros(len(train), dtype=bool)
    selected = []  # type: List[int]
    used = set()  # type: set

    while True:
        candidates = [_best_unused(g, scores, used) for g in groups]
        candidates = sorted((c for c in candidates if c is not None),
                            key=lambda c: (-scores[c], c))
        if not candidates:
            break

        for concept_id in candidates:
            selected.append(concept_id)
            used.add(concept_id)
            covered |= presence[:, matrix.position(concept_id)] == 1
            if covered.mean() >= coverage_target:
                return selected

    warn(
        dispatcher,
        'coverage target %.2f unreachable (%.4f with every concept), keeping all %d concepts'
        % (coverage_target, covered.mean(), len(selected)))
    return selected


def next_concepts(groups: Sequence[Sequence[int]], scores: Dict[int, float],
                  current: Sequence[int]) -> List[int]:
    """Return the best unused concept of every group that still has one,
    sorted by descending score (ties by id). An empty list means every
    concept is already in the bottleneck."""
    used = set(current)
    picked = [_best_unused(g, scores, used) for g in groups]
    return sorted((c for c in picked if c is not None),
                  key=lambda c: (-scores[c], c))
