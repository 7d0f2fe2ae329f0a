"""Datasets, classifier heads and concept matrices.

Everything the pipeline consumes is ingested from files: the frozen
backbone embeddings f(x), the classification head of the original model and
the binary concept presence matrix. All objects are immutable once loaded
(their numpy arrays are flagged read-only) and every matrix is aligned to
the record order of the dataset file.
"""

import hashlib
import numpy as np
from scipy.special import expit
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple
from .dispatcher import Dispatcher, warn
from .exceptions import DatasetError, ValidationError
from .utils import iter_ndjson, meta_line, read_json, write_ndjson

SPLITS = ('train', 'dev', 'test')


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Record(NamedTuple):
    id: str
    split: str
    label: int
    embedding: np.ndarray


class EmbeddingDataset(object):
    """A set of texts represented by their frozen-backbone embeddings.

    A dataset loaded from a file owns its rows. A view created with
    split_view() shares the parent's arrays semantics and remembers the row
    indices it was built from (see `indices`), which is what keeps concept
    matrices aligned with views.
    """
    def __init__(self,
                 ids: Sequence[str],
                 splits: Sequence[str],
                 labels: Sequence[int],
                 embeddings: np.ndarray,
                 num_classes: int,
                 baseline: Optional[np.ndarray] = None,
                 texts: Optional[Dict[str, str]] = None,
                 indices: Optional[np.ndarray] = None):
        """
        Args:
            ids (Sequence[str]): Unique record ids, in file order.
            splits (Sequence[str]): Split tag of each record.
            labels (Sequence[int]): Class index of each record.
            embeddings (np.ndarray): n×d matrix of embeddings.
            num_classes (int): Number of classes K of the classifier.
            baseline (Optional[np.ndarray]):
                Integrated-gradients baseline embedding (e.g. the embedding
                of a padding-only text). Defaults to the zero vector.
            texts (Optional[Dict[str, str]]): Raw texts by record id.
            indices (Optional[np.ndarray]):
                Row indices of these records in the dataset they've been
                loaded with. Defaults to 0..n-1.
        """
        embeddings = np.array(embeddings, dtype=np.float64, copy=True)
        if embeddings.ndim != 2:
            raise DatasetError('embeddings must be a 2-d matrix')

        n, dim = embeddings.shape
        self._ids = tuple(ids)
        self._splits = tuple(splits)
        self._labels = _readonly(np.array(labels, dtype=np.int64).reshape(n))
        self._embeddings = _readonly(embeddings)
        self._num_classes = int(num_classes)
        self._dim = int(dim)
        if baseline is None:
            baseline = np.zeros(dim)
        self._baseline = _readonly(np.array(baseline, dtype=np.float64))
        self._texts = dict(texts) if texts else {}
        if indices is None:
            indices = np.arange(n)
        self._indices = _readonly(np.array(indices, dtype=np.int64))

    @property
    def ids(self) -> Tuple[str, ...]:
        return self._ids

    @property
    def splits(self) -> Tuple[str, ...]:
        return self._splits

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def embeddings(self) -> np.ndarray:
        return self._embeddings

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def baseline(self) -> np.ndarray:
        return self._baseline

    @property
    def texts(self) -> Dict[str, str]:
        return self._texts

    @property
    def indices(self) -> np.ndarray:
        return self._indices

    def __len__(self) -> int:
        return len(self._ids)

    def __iter__(self) -> Iterator[Record]:
        for i, record_id in enumerate(self._ids):
            yield Record(record_id, self._splits[i], int(self._labels[i]),
                         self._embeddings[i])

    def select(self, positions: np.ndarray) -> 'EmbeddingDataset':
        """Build a view over the rows at the given positions (relative to
        this dataset)."""
        positions = np.asarray(positions, dtype=np.int64)
        return EmbeddingDataset(
            [self._ids[i] for i in positions],
            [self._splits[i] for i in positions],
            self._labels[positions],
            self._embeddings[positions].reshape(len(positions), self._dim),
            self._num_classes,
            baseline=self._baseline,
            texts=self._texts,
            indices=self._indices[positions],
        )

    def fingerprint(self) -> str:
        """Return a sha256 digest of ids, splits, labels and embeddings."""
        digest = hashlib.sha256()
        digest.update('\n'.join(self._ids).encode('utf-8'))
        digest.update('\n'.join(self._splits).encode('utf-8'))
        digest.update(np.ascontiguousarray(self._labels).tobytes())
        digest.update(np.ascontiguousarray(self._embeddings).tobytes())
        return digest.hexdigest()


def _parse_vector(value, line: int, what: str,
                  record_id: Optional[str] = None) -> np.ndarray:
    if not isinstance(value, list) or len(value) == 0:
        raise DatasetError('%s must be a non-empty list of numbers' % what,
                           line=line,
                           record_id=record_id)
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DatasetError('%s must be a non-empty list of numbers' %
                               what,
                               line=line,
                               record_id=record_id)
    vector = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(vector)):
        raise DatasetError('%s contains non-finite values' % what,
                           line=line,
                           record_id=record_id)
    return vector


def load_dataset(path: str) -> EmbeddingDataset:
    """Load and validate an NDJSON dataset file.

    Each line holds one record
    `{"id": str, "split": "train"|"dev"|"test", "label": int, "embedding": [float...]}`
    with an optional `"text"` field. An optional first line
    `{"meta": {"dim": int, "num_classes": int, "baseline": [float...]}}`
    declares the dimension, the number of classes and the IG baseline.

    Raises:
        DatasetError: On a malformed record (its line number is reported),
            a dimension mismatch, an unknown split tag, a duplicate id, a
            label out of range or an empty file.
    """
    meta = {}  # type: Dict
    ids = []  # type: List[str]
    splits = []  # type: List[str]
    labels = []  # type: List[int]
    vectors = []  # type: List[np.ndarray]
    texts = {}  # type: Dict[str, str]
    seen = set()  # type: set
    dim = None  # type: Optional[int]

    for lineno, row in iter_ndjson(path):
        if not isinstance(row, dict):
            raise DatasetError('malformed record', line=lineno)
        if 'meta' in row:
            if ids or meta:
                raise DatasetError('meta line must come first', line=lineno)
            meta = row['meta'] if isinstance(row['meta'], dict) else {}
            if 'dim' in meta:
                dim = meta['dim']
            continue

        for key in ('id', 'split', 'label', 'embedding'):
            if key not in row:
                raise DatasetError('malformed record: missing "%s"' % key,
                                   line=lineno)

        record_id = row['id']
        if not isinstance(record_id, str):
            raise DatasetError('malformed record: "id" must be a string',
                               line=lineno)
        if record_id in seen:
            raise DatasetError('duplicate id "%s"' % record_id,
                               line=lineno,
                               record_id=record_id)
        if row['split'] not in SPLITS:
            raise DatasetError('unknown split tag "%s" for record "%s"' %
                               (row['split'], record_id),
                               line=lineno,
                               record_id=record_id)
        label = row['label']
        if isinstance(label, bool) or not isinstance(label,
                                                     int) or label < 0:
            raise DatasetError(
                'malformed record: "label" must be a non-negative integer',
                line=lineno,
                record_id=record_id)

        vector = _parse_vector(row['embedding'], lineno, 'embedding',
                               record_id)
        if dim is None:
            dim = len(vector)
        if len(vector) != dim:
            raise DatasetError(
                'dimension mismatch for record "%s": expected %d, got %d' %
                (record_id, dim, len(vector)),
                line=lineno,
                record_id=record_id)

        seen.add(record_id)
        ids.append(record_id)
        splits.append(row['split'])
        labels.append(label)
        vectors.append(vector)
        if isinstance(row.get('text'), str):
            texts[record_id] = row['text']

    if not ids:
        raise DatasetError('empty dataset')

    num_classes = meta.get('num_classes', max(labels) + 1)
    for record_id, label in zip(ids, labels):
        if label >= num_classes:
            raise DatasetError('label %d of record "%s" is out of range' %
                               (label, record_id),
                               record_id=record_id)

    baseline = None
    if meta.get('baseline') is not None:
        baseline = _parse_vector(meta['baseline'], 1, 'baseline')
        if len(baseline) != dim:
            raise DatasetError('baseline has dimension %d, expected %d' %
                               (len(baseline), dim))

    return EmbeddingDataset(ids,
                            splits,
                            labels,
                            np.vstack(vectors),
                            num_classes,
                            baseline=baseline,
                            texts=texts)


def dump_dataset(dataset: EmbeddingDataset, path: str):
    """Write the dataset in its canonical NDJSON form. A meta line is always
    written, thus loading then dumping a canonical file gives back the
    exact same bytes."""
    rows = [
        meta_line({
            'dim': dataset.dim,
            'num_classes': dataset.num_classes,
            'baseline': dataset.baseline,
        })
    ]  # type: List[Dict]
    for record in dataset:
        row = {
            'id': record.id,
            'split': record.split,
            'label': record.label,
            'embedding': record.embedding,
        }
        if record.id in dataset.texts:
            row['text'] = dataset.texts[record.id]
        rows.append(row)
    write_ndjson(path, rows)


def split_view(dataset: EmbeddingDataset, split: str) -> EmbeddingDataset:
    """Return a read-only view holding exactly the records tagged with the
    given split, in their original order. The view might be empty."""
    if split not in SPLITS:
        raise ValidationError('Unknown split "%s".' % split)
    positions = np.array(
        [i for i, tag in enumerate(dataset.splits) if tag == split],
        dtype=np.int64)
    return dataset.select(positions)


def require_split(dataset: EmbeddingDataset, split: str) -> EmbeddingDataset:
    view = split_view(dataset, split)
    if len(view) == 0:
        raise ValidationError('The %s split is empty.' % split)
    return view


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) *
                                    (x + 0.044715 * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * c * (1.0 +
                                                           3 * 0.044715 * x**2)


ACTIVATIONS = {
    'tanh': (np.tanh, lambda x: 1.0 - np.tanh(x)**2),
    'sigmoid': (expit, lambda x: expit(x) * (1.0 - expit(x))),
    'softplus': (lambda x: np.logaddexp(0.0, x), expit),
    'gelu': (_gelu, _gelu_grad),
}  # type: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]]


class ClassifierHead(object):
    """The classification layer f_cls of the original model, mapping an
    embedding to K logits. It's either linear (z ↦ W z + b) or a one-hidden
    layer perceptron (z ↦ W act(H z + c) + b) with a smooth activation.
    """
    def __init__(self,
                 kind: str,
                 weight: np.ndarray,
                 bias: np.ndarray,
                 hidden_weight: Optional[np.ndarray] = None,
                 hidden_bias: Optional[np.ndarray] = None,
                 activation: Optional[str] = None):
        if kind not in ('linear', 'mlp'):
            raise ValidationError('Unknown head kind "%s".' % kind)

        self.kind = kind
        self.weight = _readonly(np.array(weight, dtype=np.float64))
        self.bias = _readonly(np.array(bias, dtype=np.float64))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],
                                                         ):
            raise ValidationError(
                'Head weights and bias have inconsistent shapes.')

        self.hidden_weight = None  # type: Optional[np.ndarray]
        self.hidden_bias = None  # type: Optional[np.ndarray]
        self.activation = None  # type: Optional[str]
        if kind == 'mlp':
            if hidden_weight is None or hidden_bias is None:
                raise ValidationError('An mlp head needs a hidden layer.')
            if activation not in ACTIVATIONS:
                raise ValidationError(
                    'Unknown activation "%s" (supported: %s).' %
                    (activation, ', '.join(sorted(ACTIVATIONS))))
            self.hidden_weight = _readonly(
                np.array(hidden_weight, dtype=np.float64))
            self.hidden_bias = _readonly(
                np.array(hidden_bias, dtype=np.float64))
            self.activation = activation
            if self.hidden_weight.ndim != 2 or self.hidden_bias.shape != (
                    self.hidden_weight.shape[0], ):
                raise ValidationError(
                    'Hidden weights and bias have inconsistent shapes.')
            if self.weight.shape[1] != self.hidden_weight.shape[0]:
                raise ValidationError(
                    'Output layer expects %d hidden units, hidden layer has %d.'
                    % (self.weight.shape[1], self.hidden_weight.shape[0]))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        if self.hidden_weight is not None:
            return self.hidden_weight.shape[1]
        return self.weight.shape[1]

    def pre_activations(self, Z: np.ndarray) -> np.ndarray:
        assert self.hidden_weight is not None and self.hidden_bias is not None
        return np.atleast_2d(Z) @ self.hidden_weight.T + self.hidden_bias

    def logits(self, Z: np.ndarray) -> np.ndarray:
        """Evaluate the head on a batch (or a single embedding)."""
        Z = np.asarray(Z, dtype=np.float64)
        single = Z.ndim == 1
        Z = np.atleast_2d(Z)
        if self.kind == 'linear':
            out = Z @ self.weight.T + self.bias
        else:
            act, _ = ACTIVATIONS[self.activation]  # type: ignore
            out = act(self.pre_activations(Z)) @ self.weight.T + self.bias
        return out[0] if single else out


def load_head(path: str,
              dataset: Optional[EmbeddingDataset] = None) -> ClassifierHead:
    """Load a head file `{"kind": "linear"|"mlp", "weights": [[...]],
    "bias": [...], "hidden": optional}`. For mlp heads, "hidden" is
    `{"weights": [[...]], "bias": [...], "activation": "tanh"}` and
    "weights"/"bias" are those of the output layer.

    Raises:
        ValidationError: When the file is malformed or, if a dataset is
            given, when the head doesn't map ℝ^d to ℝ^K.
    """
    raw = read_json(path)
    if not isinstance(raw, dict) or 'weights' not in raw or 'bias' not in raw:
        raise ValidationError('Head file "%s" is malformed.' % path)

    hidden = raw.get('hidden') or {}
    head = ClassifierHead(raw.get('kind', 'linear'),
                          raw['weights'],
                          raw['bias'],
                          hidden_weight=hidden.get('weights'),
                          hidden_bias=hidden.get('bias'),
                          activation=hidden.get('activation'))

    if dataset is not None:
        if head.dim != dataset.dim:
            raise ValidationError(
                'Head expects embeddings of dimension %d, dataset has %d.' %
                (head.dim, dataset.dim))
        if head.num_classes != dataset.num_classes:
            raise ValidationError(
                'Head outputs %d classes, dataset has %d.' %
                (head.num_classes, dataset.num_classes))

    return head


def head_to_dict(head: ClassifierHead) -> Dict:
    raw = {
        'kind': head.kind,
        'weights': head.weight,
        'bias': head.bias,
    }  # type: Dict
    if head.kind == 'mlp':
        raw['hidden'] = {
            'weights': head.hidden_weight,
            'bias': head.hidden_bias,
            'activation': head.activation,
        }
    return raw


class ConceptMatrix(object):
    """Binary presence matrix c: one row per dataset record (in dataset
    order), one column per concept id."""
    def __init__(self, concepts: Sequence[int], presence: np.ndarray):
        presence = np.array(presence, copy=True)
        if presence.ndim != 2 or presence.shape[1] != len(concepts):
            raise ValidationError(
                'Concept matrix has %s columns for %d concepts.' %
                (presence.shape[1] if presence.ndim == 2 else '?',
                 len(concepts)))
        if not np.all((presence == 0) | (presence == 1)):
            raise ValidationError('Concept matrix entries must be 0 or 1.')
        if len(set(concepts)) != len(concepts):
            raise ValidationError('Concept ids must be unique.')

        self._concepts = tuple(int(c) for c in concepts)
        self._presence = _readonly(presence.astype(np.int8))
        self._positions = {c: j for j, c in enumerate(self._concepts)}

    @property
    def concepts(self) -> Tuple[int, ...]:
        return self._concepts

    @property
    def presence(self) -> np.ndarray:
        return self._presence

    @property
    def shape(self) -> Tuple[int, int]:
        return self._presence.shape  # type: ignore

    def position(self, concept_id: int) -> int:
        if concept_id not in self._positions:
            raise ValidationError('Unknown concept id %d.' % concept_id)
        return self._positions[concept_id]

    def column(self, concept_id: int) -> np.ndarray:
        return self._presence[:, self.position(concept_id)]

    def select(self,
               view: Optional[EmbeddingDataset] = None,
               concept_ids: Optional[Sequence[int]] = None) -> np.ndarray:
        """Return the presence sub-matrix for the rows of a dataset view and
        the given concept ids (in their given order)."""
        rows = self._presence
        if view is not None:
            rows = rows[view.indices]
        if concept_ids is not None:
            rows = rows[:, [self.position(c) for c in concept_ids]]
        return rows


def load_concept_matrix(path: str, dataset: EmbeddingDataset) -> ConceptMatrix:
    """Load a concept matrix NDJSON file: an optional meta line
    `{"meta": {"concepts": [ids...]}}` then one row
    `{"id": str, "concepts": [0|1...]}` per dataset record.

    Rows may come in any order, they are aligned on dataset ids.

    Raises:
        ValidationError: When a row references an unknown id, an id is
            missing, or rows have inconsistent lengths.
    """
    concept_ids = None  # type: Optional[List[int]]
    by_id = {}  # type: Dict[str, List[int]]
    known = set(dataset.ids)

    for lineno, row in iter_ndjson(path):
        if 'meta' in row:
            meta = row['meta']
            if not isinstance(meta, dict) or not isinstance(
                    meta.get('concepts', []), list):
                raise ValidationError('%s: line %d: malformed meta line' %
                                      (path, lineno))
            concept_ids = list(meta.get('concepts', []))
            continue
        if row.get('id') not in known:
            raise ValidationError('%s: line %d: unknown id "%s"' %
                                  (path, lineno, row.get('id')))
        if row['id'] in by_id:
            raise ValidationError('%s: line %d: duplicate id "%s"' %
                                  (path, lineno, row['id']))
        if not isinstance(row.get('concepts'), list):
            raise ValidationError('%s: line %d: "concepts" must be a list' %
                                  (path, lineno))
        by_id[row['id']] = row['concepts']

    if len(by_id) != len(dataset):
        raise ValidationError(
            'Concept matrix has %d rows, dataset has %d records.' %
            (len(by_id), len(dataset)))

    presence = np.array([by_id[i] for i in dataset.ids])
    if presence.ndim != 2:
        raise ValidationError('Concept matrix rows have different lengths.')
    if concept_ids is None:
        concept_ids = list(range(presence.shape[1]))

    return ConceptMatrix(concept_ids, presence)


def dump_concept_matrix(matrix: ConceptMatrix,
                        dataset: EmbeddingDataset,
                        path: str,
                        meta: Optional[Dict] = None):
    header = dict(meta or {})
    header['concepts'] = list(matrix.concepts)
    rows = [meta_line(header)]  # type: List[Dict]
    for i, record_id in enumerate(dataset.ids):
        rows.append({'id': record_id, 'concepts': matrix.presence[i]})
    write_ndjson(path, rows)


class ValidationReport(NamedTuple):
    positive_counts: Dict[int, int]
    all_zero: List[int]
    all_one: List[int]
    num_rows: int

    @property
    def untrainable(self) -> List[int]:
        return sorted(self.all_zero + self.all_one)

    def to_dict(self) -> Dict:
        return {
            'positive_counts': {str(k): v
                                for k, v in self.positive_counts.items()},
            'all_zero': self.all_zero,
            'all_one': self.all_one,
            'num_rows': self.num_rows,
        }


def validate_concept_matrix(
        matrix: ConceptMatrix,
        dataset: EmbeddingDataset,
        dispatcher: Optional[Dispatcher] = None) -> ValidationReport:
    """Check a concept matrix against a dataset and count positives per
    concept. A concept whose column is all zeros or all ones cannot get a
    CAV, it's flagged as an untrainable concept.

    Raises:
        ValidationError: When the matrix row count differs from the dataset
            size.
    """
    n, _ = matrix.shape
    if n != len(dataset):
        raise ValidationError(
            'Concept matrix has %d rows, dataset has %d records.' %
            (n, len(dataset)))

    counts = matrix.presence.sum(axis=0)
    positive_counts = {c: int(counts[j]) for j, c in enumerate(matrix.concepts)}
    all_zero = [c for c, k in positive_counts.items() if k == 0]
    all_one = [c for c, k in positive_counts.items() if k == n]

    for c in all_zero:
        warn(dispatcher, 'untrainable concept %d: never present' % c)
    for c in all_one:
        warn(dispatcher, 'untrainable concept %d: always present' % c)

    return ValidationReport(positive_counts, all_zero, all_one, n)
