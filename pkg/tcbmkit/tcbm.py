"""Textual Concept Bottleneck Models.

A model is made of three layers on top of the frozen embedding f(x):

  * the concept layer, mapping f(x) to one logit per bottleneck concept
    (an affine map, or the cosine similarity with each CAV in projection
    mode);
  * the classifier, a linear map from concept activations to class logits;
  * an optional residual layer, a linear map from f(x) to class logits.

Concept activations are the logistic-squashed concept logits unless the
`squash` setting is off. Training minimizes
λ·BCE(concepts) + CE(classes) + ridge(residual) + elastic-net(classifier)
with analytic gradients, the penalties being spread over the train samples.
"""

import numpy as np
from dataclasses import asdict, dataclass, replace
from scipy.special import expit, log_softmax, softmax
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple
from .concept_geometry import CAV
from .data_model import ConceptMatrix, EmbeddingDataset, require_split
from .dispatcher import Dispatcher, emit
from .exceptions import TrainingError, ValidationError
from .utils import dataclass_from_dict, read_json, write_json

STRATEGIES = ('joint', 'sequential', 'projection')
OPTIMIZERS = ('adam', 'sgd')

PARAMS = ('concept_weight', 'concept_bias', 'cls_weight', 'cls_bias',
          'residual_weight', 'residual_bias')
CONCEPT_PARAMS = ('concept_weight', 'concept_bias')
HEAD_PARAMS = ('cls_weight', 'cls_bias', 'residual_weight', 'residual_bias')


@dataclass
class TrainConfig:
    lambda_concept: float = 0.5
    lambda_ridge: float = 0.01
    lambda_en: float = 0.5
    alpha: float = 0.01
    learning_rate: float = 0.001
    epochs: int = 15
    batch_size: int = 8
    strategy: str = 'joint'
    residual: bool = False
    patience: int = 5
    squash: bool = True
    optimizer: str = 'adam'
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError('Unknown training strategy "%s".' %
                                  self.strategy)
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError('Unknown optimizer "%s".' % self.optimizer)
        if self.learning_rate <= 0:
            raise ValidationError('train.learning_rate must be > 0.')
        for name in ('lambda_concept', 'lambda_ridge', 'lambda_en'):
            if getattr(self, name) < 0:
                raise ValidationError('train.%s must be >= 0.' % name)
        if not 0 <= self.alpha <= 1:
            raise ValidationError('train.alpha must be in [0, 1].')
        if self.epochs < 0 or self.batch_size < 0 or self.patience < 0:
            raise ValidationError(
                'train.epochs, train.batch_size and train.patience must be >= 0.'
            )

    @classmethod
    def from_dict(cls, raw: Optional[Dict]) -> 'TrainConfig':
        return dataclass_from_dict(cls, raw, 'train')

    def to_dict(self) -> Dict:
        return asdict(self)


class TCBMModel(object):
    def __init__(self,
                 concept_ids: Sequence[int],
                 params: Dict[str, np.ndarray],
                 config: TrainConfig,
                 data_fingerprint: Optional[str] = None):
        self.concept_ids = [int(c) for c in concept_ids]
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.config = config
        self.data_fingerprint = data_fingerprint

        n_concepts = len(self.concept_ids)
        if self.params['concept_weight'].shape[0] != n_concepts or \
                self.params['cls_weight'].shape[1] != n_concepts:
            raise ValidationError(
                'Model parameters are inconsistent with %d concepts.' %
                n_concepts)
        if self.residual and self.params['residual_weight'].shape != (
                self.num_classes, self.dim):
            raise ValidationError('Residual layer has inconsistent shape.')

    @property
    def projection(self) -> bool:
        return self.config.strategy == 'projection'

    @property
    def residual(self) -> bool:
        return 'residual_weight' in self.params

    @property
    def dim(self) -> int:
        return self.params['concept_weight'].shape[1]

    @property
    def num_classes(self) -> int:
        return self.params['cls_weight'].shape[0]

    @property
    def num_concepts(self) -> int:
        return len(self.concept_ids)

    def without_residual(self) -> 'TCBMModel':
        params = {
            k: v
            for k, v in self.params.items()
            if k not in ('residual_weight', 'residual_bias')
        }
        return TCBMModel(self.concept_ids, params,
                         replace(self.config, residual=False),
                         self.data_fingerprint)


class ForwardResult(NamedTuple):
    logits: np.ndarray
    activations: np.ndarray


class Batch(NamedTuple):
    embeddings: np.ndarray
    concepts: np.ndarray
    labels: np.ndarray


class LossResult(NamedTuple):
    total: float
    concept_term: float
    class_term: float
    penalty_term: float
    grads: Optional[Dict[str, np.ndarray]] = None


class TrainResult(NamedTuple):
    model: TCBMModel
    log: List[Dict]
    best_epoch: int


def _as_batch(embedding: np.ndarray) -> Tuple[np.ndarray, bool]:
    embedding = np.asarray(embedding, dtype=np.float64)
    return np.atleast_2d(embedding), embedding.ndim == 1


def _concept_logits(model: TCBMModel, Z: np.ndarray) -> np.ndarray:
    if Z.shape[1] != model.dim:
        raise ValidationError('Embedding has dimension %d, model expects %d.' %
                              (Z.shape[1], model.dim))
    W = model.params['concept_weight']
    if model.projection:
        norms = np.linalg.norm(Z, axis=1)
        if np.any(norms == 0):
            raise ValidationError('Cosine projection of a zero-norm vector.')
        return (Z @ W.T) / norms[:, None]
    return Z @ W.T + model.params['concept_bias']


def _activations(model: TCBMModel, logits: np.ndarray) -> np.ndarray:
    return expit(logits) if model.config.squash else logits


def _logits_from_activations(model: TCBMModel, A: np.ndarray,
                             Z: np.ndarray) -> np.ndarray:
    out = A @ model.params['cls_weight'].T + model.params['cls_bias']
    if model.residual:
        out = out + Z @ model.params['residual_weight'].T + model.params[
            'residual_bias']
    return out


def concept_logits(model: TCBMModel, embedding: np.ndarray) -> np.ndarray:
    """Output of the concept layer for an embedding (or a batch of them)."""
    Z, single = _as_batch(embedding)
    out = _concept_logits(model, Z)
    return out[0] if single else out


def forward(model: TCBMModel, embedding: np.ndarray) -> ForwardResult:
    """Compute class logits and concept activations."""
    Z, single = _as_batch(embedding)
    A = _activations(model, _concept_logits(model, Z))
    out = _logits_from_activations(model, A, Z)
    if single:
        return ForwardResult(out[0], A[0])
    return ForwardResult(out, A)


def predict(model: TCBMModel, embedding: np.ndarray) -> np.ndarray:
    """Argmax of the class logits, ties going to the lowest class index."""
    logits = forward(model, embedding).logits
    return np.argmax(logits, axis=-1)


def accuracy(model: TCBMModel, view: EmbeddingDataset) -> float:
    if len(view) == 0:
        raise ValidationError('Cannot measure accuracy on an empty split.')
    return float(np.mean(predict(model, view.embeddings) == view.labels))


def intervene(model: TCBMModel, embedding: np.ndarray, truth: np.ndarray,
              k: int) -> ForwardResult:
    """Replace the k concept activations farthest from the ground truth by
    the ground truth, then recompute the class logits.

    Args:
        embedding (np.ndarray): One embedding or a batch of them.
        truth (np.ndarray): 0/1 presence of the bottleneck concepts (in
            model.concept_ids order), one row per embedding.
        k (int): Number of concepts to correct, per embedding.
    """
    Z, single = _as_batch(embedding)
    T = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if T.shape != (Z.shape[0], model.num_concepts):
        raise ValidationError('Ground truth must cover the %d bottleneck '
                              'concepts.' % model.num_concepts)
    if not 0 <= k <= model.num_concepts:
        raise ValidationError('Cannot intervene on %d concepts out of %d.' %
                              (k, model.num_concepts))

    A = _activations(model, _concept_logits(model, Z))
    if k > 0:
        A = A.copy()
        order = np.argsort(-np.abs(A - T), axis=1, kind='stable')[:, :k]
        rows = np.arange(Z.shape[0])[:, None]
        A[rows, order] = T[rows, order]

    out = _logits_from_activations(model, A, Z)
    if single:
        return ForwardResult(out[0], A[0])
    return ForwardResult(out, A)


def _objective_terms(model: TCBMModel, phase: str) -> Tuple[bool, bool]:
    """Tell which terms make the objective of a training phase: (concept
    term, class term + penalties)."""
    if phase == 'concepts':
        return True, False
    if phase == 'classifier' or model.projection:
        return False, True
    return True, True


def tcbm_loss(model: TCBMModel,
              batch: Batch,
              config: TrainConfig,
              phase: str = 'joint',
              with_grads: bool = False,
              num_samples: Optional[int] = None) -> LossResult:
    """Compute the training loss on a batch.

    total = λ·concept_term + class_term + penalty_term, where concept_term
    is the mean per-concept binary cross-entropy of the concept logits,
    class_term the cross-entropy of the class logits and penalty_term the
    ridge penalty of the residual weights plus the elastic-net penalty of
    the classifier weights (biases are not penalized).

    In projection mode, and in the classifier phase of sequential training,
    the concept term is left out of the total. In the concepts phase, the
    total is the concept term alone.

    Args:
        num_samples (Optional[int]):
            Size of the set the penalties are spread over. Training passes
            the train size, so that every batch minimizes a share of
            sum(losses) + penalties instead of paying the whole penalty once
            per batch. The penalties are taken as is when not given.
    """
    Z = batch.embeddings
    C = np.asarray(batch.concepts, dtype=np.float64)
    y = np.asarray(batch.labels, dtype=np.int64)
    n = Z.shape[0]
    if C.shape != (n, model.num_concepts):
        raise ValidationError('Missing concept labels: expected a %dx%d '
                              'matrix.' % (n, model.num_concepts))

    p = model.params
    S = _concept_logits(model, Z)
    A = _activations(model, S)
    out = _logits_from_activations(model, A, Z)

    concept_term = float(np.mean(np.logaddexp(0.0, S) - C * S))
    class_term = float(-np.mean(log_softmax(out, axis=1)[np.arange(n), y]))

    cls_w = p['cls_weight']
    en = config.lambda_en * (config.alpha * np.abs(cls_w).sum() +
                             (1 - config.alpha) * np.square(cls_w).sum())
    ridge = 0.0
    if model.residual:
        ridge = config.lambda_ridge * np.square(p['residual_weight']).sum()
    scale = 1.0 / num_samples if num_samples else 1.0
    penalty_term = float(scale * (en + ridge))

    with_concept, with_class = _objective_terms(model, phase)
    concept_factor = 1.0 if phase == 'concepts' else config.lambda_concept
    total = 0.0
    if with_concept:
        total += concept_factor * concept_term
    if with_class:
        total += class_term + penalty_term

    grads = None
    if with_grads:
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dS = np.zeros_like(S)
        if with_class:
            G = softmax(out, axis=1)
            G[np.arange(n), y] -= 1.0
            G /= n
            grads['cls_weight'] = G.T @ A + scale * config.lambda_en * (
                config.alpha * np.sign(cls_w) + 2 * (1 - config.alpha) * cls_w)
            grads['cls_bias'] = G.sum(axis=0)
            if model.residual:
                grads['residual_weight'] = G.T @ Z + \
                    2 * scale * config.lambda_ridge * p['residual_weight']
                grads['residual_bias'] = G.sum(axis=0)
            dA = G @ cls_w
            dS += dA * A * (1 - A) if model.config.squash else dA
        if with_concept:
            dS += concept_factor * (expit(S) - C) / C.size
        if not model.projection:
            grads['concept_weight'] = dS.T @ Z
            grads['concept_bias'] = dS.sum(axis=0)

    return LossResult(total, concept_term, class_term, penalty_term, grads)


def init_model(concept_ids: Sequence[int],
               dim: int,
               num_classes: int,
               config: TrainConfig,
               cavs: Optional[Dict[int, CAV]] = None) -> TCBMModel:
    """Seeded initialization: weights drawn from U(-1/√fan_in, 1/√fan_in),
    biases set to zero. In projection mode, the concept layer holds the
    unit-normalized CAV directions."""
    rng = np.random.default_rng(config.seed)
    n_concepts = len(concept_ids)

    def uniform(rows: int, fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(rows, fan_in))

    if config.strategy == 'projection':
        if cavs is None or any(c not in cavs for c in concept_ids):
            raise ValidationError('Projection mode needs a CAV for every '
                                  'bottleneck concept.')
        directions = np.vstack([cavs[c].direction for c in concept_ids])
        norms = np.linalg.norm(directions, axis=1)
        if np.any(norms == 0):
            raise ValidationError('Cosine projection of a zero-norm vector.')
        concept_weight = directions / norms[:, None]
    else:
        concept_weight = uniform(n_concepts, dim)

    params = {
        'concept_weight': concept_weight,
        'concept_bias': np.zeros(n_concepts),
        'cls_weight': uniform(num_classes, n_concepts),
        'cls_bias': np.zeros(num_classes),
    }
    if config.residual:
        params['residual_weight'] = uniform(num_classes, dim)
        params['residual_bias'] = np.zeros(num_classes)

    return TCBMModel(concept_ids, params, config)


class _Optimizer(object):
    """Adam, or plain gradient descent, over a subset of the parameters."""
    def __init__(self, config: TrainConfig, names: Sequence[str]):
        self.config = config
        self.names = names
        self.step_count = 0
        self.m = {}  # type: Dict[str, np.ndarray]
        self.v = {}  # type: Dict[str, np.ndarray]

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str,
                                                             np.ndarray]):
        lr = self.config.learning_rate
        if self.config.optimizer == 'sgd':
            for name in self.names:
                params[name] -= lr * grads[name]
            return

        beta1, beta2, eps = 0.9, 0.999, 1e-8
        self.step_count += 1
        t = self.step_count
        for name in self.names:
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _check_trainable(train: Batch, concept_ids: Sequence[int]):
    counts = train.concepts.sum(axis=0)
    for j, concept_id in enumerate(concept_ids):
        if counts[j] == 0 or counts[j] == train.concepts.shape[0]:
            raise ValidationError(
                'Concept %d is %s in train, it cannot be learned.' %
                (concept_id, 'never present' if counts[j] == 0 else
                 'always present'))


def _run_phase(model: TCBMModel, train: Batch, dev: Batch,
               config: TrainConfig, phase: str, names: Sequence[str],
               rng: np.random.Generator, log: List[Dict],
               dispatcher: Optional[Dispatcher]) -> int:
    n = train.embeddings.shape[0]
    batch_size = config.batch_size if 0 < config.batch_size < n else n
    optimizer = _Optimizer(config, names)

    best_loss = np.inf
    best_epoch = 0
    best_params = {k: v.copy() for k, v in model.params.items()}

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if batch_size < n else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = Batch(train.embeddings[idx], train.concepts[idx],
                          train.labels[idx])
            result = tcbm_loss(model,
                               batch,
                               config,
                               phase,
                               with_grads=True,
                               num_samples=n)
            if not np.isfinite(result.total):
                raise TrainingError(
                    'Non-finite loss at epoch %d (%s phase), try a lower '
                    'learning rate.' % (epoch, phase))
            optimizer.step(model.params, result.grads)  # type: ignore

        train_loss = tcbm_loss(model, train, config, phase,
                               num_samples=n).total
        dev_loss = tcbm_loss(model, dev, config, phase,
                             num_samples=n).total
        if not (np.isfinite(train_loss) and np.isfinite(dev_loss)):
            raise TrainingError(
                'Non-finite loss at epoch %d (%s phase), try a lower '
                'learning rate.' % (epoch, phase))

        entry = {
            'epoch': epoch,
            'phase': phase,
            'train_loss': train_loss,
            'dev_loss': dev_loss,
        }
        log.append(entry)
        emit(dispatcher, 'training.epoch', **entry)

        if dev_loss < best_loss:
            best_loss = dev_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        elif config.patience and epoch - best_epoch >= config.patience:
            break

    if best_epoch > 0:
        model.params = best_params
    return best_epoch


def split_batch(dataset: EmbeddingDataset, matrix: ConceptMatrix,
                concept_ids: Sequence[int], split: str) -> Batch:
    view = require_split(dataset, split)
    return Batch(view.embeddings,
                 matrix.select(view, concept_ids).astype(np.float64),
                 view.labels)


def train(dataset: EmbeddingDataset,
          matrix: ConceptMatrix,
          concept_ids: Sequence[int],
          config: TrainConfig,
          cavs: Optional[Dict[int, CAV]] = None,
          dispatcher: Optional[Dispatcher] = None) -> TrainResult:
    """Train a TCBM on the given bottleneck concepts.

    The joint strategy minimizes the whole loss end-to-end. The sequential
    strategy first fits the concept layer on the concept term, then freezes
    it and fits the classifier (and residual) layers. The projection
    strategy freezes the concept layer to the CAV cosine projections and
    only fits the classifier (and residual) layers.

    After each epoch the loss is measured on dev. Training stops after
    `patience` epochs without improvement (0 disables early stopping) and
    the parameters of the best epoch are restored.

    Raises:
        ValidationError: When train or dev is empty, or a bottleneck
            concept is never/always present in train.
        TrainingError: When the loss becomes non-finite.
    """
    if len(concept_ids) == 0:
        raise ValidationError('Cannot train a model without concepts.')
    train_batch = split_batch(dataset, matrix, concept_ids, 'train')
    dev_batch = split_batch(dataset, matrix, concept_ids, 'dev')
    _check_trainable(train_batch, concept_ids)

    model = init_model(concept_ids, dataset.dim, dataset.num_classes, config,
                       cavs)
    model.data_fingerprint = dataset.fingerprint()
    rng = np.random.default_rng([config.seed, 1])
    log = []  # type: List[Dict]

    heads = [n for n in HEAD_PARAMS if n in model.params]
    if config.strategy == 'joint':
        best = _run_phase(model, train_batch, dev_batch, config, 'joint',
                          list(CONCEPT_PARAMS) + heads, rng, log, dispatcher)
    elif config.strategy == 'sequential':
        _run_phase(model, train_batch, dev_batch, config, 'concepts',
                   CONCEPT_PARAMS, rng, log, dispatcher)
        best = _run_phase(model, train_batch, dev_batch, config, 'classifier',
                          heads, rng, log, dispatcher)
    else:
        best = _run_phase(model, train_batch, dev_batch, config, 'classifier',
                          heads, rng, log, dispatcher)

    return TrainResult(model, log, best)


def save_model(path: str, model: TCBMModel, extra: Optional[Dict] = None):
    """Write the canonical JSON checkpoint of a model."""
    payload = {
        'concept_ids': model.concept_ids,
        'params': model.params,
        'config': model.config.to_dict(),
        'seed': model.config.seed,
        'data': {
            'fingerprint': model.data_fingerprint
        },
    }
    if extra:
        payload.update(extra)
    write_json(path, payload)


def load_model(path: str) -> TCBMModel:
    raw = read_json(path)
    try:
        params = {
            k: np.array(v, dtype=np.float64)
            for k, v in raw['params'].items() if k in PARAMS
        }
        config = TrainConfig.from_dict(raw['config'])
        return TCBMModel(raw['concept_ids'], params, config,
                         raw.get('data', {}).get('fingerprint'))
    except (KeyError, TypeError, AttributeError):
        raise ValidationError('Model file "%s" is malformed.' % path)
