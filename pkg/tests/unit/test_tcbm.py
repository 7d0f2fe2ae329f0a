import numpy as np
import pytest
import tcbmkit
from dataclasses import replace
from unittest import mock
from tcbmkit import *
from tcbmkit.tcbm import Batch, init_model, load_model, save_model, split_batch
from tests.planted import planted_problem


@pytest.fixture(scope='module')
def problem():
    return planted_problem(n=300, dim=8, num_concepts=6, num_causal=3)


def small_batch(rng, n=6, d=4, concepts=3, classes=3):
    return Batch(rng.normal(size=(n, d)),
                 (rng.random((n, concepts)) > 0.5).astype(float),
                 rng.integers(0, classes, size=n))


def numeric_gradient(model, batch, config, phase, name, eps=1e-6, **kwargs):
    param = model.params[name]
    grad = np.zeros_like(param)
    for index in np.ndindex(*param.shape):
        original = param[index]
        param[index] = original + eps
        plus = tcbm_loss(model, batch, config, phase, **kwargs).total
        param[index] = original - eps
        minus = tcbm_loss(model, batch, config, phase, **kwargs).total
        param[index] = original
        grad[index] = (plus - minus) / (2 * eps)
    return grad


def gradient_testdata():
    return [
        ('joint', 'joint', True, True),
        ('joint', 'joint', False, True),
        ('joint', 'joint', True, False),
        ('sequential', 'concepts', False, True),
        ('sequential', 'classifier', True, True),
    ]


@pytest.mark.parametrize("strategy, phase, residual, squash",
                         gradient_testdata())
def test_tcbm_loss_gradients(strategy, phase, residual, squash):
    rng = np.random.default_rng(21)
    config = TrainConfig(strategy=strategy,
                         residual=residual,
                         squash=squash,
                         lambda_concept=0.7,
                         lambda_ridge=0.1,
                         lambda_en=0.3,
                         alpha=0.4,
                         seed=2)
    model = init_model([4, 7, 9], 4, 3, config)
    batch = small_batch(rng)

    grads = tcbm_loss(model, batch, config, phase, with_grads=True).grads

    for name in model.params:
        np.testing.assert_allclose(grads[name],
                                   numeric_gradient(model, batch, config,
                                                    phase, name),
                                   atol=1e-6,
                                   err_msg=name)


def test_tcbm_loss_gradients_in_projection_mode():
    rng = np.random.default_rng(5)
    config = TrainConfig(strategy='projection', residual=True, seed=1)
    cavs = {c: CAV(c, rng.normal(size=4)) for c in (0, 1, 2)}
    model = init_model([0, 1, 2], 4, 3, config, cavs)
    batch = small_batch(rng)

    result = tcbm_loss(model, batch, config, with_grads=True)

    assert result.total == pytest.approx(result.class_term +
                                         result.penalty_term)
    for name in ('cls_weight', 'cls_bias', 'residual_weight',
                 'residual_bias'):
        np.testing.assert_allclose(result.grads[name],
                                   numeric_gradient(model, batch, config,
                                                    'joint', name),
                                   atol=1e-6)


def test_tcbm_loss_terms():
    config = TrainConfig(lambda_concept=0.5, lambda_en=0.0)
    model = TCBMModel(
        [0], {
            'concept_weight': np.zeros((1, 2)),
            'concept_bias': np.zeros(1),
            'cls_weight': np.zeros((2, 1)),
            'cls_bias': np.zeros(2),
        }, config)
    batch = Batch(np.ones((2, 2)), np.array([[1.0], [0.0]]), np.array([0,
                                                                       1]))

    result = tcbm_loss(model, batch, config)

    assert result.concept_term == pytest.approx(np.log(2))
    assert result.class_term == pytest.approx(np.log(2))
    assert result.penalty_term == 0.0
    assert result.total == pytest.approx(1.5 * np.log(2))


def test_tcbm_loss_spreads_penalties_over_samples():
    config = TrainConfig(lambda_en=0.5, alpha=0.01, lambda_ridge=0.01)
    model = TCBMModel(
        [0, 1], {
            'concept_weight': np.zeros((2, 2)),
            'concept_bias': np.zeros(2),
            'cls_weight': np.array([[1.0, -1.0]]),
            'cls_bias': np.zeros(1),
        }, config)
    batch = Batch(np.ones((2, 2)), np.ones((2, 2)), np.array([0, 0]))

    assert tcbm_loss(model, batch,
                     config).penalty_term == pytest.approx(1.0)
    assert tcbm_loss(model, batch, config,
                     num_samples=4).penalty_term == pytest.approx(0.25)


def test_tcbm_loss_gradients_with_spread_penalties():
    rng = np.random.default_rng(8)
    config = TrainConfig(residual=True,
                         lambda_ridge=0.2,
                         lambda_en=0.5,
                         alpha=0.3,
                         seed=6)
    model = init_model([0, 1, 2], 4, 3, config)
    batch = small_batch(rng)

    grads = tcbm_loss(model, batch, config, with_grads=True,
                      num_samples=50).grads

    for name in model.params:
        np.testing.assert_allclose(grads[name],
                                   numeric_gradient(model,
                                                    batch,
                                                    config,
                                                    'joint',
                                                    name,
                                                    num_samples=50),
                                   atol=1e-6,
                                   err_msg=name)


def test_tcbm_loss_needs_concept_labels():
    config = TrainConfig()
    model = init_model([0, 1], 4, 3, config)
    batch = Batch(np.ones((2, 4)), np.ones((2, 1)), np.array([0, 1]))

    with pytest.raises(ValidationError):
        tcbm_loss(model, batch, config)


def test_forward_and_predict():
    config = TrainConfig(squash=False)
    model = TCBMModel(
        [3, 5], {
            'concept_weight': np.array([[1.0, 0.0], [0.0, 1.0]]),
            'concept_bias': np.array([0.0, 1.0]),
            'cls_weight': np.array([[1.0, 0.0], [0.0, 1.0]]),
            'cls_bias': np.zeros(2),
        }, config)

    result = forward(model, np.array([2.0, 0.0]))

    np.testing.assert_array_equal(result.activations, [2.0, 1.0])
    np.testing.assert_array_equal(result.logits, [2.0, 1.0])
    np.testing.assert_array_equal(
        predict(model, np.array([[2.0, 0.0], [0.0, 0.0], [1.0, 0.0]])),
        [0, 1, 0])


def test_projection_rejects_zero_embeddings():
    config = TrainConfig(strategy='projection')
    model = init_model([0], 2, 2, config, {0: CAV(0, np.array([1.0, 1.0]))})

    with pytest.raises(ValidationError):
        forward(model, np.zeros(2))


def test_intervene():
    config = TrainConfig(squash=False)
    model = TCBMModel(
        [0, 1, 2], {
            'concept_weight': np.eye(3),
            'concept_bias': np.zeros(3),
            'cls_weight': np.array([[1.0, 1.0, 1.0], [1.0, -1.0, 2.0]]),
            'cls_bias': np.array([0.5, 0.0]),
        }, config)
    z = np.array([0.9, 0.2, 0.6])
    truth = np.array([1.0, 1.0, 0.0])

    np.testing.assert_array_equal(
        intervene(model, z, truth, 0).logits,
        forward(model, z).logits)
    np.testing.assert_allclose(
        intervene(model, z, truth, 1).activations, [0.9, 1.0, 0.6])
    np.testing.assert_allclose(
        intervene(model, z, truth, 2).activations, [0.9, 1.0, 0.0])
    np.testing.assert_allclose(intervene(model, z, truth, 3).logits,
                               [2.5, 0.0])

    with pytest.raises(ValidationError):
        intervene(model, z, truth, 4)


def train_config(**kwargs):
    defaults = dict(epochs=20, batch_size=16, learning_rate=0.01, patience=0)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def test_train_is_deterministic(problem):
    config = train_config(residual=True, seed=4)

    first = train(problem.dataset, problem.matrix, [0, 1, 2], config)
    second = train(problem.dataset, problem.matrix, [0, 1, 2], config)

    for name in first.model.params:
        np.testing.assert_array_equal(first.model.params[name],
                                      second.model.params[name])
    assert first.log == second.log


def test_train_logs_every_epoch(problem):
    dispatcher = mock.Mock(spec=tcbmkit.Dispatcher)

    result = train(problem.dataset,
                   problem.matrix, [0, 1],
                   train_config(epochs=3),
                   dispatcher=dispatcher)

    assert [e['epoch'] for e in result.log] == [1, 2, 3]
    assert dispatcher.emit.call_count == 3
    assert dispatcher.emit.call_args[0][0] == 'training.epoch'
    assert 1 <= result.best_epoch <= 3


def test_train_sequential_runs_both_phases(problem):
    result = train(problem.dataset, problem.matrix, [0, 1],
                   train_config(strategy='sequential', epochs=2))

    assert [e['phase'] for e in result.log
            ] == ['concepts', 'concepts', 'classifier', 'classifier']


def test_train_projection_keeps_concept_layer(problem):
    cavs = fit_cavs(problem.dataset, problem.matrix)
    ids = sorted(cavs)[:3]
    config = train_config(strategy='projection')

    result = train(problem.dataset, problem.matrix, ids, config, cavs)

    expected = np.vstack([cavs[c].direction for c in ids])
    expected /= np.linalg.norm(expected, axis=1)[:, None]
    np.testing.assert_allclose(result.model.params['concept_weight'],
                               expected)


def test_train_loss_is_monotone_with_full_batch_sgd(problem):
    cavs = fit_cavs(problem.dataset, problem.matrix)
    config = train_config(strategy='projection',
                          optimizer='sgd',
                          batch_size=0,
                          learning_rate=0.1,
                          epochs=40,
                          lambda_en=0.0,
                          lambda_ridge=0.0)

    result = train(problem.dataset, problem.matrix, sorted(cavs), config,
                   cavs)

    losses = [e['train_loss'] for e in result.log]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_elastic_net_shrinks_classifier_weights(problem):
    cavs = fit_cavs(problem.dataset, problem.matrix)
    norms = []
    for lambda_en in (0.0, 0.5, 5.0):
        config = train_config(strategy='projection',
                              batch_size=0,
                              epochs=300,
                              lambda_en=lambda_en)
        model = train(problem.dataset, problem.matrix, sorted(cavs), config,
                      cavs).model
        norms.append(np.abs(model.params['cls_weight']).sum())

    assert norms[0] >= norms[1] >= norms[2]
    assert norms[0] > norms[2]


def test_elastic_net_sparsifies_a_wide_bottleneck():
    wide = planted_problem(n=400, dim=32, num_concepts=24, num_causal=8)
    cavs = fit_cavs(wide.dataset, wide.matrix)
    norms = []
    for lambda_en in (0.0, 0.5, 5.0):
        config = train_config(strategy='projection',
                              batch_size=0,
                              epochs=400,
                              learning_rate=0.05,
                              lambda_en=lambda_en)
        weights = train(wide.dataset, wide.matrix, sorted(cavs), config,
                        cavs).model.params['cls_weight']
        norms.append(np.abs(weights).sum())

    assert norms[0] >= norms[1] >= norms[2]
    assert norms[0] > norms[2]


def test_train_rejects_untrainable_concepts(problem):
    matrix = ConceptMatrix([0], np.zeros((len(problem.dataset), 1)))

    with pytest.raises(ValidationError) as excinfo:
        train(problem.dataset, matrix, [0], train_config())

    assert 'never present' in excinfo.value.message


def test_train_needs_concepts(problem):
    with pytest.raises(ValidationError):
        train(problem.dataset, problem.matrix, [], train_config())


def train_config_errors_testdata():
    return [
        {'strategy': 'end2end'},
        {'optimizer': 'rmsprop'},
        {'learning_rate': 0},
        {'lambda_en': -1},
        {'alpha': 1.5},
        {'epochs': -1},
        {'dropout': 0.1},
    ]


@pytest.mark.parametrize("raw", train_config_errors_testdata())
def test_train_config_errors(raw):
    with pytest.raises(ValidationError):
        TrainConfig.from_dict(raw)


def test_model_checkpoint(tmp_path, problem):
    path = str(tmp_path / 'model.json')
    model = train(problem.dataset, problem.matrix, [1, 2],
                  train_config(epochs=2, residual=True)).model

    save_model(path, model, {'selected_iteration': 3})
    loaded = load_model(path)

    assert loaded.concept_ids == [1, 2]
    assert loaded.residual
    assert loaded.data_fingerprint == problem.dataset.fingerprint()
    np.testing.assert_array_equal(
        forward(loaded, problem.dataset.embeddings).logits,
        forward(model, problem.dataset.embeddings).logits)


def test_without_residual(problem):
    model = init_model([0, 1], 8, 3, TrainConfig(residual=True))

    simple = model.without_residual()

    assert not simple.residual
    assert not simple.config.residual
    assert model.residual


def test_split_batch_aligns_concepts(problem):
    batch = split_batch(problem.dataset, problem.matrix, [2, 0], 'dev')
    dev = split_view(problem.dataset, 'dev')

    np.testing.assert_array_equal(batch.concepts[:, 0],
                                  problem.matrix.select(dev, [2])[:, 0])
    np.testing.assert_array_equal(batch.labels, dev.labels)
