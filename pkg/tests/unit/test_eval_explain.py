import json
import numpy as np
import pytest
from tcbmkit import *
from tcbmkit.eval_explain import format_summary_row, load_attributions


def identity_model(concept_weight=None, concept_bias=None, cls_weight=None):
    return TCBMModel(
        [10, 20], {
            'concept_weight':
            np.eye(2) if concept_weight is None else np.array(concept_weight),
            'concept_bias':
            np.zeros(2) if concept_bias is None else np.array(concept_bias),
            'cls_weight':
            np.eye(2) if cls_weight is None else np.array(cls_weight),
            'cls_bias':
            np.zeros(2),
        }, TrainConfig(squash=False))


@pytest.fixture
def toy():
    truth = np.array([[1, 0], [0, 1], [1, 0], [0, 1], [1, 1]])
    dataset = EmbeddingDataset(['a', 'b', 'c', 'd', 'e'], ['test'] * 5,
                               [0, 1, 0, 1, 0], truth.astype(float), 2)
    return dataset, ConceptMatrix([10, 20], truth)


def test_evaluate_perfect_model(toy):
    dataset, matrix = toy

    report = evaluate(identity_model(), dataset, matrix)

    assert report.acc == 100.0
    assert report.concept_f1 == 100.0
    assert report.concept_f1_micro == 100.0
    assert report.num_concepts == 2
    assert report.diversity is None


def test_evaluate_macro_averages_concepts(toy):
    dataset, matrix = toy
    # The second concept is detected exactly where it's absent.
    model = identity_model(concept_weight=[[1.0, 0.0], [0.0, -1.0]],
                           concept_bias=[0.0, 1.0])

    report = evaluate(model, dataset, matrix)

    assert report.concept_f1 == pytest.approx(50.0)


def test_evaluate_matches_brute_force_f1():
    rng = np.random.default_rng(3)
    truth = (rng.random((30, 2)) > 0.5).astype(int)
    X = rng.normal(size=(30, 2))
    dataset = EmbeddingDataset(['r%d' % i for i in range(30)], ['dev'] * 30,
                               rng.integers(0, 2, size=30), X, 2)
    model = identity_model()

    report = evaluate(model, dataset, ConceptMatrix([10, 20], truth), 'dev')

    detected = X > 0.5
    expected = []
    for j in range(2):
        tp = np.sum(detected[:, j] & (truth[:, j] == 1))
        fp = np.sum(detected[:, j] & (truth[:, j] == 0))
        fn = np.sum(~detected[:, j] & (truth[:, j] == 1))
        expected.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
    assert report.concept_f1 == pytest.approx(100 * np.mean(expected))
    assert report.split == 'dev'


def test_evaluate_with_label_embeddings(toy):
    dataset, matrix = toy

    report = evaluate(identity_model(),
                      dataset,
                      matrix,
                      label_embeddings=np.array([[1.0, 0.0], [0.0, 2.0]]))

    assert report.diversity == pytest.approx(100.0)


def test_evaluate_needs_truth_for_every_concept(toy):
    dataset, _ = toy

    with pytest.raises(ValidationError) as excinfo:
        evaluate(identity_model(), dataset,
                 ConceptMatrix([10], np.ones((5, 1))))

    assert '20' in excinfo.value.message


def test_evaluate_rejects_empty_split(toy):
    dataset, matrix = toy

    with pytest.raises(ValidationError):
        evaluate(identity_model(), split_view(dataset, 'dev'), matrix, 'dev')


def diversity_testdata():
    return [
        ([[1.0, 2.0], [1.0, 2.0]], 0.0),
        ([[1.0, 0.0], [0.0, 1.0]], 1.0),
        ([[1.0, 0.0], [0.5, np.sqrt(0.75)]], 0.5),
        ([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]], 1.0),
    ]


@pytest.mark.parametrize("embeddings, expected", diversity_testdata())
def test_diversity(embeddings, expected):
    assert diversity(np.array(embeddings)) == pytest.approx(expected)


def test_diversity_is_scale_invariant():
    rng = np.random.default_rng(0)
    E = rng.normal(size=(5, 8))

    scaled = E * rng.uniform(0.1, 10, size=(5, 1))

    assert diversity(scaled) == pytest.approx(diversity(E))


@pytest.mark.parametrize("embeddings",
                         [[[1.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]]])
def test_diversity_errors(embeddings):
    with pytest.raises(ValidationError):
        diversity(np.array(embeddings))


def test_intervention_curve():
    truth = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
    X = np.array([[0.2, 0.9], [0.1, 0.8], [0.9, 0.1], [0.4, 0.3]])
    dataset = EmbeddingDataset(['a', 'b', 'c', 'd'], ['test'] * 4,
                               [0, 1, 0, 1], X, 2)
    matrix = ConceptMatrix([10, 20], truth)
    model = identity_model()

    curve = intervention_curve(model, dataset, matrix, [0, 1, 2])

    assert curve[0] == (0, evaluate(model, dataset, matrix).acc)
    assert curve == [(0, 50.0), (1, 100.0), (2, 100.0)]


def test_intervention_curve_rejects_too_many_concepts(toy):
    dataset, matrix = toy

    with pytest.raises(ValidationError):
        intervention_curve(identity_model(), dataset, matrix, [0, 3])


def test_export_global_explanation_weights():
    model = identity_model(cls_weight=[[2.0, -1.0], [0.5, 0.0]])

    explanation = export_global_explanation(model)

    np.testing.assert_array_equal(explanation['weights'][:, 0], [2.0, -1.0])
    assert explanation['weights'].shape == (2, 2)
    assert explanation['links'][:2] == [{
        'concept_id': 10,
        'class': 0,
        'weight': 2.0
    }, {
        'concept_id': 10,
        'class': 1,
        'weight': 0.5
    }]
    assert 'tokens' not in explanation


def test_export_global_explanation_tokens():
    records = [('internet', 10, 0.9), ('cash', 10, 0.1), ('cash', 20, 0.5),
               ('bank', 20, 0.25), ('bank', 20, 0.75)]

    explanation = export_global_explanation(identity_model(),
                                            records,
                                            top_q=1,
                                            labels={10: 'technology'})

    assert explanation['tokens']['10'] == [{'token': 'internet', 'score': 0.9}]
    # bank and cash tie at 0.5, ties go by token.
    assert explanation['tokens']['20'] == [{
        'token': 'bank',
        'score': 0.5
    }]
    assert explanation['labels'] == {'10': 'technology', '20': 'cluster-20'}


def test_export_global_explanation_rejects_unknown_concept():
    with pytest.raises(ValidationError):
        export_global_explanation(identity_model(), [('oil', 99, 0.3)])


def test_load_attributions(tmp_path):
    path = tmp_path / 'attributions.ndjson'
    path.write_text(
        json.dumps({
            'token': 'oil',
            'concept_id': 3,
            'score': 0.25
        }) + '\n' + json.dumps({'token': 'gas'}) + '\n')

    with pytest.raises(ValidationError) as excinfo:
        load_attributions(str(path))

    assert 'line 2' in excinfo.value.message


def test_eval_config_errors():
    with pytest.raises(ValidationError):
        EvalConfig.from_dict({'split': 'train'})
    with pytest.raises(ValidationError):
        EvalConfig.from_dict({'top_q': 0})
    assert EvalConfig.from_dict(None).intervention_ks == [0, 1, 2, 3, 4]


def test_format_summary_row():
    report = EvalReport('test', 91.25, 88.5, 90.0, 12, diversity=42.0)

    assert format_summary_row(report) == \
        'test   %ACC  91.25  %c  88.50  #c  12  %D  42.00'
