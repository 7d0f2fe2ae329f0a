import numpy as np
import pytest
import tcbmkit
from unittest import mock
from tcbmkit import *
from tcbmkit.concept_bank import MicroClusters, PCAReducer, PrecomputedReducer, dump_micro_embeddings, load_bank, load_micro_embeddings, presence_matrix, save_bank


def grid_blob(center, rows=5, cols=10, spacing=0.01):
    """rows×cols points on a regular grid around center, spread over the two
    first axes."""
    points = []
    for i in range(rows):
        for j in range(cols):
            offset = np.zeros_like(center)
            offset[0], offset[1] = i * spacing, j * spacing
            points.append(center + offset)
    return points


@pytest.fixture
def two_blobs():
    first = np.zeros(6)
    second = np.zeros(6)
    second[2] = 10.0
    embeds = {}
    for name, center in (('a', first), ('b', second)):
        for k, point in enumerate(grid_blob(center)):
            embeds['%s%02d' % (name, k)] = point
    return embeds


def test_cluster_micro_concepts_separates_blobs(two_blobs):
    dispatcher = mock.Mock(spec=tcbmkit.Dispatcher)

    clusters = cluster_micro_concepts(two_blobs, BankConfig(),
                                      dispatcher=dispatcher)

    assert len(clusters.clusters) == 2
    assert clusters.noise == []
    assert sorted(sorted(c) for c in clusters.clusters) == [
        sorted(m for m in two_blobs if m.startswith('a')),
        sorted(m for m in two_blobs if m.startswith('b')),
    ]
    dispatcher.emit.assert_not_called()


def test_cluster_micro_concepts_is_deterministic(two_blobs):
    first = cluster_micro_concepts(two_blobs)
    second = cluster_micro_concepts(dict(reversed(list(two_blobs.items()))))

    assert first.clusters == second.clusters
    np.testing.assert_array_equal(first.labels, second.labels)


def test_cluster_micro_concepts_fails_on_zero_variance():
    embeds = {'m%d' % i: np.ones(4) for i in range(10)}

    with pytest.raises(ValidationError) as excinfo:
        cluster_micro_concepts(embeds)

    assert 'zero variance' in excinfo.value.message


def test_cluster_micro_concepts_needs_enough_micro_concepts():
    embeds = {'m%d' % i: np.arange(4.0) * i for i in range(3)}

    with pytest.raises(ValidationError):
        cluster_micro_concepts(embeds, BankConfig(min_cluster_size=5))


def test_reduce_dims_defaults_to_5():
    assert BankConfig().reduce_dims == 5
    X = np.random.default_rng(0).normal(size=(30, 12))

    reduced = PCAReducer().reduce(['m%d' % i for i in range(30)], X)

    assert reduced.shape == (30, 5)


def test_precomputed_reducer_needs_every_micro_concept():
    reducer = PrecomputedReducer({'a': np.zeros(2)})

    with pytest.raises(ValidationError):
        reducer.reduce(['a', 'b'], np.zeros((2, 3)))


def test_micro_embeddings_file(tmp_path):
    path = str(tmp_path / 'micro.ndjson')
    dump_micro_embeddings(path, {
        'urban development': np.array([1.0, 0.0]),
        'conflict': np.array([0.0, 1.0]),
    })

    entries = load_micro_embeddings(path)

    assert sorted(entries) == ['conflict', 'urban development']
    np.testing.assert_array_equal(entries['conflict'], [0.0, 1.0])


@pytest.fixture
def toy_clusters():
    micros = ['a1', 'a2', 'b1', 'b2', 'c1', 'c2', 'noise']
    reduced = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0],
                        [10.0, 0.0], [10.0, 1.0], [50.0, 50.0]])
    labels = np.array([0, 0, 1, 1, 2, 2, -1])
    return MicroClusters(micros, reduced, labels,
                         [['a1', 'a2'], ['b1', 'b2'], ['c1', 'c2']], ['noise'])


@pytest.fixture
def four_texts():
    return EmbeddingDataset(['t0', 't1', 't2', 't3'],
                            ['train', 'train', 'dev', 'test'], [0, 1, 0, 1],
                            np.eye(4), 2)


def test_build_macro_bank(toy_clusters, four_texts):
    annotations = [
        MicroAnnotation('t0', ['c2']),
        MicroAnnotation('t1', ['a1', 'b2', 'unknown']),
        MicroAnnotation('t2', ['noise']),
        MicroAnnotation('t3', []),
    ]
    labeler = mock.Mock(side_effect=['place', 'sport', 'music'])

    bank = build_macro_bank(toy_clusters, annotations, four_texts, labeler)

    assert [c.label for c in bank.concepts] == ['place', 'sport', 'music']
    assert bank.matrix.concepts == (0, 1, 2)
    np.testing.assert_array_equal(bank.matrix.presence,
                                  [[0, 0, 1], [1, 1, 0], [0, 0, 0],
                                   [0, 0, 0]])
    np.testing.assert_allclose(bank.by_id(1).centroid, [5.0, 0.5])
    labeler.assert_any_call(['a1', 'a2'], 0)


def test_presence_matrix_follows_membership_rule(toy_clusters, four_texts):
    rng = np.random.default_rng(1)
    bank = build_macro_bank(toy_clusters, [], four_texts, None)
    annotations = [
        MicroAnnotation(t, list(rng.choice(toy_clusters.micros, size=3)))
        for t in four_texts.ids
    ]

    matrix = presence_matrix(bank.concepts, annotations, four_texts)

    for i, annotation in enumerate(annotations):
        for j, concept in enumerate(bank.concepts):
            expected = int(bool(set(annotation.topics) & set(concept.members)))
            assert matrix.presence[i, j] == expected


def test_build_macro_bank_labels_from_nearest_samples(four_texts):
    micros = ['m%02d' % i for i in range(20)] + ['x1', 'x2']
    reduced = np.array([[float(i), 0.0] for i in range(20)] +
                       [[100.0, 0.0], [101.0, 0.0]])
    clusters = MicroClusters(micros, reduced, np.array([0] * 20 + [1, 1]),
                             [micros[:20], ['x1', 'x2']], [])
    labeler = mock.Mock(return_value='numbers')

    build_macro_bank(clusters, [], four_texts, labeler)

    samples, concept_id = labeler.call_args_list[0][0]
    assert concept_id == 0
    assert len(samples) == 15
    assert samples[:2] == ['m09', 'm10']
    assert not {'m00', 'm01', 'm17', 'm18', 'm19'} & set(samples)


def test_build_macro_bank_falls_back_when_labeling_fails(
        toy_clusters, four_texts):
    dispatcher = mock.Mock(spec=tcbmkit.Dispatcher)
    labeler = mock.Mock(side_effect=ExternalError('endpoint down'))

    bank = build_macro_bank(toy_clusters, [], four_texts, labeler,
                            dispatcher=dispatcher)

    assert [c.label for c in bank.concepts
            ] == ['cluster-0', 'cluster-1', 'cluster-2']
    warnings = [
        c for c in dispatcher.emit.call_args_list if c[0][0] == 'warning'
    ]
    assert len(warnings) == 3


def test_bank_checkpoint(tmp_path, toy_clusters, four_texts):
    path = str(tmp_path / 'bank.json')
    bank = build_macro_bank(toy_clusters, [], four_texts, None)

    save_bank(path, bank, {'bank': BankConfig().to_dict()})
    concepts = load_bank(path)

    assert [c.id for c in concepts] == [0, 1, 2]
    assert concepts[2].members == ['c1', 'c2']
    np.testing.assert_array_equal(concepts[0].centroid, [0.0, 0.5])


@pytest.fixture
def hundred_texts():
    return EmbeddingDataset(['t%d' % i for i in range(100)], ['train'] * 100,
                            [i % 2 for i in range(100)], np.ones((100, 2)), 2)


def cooccurrence_matrix(columns):
    return ConceptMatrix(list(range(len(columns))), np.array(columns).T)


def test_cooccurrence_clusters_groups_identical_columns(hundred_texts):
    a = (np.arange(100) % 3 == 0).astype(int)
    c = 1 - a
    matrix = cooccurrence_matrix([a, a, c])

    groups = cooccurrence_clusters(matrix, hundred_texts)

    assert groups == [[0, 1], [2]]


def test_cooccurrence_clusters_two_columns():
    a = np.array([1, 1, 0, 0])
    b = np.array([0, 0, 1, 1])

    assert cooccurrence_clusters(cooccurrence_matrix([a, a])) == [[0, 1]]
    assert cooccurrence_clusters(cooccurrence_matrix([a, b])) == [[0], [1]]


def test_cooccurrence_clusters_is_permutation_equivariant(hundred_texts):
    a = (np.arange(100) % 3 == 0).astype(int)
    c = 1 - a
    matrix = ConceptMatrix([7, 3, 5], np.array([c, a, a]).T)

    groups = cooccurrence_clusters(matrix, hundred_texts)

    assert groups == [[3, 5], [7]]


def test_cooccurrence_clusters_needs_two_concepts():
    with pytest.raises(ValidationError):
        cooccurrence_clusters(cooccurrence_matrix([[1, 0]]))


@pytest.fixture
def five_texts():
    return EmbeddingDataset(['t%d' % i for i in range(5)], ['train'] * 5,
                            [0, 1, 0, 1, 0], np.eye(5), 2)


def test_init_cbl_follows_greedy_order(five_texts):
    # A covers {1,2,3}, B covers {4}, C covers {5}.
    matrix = ConceptMatrix([0, 1, 2], [[1, 0, 0], [1, 0, 0], [1, 0, 0], [0, 1, 0],
                            [0, 0, 1]])
    scores = {0: 0.9, 1: 0.2, 2: 0.5}

    selected = init_cbl(scores, [[0], [1], [2]], matrix, five_texts, 1.0)

    assert selected == [0, 2, 1]


def test_init_cbl_stops_as_soon_as_target_is_met(five_texts):
    matrix = ConceptMatrix([0, 1, 2], [[1, 0, 1], [1, 0, 0], [1, 1, 0],
                                       [1, 0, 0], [1, 0, 1]])
    scores = {0: 0.1, 1: 0.8, 2: 0.5}

    assert init_cbl(scores, [[0, 1, 2]], matrix, five_texts,
                    0.99) == [1, 2, 0]
    assert init_cbl(scores, [[0], [1, 2]], matrix, five_texts,
                    0.99) == [1, 0]


def test_init_cbl_is_minimal(five_texts):
    rng = np.random.default_rng(4)
    presence = (rng.random((5, 8)) > 0.7).astype(int)
    presence[:, 0] = [1, 0, 0, 0, 0]
    presence[:, 1] = [0, 1, 1, 1, 1]
    presence[0, 2:] = 0
    matrix = ConceptMatrix(list(range(8)), presence)
    scores = {c: float(s) for c, s in enumerate(rng.random(8))}
    groups = [[0, 1, 2], [3, 4], [5, 6, 7]]

    selected = init_cbl(scores, groups, matrix, five_texts, 0.99)

    def coverage(ids):
        return presence[:, ids].max(axis=1).mean()

    assert coverage(selected) >= 0.99
    assert coverage(selected[:-1]) < 0.99


def test_init_cbl_warns_when_coverage_is_unreachable(five_texts):
    dispatcher = mock.Mock(spec=tcbmkit.Dispatcher)
    matrix = ConceptMatrix([0, 1], [[1, 0], [0, 1], [0, 0], [0, 0], [1, 0]])

    selected = init_cbl({0: 0.3, 1: 0.6}, [[0, 1]], matrix, five_texts, 0.99,
                        dispatcher)

    assert selected == [1, 0]
    assert dispatcher.emit.call_args[0][0] == 'warning'
    assert 'unreachable' in dispatcher.emit.call_args[1]['message']


def test_init_cbl_with_a_single_all_covering_concept(five_texts):
    matrix = ConceptMatrix([4, 9], [[1, 0], [1, 1], [1, 0], [1, 0], [1, 0]])

    assert init_cbl({4: 0.1, 9: 0.9}, [[4], [9]], matrix, five_texts) == [9, 4]
    assert init_cbl({4: 0.9, 9: 0.1}, [[4], [9]], matrix, five_texts) == [4]


def next_concepts_testdata():
    return [
        ([[0, 1], [2]], {0: 0.9, 1: 0.5, 2: 0.4}, [0, 2], [1]),
        ([[0, 1], [2]], {0: 0.9, 1: 0.5, 2: 0.4}, [0, 1, 2], []),
        ([[0, 1, 2], [3]], {0: 0.9, 1: 0.3, 2: 0.7, 3: 0.1}, [0, 3], [2]),
        ([[0, 1], [2, 3]], {0: 0.9, 1: 0.2, 2: 0.1, 3: 0.6}, [0, 2], [3, 1]),
    ]


@pytest.mark.parametrize("groups, scores, current, expected",
                         next_concepts_testdata())
def test_next_concepts(groups, scores, current, expected):
    assert next_concepts(groups, scores, current) == expected
