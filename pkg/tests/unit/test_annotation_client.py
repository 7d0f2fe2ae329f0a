import json
import numpy as np
import os
import pytest
import tcbmkit
from unittest import mock
from tcbmkit import *
from tcbmkit.annotation_client import LABEL_EXAMPLES, MICRO_EXAMPLES, build_label_messages, build_micro_messages, dump_annotations, format_topics, load_annotations, normalize_topics
from tcbmkit.libs.chat_completions import ChatClient
from tcbmkit.utils import canonical_dumps

TESTDATA = os.path.join(os.path.dirname(__file__), 'testdata')


def read_golden(name):
    with open(os.path.join(TESTDATA, name), 'r', encoding='utf-8') as f:
        return f.read()


def fake_client(completions):
    """A client answering each micro-annotation request with the completion
    registered for the text of its last user turn."""
    client = mock.Mock(spec=ChatClient)

    def complete(messages, max_tokens, temperature):
        answer = completions[messages[-1]['content']]
        if isinstance(answer, Exception):
            raise answer
        return answer

    client.complete.side_effect = complete
    return client


def parse_topics_testdata():
    return [
        ("Topics: ['a', 'b']<eos>", ['a', 'b']),
        ("Topics: []", []),
        ("Topics: ['x, y', 'z']", ['x, y', 'z']),
        ('Topics: ["women\'s rights", \'law\']', ["women's rights", 'law']),
        ("Sure! Topics: ['economy']\nAnything else?", ['economy']),
        ("Topics: ['trade', 'tarif", ['trade']),
        ("no topics here", []),
        ("Topics: none", []),
    ]


@pytest.mark.parametrize("completion, expected", parse_topics_testdata())
def test_parse_topics(completion, expected):
    assert parse_topics(completion) == expected


@pytest.mark.parametrize("text, topics", MICRO_EXAMPLES)
def test_parse_topics_reads_back_in_context_examples(text, topics):
    assert parse_topics(format_topics(topics) + '<eos>') == topics


def parse_label_testdata():
    return [
        ("Summarization: 'musical instrument'<eos>", 'musical instrument'),
        ('Summarization: "feline-type animal"', 'feline-type animal'),
        ("Summarization: musical instrument", None),
        ("I don't know", None),
    ]


@pytest.mark.parametrize("completion, expected", parse_label_testdata())
def test_parse_label(completion, expected):
    assert parse_label(completion) == expected


def test_normalize_topics():
    assert normalize_topics(['Urban  Development', 'urban development ',
                             '', 'Conflict']) == [
                                 'urban development', 'conflict'
                             ]


def test_micro_prompt_matches_golden_file():
    messages = build_micro_messages('Oil prices rose sharply after the summit.')

    assert canonical_dumps(messages) + '\n' == read_golden('micro_prompt.json')


def test_label_prompt_matches_golden_file():
    messages = build_label_messages(['bank', 'loan', 'mortgage'])

    assert canonical_dumps(messages) + '\n' == read_golden('label_prompt.json')


def test_prompt_assembly_is_stable():
    assert build_micro_messages('x') == build_micro_messages('x')
    assert len(build_micro_messages('x')) == 2 * len(MICRO_EXAMPLES) + 1
    assert len(build_label_messages(['a'])) == 2 * len(LABEL_EXAMPLES) + 1


def test_annotate_micro_concepts_preserves_order():
    texts = [('t%d' % i, 'text number %d' % i) for i in range(12)]
    client = fake_client({
        "'text number %d'" % i: "Topics: ['Topic %d', 'shared']<eos>" % i
        for i in range(12)
    })
    cfg = EndpointConfig(max_in_flight=4)

    annotations = annotate_micro_concepts(texts, cfg, client)

    assert [a.text_id for a in annotations] == [t[0] for t in texts]
    assert annotations[5].topics == ['topic 5', 'shared']
    assert client.complete.call_count == 12


def test_annotate_micro_concepts_warns_on_unparseable_completion():
    dispatcher = mock.Mock(spec=tcbmkit.Dispatcher)
    client = fake_client({"'a'": "Topics: ['economy']", "'b'": "no topics here"})

    annotations = annotate_micro_concepts([('a', 'a'), ('b', 'b')],
                                          EndpointConfig(), client,
                                          dispatcher)

    assert annotations[1] == MicroAnnotation('b', [])
    warnings = [
        c for c in dispatcher.emit.call_args_list if c[0][0] == 'warning'
    ]
    assert len(warnings) == 1
    assert 'unparseable completion for text "b"' in warnings[0][1]['message']


def test_annotate_micro_concepts_truncates_long_texts():
    dispatcher = mock.Mock(spec=tcbmkit.Dispatcher)
    client = fake_client({"'abcde'": "Topics: ['letters']"})

    annotations = annotate_micro_concepts([('a', 'abcdefghij')],
                                          EndpointConfig(char_budget=5),
                                          client, dispatcher)

    assert annotations[0].topics == ['letters']
    dispatcher.emit.assert_any_call(
        'warning', message='text "a" truncated to 5 characters')


def test_annotate_micro_concepts_attaches_record_id_on_transport_failure():
    client = fake_client({
        "'a'": "Topics: ['economy']",
        "'b'": ExternalError('Request failed after 3 attempt(s)'),
    })

    with pytest.raises(TransportError) as excinfo:
        annotate_micro_concepts([('a', 'a'), ('b', 'b')], EndpointConfig(),
                                client)

    assert excinfo.value.record_id == 'b'
    assert excinfo.value.exit_code == 2


def test_annotate_micro_concepts_rejects_empty_input():
    with pytest.raises(ValidationError):
        annotate_micro_concepts([], EndpointConfig(), fake_client({}))


def label_macro_concept_testdata():
    return [
        (['piano', 'guitar', 'saxophone', 'violin', 'cheyenne', 'drum'],
         "Summarization: 'musical instrument'<eos>", 'musical instrument'),
        (['lion', 'tiger', 'cat', 'pumas', 'panther', 'leopard'],
         "Summarization: 'feline-type animal'", 'feline-type animal'),
        (['a', 'b'], "Summarization: things", 'cluster-7'),
    ]


@pytest.mark.parametrize("samples, completion, expected",
                         label_macro_concept_testdata())
def test_label_macro_concept(samples, completion, expected):
    client = fake_client({json.dumps(samples): completion})

    assert label_macro_concept(samples, EndpointConfig(), 7,
                               client) == expected


def test_label_macro_concept_warns_on_fallback():
    dispatcher = mock.Mock(spec=tcbmkit.Dispatcher)
    client = fake_client({'["a"]': 'no idea'})

    label_macro_concept(['a'], EndpointConfig(), 3, client, dispatcher)

    dispatcher.emit.assert_called_once_with(
        'warning',
        message='unparseable label for cluster 3, falling back to "cluster-3"'
    )


@pytest.fixture
def three_records():
    return EmbeddingDataset(['a', 'b', 'c'], ['train', 'train', 'dev'],
                            [0, 1, 0], np.eye(3), 2)


def test_load_annotations(tmp_path, three_records):
    path = str(tmp_path / 'annotations.ndjson')
    dump_annotations(path, [
        MicroAnnotation('c', ['Law', 'law ', 'Courts']),
        MicroAnnotation('a', ['economy']),
        MicroAnnotation('b', []),
    ], {'model': 'gemma-2-9b-it'})

    annotations = load_annotations(path, three_records)

    assert annotations == [
        MicroAnnotation('a', ['economy']),
        MicroAnnotation('b', []),
        MicroAnnotation('c', ['law', 'courts']),
    ]


def test_load_annotations_with_unknown_id(tmp_path, three_records):
    path = str(tmp_path / 'annotations.ndjson')
    dump_annotations(path, [MicroAnnotation('zz', ['economy'])])

    with pytest.raises(ValidationError) as excinfo:
        load_annotations(path, three_records)

    assert 'unknown id "zz"' in excinfo.value.message


def test_load_annotations_with_duplicate_id(tmp_path, three_records):
    path = str(tmp_path / 'annotations.ndjson')
    dump_annotations(path, [
        MicroAnnotation('a', ['economy']),
        MicroAnnotation('a', ['law']),
    ])

    with pytest.raises(ValidationError):
        load_annotations(path, three_records)


def test_load_annotations_warns_on_missing_records(tmp_path, three_records):
    dispatcher = mock.Mock(spec=tcbmkit.Dispatcher)
    path = str(tmp_path / 'annotations.ndjson')
    dump_annotations(path, [MicroAnnotation('a', ['economy'])])

    annotations = load_annotations(path, three_records, dispatcher)

    assert annotations[2] == MicroAnnotation('c', [])
    dispatcher.emit.assert_called_once_with(
        'warning', message='2 record(s) have no annotation')


def test_endpoint_config_validation():
    with pytest.raises(ValidationError):
        EndpointConfig(timeout=0)
    with pytest.raises(ValidationError):
        EndpointConfig(retries=-1)
    with pytest.raises(ValidationError):
        EndpointConfig.from_dict({'beams': 4})
