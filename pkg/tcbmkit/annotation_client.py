"""Micro-concept annotation and macro-concept labeling through a
chat-completion endpoint.

Prompts are assembled from fixed in-context examples: a system-free
conversation made of user/assistant turns, the last user turn holding the
text (or the micro concepts) to process. Special tokens of a given model
family are the endpoint's concern, the client only sends role-tagged
messages.
"""

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple
from .data_model import EmbeddingDataset
from .dispatcher import Dispatcher, emit, warn
from .exceptions import ExternalError, TransportError, ValidationError
from .libs.chat_completions import ChatClient
from .utils import dataclass_from_dict, iter_ndjson, write_ndjson

MICRO_INSTRUCTION = (
    'You are presented with several parts of speech.\n'
    '        Identify only the main topics in this text. Respond with topic '
    'in list format like the examples in a very concise way using as few '
    'words as possible.')

MICRO_EXAMPLES = [
    ('As cities expand and populations grow, there is a growing tension '
     'between development and the need to preserve historical landmarks. '
     'Citizens and authorities often clash over the balance between progress '
     'and cultural heritage.',
     ['urban development', 'cultural heritage', 'conflict']),
    ('Recent breakthroughs in neuroscience are shedding light on the '
     'complexities of human cognition. Researchers are particularly excited '
     'about the potential to better understand decision-making processes and '
     'emotional regulation in the brain.', [
         'neuroscience', 'human cognition', 'decision-making',
         'emotional regulation'
     ]),
]  # type: List[Tuple[str, List[str]]]

LABEL_INSTRUCTION = (
    'You are presented with several parts of speech.\n'
    '        Summarise what these parts of speech have in common in a very '
    'concise way using as few words as possible.')

LABEL_EXAMPLES = [
    (['piano', 'guitar', 'saxophone', 'violin', 'cheyenne', 'drum'],
     'musical instrument'),
    (['football', 'basketball', 'baseball', 'tennis', 'badmington', 'soccer'],
     'sport'),
    (['lion', 'tiger', 'cat', 'pumas', 'panther', 'leopard'],
     'feline-type animal'),
]  # type: List[Tuple[List[str], str]]

TOPICS_MARKER = 'Topics:'

_LABEL_RE = re.compile(r"Summarization:\s*(['\"])(.+?)\1", re.DOTALL)


@dataclass
class EndpointConfig:
    base_url: Optional[str] = None
    model: str = 'gemma-2-9b-it'
    timeout: float = 30.0
    max_tokens: int = 50
    temperature: float = 1.0
    retries: int = 2
    max_in_flight: int = 4
    char_budget: int = 2000

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValidationError('endpoint.timeout must be > 0.')
        if self.retries < 0:
            raise ValidationError('endpoint.retries must be >= 0.')
        if self.max_tokens < 1:
            raise ValidationError('endpoint.max_tokens must be >= 1.')
        if self.max_in_flight < 1:
            raise ValidationError('endpoint.max_in_flight must be >= 1.')
        if self.char_budget < 1:
            raise ValidationError('endpoint.char_budget must be >= 1.')

    @classmethod
    def from_dict(cls, raw: Optional[Dict]) -> 'EndpointConfig':
        return dataclass_from_dict(cls, raw, 'endpoint')

    def to_dict(self) -> Dict:
        return asdict(self)


class MicroAnnotation(NamedTuple):
    text_id: str
    topics: List[str]


def create_client(cfg: EndpointConfig, cassette=None) -> ChatClient:
    return ChatClient(cfg.base_url,
                      cfg.model,
                      timeout=cfg.timeout,
                      retries=cfg.retries,
                      cassette=cassette)


def normalize_topics(topics: Iterable[str]) -> List[str]:
    """Lowercase and trim topics, drop empty ones and duplicates (first
    occurrence wins)."""
    seen = set()
    normalized = []
    for topic in topics:
        topic = ' '.join(str(topic).split()).lower()
        if topic and topic not in seen:
            seen.add(topic)
            normalized.append(topic)
    return normalized


def _quote(value: str) -> str:
    quote = '"' if "'" in value else "'"
    return quote + value + quote


def format_topics(topics: Sequence[str]) -> str:
    """Render a topic list the way the in-context examples do:
    `Topics: ['a', 'b']`."""
    return '%s [%s]' % (TOPICS_MARKER, ', '.join(_quote(t) for t in topics))


def format_label(label: str) -> str:
    return 'Summarization: %s' % _quote(label)


def _scan_list(text: str) -> List[str]:
    """Quote-aware scan of a bracketed list. A quote only closes an item when
    it's followed by a comma or the closing bracket, such that apostrophes
    inside double-quoted items survive."""
    items = []  # type: List[str]
    i = 0
    n = len(text)
    bare = ''
    while i < n:
        ch = text[i]
        if ch in ('"', "'") and not bare.strip():
            end = i + 1
            while end < n:
                if text[end] == ch:
                    rest = text[end + 1:].lstrip()
                    if rest == '' or rest[0] in ',]':
                        break
                end += 1
            if end >= n:
                break
            items.append(text[i + 1:end])
            bare = ''
            i = end + 1
            continue
        if ch == ',':
            if bare.strip():
                items.append(bare.strip())
            bare = ''
        elif ch == ']':
            if bare.strip():
                items.append(bare.strip())
            return items
        else:
            bare += ch
        i += 1

    # Unterminated list (truncated completion): keep what was complete.
    return items


def _find_topics(completion: str) -> Optional[List[str]]:
    start = completion.find(TOPICS_MARKER)
    if start == -1:
        return None
    rest = completion[start + len(TOPICS_MARKER):]
    bracket = rest.find('[')
    if bracket == -1 or rest[:bracket].strip():
        return None
    return _scan_list(rest[bracket + 1:])


def parse_topics(completion: str) -> List[str]:
    """Extract the quoted list following the literal "Topics:" marker.
    Single and double quotes are accepted, anything after the closing
    bracket (e.g. an end-of-sequence token) is ignored. Returns an empty
    list when there's no such list."""
    return _find_topics(completion) or []


def parse_label(completion: str) -> Optional[str]:
    match = _LABEL_RE.search(completion)
    if match is None:
        return None
    label = match.group(2).strip()
    return label or None


def build_micro_messages(text: str) -> List[Dict[str, str]]:
    messages = []  # type: List[Dict[str, str]]
    for i, (example, topics) in enumerate(MICRO_EXAMPLES):
        content = "'%s'" % example
        if i == 0:
            content = '%s Example: %s' % (MICRO_INSTRUCTION, content)
        messages.append({'role': 'user', 'content': content})
        messages.append({'role': 'assistant', 'content': format_topics(topics)})
    messages.append({'role': 'user', 'content': "'%s'" % text})
    return messages


def build_label_messages(samples: Sequence[str]) -> List[Dict[str, str]]:
    messages = []  # type: List[Dict[str, str]]
    for i, (example, label) in enumerate(LABEL_EXAMPLES):
        content = json.dumps(example)
        if i == 0:
            content = '%s Example: %s' % (LABEL_INSTRUCTION, content)
        messages.append({'role': 'user', 'content': content})
        messages.append({'role': 'assistant', 'content': format_label(label)})
    messages.append({'role': 'user', 'content': json.dumps(list(samples))})
    return messages


def _annotate_one(client: ChatClient, cfg: EndpointConfig, text_id: str,
                  text: str) -> Tuple[MicroAnnotation, List[str]]:
    warnings = []
    if len(text) > cfg.char_budget:
        text = text[:cfg.char_budget]
        warnings.append('text "%s" truncated to %d characters' %
                        (text_id, cfg.char_budget))

    try:
        completion = client.complete(build_micro_messages(text),
                                     cfg.max_tokens, cfg.temperature)
    except ExternalError as err:
        raise TransportError(err.message, record_id=text_id)

    topics = _find_topics(completion)
    if topics is None:
        warnings.append('unparseable completion for text "%s": %r' %
                        (text_id, completion[:80]))
        topics = []

    return MicroAnnotation(text_id, normalize_topics(topics)), warnings


def annotate_micro_concepts(
        texts: Sequence[Tuple[str, str]],
        cfg: EndpointConfig,
        client: Optional[ChatClient] = None,
        dispatcher: Optional[Dispatcher] = None) -> List[MicroAnnotation]:
    """Ask the endpoint for the main topics of each text.

    Up to cfg.max_in_flight requests run concurrently. Results (and
    warnings) are reassembled in input order.

    Args:
        texts (Sequence[Tuple[str, str]]): (id, text) pairs.
        cfg (EndpointConfig): Endpoint and generation settings.
        client (Optional[ChatClient]):
            Client to use, e.g. one backed by a cassette. A client is built
            from cfg when not provided.
        dispatcher (Optional[Dispatcher]): Receives warnings and progress.

    Raises:
        ValidationError: When texts is empty.
        TransportError: When a request still fails after the configured
            retries. The id of the text is attached.
    """
    if len(texts) == 0:
        raise ValidationError('No text to annotate.')
    if client is None:
        client = create_client(cfg)

    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        futures = [
            pool.submit(_annotate_one, client, cfg, text_id, text)
            for text_id, text in texts
        ]
        annotations = []
        for done, future in enumerate(futures, start=1):
            annotation, warnings = future.result()
            for message in warnings:
                warn(dispatcher, message)
            annotations.append(annotation)
            emit(dispatcher,
                 'annotation.progress',
                 done=done,
                 total=len(futures))

    return annotations


def label_macro_concept(samples: Sequence[str],
                        cfg: EndpointConfig,
                        index: int,
                        client: Optional[ChatClient] = None,
                        dispatcher: Optional[Dispatcher] = None) -> str:
    """Ask the endpoint what the given micro concepts have in common.

    Returns:
        str: The quoted label of the "Summarization: '<label>'" answer, or
        "cluster-<index>" when the answer can't be parsed.
    """
    if len(samples) == 0:
        raise ValidationError('Cannot label a concept without samples.')
    if client is None:
        client = create_client(cfg)

    try:
        completion = client.complete(build_label_messages(samples),
                                     cfg.max_tokens, cfg.temperature)
    except ExternalError as err:
        raise TransportError(err.message, record_id='cluster-%d' % index)

    label = parse_label(completion)
    if label is None:
        warn(dispatcher,
             'unparseable label for cluster %d, falling back to "cluster-%d"'
             % (index, index))
        return 'cluster-%d' % index
    return label


def load_annotations(
        path: str,
        dataset: EmbeddingDataset,
        dispatcher: Optional[Dispatcher] = None) -> List[MicroAnnotation]:
    """Load offline annotations (NDJSON `{"id": str, "topics": [str...]}`)
    and align them on the dataset order. Records without a row get an empty
    topic list.

    Raises:
        ValidationError: On an id unknown to the dataset or a duplicate id.
    """
    known = set(dataset.ids)
    by_id = {}  # type: Dict[str, List[str]]
    for lineno, row in iter_ndjson(path):
        if 'meta' in row:
            continue
        text_id = row.get('id')
        if text_id not in known:
            raise ValidationError('%s: line %d: unknown id "%s"' %
                                  (path, lineno, text_id))
        if text_id in by_id:
            raise ValidationError('%s: line %d: duplicate id "%s"' %
                                  (path, lineno, text_id))
        topics = row.get('topics', [])
        if not isinstance(topics, list):
            raise ValidationError('%s: line %d: "topics" must be a list' %
                                  (path, lineno))
        by_id[text_id] = normalize_topics(topics)

    missing = len(known) - len(by_id)
    if missing:
        warn(dispatcher, '%d record(s) have no annotation' % missing)

    return [MicroAnnotation(i, by_id.get(i, [])) for i in dataset.ids]


def dump_annotations(path: str,
                     annotations: Sequence[MicroAnnotation],
                     meta: Optional[Dict] = None):
    rows = [{'meta': meta}] if meta else []  # type: List[Dict]
    rows.extend({'id': a.text_id, 'topics': a.topics} for a in annotations)
    write_ndjson(path, rows)


def texts_of(dataset: EmbeddingDataset) -> List[Tuple[str, str]]:
    """Return the (id, text) pairs of a dataset, in dataset order.

    Raises:
        ValidationError: When a record carries no text.
    """
    pairs = []
    for record_id in dataset.ids:
        if record_id not in dataset.texts:
            raise ValidationError('Record "%s" has no text to annotate.' %
                                  record_id)
        pairs.append((record_id, dataset.texts[record_id]))
    return pairs
