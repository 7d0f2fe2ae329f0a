import json
import os.path
import requests
import threading
from typing import Any, Dict, List, Optional
from ..exceptions import ExternalError, ValidationError
from ..utils import canonical_dumps, canonical_hash

CASSETTE_MODES = ('replay', 'record')


def request_key(path: str, body: Dict) -> str:
    """Key identifying a request in a cassette: sha256 of the endpoint path
    and of the canonical request body. The base URL isn't part of it so a
    cassette recorded against one server replays against any other."""
    return canonical_hash({'path': path, 'body': body})


class Cassette(object):
    """Record/replay store of endpoint responses, kept as NDJSON lines
    `{"hash": str, "response": {...}}`.

    In replay mode no request ever leaves the process: a request without a
    recorded response is an error. In record mode, requests go to the
    endpoint and responses are stored, then written by save().
    """
    def __init__(self, path: str, mode: str = 'replay'):
        if mode not in CASSETTE_MODES:
            raise ValidationError('Unknown cassette mode "%s".' % mode)
        if mode == 'replay' and not os.path.exists(path):
            raise ValidationError('Cassette "%s" not found.' % path)

        self.path = path
        self.mode = mode
        self._entries = {}  # type: Dict[str, Any]
        self._lock = threading.Lock()

        if os.path.exists(path):
            with open(path, 'r', encoding='utf-8') as f:
                for lineno, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        entry = json.loads(line)
                        self._entries[entry['hash']] = entry['response']
                    except (json.JSONDecodeError, KeyError, TypeError):
                        raise ValidationError(
                            '%s: line %d: malformed cassette entry' %
                            (path, lineno))

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, key: str) -> Optional[Any]:
        with self._lock:
            return self._entries.get(key)

    def record(self, key: str, response: Any):
        with self._lock:
            self._entries[key] = response

    def save(self, path: Optional[str] = None):
        """Write entries sorted by hash, thus the file doesn't depend on the
        order concurrent requests completed in."""
        with self._lock:
            with open(path or self.path, 'w', encoding='utf-8') as f:
                for key in sorted(self._entries):
                    f.write(
                        canonical_dumps({
                            'hash': key,
                            'response': self._entries[key]
                        }))
                    f.write('\n')


class ChatClient(object):
    """Minimal client for OpenAI-compatible chat-completion and embeddings
    endpoints, optionally backed by a Cassette."""
    def __init__(self,
                 base_url: Optional[str],
                 model: str,
                 timeout: float = 30.0,
                 retries: int = 2,
                 cassette: Optional[Cassette] = None,
                 session: Optional[requests.Session] = None,
                 api_key: Optional[str] = None):
        if base_url is None and (cassette is None
                                 or cassette.mode != 'replay'):
            raise ValidationError(
                'An endpoint URL is needed unless a cassette is replayed.')

        self.base_url = base_url.rstrip('/') if base_url else None
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.cassette = cassette
        self._session = session if session is not None else requests.Session()
        if api_key:
            self._session.headers.update(
                {'Authorization': 'Bearer ' + api_key})

    def _build_url(self, path: str) -> str:
        return '%s/%s' % (self.base_url, path.lstrip('/'))

    def post(self, path: str, body: Dict) -> Any:
        """Send a JSON request and return the decoded response.

        Raises:
            ExternalError: When the cassette has no response for a replayed
                request, or when every attempt failed (transport error,
                non-2xx status or undecodable body).
        """
        key = request_key(path, body)
        if self.cassette is not None and self.cassette.mode == 'replay':
            response = self.cassette.lookup(key)
            if response is None:
                raise ExternalError(
                    'No recorded response for request %s in cassette "%s".'
                    % (key[:12], self.cassette.path))
            return response

        url = self._build_url(path)
        last_err = None  # type: Optional[Exception]
        for _ in range(self.retries + 1):
            try:
                r = self._session.post(url, json=body, timeout=self.timeout)
                if r.status_code != requests.codes.ok:
                    raise requests.HTTPError(
                        'Request to %s failed with code %d' %
                        (url, r.status_code))
                response = r.json()
                break
            except (requests.RequestException, ValueError) as err:
                last_err = err
        else:
            raise ExternalError('Request to %s failed after %d attempt(s): %s'
                                % (url, self.retries + 1, last_err))

        if self.cassette is not None:
            self.cassette.record(key, response)
        return response

    def complete(self, messages: List[Dict[str, str]], max_tokens: int,
                 temperature: float) -> str:
        """Call <base>/chat/completions and return choices[0].message.content."""
        body = {
            'model': self.model,
            'messages': messages,
            'max_tokens': max_tokens,
            'temperature': temperature,
        }
        response = self.post('chat/completions', body)
        try:
            return response['choices'][0]['message']['content'] or ''
        except (KeyError, IndexError, TypeError):
            raise ExternalError('Malformed chat-completion response.')

    def embed(self, inputs: List[str]) -> List[List[float]]:
        """Call <base>/embeddings and return one vector per input, in input
        order (responses are re-sorted by their "index" field)."""
        response = self.post('embeddings', {
            'model': self.model,
            'input': inputs
        })
        try:
            data = sorted(response['data'], key=lambda d: d.get('index', 0))
            vectors = [d['embedding'] for d in data]
        except (KeyError, TypeError):
            raise ExternalError('Malformed embeddings response.')
        if len(vectors) != len(inputs):
            raise ExternalError('Expected %d embeddings, got %d.' %
                                (len(inputs), len(vectors)))
        return vectors
