import dataclasses
import hashlib
import json
import math
import numpy as np
import os.path
import yaml
from typing import Any, Dict, Iterator, List, Optional, Tuple
from .dispatcher import Dispatcher
from .exceptions import ValidationError

CONFIG_SECTIONS = ('endpoint', 'bank', 'importance', 'train', 'pipeline',
                   'eval')


def load_config_file(path: str) -> Dict:
    """Load the YAML config file at the given path. Note that this function
    doesn't normalize the config, this is handled by normalize_config().

    Args:
        path (str):
            The path to the config file to load. It could be either relative or
            absolute.

    Raises:
        ValidationError: When the given path does not exist or the file
            isn't a YAML mapping.

    Returns:
        Dict: The loaded and parsed config file
    """

    if not os.path.exists(path):
        raise ValidationError('No file "%s" found.' % (path))

    with open(path, 'r') as f:
        try:
            config = yaml.safe_load(f) or {}
        except yaml.YAMLError as err:
            raise ValidationError('Config file "%s" is not valid YAML: %s' %
                                  (path, err))

    if not isinstance(config, dict):
        raise ValidationError('Config file "%s" is not a mapping.' %
                              (path))

    return config


def normalize_config(config: Dict) -> Dict:
    """Normalize tcbmkit config.

    It makes sure every section exists (so that section dataclasses can be
    built with their own defaults) and propagates the global seed into the
    sections that have one, unless they set it explicitly.

    For instance:

        seed: 7
        train:
          epochs: 30

    Will be normalized into:

        seed: 7
        endpoint: {}
        bank: {seed: 7}
        importance: {seed: 7}
        train: {epochs: 30, seed: 7}
        pipeline: {}
        eval: {}

    Args:
        config (Dict): Config to normalize.

    Raises:
        ValidationError: When the config contains an unknown section.

    Returns:
        Dict: The normalized config.
    """

    unknown = set(config.keys()) - set(CONFIG_SECTIONS) - {'seed'}
    if unknown:
        raise ValidationError('Unknown config sections: %s.' %
                              ', '.join(sorted(unknown)))

    for section in CONFIG_SECTIONS:
        if config.get(section) is None:
            config[section] = {}
        if not isinstance(config[section], dict):
            raise ValidationError('Config section "%s" must be a mapping.' %
                                  section)

    config.setdefault('seed', 0)
    for section in ('bank', 'importance', 'train'):
        config[section].setdefault('seed', config['seed'])

    return config


def merge_overrides(config: Dict, section: str, **flags: Any) -> Dict:
    """Apply CLI flag values on top of a config section. Flags left to None
    (i.e. not passed on the command line) don't override anything, this is
    what gives CLI flags precedence over the config file, and the config
    file precedence over defaults.
    """
    for name, value in flags.items():
        if value is None:
            continue
        if isinstance(value, tuple) and len(value) == 0:
            continue
        config[section][name] = value
    return config


def set_up_progress_listeners(dispatcher: Dispatcher, kctx):
    """Set up listeners rendering library events on the CLI.

    This is usually called by the RootCommand when it creates the event
    dispatcher.

    Args:
        dispatcher (Dispatcher): The dispatcher against which the listeners
            will be registered.
        kctx (tcbmkit.Context): Context used to render messages.
    """
    def on_warning(message: str):
        kctx.warning(message)
        return True

    def on_info(message: str):
        kctx.info(message)
        return True

    def on_iteration(record, **kwargs):
        kctx.info('iteration %d: |CBL|=%d simple=%.4f residual=%.4f I_r=%.4f%s'
                  % (record.iteration, len(record.concept_ids),
                     record.simple_dev_acc, record.residual_dev_acc,
                     record.residual_importance,
                     ' (stop)' if record.stop else ''))
        return True

    dispatcher.on('warning', on_warning)
    dispatcher.on('info', on_info)
    dispatcher.on('pipeline.iteration', on_iteration)


def _canonical(obj: Any) -> str:
    if obj is None:
        return 'null'
    if isinstance(obj, (bool, np.bool_)):
        return 'true' if obj else 'false'
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            raise ValueError('Non-finite float %r cannot be serialized.' %
                             value)
        return '%.17g' % value
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return '[' + ','.join(_canonical(v) for v in obj) + ']'
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return '{' + ','.join('%s:%s' % (json.dumps(k), _canonical(v))
                              for k, v in items) + '}'
    raise TypeError('Object of type %s is not serializable.' %
                    type(obj).__name__)


def canonical_dumps(obj: Any) -> str:
    """Serialize obj as canonical JSON: sorted keys, no whitespace and floats
    written with 17 significant digits, so that float values survive a
    round-trip exactly and identical objects always give identical bytes.
    """
    return _canonical(obj)


def canonical_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_dumps(obj).encode('utf-8')).hexdigest()


def write_json(path: str, obj: Any):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(canonical_dumps(obj))
        f.write('\n')


def read_json(path: str) -> Any:
    if not os.path.exists(path):
        raise ValidationError('File "%s" not found.' % (path))
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f)
        except (json.JSONDecodeError, UnicodeDecodeError) as err:
            raise ValidationError('File "%s" is not valid JSON: %s' %
                                  (path, err))


def write_ndjson(path: str, rows: List[Any]):
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(canonical_dumps(row))
            f.write('\n')


def iter_ndjson(path: str) -> Iterator[Tuple[int, Dict]]:
    """Iterate over the non-blank lines of an NDJSON file, yielding
    (line number, decoded object) tuples. Line numbers start at 1.

    Raises:
        ValidationError: When the file does not exist, is not UTF-8, or a
            line is not a JSON object.
    """
    if not os.path.exists(path):
        raise ValidationError('File "%s" not found.' % (path))

    with open(path, 'rb') as f:
        for lineno, raw in enumerate(f, start=1):
            try:
                line = raw.decode('utf-8')
            except UnicodeDecodeError:
                raise ValidationError('%s: line %d: not valid UTF-8' %
                                      (path, lineno))
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValidationError('%s: line %d: malformed record (%s)' %
                                      (path, lineno, err.msg))
            if not isinstance(row, dict):
                raise ValidationError('%s: line %d: expected a JSON object' %
                                      (path, lineno))
            yield lineno, row


def meta_line(payload: Dict) -> Dict:
    return {'meta': payload}


def dataclass_from_dict(cls, raw: Optional[Dict], section: str):
    """Build a config dataclass from a config section, rejecting unknown
    keys. Defaults of the dataclass apply to missing keys."""
    raw = raw or {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw.keys()) - names
    if unknown:
        raise ValidationError('Unknown %s settings: %s.' %
                              (section, ', '.join(sorted(unknown))))
    return cls(**raw)
