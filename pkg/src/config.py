"""
Configuration helpers shared by every BridgePure stage.

Paths, environment variables (.env through python-dotenv), canonical JSON and
hashing of dataclass configs, stage seed derivation and fraction-valued
inputs such as "8/255".
"""
import dataclasses
import enum
import hashlib
import json
import logging
import os
import re
import typing
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from dotenv import load_dotenv

from errors import ConfigurationError

logger = logging.getLogger(__name__)

BASE_PATH = Path(__file__).parent.parent

_env_loaded = False


def load_environment():
    """Load .env once per process (idempotent)."""
    global _env_loaded
    if not _env_loaded:
        load_dotenv(BASE_PATH / '.env')
        _env_loaded = True


def get_runs_dir(create=True):
    """Default root for run directories (BRIDGEPURE_RUNS_DIR or <repo>/runs)."""
    load_environment()
    runs_dir = Path(os.environ.get('BRIDGEPURE_RUNS_DIR', BASE_PATH / 'runs'))
    if create:
        runs_dir.mkdir(parents=True, exist_ok=True)
    return runs_dir


def get_data_dir():
    """Dataset root (BRIDGEPURE_DATA_DIR or <repo>/data)."""
    load_environment()
    data_dir = Path(os.environ.get('BRIDGEPURE_DATA_DIR', BASE_PATH / 'data'))
    data_dir.mkdir(parents=True, exist_ok=True)
    return data_dir


def get_device(requested=None):
    """Resolve the torch device: explicit flag, then BRIDGEPURE_DEVICE, then auto."""
    load_environment()
    name = requested or os.environ.get('BRIDGEPURE_DEVICE')
    if not name:
        name = 'cuda' if torch.cuda.is_available() else 'cpu'
    if name.startswith('cuda') and not torch.cuda.is_available():
        logger.warning(f"⚠️  Device '{name}' requested but CUDA is not available, using cpu")
        name = 'cpu'
    return torch.device(name)


def progress_enabled():
    load_environment()
    return os.environ.get('BRIDGEPURE_PROGRESS', '1') not in ('0', 'false', 'no')


# --- Seeds ----------------------------------------------------------------

def derive_seed(global_seed, stage_name):
    """Stage seed: first 8 bytes of sha256('<seed>:<stage>') modulo 2**63."""
    digest = hashlib.sha256(f"{global_seed}:{stage_name}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') % (2 ** 63)


def make_generator(seed, device='cpu'):
    """torch.Generator from an int seed; generators pass through untouched."""
    if isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator(device=device)
    gen.manual_seed(int(seed) % (2 ** 63))
    return gen


def numpy_rng(seed):
    return np.random.default_rng(int(seed) % (2 ** 63))


# --- Fractions ------------------------------------------------------------

def parse_fraction(value):
    """
    Parse numeric input that may be written as a fraction ("8/255").
    Returns a float; raises ConfigurationError on garbage.
    """
    if isinstance(value, bool):
        raise ConfigurationError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigurationError(f"cannot parse numeric value {value!r}: {e}")


# --- Canonical serialization ---------------------------------------------

def to_plain(obj):
    """Convert dataclasses/enums/paths/tuples into JSON-ready builtins."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj):
    """Byte-stable serialization: sorted keys, no whitespace."""
    return json.dumps(to_plain(obj), sort_keys=True, separators=(',', ':'), ensure_ascii=True)


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()


def short_hash(obj, length=12):
    return config_hash(obj)[:length]


# --- Loading dataclasses from JSON ---------------------------------------

_KEY_PATTERN = re.compile(r'"([^"\\]+)"\s*:')


def json_key_lines(text):
    """Map every JSON key to the first line (1-based) where it appears."""
    lines = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        for match in _KEY_PATTERN.finditer(line):
            lines.setdefault(match.group(1), lineno)
    return lines


def load_json_file(path):
    """
    Read a JSON config file.
    Returns (data, key_lines). Syntax errors become ConfigurationError with
    the offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text(encoding='utf-8')
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON: {e.msg}", line=e.lineno)
    return data, json_key_lines(text)


def _unwrap_optional(hint):
    if typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return hint


def _coerce(hint, value, key, key_lines):
    hint = _unwrap_optional(hint)
    if value is None:
        return None
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if isinstance(value, hint):
            return value
        if not isinstance(value, dict):
            raise ConfigurationError(f"'{key}' must be an object", line=key_lines.get(key), key=key)
        return from_dict(hint, value, key_lines)
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(value)
        except ValueError:
            allowed = ', '.join(str(m.value) for m in hint)
            raise ConfigurationError(f"'{key}': {value!r} is not one of {allowed}",
                                     line=key_lines.get(key), key=key)
    if origin in (list, tuple):
        args = typing.get_args(hint)
        inner = args[0] if args else typing.Any
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"'{key}' must be a list", line=key_lines.get(key), key=key)
        items = [_coerce(inner, v, key, key_lines) for v in value]
        return tuple(items) if origin is tuple else items
    if hint is float:
        try:
            return parse_fraction(value)
        except ConfigurationError as e:
            raise ConfigurationError(f"'{key}': {e}", line=key_lines.get(key), key=key)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigurationError(f"'{key}' must be an integer, got {value!r}",
                                     line=key_lines.get(key), key=key)
        return int(value)
    return value


def from_dict(cls, data, key_lines=None):
    """
    Build dataclass `cls` from a plain dict, recursing into nested dataclasses.
    Unknown keys raise ConfigurationError naming the key and its line.
    """
    key_lines = key_lines or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{cls.__name__} expects an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        key = unknown[0]
        raise ConfigurationError(f"unknown key '{key}' for {cls.__name__}",
                                 line=key_lines.get(key), key=key)
    kwargs = {name: _coerce(hints[name], value, name, key_lines) for name, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{cls.__name__}: {e}")
