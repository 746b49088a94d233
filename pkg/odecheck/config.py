#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""
Run configuration: a flat `key = value` text file, command-line overrides and the `ODECHECK_THREADS` environment
variable, resolved in the order flag > file > environment > default.
"""
import logging

from odecheck.ode import SolverSpec
from odecheck.utils import get_threads_from_env

try:
    from pathlib import Path
except ImportError:
    from pathlib2 import Path  # python 2

try:
    # noinspection PyUnresolvedReferences
    from typing import Dict, Any, Optional, Union
except ImportError:
    pass

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised on an unknown key or a value that cannot be parsed or is invalid for its key."""
    def __init__(self, key, value, reason, source=None):
        self.key = key
        self.value = value
        self.reason = reason
        self.source = source

    def __str__(self):
        where = "" if self.source is None else " (%s)" % self.source
        return "Invalid configuration key '%s' = %r%s: %s" % (self.key, self.value, where, self.reason)


_TRUE = ('true', 'yes', 'on', '1')
_FALSE = ('false', 'no', 'off', '0')


def _to_bool(text):
    low = str(text).strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError("expected true or false")


def _optional_int(text):
    return None if str(text).strip() == '' else int(text)


def _optional_str(text):
    return None if str(text).strip() == '' else str(text).strip()


def _solver(text):
    return str(SolverSpec.parse(str(text)))


def _positive(cast):
    def convert(text):
        v = cast(text)
        if not v > 0:
            raise ValueError("should be positive")
        return v
    return convert


# key -> (converter, default)
SCHEMA = (
    ('model', (str, 'lotka-volterra')),
    ('dataset', (_optional_str, None)),
    ('chains', (_positive(int), 4)),
    ('iterations', (_positive(int), 4000)),
    ('warmup', (_optional_int, None)),
    ('stepsize', (_positive(float), 0.1)),
    ('target_accept', (float, 0.8)),
    ('max_depth', (_positive(int), 10)),
    ('seed', (int, 1)),
    ('solver', (_solver, 'rk45(0.001)')),
    ('ladder', (str, 'default')),
    ('delta_mae', (_positive(float), 0.05)),
    ('delta_k', (_positive(float), 0.02)),
    ('mae_floor', (_positive(float), 1e-12)),
    ('full_ladder', (_to_bool, False)),
    ('sigma', (_positive(float), 0.5)),
    ('threads', (_positive(int), 1)),
    ('out', (str, 'odecheck-out')),
    ('progress', (_to_bool, False)),
)
KEYS = tuple(k for k, _ in SCHEMA)
_SCHEMA = dict(SCHEMA)


def convert_value(key, value, source=None):
    """Converts `value` (text or already typed) for `key`, raising `ConfigError` when impossible."""
    try:
        converter, _ = _SCHEMA[key]
    except KeyError:
        raise ConfigError(key, value, "unknown key, valid keys are %s" % (KEYS,), source)
    if value is None:
        return None
    try:
        return converter(value)
    except ValueError as e:
        raise ConfigError(key, value, str(e) or "cannot be parsed", source)


class RunConfig(object):
    """
    All settings of a run, one attribute per key (see `KEYS`). `explicit_keys` holds the keys that were set by a
    config file or a command-line flag rather than left to their default or the environment.
    """
    def __init__(self, **values):
        for key, (_, default) in SCHEMA:
            setattr(self, key, default)
        self.explicit_keys = set()
        for key, value in values.items():
            setattr(self, key, convert_value(key, value))
            self.explicit_keys.add(key)

    @property
    def solver_spec(self):
        return SolverSpec.parse(self.solver)

    @property
    def resolved_warmup(self):
        return self.iterations // 2 if self.warmup is None else self.warmup

    def to_dict(self):
        return {k: getattr(self, k) for k in KEYS}

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return "RunConfig(%s)" % ", ".join("%s=%r" % kv for kv in self.to_dict().items())

    def sampler_config(self):
        from odecheck.sampler import SamplerConfig
        return SamplerConfig(chains=self.chains, iterations=self.iterations, warmup=self.warmup,
                             stepsize=self.stepsize, target_accept=self.target_accept, max_depth=self.max_depth,
                             seed=self.seed, threads=self.threads, progress=self.progress)

    def method_ladder(self, method=None):
        from odecheck.workflow import MethodLadder
        return MethodLadder.parse(self.ladder, method or self.solver_spec, delta_mae=self.delta_mae,
                                  delta_k=self.delta_k, mae_floor=self.mae_floor)


def parse_config_text(text, source=None):
    # type: (str, str) -> Dict[str, Any]
    """
    Parses `key = value` lines into typed values. Blank lines and `#` comments are ignored; unknown keys and
    unparsable values raise `ConfigError`.
    """
    values = dict()
    for i, line in enumerate(text.splitlines()):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(line, None, "expected 'key = value'", "%s line %s" % (source or '<text>', i + 1))
        key, raw = (s.strip() for s in line.split('=', 1))
        values[key] = convert_value(key, raw, "%s line %s" % (source or '<text>', i + 1))
    return values


def read_config_file(path):
    # type: (Union[str, Path]) -> Dict[str, Any]
    path = Path(path)
    with open(str(path)) as f:
        return parse_config_text(f.read(), source=str(path))


def _format_value(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config):
    # type: (RunConfig) -> str
    """Renders `config` in the file format, so that `parse_config_text(format_config(c))` gives `c` back."""
    return "".join("%s = %s\n" % (k, _format_value(getattr(config, k))) for k in KEYS)


def load_run_config(path=None,      # type: Union[str, Path]
                    overrides=None  # type: Dict[str, Any]
                    ):
    # type: (...) -> RunConfig
    """
    Builds the effective configuration.

     - `overrides` (command-line flags, None values meaning 'not given') win over
     - the config file at `path`, which wins over
     - the `ODECHECK_THREADS` environment variable (for `threads`), which wins over
     - the defaults.

    :param path: an optional config file
    :param overrides: optional explicit values
    :return:
    """
    values = dict()
    if path is not None:
        values.update(read_config_file(path))
    for key, value in (overrides or dict()).items():
        if value is not None:
            values[key] = convert_value(key, value, "command line")
    config = RunConfig(**values)
    if 'threads' not in values:
        try:
            env_threads = get_threads_from_env()
        except ValueError as e:
            raise ConfigError('threads', None, str(e), 'environment')
        if env_threads is not None:
            config.threads = env_threads
    logger.debug("effective configuration: %r", config)
    return config
