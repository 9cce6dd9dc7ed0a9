"""
Pipeline config files.

A config is flat ``key = value`` text (``#`` comments, dotted keys for
grouping), read with configparser and never executed:

    output_dir = out
    seed = 20170601
    schema_dir = schemas
    census = census.csv
    inputs.CO = raw/co.csv
    inputs.WA = raw/wa.csv
    analyses = stop_rate, poststop, outcome_test, threshold, policy
    disparity.outcomes = search, arrest
    disparity.controls = race; race, location, time, demo
    threshold.chains = 5
    policy.window = quarter
    settings.MAX_ERROR_RATE = 0.02

Relative paths are resolved against the config file's directory. Keys under
``settings.`` override the ``TRAFFIC_STOPS`` analysis defaults for the run.
"""

import configparser
import logging
import os
from dataclasses import dataclass, field
from datetime import date

from django.conf import settings

from disparity.analysis import CONTROL_SPECS, POSTSTOP_OUTCOMES
from policy.trends import WINDOWS
from records.utils import git_blob_hash

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

ANALYSES = ('stop_rate', 'poststop', 'outcome_test', 'threshold', 'policy')
SCHEMA_SUFFIX = '.schema'
TOP_LEVEL_KEYS = ('output_dir', 'seed', 'schema_dir', 'census', 'reference_tables', 'surnames', 'workers',
                  'analyses')
GROUPS = {
    'disparity': ('outcomes', 'controls', 'robustness'),
    'threshold': ('states', 'min_stops', 'max_locations', 'chains', 'warmup', 'draws', 'ppc'),
    'policy': ('treated_states', 'control_states', 'legalization_date', 'window', 'thresholds'),
}
_TRUE = ('true', 'yes', '1', 'on')


def parse_flat(text, source='<config>'):
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=('#',), inline_comment_prefixes=('#',), delimiters=('=',),
    )
    parser.optionxform = str
    try:
        parser.read_string('[root]\n' + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return {key: value.strip() for key, value in parser['root'].items()}


def _split(value, separator=','):
    return tuple(part.strip() for part in value.split(separator) if part.strip())


def _int(flat, key, default=None):
    if key not in flat:
        return default
    try:
        return int(flat[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {flat[key]!r}") from None


def _bool(flat, key, default):
    return flat[key].lower() in _TRUE if key in flat else default


def _setting_value(name, raw):
    """Parse an override with the type of the ``TRAFFIC_STOPS`` default it replaces."""
    defaults = getattr(settings, 'TRAFFIC_STOPS', {})
    if name not in defaults:
        raise ConfigError(f"unknown setting {name!r}; expected one of {sorted(defaults)}")
    default = defaults[name]
    try:
        if isinstance(default, bool):
            return raw.lower() in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(kind(part) for part in _split(raw))
    except ValueError:
        raise ConfigError(f"settings.{name}: cannot parse {raw!r} like {default!r}") from None
    return raw


@dataclass(frozen=True)
class ThresholdOptions:
    states: tuple = None
    min_stops: int = None
    max_locations: int = None
    chains: int = None
    warmup: int = None
    draws: int = None
    ppc: bool = True


@dataclass(frozen=True)
class PolicyOptions:
    treated_states: tuple = None
    control_states: tuple = None
    legalization_date: date = None
    window: str = 'quarter'
    thresholds: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    """Inputs, analysis selections and output location of one pipeline."""

    output_dir: str
    seed: int
    inputs: dict = field(default_factory=dict)
    schema_dir: str = None
    census: str = None
    reference_tables: str = None
    surnames: str = None
    workers: int = None
    analyses: tuple = ANALYSES
    outcomes: tuple = POSTSTOP_OUTCOMES
    controls: tuple = tuple(CONTROL_SPECS)
    robustness: bool = True
    threshold: ThresholdOptions = field(default_factory=ThresholdOptions)
    policy: PolicyOptions = field(default_factory=PolicyOptions)
    overrides: dict = field(default_factory=dict)
    path: str = None
    content_hash: str = None

    @property
    def states(self):
        return tuple(sorted(self.inputs))

    def schema_path(self, state):
        return os.path.join(self.schema_dir or '', f"{state}{SCHEMA_SUFFIX}")

    def option(self, name, default=None):
        """A ``TRAFFIC_STOPS`` value with this config's overrides applied."""
        if name in self.overrides:
            return self.overrides[name]
        return getattr(settings, 'TRAFFIC_STOPS', {}).get(name, default)

    @property
    def traffic_stops(self):
        return {**getattr(settings, 'TRAFFIC_STOPS', {}), **self.overrides}

    def subdir(self, name):
        path = os.path.join(self.output_dir, name)
        os.makedirs(path, exist_ok=True)
        return path

    def validate(self, require_inputs=True):
        """
        Check every referenced path exists and every selection is known.

        Raises:
            ConfigError: Listing all problems found.
        """
        problems = []
        unknown = [a for a in self.analyses if a not in ANALYSES]
        if unknown:
            problems.append(f"unknown analyses {unknown}; expected some of {list(ANALYSES)}")
        unknown = [o for o in self.outcomes if o not in POSTSTOP_OUTCOMES]
        if unknown:
            problems.append(f"unknown outcomes {unknown}")
        unknown = [c for c in self.controls if c not in CONTROL_SPECS]
        if unknown:
            problems.append(f"unknown control specs {unknown}")
        if self.policy.window not in WINDOWS:
            problems.append(f"unknown policy window {self.policy.window!r}")
        if 'stop_rate' in self.analyses and not self.census:
            problems.append("stop_rate needs a census population table")
        if require_inputs:
            if not self.inputs:
                problems.append("no inputs.<STATE> entries")
            for state, path in sorted(self.inputs.items()):
                if not os.path.isfile(path):
                    problems.append(f"input for {state} not found: {path}")
                if not os.path.isfile(self.schema_path(state)):
                    problems.append(f"schema for {state} not found: {self.schema_path(state)}")
        for name in ('census', 'reference_tables', 'surnames'):
            path = getattr(self, name)
            if path and not os.path.isfile(path):
                problems.append(f"{name} not found: {path}")
        if problems:
            raise ConfigError('; '.join(problems))
        return self


def from_flat(flat, base_dir='.', path=None, content_hash=None):
    """Build a PipelineConfig from parsed ``key = value`` pairs."""
    def resolve(value):
        return value if value is None or os.path.isabs(value) else os.path.normpath(os.path.join(base_dir, value))

    inputs, groups, overrides = {}, {name: {} for name in GROUPS}, {}
    for key, value in flat.items():
        group, _, name = key.partition('.')
        if group == 'inputs' and name:
            inputs[name.strip().upper()] = resolve(value)
        elif group == 'settings' and name:
            overrides[name] = _setting_value(name, value)
        elif group in GROUPS and name in GROUPS[group]:
            groups[group][name] = value
        elif key not in TOP_LEVEL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")

    defaults = getattr(settings, 'TRAFFIC_STOPS', {})
    values = {
        'output_dir': resolve(flat.get('output_dir', 'output')),
        'seed': _int(flat, 'seed', overrides.get('SEED', defaults.get('SEED', 0))),
        'inputs': inputs,
        'schema_dir': resolve(flat.get('schema_dir', '.')),
        'census': resolve(flat.get('census')),
        'reference_tables': resolve(flat.get('reference_tables')),
        'surnames': resolve(flat.get('surnames')),
        'workers': _int(flat, 'workers'),
        'overrides': overrides,
        'path': path,
        'content_hash': content_hash,
    }
    if 'analyses' in flat:
        values['analyses'] = _split(flat['analyses'])

    disparity = groups['disparity']
    if 'outcomes' in disparity:
        values['outcomes'] = _split(disparity['outcomes'])
    if 'controls' in disparity:
        values['controls'] = _split(disparity['controls'], ';')
    values['robustness'] = _bool(disparity, 'robustness', True)

    threshold = groups['threshold']
    values['threshold'] = ThresholdOptions(
        states=_split(threshold['states']) if 'states' in threshold else None,
        **{k: _int(threshold, k) for k in ('min_stops', 'max_locations', 'chains', 'warmup', 'draws')},
        ppc=_bool(threshold, 'ppc', True),
    )

    policy = groups['policy']
    try:
        legalization = date.fromisoformat(policy['legalization_date']) if 'legalization_date' in policy else None
    except ValueError:
        raise ConfigError(f"policy.legalization_date must be YYYY-MM-DD, got {policy['legalization_date']!r}") from None
    values['policy'] = PolicyOptions(
        treated_states=_split(policy['treated_states']) if 'treated_states' in policy else None,
        control_states=_split(policy['control_states']) if 'control_states' in policy else None,
        legalization_date=legalization,
        window=policy.get('window', 'quarter'),
        thresholds=_bool(policy, 'thresholds', False),
    )
    return PipelineConfig(**values)


def load_config(path, overrides=None, require_inputs=True):
    """
    Read and validate a config file.

    Args:
        path: Config file.
        overrides (dict): Flat keys replacing the file's values (CLI flags).
        require_inputs (bool): Check raw inputs and schemas exist; commands
            that only read earlier outputs skip this.

    Raises:
        ConfigError
    """
    try:
        with open(path, 'rb') as handle:
            data = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config {path} is not UTF-8 text: {exc}") from exc
    flat = parse_flat(text, source=str(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = str(value)
    config = from_flat(flat, os.path.dirname(os.path.abspath(path)), str(path), git_blob_hash(data))
    logger.info(f"Loaded config {path}: {len(config.inputs)} inputs, analyses {list(config.analyses)}")
    return config.validate(require_inputs)
