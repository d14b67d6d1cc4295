"""Run configuration: dotted keys resolved from defaults, a config file, the environment and flags."""
import logging
import os
from collections import OrderedDict
from pathlib import Path

from src.data.datasets import SplitSpec, SyntheticSpec
from src.engine.protocol import TrainConfig
from src.errors import ConfigError
from src.models.backbone import ModelConfig

logger = logging.getLogger(__name__)

OUT_DIR_ENV = 'CATF_OUT'

DEFAULTS = OrderedDict([
    ('run.seed', 0),
    ('run.out_dir', 'runs/default'),

    ('data.source', 'synth'),
    ('data.train_images', ''),
    ('data.train_labels', ''),
    ('data.test_images', ''),
    ('data.test_labels', ''),
    ('data.samples_per_class', 60),
    ('data.test_per_class', 30),
    ('data.margin', 2.0),
    ('data.noise_sigma', 0.25),
    ('data.event_channels', 64),

    ('split.total_classes', 10),
    ('split.num_tasks', 5),
    ('split.shuffle', False),
    ('split.class_order', ''),

    ('model.timesteps', 4),
    ('model.embed_dim', 64),
    ('model.num_blocks', 2),
    ('model.num_heads', 4),
    ('model.patch_size', 4),
    ('model.image_size', 16),
    ('model.in_channels', 1),
    ('model.mixer_mode', 'spiking_attention'),
    ('model.ffn_trainable', True),
    ('model.random_seed', 0),
    ('model.attn_scale', 0.125),
    ('model.tau', 2.0),
    ('model.phi_init', 0.5),
    ('model.surrogate', 'rectangular'),
    ('model.surrogate_width', 0.5),
    ('model.full_bptt', False),
    ('model.fixed_threshold', False),
    ('model.warm_start', False),

    ('train.lr_backbone', 0.05),
    ('train.lr_threshold', 0.1),
    ('train.lr_head', 0.05),
    ('train.lr_gate', 0.05),
    ('train.epochs_task0', 30),
    ('train.epochs_taskk', 15),
    ('train.epochs_gate', 20),
    ('train.batch_size', 32),
    ('train.buffer_cap', 256),

    ('eval.workers', 1),

    ('debug.corrupt_frozen_at_task', -1),
])

DATA_SOURCES = ('synth', 'idx', 'events')
_TRUE = ('true', '1', 'yes', 'on')
_FALSE = ('false', '0', 'no', 'off')


def coerce(key, value):
    """Convert ``value`` to the type of the default for ``key``."""
    if key not in DEFAULTS:
        raise ConfigError(f'unknown config key {key!r}')
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f'{key} expects a boolean, got {value!r}')
    try:
        if isinstance(default, int):
            return int(str(value).strip())
        if isinstance(default, float):
            return float(str(value).strip())
    except ValueError:
        raise ConfigError(f'{key} expects {type(default).__name__}, got {value!r}') from None
    return str(value).strip()


def parse_config_file(path):
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f'cannot read config file {path}: {e}') from e
    return parse_config_text(text, path)


def parse_config_text(text, source='<config>'):
    """`key = value` lines; `#` starts a comment."""
    values = OrderedDict()
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise ConfigError(f'{source}:{line_no}: expected "key = value"')
        key = key.strip()
        values[key] = coerce(key, value)
    return values


def parse_flags(args):
    """``['--model.tau', '4', '--train.batch_size=16']`` -> dotted overrides."""
    values = OrderedDict()
    args = list(args)
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith('--'):
            raise ConfigError(f'unexpected argument {arg!r}')
        key, sep, value = arg[2:].partition('=')
        if not sep:
            if i + 1 >= len(args):
                raise ConfigError(f'flag --{key} needs a value')
            value = args[i + 1]
            i += 1
        values[key] = coerce(key, value)
        i += 1
    return values


class RunConfig:
    """Resolved configuration. Layers: defaults < file < environment < flags."""

    def __init__(self, values=None):
        self.values = OrderedDict(DEFAULTS)
        self.explicit = frozenset(values or ())
        for key, value in (values or {}).items():
            self.values[key] = coerce(key, value)
        self._validate()

    @classmethod
    def resolve(cls, config_file=None, flags=(), environ=None):
        environ = os.environ if environ is None else environ
        values = OrderedDict()
        if config_file:
            values.update(parse_config_file(config_file))
        if environ.get(OUT_DIR_ENV):
            values['run.out_dir'] = environ[OUT_DIR_ENV]
        values.update(parse_flags(flags))
        config = cls(values)
        logger.debug('resolved %d config keys (%d overridden)', len(config.values), len(values))
        return config

    @classmethod
    def from_text(cls, text):
        return cls(parse_config_text(text))

    def _validate(self):
        if self['data.source'] not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {', '.join(DATA_SOURCES)}, got {self['data.source']!r}")
        for key in ('train.lr_backbone', 'train.lr_threshold', 'train.lr_head', 'train.lr_gate'):
            if self[key] < 0:
                raise ConfigError(f'{key} must be >= 0')
        if self['eval.workers'] < 1:
            raise ConfigError('eval.workers must be at least 1')

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f'unknown config key {key!r}')
        return self.values[key]

    def replace(self, overrides):
        """Copy with ``{dotted key: value}`` overrides applied."""
        values = OrderedDict(self.values)
        values.update(overrides)
        config = RunConfig(values)
        config.explicit = self.explicit | frozenset(overrides)
        return config

    @property
    def out_dir(self):
        return Path(self['run.out_dir'])

    def section(self, prefix):
        return {k.split('.', 1)[1]: v for k, v in self.values.items() if k.startswith(prefix + '.')}

    def to_text(self, include_out_dir=True):
        lines = []
        for key in sorted(self.values):
            if key == 'run.out_dir' and not include_out_dir:
                continue
            value = self.values[key]
            if isinstance(value, bool):
                value = 'true' if value else 'false'
            lines.append(f'{key} = {value}')
        return '\n'.join(lines) + '\n'

    def model_config(self):
        fields = self.section('model')
        fields.pop('fixed_threshold')
        fields.pop('warm_start')
        if self['data.source'] == 'events':
            side = int(round(self['data.event_channels'] ** 0.5))
            if side * side != self['data.event_channels']:
                raise ConfigError('data.event_channels must be a perfect square to form event frames')
            fields.update(event_input=True, image_size=side, in_channels=1)
        return ModelConfig(**fields)

    def train_config(self):
        return TrainConfig(seed=self['run.seed'], **self.section('train'))

    def split_spec(self):
        total, tasks = self['split.total_classes'], self['split.num_tasks']
        order = self['split.class_order']
        if order:
            try:
                order = tuple(int(c) for c in order.replace(',', ' ').split())
            except ValueError:
                raise ConfigError(f'split.class_order must list integers, got {order!r}') from None
            return SplitSpec(total, tasks, order, self['run.seed'])
        if self['split.shuffle']:
            return SplitSpec.shuffled(total, tasks, self['run.seed'])
        return SplitSpec(total, tasks, None, self['run.seed'])

    def synthetic_spec(self):
        model = self.model_config()
        return SyntheticSpec(
            classes=self['split.total_classes'],
            samples_per_class=self['data.samples_per_class'] + self['data.test_per_class'],
            margin=self['data.margin'],
            noise_sigma=self['data.noise_sigma'],
            seed=self['run.seed'],
            image_shape=(model.in_channels, model.image_size, model.image_size),
        )
