"""CATF checkpoint container.

All integers little-endian::

    b'CATF' | version u32 | section count u32
    per section: name length u16 | UTF-8 name | dtype u8 | ndim u8 | dims u32[ndim] | payload

Dtype codes: 0 = f32, 1 = u8, 2 = u32.
"""
import logging
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from src.config import RunConfig
from src.errors import CheckpointFormatError, ConfigError
from src.models.catformer import CATFormer
from src.models.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b'CATF'
VERSION = 1
DTYPES = {0: np.dtype('<f4'), 1: np.dtype('u1'), 2: np.dtype('<u4')}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


def encode_sections(sections):
    """``sections``: ordered name -> numpy array (f32, u8 or u32)."""
    out = [MAGIC, struct.pack('<II', VERSION, len(sections))]
    for name, array in sections.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder('<') if array.dtype.itemsize > 1 else array.dtype
        if dtype not in DTYPE_CODES:
            raise CheckpointFormatError(f'section {name!r} has unsupported dtype {array.dtype}')
        raw_name = name.encode('utf-8')
        out.append(struct.pack('<H', len(raw_name)) + raw_name)
        out.append(struct.pack('<BB', DTYPE_CODES[dtype], array.ndim))
        out.append(struct.pack(f'<{array.ndim}I', *array.shape))
        out.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b''.join(out)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f'truncated while reading {what} at byte {self.pos}')
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_sections(raw):
    reader = _Reader(raw)
    if reader.take(4, 'magic') != MAGIC:
        raise CheckpointFormatError('not a CATF checkpoint (bad magic)')
    version, count = reader.unpack('<II', 'header')
    if version != VERSION:
        raise CheckpointFormatError(f'unsupported checkpoint version {version}')
    sections = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack('<H', 'section name length')
        try:
            name = reader.take(name_len, 'section name').decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointFormatError(f'section name at byte {reader.pos} is not UTF-8') from None
        code, ndim = reader.unpack('<BB', f'header of {name}')
        if code not in DTYPES:
            raise CheckpointFormatError(f'section {name!r} has unknown dtype code {code}')
        dims = reader.unpack(f'<{ndim}I', f'dims of {name}')
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(size, f'payload of {name}')
        sections[name] = np.frombuffer(payload, dtype=dtype).reshape(dims)
    if reader.pos != len(raw):
        raise CheckpointFormatError(f'{len(raw) - reader.pos} trailing bytes after the last section')
    return sections


def _rng_words(rng):
    state = rng.bit_generator.state
    words = []
    for value in (state['state']['state'], state['state']['inc']):
        words += [(value >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [state['has_uint32'], state['uinteger']]
    return np.array(words, dtype='<u4')


def _restore_rng(rng, words):
    if words.shape != (10,):
        raise CheckpointFormatError('RNG state section must hold 10 words')
    w = [int(v) for v in words]
    rng.bit_generator.state = {
        'bit_generator': 'PCG64',
        'state': {
            'state': sum(w[i] << (32 * i) for i in range(4)),
            'inc': sum(w[4 + i] << (32 * i) for i in range(4)),
        },
        'has_uint32': w[8],
        'uinteger': w[9],
    }


def model_sections(model, config):
    sections = OrderedDict()
    sections['config'] = np.frombuffer(config.to_text(include_out_dir=False).encode('utf-8'), dtype='u1')
    for name, t in model.backbone.tensors.items():
        sections[f'backbone/{name}'] = t.data
    for task in model.bank.tasks:
        sections[f'thresholds/{task}'] = np.frombuffer(model.bank.to_bytes(task), dtype='u1')
    for task in model.heads.tasks:
        weight, bias = model.heads.get(task)
        sections[f'head/{task}/weight'] = weight.data
        sections[f'head/{task}/bias'] = bias.data
        sections[f'classes/{task}'] = np.array(model.task_classes[task], dtype='<u4')
    for t in model.gate.state():
        sections[t.name] = t.data
    sections['rng/model'] = _rng_words(model.rng)
    sections['rng/mixer'] = _rng_words(model.mixer_rng)
    return sections


def save_checkpoint(path, model, config):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = encode_sections(model_sections(model, config))
    path.write_bytes(raw)
    logger.info('checkpoint %s: %d tasks, %d bytes', path, model.num_tasks_seen, len(raw))
    return raw


def _require(sections, name):
    if name not in sections:
        raise CheckpointFormatError(f'checkpoint is missing section {name!r}')
    return sections[name]


def _assign(tensor, array, name):
    if tensor.shape != array.shape:
        raise CheckpointFormatError(f'{name}: stored shape {array.shape}, model expects {tensor.shape}')
    tensor.data = np.array(array, dtype=np.float32)


def load_checkpoint(path):
    """(model, config) rebuilt from a checkpoint; every stored task comes back finalized."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f'cannot read checkpoint {path}: {e}') from e
    sections = decode_sections(raw)
    try:
        config = RunConfig.from_text(bytes(_require(sections, 'config')).decode('utf-8'))
        split = config.split_spec()
        model = CATFormer(config.model_config(), split.classes_per_task, seed=config['run.seed'],
                          buffer_cap=config['train.buffer_cap'], fixed_threshold=config['model.fixed_threshold'])
    except (ConfigError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f'config section is invalid: {e}') from e

    for name, t in model.backbone.tensors.items():
        _assign(t, _require(sections, f'backbone/{name}'), name)
    tasks = sorted(int(name.split('/')[1]) for name in sections if name.startswith('thresholds/'))
    for task in tasks:
        if model.bank.load_bytes(bytes(sections[f'thresholds/{task}'])) != task:
            raise CheckpointFormatError(f'threshold record under thresholds/{task} names another task')
        weight = Tensor(_require(sections, f'head/{task}/weight'), name=f'head/{task}/weight')
        bias = Tensor(_require(sections, f'head/{task}/bias'), name=f'head/{task}/bias')
        model.heads.heads[task] = (weight, bias)
        model.task_classes[task] = tuple(int(c) for c in _require(sections, f'classes/{task}'))
    for _ in tasks:
        model.gate.grow(model.rng)
    for t in model.gate.state():
        _assign(t, _require(sections, t.name), t.name)
    for task in tasks:
        model.finalize_task(task)
    _restore_rng(model.rng, _require(sections, 'rng/model'))
    _restore_rng(model.mixer_rng, _require(sections, 'rng/mixer'))
    logger.info('loaded checkpoint %s with %d tasks', path, len(tasks))
    return model, config
