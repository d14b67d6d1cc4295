import struct
from collections import OrderedDict

import numpy as np
import pytest

from src.config import RunConfig
from src.errors import CheckpointFormatError
from src.models.catformer import CATFormer
from src.storage.checkpoint import decode_sections, encode_sections, load_checkpoint, save_checkpoint

TINY = {
    'model.timesteps': 2,
    'model.embed_dim': 16,
    'model.num_blocks': 1,
    'model.num_heads': 2,
    'model.image_size': 8,
    'split.total_classes': 4,
    'split.num_tasks': 2,
    'run.seed': 5,
}


@pytest.fixture
def saved(tmp_path):
    config = RunConfig(TINY)
    model = CATFormer(config.model_config(), 2, seed=config['run.seed'])
    for k in range(2):
        model.begin_task(k, (2 * k + 1, 2 * k))
        model.bank.thresholds(k).data[:] += 0.1 * (k + 1)
        model.finalize_task(k)
        model.gate.grow(model.rng)
    path = tmp_path / 'task_1.catf'
    raw = save_checkpoint(path, model, config)
    return model, config, path, raw


def test_save_load_save_is_bitwise_stable(saved, tmp_path):
    _, _, path, raw = saved
    loaded, config = load_checkpoint(path)
    again = save_checkpoint(tmp_path / 'again.catf', loaded, config)
    assert again == raw == path.read_bytes()


def test_loaded_model_predicts_like_the_original(saved, rng):
    model, _, path, _ = saved
    loaded, config = load_checkpoint(path)
    assert config['model.embed_dim'] == 16
    assert loaded.heads.finalized == {0, 1}
    assert loaded.task_classes == {0: (1, 0), 1: (3, 2)}
    assert loaded.reference_checksums == model.reference_checksums
    x = rng.random((2, 1, 8, 8))
    for task in (0, 1):
        np.testing.assert_array_equal(loaded.task_logits(x, task).data, model.task_logits(x, task).data)
    np.testing.assert_array_equal(loaded.gate.forward(loaded.features(x)).data,
                                  model.gate.forward(model.features(x)).data)
    assert loaded.rng.random() == model.rng.random()


def test_section_order(saved):
    _, _, _, raw = saved
    sections = decode_sections(raw)
    names = list(sections)
    assert names[0] == 'config'
    assert names[-2:] == ['rng/model', 'rng/mixer']
    assert names.index('thresholds/0') < names.index('head/0/weight') < names.index('gate/W1')
    assert sections['rng/model'].shape == (10,)
    config_text = bytes(sections['config']).decode('utf-8')
    assert 'model.embed_dim = 16' in config_text
    assert 'run.out_dir' not in config_text


def test_container_layout():
    raw = encode_sections(OrderedDict(w=np.array([1.0, 2.0], dtype=np.float32)))
    assert raw[:4] == b'CATF'
    assert struct.unpack_from('<II', raw, 4) == (1, 1)
    assert raw[12:] == struct.pack('<H', 1) + b'w' + bytes([0, 1]) + struct.pack('<I', 2) + struct.pack('<2f', 1, 2)
    with pytest.raises(CheckpointFormatError):
        encode_sections({'w': np.zeros(2, dtype=np.float64)})


@pytest.mark.parametrize('corrupt', [
    lambda raw: b'XATF' + raw[4:],
    lambda raw: raw[:4] + struct.pack('<I', 2) + raw[8:],
    lambda raw: raw[:-3],
    lambda raw: raw + b'\x00',
])
def test_format_errors(saved, corrupt):
    _, _, _, raw = saved
    with pytest.raises(CheckpointFormatError):
        decode_sections(corrupt(raw))


def test_unknown_dtype_code():
    raw = bytearray(encode_sections({'w': np.zeros(1, dtype=np.float32)}))
    raw[12 + 2 + 1] = 9
    with pytest.raises(CheckpointFormatError, match='dtype'):
        decode_sections(bytes(raw))


def test_missing_file_is_a_format_error(tmp_path):
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / 'nope.catf')
