import numpy as np
import pytest

from src.engine.protocol import Phase, count_parameters
from src.errors import ConfigError, ImmutabilityError, UnknownTaskError
from src.models.backbone import parameter_count
from src.models.catformer import CATFormer, FeatureBuffer, GatingMLP
from src.models.dtlif import BASE
from src.models.tensor import Tensor


def finalized_model(cfg, tasks=2, classes_per_task=2, **kwargs):
    model = CATFormer(cfg, classes_per_task, **kwargs)
    for k in range(tasks):
        model.begin_task(k, tuple(range(k * classes_per_task, (k + 1) * classes_per_task)))
        model.finalize_task(k)
        model.gate.grow(model.rng)
    return model


def test_gate_shapes_and_growth(rng):
    gate = GatingMLP(16, rng)
    assert gate.hidden_dim == 4
    assert gate.num_tasks == 0
    gate.grow(rng)
    first_column = gate.W2.data[:, 0].copy()
    gate.grow(rng)
    assert gate.W2.shape == (4, 2) and gate.b2.shape == (2,)
    np.testing.assert_array_equal(gate.W2.data[:, 0], first_column)
    assert gate.forward(Tensor(rng.random((3, 16)))).shape == (3, 2)
    assert gate.parameter_count() == 16 * 4 + 4 + 4 * 2 + 2
    with pytest.raises(ConfigError):
        gate.forward(Tensor(np.zeros((1, 8))))


def test_buffer_cap_and_read_only_entries(rng):
    buffer = FeatureBuffer(per_task_cap=100)
    assert buffer.add(rng.random((500, 16)), task=0) == 100
    assert buffer.add(rng.random((5, 16)), task=0) == 0
    assert buffer.add(rng.random((3, 16)), task=1) == 3
    assert len(buffer) == 103
    assert buffer.tasks == [0, 1]
    assert buffer.labels().tolist().count(1) == 3
    with pytest.raises(ValueError):
        buffer.entries[0].feature[0] = 1.0
    with pytest.raises(ConfigError):
        FeatureBuffer(0)


def test_begin_task_thresholds(tiny_cfg):
    model = CATFormer(tiny_cfg, 2)
    model.begin_task(0, (0, 1))
    assert (model.bank.thresholds(0).data == tiny_cfg.phi_init).all()
    model.bank.thresholds(0).data[:] = 0.9
    model.finalize_task(0)

    model.begin_task(1, (2, 3))
    assert (model.bank.thresholds(1).data == tiny_cfg.phi_init).all()

    warm = CATFormer(tiny_cfg, 2)
    warm.begin_task(0, (0, 1))
    warm.bank.thresholds(0).data[:] = 0.9
    warm.finalize_task(0)
    warm.begin_task(1, (2, 3), warm_start=True)
    np.testing.assert_array_equal(warm.bank.thresholds(1).data, warm.bank.thresholds(0).data)


def test_finalized_tasks_cannot_be_redefined(tiny_cfg):
    model = finalized_model(tiny_cfg, tasks=1)
    with pytest.raises(ImmutabilityError):
        model.begin_task(0, (0, 1))
    with pytest.raises(UnknownTaskError):
        model.heads.get(5)


def test_finalize_freezes_backbone_once(tiny_cfg):
    model = finalized_model(tiny_cfg, tasks=2)
    assert model.backbone_frozen
    assert not any(t.requires_grad for t in model.backbone.tensors.values())
    assert model.groups() == ['backbone', 'thresholds/0', 'head/0', 'thresholds/1', 'head/1']
    assert set(model.reference_checksums) == set(model.groups())


def test_trainable_count_for_later_tasks(tiny_cfg):
    model = finalized_model(tiny_cfg, tasks=1)
    model.begin_task(1, (2, 3))
    d, c = tiny_cfg.embed_dim, 2
    counts = count_parameters(model, Phase.TASK_K, 1)
    assert counts.trainable == d * c + c + model.bank.entry_count
    assert counts.bank_bytes == 4 * model.bank.entry_count
    gate = count_parameters(model, Phase.GATE, 1)
    assert gate.trainable == counts.trainable + model.gate.parameter_count()


def test_fixed_threshold_trains_heads_only(tiny_cfg):
    model = finalized_model(tiny_cfg, tasks=1, fixed_threshold=True)
    model.begin_task(1, (2, 3))
    assert count_parameters(model, Phase.TASK_K, 1).trainable == tiny_cfg.embed_dim * 2 + 2
    assert (model.bank.thresholds(1).data == tiny_cfg.phi_init).all()


def test_task_zero_count_covers_backbone(tiny_cfg):
    model = CATFormer(tiny_cfg, 2)
    model.begin_task(0, (0, 1))
    counts = count_parameters(model, Phase.TASK0, 0)
    assert counts.trainable == parameter_count(tiny_cfg) + model.bank.entry_count + tiny_cfg.embed_dim * 2 + 2


def test_features_restore_base_selection(tiny_cfg, rng):
    model = finalized_model(tiny_cfg, tasks=2)
    x = rng.random((2, 1, 8, 8))
    base = model.features(x)
    model.features(x, task=1)
    assert model.bank.active_task == BASE
    np.testing.assert_array_equal(model.features(x).data, base.data)


def test_model_summary(tiny_cfg):
    summary = finalized_model(tiny_cfg, tasks=2).to_dict()
    assert summary['tasks_seen'] == 2
    assert summary['gate_width'] == 2
    assert summary['bank']['finalized'] == [0, 1]
