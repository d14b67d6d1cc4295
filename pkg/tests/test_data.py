import numpy as np
import pytest

from src.data.datasets import (
    LabeledDataset,
    SplitSpec,
    SyntheticSpec,
    events_to_frames,
    holdout_split,
    make_rng,
    make_splits,
    render_pixels,
    synth_clusters,
    synth_events,
)
from src.errors import ConfigError, DataError, GenerationError
from tests.oracles import nearest_centroid_accuracy


def labelled(classes, per_class=3):
    y = np.repeat(np.arange(classes), per_class)
    return LabeledDataset(np.arange(len(y), dtype=np.float32).reshape(-1, 1), y, 'vector')


def test_pcg64_stream_is_pinned():
    assert make_rng(42).random() == 0.7739560485559633


def test_ten_classes_into_five_tasks():
    seq = make_splits(labelled(10), SplitSpec(10, 5))
    assert len(seq) == 5
    assert [t.classes for t in seq] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
    assert seq.classes_per_task == 2


def test_one_class_per_task():
    seq = make_splits(labelled(10), SplitSpec(10, 10))
    assert [t.classes for t in seq] == [(k,) for k in range(10)]


@pytest.mark.parametrize('classes,tasks', [(4, 2), (6, 3), (12, 4), (20, 5), (20, 10), (20, 20)])
def test_splits_partition_the_label_space(classes, tasks):
    spec = SplitSpec.shuffled(classes, tasks, seed=classes + tasks)
    seq = make_splits(labelled(classes), spec)
    groups = [set(t.classes) for t in seq]
    assert set().union(*groups) == set(range(classes))
    assert sum(len(g) for g in groups) == classes
    for task in seq:
        assert task.train.classes == list(range(classes // tasks))
        assert len(task.train) == 3 * len(task.classes)
    assert seq.label_map[spec.order()[-1]] == (tasks - 1, classes // tasks - 1)


def test_local_labels_map_back_to_global_ids():
    data = labelled(4)
    seq = make_splits(data, SplitSpec(4, 2, class_order=(3, 1, 0, 2)))
    task = seq[0]
    assert task.classes == (3, 1)
    globals_ = [task.global_label(int(y)) for y in task.train.y]
    original = [int(y) for y, keep in zip(data.y, np.isin(data.y, (3, 1))) if keep]
    assert globals_ == original


def test_split_spec_errors():
    with pytest.raises(ConfigError):
        SplitSpec(10, 3)
    with pytest.raises(ConfigError):
        SplitSpec(4, 2, class_order=(0, 1, 1, 2))
    with pytest.raises(DataError):
        make_splits(labelled(3), SplitSpec(4, 2))


def test_zero_noise_samples_sit_on_their_means():
    data = synth_clusters(SyntheticSpec(classes=3, samples_per_class=5, noise_sigma=0.0, dim=4, seed=1))
    for c in range(3):
        rows = data.x[data.y == c]
        assert (rows == rows[0]).all()
    assert data.kind == 'vector'


def test_clusters_are_reproducible():
    spec = SyntheticSpec(classes=4, samples_per_class=6, seed=9)
    first, second = synth_clusters(spec), synth_clusters(spec)
    np.testing.assert_array_equal(first.x, second.x)
    np.testing.assert_array_equal(first.y, second.y)
    assert first.x.shape == (24, 1, 16, 16)
    assert first.x.dtype == np.float32
    assert first.x.min() >= 0 and first.x.max() <= 1


def test_wide_margin_is_nearly_perfectly_separable():
    spec = SyntheticSpec(classes=10, samples_per_class=120, margin=8.0, noise_sigma=1.0, dim=16, seed=0)
    assert spec.separable
    train, test = holdout_split(synth_clusters(spec), 20, seed=0)
    assert nearest_centroid_accuracy(train.x, train.y, test.x, test.y) >= 0.99


def test_impossible_margin_raises():
    # three points in [-m, m] at least m apart need the whole segment; a fourth cannot fit
    with pytest.raises(GenerationError):
        synth_clusters(SyntheticSpec(classes=4, samples_per_class=2, margin=1.0, dim=1))


@pytest.mark.parametrize('shape', [(1, 8, 8), (1, 16, 16)])
def test_image_mode_keeps_margin_to_noise_ratio(shape):
    spec = SyntheticSpec(classes=10, samples_per_class=50, margin=8.0, noise_sigma=1.0, seed=0, image_shape=shape)
    data = synth_clusters(spec)
    assert data.x.shape == (500,) + shape
    assert data.x.min() >= 0 and data.x.max() <= 1
    train, test = holdout_split(data, 10, seed=0)
    assert nearest_centroid_accuracy(train.x, train.y, test.x, test.y) >= 0.99


def test_rendering_is_affine_inside_the_extent():
    values = np.array([-3.0, -1.5, 0.0, 1.5, 3.0, 4.0])
    np.testing.assert_allclose(render_pixels(values, 3.0), [0.0, 0.25, 0.5, 0.75, 1.0, 1.0])


def test_weak_separation_is_reported(caplog):
    spec = SyntheticSpec(classes=2, samples_per_class=4, margin=1.0, noise_sigma=0.5, dim=3)
    with caplog.at_level('WARNING', logger='src.data.datasets'):
        synth_clusters(spec)
    assert 'separable' in caplog.text
    caplog.clear()
    with caplog.at_level('WARNING', logger='src.data.datasets'):
        synth_clusters(SyntheticSpec(classes=2, samples_per_class=4, dim=3))
    assert caplog.text == ''


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(classes=0)
    with pytest.raises(ConfigError):
        SyntheticSpec(margin=0.0)
    assert SyntheticSpec(margin=1.0, noise_sigma=0.5).separable is False


def test_events_are_binary_and_class_specific():
    data = synth_events(4, 8, 64, seed=3, samples_per_class=40)
    assert data.x.shape == (160, 8, 64)
    assert set(np.unique(data.x)) <= {0.0, 1.0}
    profiles = LabeledDataset(data.x.mean(axis=1), data.y, 'vector')
    train, test = holdout_split(profiles, 10, seed=3)
    assert nearest_centroid_accuracy(train.x, train.y, test.x, test.y) >= 0.99


def test_event_generator_errors():
    with pytest.raises(ConfigError):
        synth_events(4, 1, 64, seed=0)
    with pytest.raises(ConfigError):
        synth_events(10, 4, 8, seed=0)


def test_events_to_frames_shape():
    frames = events_to_frames(synth_events(2, 3, 16, seed=0, samples_per_class=2), 4)
    assert frames.x.shape == (4, 3, 1, 4, 4)
    with pytest.raises(ConfigError):
        events_to_frames(synth_events(2, 3, 12, seed=0, samples_per_class=2), 4)


def test_holdout_split_is_stratified():
    train, test = holdout_split(labelled(3, per_class=5), 2, seed=0)
    assert np.bincount(test.y).tolist() == [2, 2, 2]
    assert np.bincount(train.y).tolist() == [3, 3, 3]
    assert not set(train.x[:, 0]) & set(test.x[:, 0])
    with pytest.raises(DataError):
        holdout_split(labelled(3, per_class=2), 2, seed=0)


def test_dataset_label_count_must_match():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((3, 2)), [0, 1])
