"""Task sequences with disjoint label sets, and the synthetic generators behind them.

All randomness comes from ``numpy.random.Generator(PCG64(seed))``, whose output
stream numpy keeps stable across platforms and releases.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from src.errors import ConfigError, DataError, GenerationError

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000
SEPARABLE_RATIO = 4


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    kind: str = 'image'

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f'{len(self.x)} samples but {len(self.y)} labels')

    def __len__(self):
        return len(self.y)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.x[indices], self.y[indices], self.kind)

    @property
    def classes(self):
        return sorted(int(c) for c in np.unique(self.y))


@dataclass
class Task:
    task_id: int
    classes: tuple
    train: LabeledDataset
    test: LabeledDataset = None

    def global_label(self, local):
        return self.classes[local]


@dataclass
class TaskSequence:
    tasks: list
    classes_per_task: int

    def __post_init__(self):
        seen = set()
        for task in self.tasks:
            overlap = seen.intersection(task.classes)
            if overlap:
                raise ConfigError(f'task {task.task_id} reuses classes {sorted(overlap)}')
            seen.update(task.classes)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, k):
        return self.tasks[k]

    @property
    def label_map(self):
        """global class id -> (task id, local label)"""
        return {c: (t.task_id, local) for t in self.tasks for local, c in enumerate(t.classes)}


@dataclass
class SplitSpec:
    total_classes: int = 10
    num_tasks: int = 5
    class_order: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.total_classes <= 0 or self.num_tasks <= 0:
            raise ConfigError('total_classes and num_tasks must be positive')
        if self.total_classes % self.num_tasks:
            raise ConfigError(f'{self.total_classes} classes cannot be split evenly into {self.num_tasks} tasks')
        if self.class_order is not None:
            self.class_order = tuple(int(c) for c in self.class_order)
            if sorted(self.class_order) != list(range(self.total_classes)):
                raise ConfigError(f'class_order must be a permutation of 0..{self.total_classes - 1}')

    @property
    def classes_per_task(self):
        return self.total_classes // self.num_tasks

    @classmethod
    def shuffled(cls, total_classes, num_tasks, seed):
        order = make_rng(seed).permutation(total_classes)
        return cls(total_classes, num_tasks, tuple(int(c) for c in order), seed)

    def order(self):
        return self.class_order if self.class_order is not None else tuple(range(self.total_classes))


def _task_view(dataset, classes):
    if dataset is None:
        return None
    mask = np.isin(dataset.y, classes)
    local = {c: i for i, c in enumerate(classes)}
    return LabeledDataset(dataset.x[mask], [local[int(c)] for c in dataset.y[mask]], dataset.kind)


def make_splits(dataset, spec, test=None):
    """Partition ``dataset`` (and optionally ``test``) into tasks with disjoint label sets.

    Labels inside each task are remapped to 0..classes_per_task-1; the task's
    ``classes`` tuple records the global id of every local label.
    """
    present = set(dataset.classes)
    missing = set(range(spec.total_classes)) - present
    if missing or present - set(range(spec.total_classes)):
        raise DataError(f'labels must cover 0..{spec.total_classes - 1}; missing {sorted(missing)}')
    order = spec.order()
    c = spec.classes_per_task
    tasks = []
    for k in range(spec.num_tasks):
        classes = tuple(order[k * c:(k + 1) * c])
        tasks.append(Task(k, classes, _task_view(dataset, classes), _task_view(test, classes)))
    return TaskSequence(tasks, c)


@dataclass
class SyntheticSpec:
    classes: int = 10
    samples_per_class: int = 100
    margin: float = 2.0
    noise_sigma: float = 0.25
    seed: int = 0
    dim: int = None
    image_shape: tuple = field(default=(1, 16, 16))

    def __post_init__(self):
        if self.classes <= 0 or self.samples_per_class <= 0:
            raise ConfigError('classes and samples_per_class must be positive')
        if self.margin <= 0 or self.noise_sigma < 0:
            raise ConfigError('margin must be positive and noise_sigma non-negative')
        if self.dim is None and self.image_shape is None:
            raise ConfigError('either dim or image_shape is required')

    @property
    def image_mode(self):
        return self.dim is None

    @property
    def separation(self):
        return float('inf') if self.noise_sigma == 0 else self.margin / self.noise_sigma

    @property
    def separable(self):
        return self.separation >= SEPARABLE_RATIO


def _place_means(rng, classes, size, low, high, margin):
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        means = rng.uniform(low, high, (classes, size))
        gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() >= margin:
            return means
    raise GenerationError(
        f'could not place {classes} class means {margin} apart after {MAX_PLACEMENT_ATTEMPTS} attempts')


def synth_clusters(spec):
    """Gaussian clusters around class means at least ``margin`` apart.

    Means are drawn in [-margin, margin]^size. Image mode maps the noisy vectors
    affinely into [0, 1] pixels, so ``margin / noise_sigma`` survives rendering.
    """
    if not spec.separable:
        logger.warning('margin/noise_sigma is %.2f, below the separable preset of %d',
                       spec.separation, SEPARABLE_RATIO)
    rng = make_rng(spec.seed)
    size = int(np.prod(spec.image_shape)) if spec.image_mode else spec.dim
    means = _place_means(rng, spec.classes, size, -spec.margin, spec.margin, spec.margin)

    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    samples = means[labels] + spec.noise_sigma * rng.standard_normal((len(labels), size))
    if spec.image_mode:
        samples = render_pixels(samples, spec.margin + 3 * spec.noise_sigma)
        samples = samples.reshape((len(labels),) + tuple(spec.image_shape))
    logger.debug('generated %d synthetic samples over %d classes', len(labels), spec.classes)
    return LabeledDataset(samples.astype(np.float32), labels, 'image' if spec.image_mode else 'vector')


def render_pixels(values, extent):
    # [-extent, extent] -> [0, 1], clipped outside
    return np.clip(0.5 + values / (2.0 * extent), 0.0, 1.0)


def synth_events(classes, timesteps, channels, seed, samples_per_class=100, p_on=0.6, p_off=0.02):
    if timesteps < 2:
        raise ConfigError('event streams need at least 2 timesteps')
    if channels < classes:
        raise ConfigError(f'{channels} channels cannot hold {classes} disjoint templates')
    rng = make_rng(seed)
    templates = np.full((classes, channels), p_off)
    for c, group in enumerate(np.array_split(rng.permutation(channels), classes)):
        templates[c, group] = p_on
    labels = np.repeat(np.arange(classes), samples_per_class)
    spikes = rng.random((len(labels), timesteps, channels)) < templates[labels][:, None, :]
    return LabeledDataset(spikes.astype(np.float32), labels, 'events')


def holdout_split(dataset, test_per_class, seed):
    # the last test_per_class shuffled samples of each class go to test
    rng = make_rng(seed)
    train_idx, test_idx = [], []
    for c in dataset.classes:
        idx = rng.permutation(np.flatnonzero(dataset.y == c))
        if len(idx) <= test_per_class:
            raise DataError(f'class {c} has {len(idx)} samples, cannot hold out {test_per_class}')
        train_idx.extend(idx[:-test_per_class] if test_per_class else idx)
        test_idx.extend(idx[len(idx) - test_per_class:] if test_per_class else [])
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))


def events_to_frames(dataset, side):
    n, t, channels = dataset.x.shape
    if side * side != channels:
        raise ConfigError(f'{channels} event channels do not fill a {side}x{side} frame')
    return LabeledDataset(dataset.x.reshape(n, t, 1, side, side), dataset.y, 'events')
