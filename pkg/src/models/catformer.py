import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from src.errors import ConfigError, ImmutabilityError, UnknownTaskError
from src.models.backbone import BackboneParams, backbone_forward, dtlif_layout, head_forward
from src.models.dtlif import BASE, SpikingState, ThresholdBank
from src.models.tensor import Tensor, linear, mul, relu, sub

logger = logging.getLogger(__name__)

DEFAULT_BUFFER_CAP = 256
GATE_STD_EPS = 1e-2


def xavier_uniform(rng, fan_in, fan_out, name=''):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), name=name)


def tensor_checksum(tensors):
    digest = hashlib.sha256()
    for t in tensors:
        digest.update(np.ascontiguousarray(t.data, dtype='<f4').tobytes())
    return digest.hexdigest()


class HeadBank:
    """Task-specific linear classifiers W_k [D x c], b_k [c]."""

    def __init__(self):
        self.heads = {}
        self.finalized = set()

    def add(self, task, feature_dim, classes, rng):
        if task in self.finalized:
            raise ImmutabilityError(f'head of task {task} is finalized')
        weight = xavier_uniform(rng, feature_dim, classes, name=f'head/{task}/weight')
        bias = Tensor(np.zeros(classes), name=f'head/{task}/bias')
        self.heads[task] = (weight, bias)
        return weight, bias

    def get(self, task):
        if task not in self.heads:
            raise UnknownTaskError(f'no head for task {task}')
        return self.heads[task]

    def finalize(self, task):
        for t in self.get(task):
            t.requires_grad = False
        self.finalized.add(task)

    def checksum(self, task):
        return tensor_checksum(self.get(task))

    @property
    def tasks(self):
        return sorted(self.heads)


class GatingMLP:
    """Task router: Linear(ReLU(Linear(f))) with D -> D/4 -> tasks seen."""

    def __init__(self, feature_dim, rng):
        self.feature_dim = feature_dim
        self.hidden_dim = feature_dim // 4
        self.W1 = xavier_uniform(rng, feature_dim, self.hidden_dim, name='gate/W1')
        self.b1 = Tensor(np.zeros(self.hidden_dim), name='gate/b1')
        self.W2 = Tensor(np.zeros((self.hidden_dim, 0)), name='gate/W2')
        self.b2 = Tensor(np.zeros(0), name='gate/b2')
        self.shift = Tensor(np.zeros(feature_dim), name='gate/shift')
        self.scale = Tensor(np.ones(feature_dim), name='gate/scale')

    @property
    def num_tasks(self):
        return self.W2.shape[1]

    def grow(self, rng):
        """Append one output column; existing columns are kept as they are."""
        k = self.num_tasks + 1
        bound = np.sqrt(6.0 / (self.hidden_dim + k))
        column = rng.uniform(-bound, bound, (self.hidden_dim, 1)).astype(self.W2.data.dtype)
        self.W2 = Tensor(np.concatenate([self.W2.data, column], axis=1), name='gate/W2')
        self.b2 = Tensor(np.concatenate([self.b2.data, np.zeros(1, dtype=self.b2.data.dtype)]), name='gate/b2')

    def parameters(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def state(self):
        return self.parameters() + [self.shift, self.scale]

    def fit_input_stats(self, features, eps=GATE_STD_EPS):
        """Standardize inputs with the per-dimension mean and spread of ``features``."""
        features = np.asarray(features, dtype=np.float64)
        self.shift.data = features.mean(axis=0).astype(self.shift.data.dtype)
        self.scale.data = (1.0 / (features.std(axis=0) + eps)).astype(self.scale.data.dtype)

    def forward(self, f):
        if f.shape[-1] != self.feature_dim:
            raise ConfigError(f'gate expects {self.feature_dim}-dim features, got {f.shape}')
        z = mul(sub(f, self.shift), self.scale)
        return linear(relu(linear(z, self.W1, self.b1)), self.W2, self.b2)

    def parameter_count(self):
        return sum(p.size for p in self.parameters())


@dataclass(frozen=True)
class BufferEntry:
    feature: np.ndarray
    task: int
    base_thresholds: bool


class FeatureBuffer:
    """Capped per-task store of base-threshold feature vectors for gate training."""

    def __init__(self, per_task_cap=DEFAULT_BUFFER_CAP):
        if per_task_cap <= 0:
            raise ConfigError('buffer cap must be positive')
        self.per_task_cap = per_task_cap
        self.entries = []

    def count(self, task):
        return sum(1 for e in self.entries if e.task == task)

    def add(self, features, task, base_thresholds=True):
        room = self.per_task_cap - self.count(task)
        added = 0
        for row in np.asarray(features)[:max(room, 0)]:
            feature = np.array(row, dtype=np.float32)
            feature.setflags(write=False)
            self.entries.append(BufferEntry(feature, int(task), bool(base_thresholds)))
            added += 1
        return added

    def features(self):
        return np.stack([e.feature for e in self.entries])

    def labels(self):
        return np.array([e.task for e in self.entries], dtype=np.int64)

    @property
    def tasks(self):
        return sorted({e.task for e in self.entries})

    def __len__(self):
        return len(self.entries)

    def to_dict(self):
        return {'entries': len(self), 'per_task_cap': self.per_task_cap,
                'per_task': {t: self.count(t) for t in self.tasks}}


class CATFormer:
    """Frozen-after-task-0 backbone, threshold bank, per-task heads and the task gate."""

    def __init__(self, cfg, classes_per_task, seed=0, buffer_cap=DEFAULT_BUFFER_CAP, fixed_threshold=False):
        self.cfg = cfg
        self.classes_per_task = classes_per_task
        self.fixed_threshold = fixed_threshold
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.mixer_rng = np.random.Generator(np.random.PCG64(cfg.random_seed))
        self.backbone = BackboneParams(cfg, self.rng)
        self.bank = ThresholdBank(dtlif_layout(cfg), cfg.phi_init)
        self.heads = HeadBank()
        self.gate = GatingMLP(cfg.embed_dim, self.rng)
        self.buffer = FeatureBuffer(buffer_cap)
        self.task_classes = {}
        self.backbone_frozen = False
        self.reference_checksums = {}

    @property
    def feature_dim(self):
        return self.cfg.embed_dim

    @property
    def num_tasks_seen(self):
        return len(self.heads.finalized)

    def begin_task(self, task, classes, warm_start=False):
        """Add head W_k and set phi^(k) from phi_init (or from phi^(k-1) when warm-starting)."""
        source = task - 1 if warm_start and task > 0 and not self.fixed_threshold else BASE
        self.bank.clone(source, task)
        self.heads.add(task, self.feature_dim, len(classes), self.rng)
        self.task_classes[task] = tuple(int(c) for c in classes)

    def features(self, x, task=BASE, training=False):
        """f(x) [B, D] with thresholds of ``task``; event batches arrive as [B, T, C, H, W]."""
        if self.cfg.event_input:
            x = np.swapaxes(np.asarray(x), 0, 1)
        self.bank.select(task)
        try:
            return backbone_forward(x, self.cfg, self.backbone, self.bank, SpikingState(),
                                    training=training, rng=self.mixer_rng)
        finally:
            self.bank.select(BASE)

    def task_logits(self, x, task, training=False):
        weight, bias = self.heads.get(task)
        return head_forward(self.features(x, task, training), weight, bias)

    def finalize_task(self, task):
        self.bank.finalize(task)
        self.heads.finalize(task)
        if not self.backbone_frozen:
            for t in self.backbone.tensors.values():
                t.requires_grad = False
            self.backbone_frozen = True
            self.reference_checksums['backbone'] = self.checksum('backbone')
        self.reference_checksums[f'thresholds/{task}'] = self.checksum(f'thresholds/{task}')
        self.reference_checksums[f'head/{task}'] = self.checksum(f'head/{task}')

    def groups(self):
        """Tensor groups that become immutable when their task is finalized."""
        names = ['backbone'] if self.backbone_frozen else []
        for task in sorted(self.heads.finalized):
            names += [f'thresholds/{task}', f'head/{task}']
        return names

    def checksum(self, group):
        if group == 'backbone':
            return tensor_checksum(self.backbone.tensors.values())
        kind, _, task = group.partition('/')
        if kind == 'thresholds':
            return self.bank.checksum(int(task))
        if kind == 'head':
            return self.heads.checksum(int(task))
        raise UnknownTaskError(f'unknown tensor group {group!r}')

    def all_tensors(self):
        tensors = list(self.backbone.tensors.values())
        tensors += [self.bank.per_task[k] for k in self.bank.tasks]
        for task in self.heads.tasks:
            tensors += list(self.heads.get(task))
        tensors += self.gate.state()
        return tensors

    def to_dict(self):
        return {
            'model': self.cfg.to_dict(),
            'classes_per_task': self.classes_per_task,
            'tasks_seen': self.num_tasks_seen,
            'bank': self.bank.to_dict(),
            'buffer': self.buffer.to_dict(),
            'gate_width': self.gate.num_tasks,
        }
