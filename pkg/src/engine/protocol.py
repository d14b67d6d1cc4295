import logging
import time
from collections import namedtuple
from dataclasses import dataclass
from enum import Enum

import numpy as np

from src.data.datasets import make_rng
from src.engine.router import LogitCache, evaluate, forgetting_profile
from src.errors import ConfigError, DataError, FrozenGradientError, InvariantViolation
from src.models.dtlif import BASE
from src.models.tensor import SGD, Tape, Tensor, backward, cross_entropy
from src.storage.metrics import MetricsRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_backbone: float = 0.05
    lr_threshold: float = 0.1
    lr_head: float = 0.05
    lr_gate: float = 0.05
    epochs_task0: int = 30
    epochs_taskk: int = 15
    epochs_gate: int = 20
    batch_size: int = 32
    buffer_cap: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ('lr_backbone', 'lr_threshold', 'lr_head', 'lr_gate'):
            if getattr(self, name) < 0:
                raise ConfigError(f'train.{name} must be >= 0')
        for name in ('epochs_task0', 'epochs_taskk', 'epochs_gate'):
            if getattr(self, name) < 0:
                raise ConfigError(f'train.{name} must be >= 0')
        if self.batch_size <= 0 or self.buffer_cap <= 0:
            raise ConfigError('train.batch_size and train.buffer_cap must be positive')


class Phase(str, Enum):
    TASK0 = 'task0'
    TASK_K = 'task_k'
    GATE = 'gate'
    EVAL = 'eval'


ParameterCount = namedtuple('ParameterCount', 'total trainable bank_bytes')


def optimizer_groups(model, phase, task, cfg):
    thresholds = [] if model.fixed_threshold else [model.bank.thresholds(task)]
    if phase is Phase.TASK0:
        return [
            (model.backbone.parameters(include_ffn=model.cfg.ffn_trainable), cfg.lr_backbone),
            (thresholds, cfg.lr_threshold),
            (list(model.heads.get(task)), cfg.lr_head),
        ]
    if phase is Phase.TASK_K:
        return [(list(model.heads.get(task)), cfg.lr_head), (thresholds, cfg.lr_threshold)]
    if phase is Phase.GATE:
        return [(model.gate.parameters(), cfg.lr_gate)]
    return []


def trainable_parameters(model, phase, task, cfg=None):
    return [p for params, _ in optimizer_groups(model, phase, task, cfg or TrainConfig()) for p in params]


def set_trainable(model, params):
    chosen = {id(p) for p in params}
    for t in model.all_tensors():
        t.requires_grad = id(t) in chosen
        t.grad = None


def count_parameters(model, phase, task):
    # the gate phase also counts the just-trained task's head and thresholds
    total = sum(p.size for p in model.backbone.parameters())
    total += sum(model.bank.thresholds(k).size for k in model.bank.tasks)
    total += sum(t.size for k in model.heads.tasks for t in model.heads.get(k))
    total += model.gate.parameter_count()
    if phase is Phase.GATE:
        trainable = sum(p.size for p in trainable_parameters(model, Phase.TASK_K, task))
        trainable += model.gate.parameter_count()
    else:
        trainable = sum(p.size for p in trainable_parameters(model, phase, task))
    return ParameterCount(total, trainable, model.bank.bytes_per_task)


def _assert_frozen(model, trainable):
    allowed = {id(p) for p in trainable}
    for t in model.all_tensors():
        if id(t) not in allowed and t.grad is not None:
            raise FrozenGradientError(f'gradient reached frozen tensor {t.name or t.shape}')


@dataclass
class EpochStats:
    epoch: int
    loss: float
    acc: float


def fit(model, forward, x, y, optimizer, epochs, batch_size, rng, on_epoch=None):
    """Mini-batch SGD on cross-entropy; the optimizer holds every tensor allowed to change."""
    if len(y) == 0:
        raise DataError('cannot train on an empty dataset')
    stats = EpochStats(-1, 0.0, 0.0)
    if not optimizer.parameters:
        logger.warning('nothing to train in this phase; skipping %d epochs', epochs)
        return stats
    n = len(y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            with Tape() as tape:
                logits = forward(x[idx])
                loss = cross_entropy(logits, y[idx])
            backward(loss, tape)
            _assert_frozen(model, optimizer.parameters)
            optimizer.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            logger.debug('batch %d loss %.5f', start // batch_size, loss.item())
        stats = EpochStats(epoch, total_loss / n, correct / n)
        if on_epoch is not None:
            on_epoch(stats)
    return stats


def _clamp_thresholds(model, task):
    def post_step():
        if not model.fixed_threshold:
            model.bank.clamp_(task)

    return post_step


def _train_task(model, task, phase, cfg, epochs, training, on_epoch):
    groups = optimizer_groups(model, phase, task.task_id, cfg)
    optimizer = SGD(groups, post_step=_clamp_thresholds(model, task.task_id))
    set_trainable(model, optimizer.parameters)
    rng = make_rng([cfg.seed, task.task_id])

    def forward(xb):
        return model.task_logits(xb, task.task_id, training=training)

    try:
        return fit(model, forward, task.train.x, task.train.y, optimizer, epochs, cfg.batch_size, rng, on_epoch)
    finally:
        set_trainable(model, [])


def train_task0(seq, cfg, model, on_epoch=None):
    """Joint training of the backbone, phi^(0) and W_0 with batch-statistics normalization."""
    task = seq[0]
    if model.num_tasks_seen:
        raise ConfigError('task 0 must be trained on a fresh model')
    logger.info('task 0: training backbone, thresholds and head on %d samples', len(task.train))
    return _train_task(model, task, Phase.TASK0, cfg, cfg.epochs_task0, True, on_epoch)


def train_task_k(seq, k, cfg, model, on_epoch=None):
    if k <= 0:
        raise ConfigError('train_task_k needs k > 0')
    missing = [j for j in range(k) if j not in model.heads.finalized]
    if missing:
        raise ConfigError(f'tasks {missing} must be finalized before task {k}')
    task = seq[k]
    logger.info('task %d: training head and thresholds on %d samples', k, len(task.train))
    return _train_task(model, task, Phase.TASK_K, cfg, cfg.epochs_taskk, False, on_epoch)


def harvest_indices(n, room, seed, task):
    return np.sort(make_rng([seed, task, 2]).permutation(n)[:room])


def harvest_features(seq, k, model, buffer=None, batch_size=32, seed=0):
    buffer = model.buffer if buffer is None else buffer
    room = max(buffer.per_task_cap - buffer.count(k), 0)
    train = seq[k].train
    x = train.x[harvest_indices(len(train), room, seed, k)]
    added = 0
    for start in range(0, len(x), batch_size):
        f = model.features(x[start:start + batch_size], BASE, training=False)
        added += buffer.add(f.data, k, base_thresholds=True)
    logger.info('task %d: harvested %d base features (buffer holds %d)', k, added, len(buffer))
    return added


def train_gating(buffer, gate, cfg, model, on_epoch=None):
    if len(buffer) == 0:
        raise DataError('feature buffer is empty')
    if gate.num_tasks != len(buffer.tasks):
        raise ConfigError(f'gate has {gate.num_tasks} outputs but the buffer holds {len(buffer.tasks)} tasks')
    optimizer = SGD([(gate.parameters(), cfg.lr_gate)])
    gate.fit_input_stats(buffer.features())
    set_trainable(model, optimizer.parameters)
    rng = make_rng([cfg.seed, gate.num_tasks, 1])

    def forward(fb):
        return gate.forward(Tensor(fb))

    try:
        stats = fit(model, forward, buffer.features(), buffer.labels(), optimizer,
                    cfg.epochs_gate, cfg.batch_size, rng, on_epoch)
    finally:
        set_trainable(model, [])
    if gate.num_tasks > 1 and stats.epoch >= 0 and stats.acc < 1.0 / gate.num_tasks:
        logger.warning('gate routes only %.3f of buffered features to their task', stats.acc)
    logger.info('gate: %d tasks, %d features, loss %.4f acc %.4f',
                gate.num_tasks, len(buffer), stats.loss, stats.acc)
    return stats


@dataclass
class FreezeReport:
    results: dict

    @property
    def passed(self):
        return all(self.results.values())

    @property
    def failed(self):
        return sorted(g for g, ok in self.results.items() if not ok)


def freeze_check(model, reference_checksums):
    results = {}
    for group, expected in sorted(reference_checksums.items()):
        results[group] = model.checksum(group) == expected
        logger.debug('freeze check %s: %s', group, 'ok' if results[group] else 'CHANGED')
    return FreezeReport(results)


def _enforce_freeze(model, when):
    report = freeze_check(model, model.reference_checksums)
    if not report.passed:
        raise InvariantViolation(f"frozen tensors changed {when}: {', '.join(report.failed)}")
    return report


def corrupt_frozen_tensor(model, delta=1e-3):
    weight = next(iter(model.backbone.tensors.values()))
    weight.data.flat[0] += np.float32(delta)
    logger.warning('corrupted frozen tensor %s', weight.name)


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def ms(self):
        return int((time.perf_counter() - self.start) * 1000)


def run_protocol(model, seq, cfg, emit=None, on_task_done=None, warm_start=False, workers=1,
                 corrupt_at_task=-1):
    """Train every task of ``seq`` in order, emitting metrics records through ``emit``."""
    emit = emit or (lambda record: None)
    for task in seq:
        k = task.task_id
        if k > 0:
            _enforce_freeze(model, f'before task {k}')
        clock = Stopwatch()
        model.begin_task(k, task.classes, warm_start=warm_start)
        phase = Phase.TASK0 if k == 0 else Phase.TASK_K
        counts = count_parameters(model, phase, k)

        def on_epoch(stats, k=k, counts=counts, clock=clock):
            logger.info('task %d epoch %d: loss %.4f acc %.4f', k, stats.epoch, stats.loss, stats.acc)
            emit(MetricsRecord('epoch', task=k, epoch=stats.epoch, loss=stats.loss, acc=stats.acc,
                               trainable_params=counts.trainable, bank_bytes=counts.bank_bytes,
                               wall_ms=clock.ms(), seed=cfg.seed))

        if k == 0:
            stats = train_task0(seq, cfg, model, on_epoch)
        else:
            stats = train_task_k(seq, k, cfg, model, on_epoch)
        model.finalize_task(k)
        emit(MetricsRecord('task_done', task=k, epoch=stats.epoch, loss=stats.loss, acc=stats.acc,
                           trainable_params=counts.trainable, bank_bytes=counts.bank_bytes,
                           wall_ms=clock.ms(), seed=cfg.seed))

        clock = Stopwatch()
        model.gate.grow(model.rng)
        harvest_features(seq, k, model, batch_size=cfg.batch_size, seed=cfg.seed)
        gate_stats = train_gating(model.buffer, model.gate, cfg, model)
        gate_counts = count_parameters(model, Phase.GATE, k)
        emit(MetricsRecord('gate_done', task=k, epoch=gate_stats.epoch, loss=gate_stats.loss,
                           acc=gate_stats.acc, trainable_params=gate_counts.trainable,
                           bank_bytes=gate_counts.bank_bytes, wall_ms=clock.ms(), seed=cfg.seed))

        if k == corrupt_at_task:
            corrupt_frozen_tensor(model)
        _enforce_freeze(model, f'after task {k}')

        if task.test is not None and len(task.test):
            clock = Stopwatch()
            cache = LogitCache(model)
            for point in forgetting_profile(k, seq.tasks, model, workers, cache):
                emit(MetricsRecord('eval', task=point.task, acc=point.acc, routing_acc=point.routing_acc,
                                   oracle_acc=point.oracle_acc, scope='forgetting', after_task=k,
                                   bank_bytes=counts.bank_bytes, wall_ms=clock.ms(), seed=cfg.seed))
            if k == len(seq) - 1:
                routed, oracle = evaluate(seq.tasks, model, workers, cache)
                emit(MetricsRecord('eval', acc=routed.overall_acc, routing_acc=routed.routing_acc,
                                   oracle_acc=oracle.overall_acc, scope='overall', num_tasks=len(seq),
                                   bank_bytes=counts.bank_bytes, wall_ms=clock.ms(), seed=cfg.seed))
        if on_task_done is not None:
            on_task_done(k)
        logger.info('task %d finalized (%d trainable, %d threshold bytes)', k, counts.trainable, counts.bank_bytes)
    return model
