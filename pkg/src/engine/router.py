import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from src.errors import InvariantViolation, ProtocolError
from src.models.backbone import MixerMode
from src.models.dtlif import BASE

logger = logging.getLogger(__name__)


def argmax(values):
    # np.argmax returns the first maximum
    return int(np.argmax(np.asarray(values)))


@dataclass(frozen=True)
class RoutedPrediction:
    predicted_task: int
    predicted_class: int
    gate_logits: np.ndarray
    task_logits: np.ndarray


def _single(x):
    return np.asarray(x)[None]


def predict_task(x, model):
    seen = model.num_tasks_seen
    if seen == 0:
        raise ProtocolError('no task has been finalized; nothing to route to')
    if seen == 1:
        return 0, np.zeros(1, dtype=np.float32)
    if model.gate.num_tasks != seen:
        raise ProtocolError(f'gate has {model.gate.num_tasks} outputs but {seen} tasks are finalized')
    gate_logits = model.gate.forward(model.features(_single(x), BASE)).data[0]
    return argmax(gate_logits), gate_logits


def task_logits(x, model, task):
    return model.task_logits(_single(x), task).data[0]


def classify(x, model):
    k, gate_logits = predict_task(x, model)
    logits = task_logits(x, model, k)
    return RoutedPrediction(k, model.task_classes[k][argmax(logits)], gate_logits, logits)


class LogitCache:
    """Per-sample routing and task logits shared by routed and oracle evaluation."""

    def __init__(self, model):
        self.model = model
        self.routes = {}
        self.logits = {}
        self._lock = threading.Lock()

    def route(self, key, x):
        if key not in self.routes:
            value = predict_task(x, self.model)
            with self._lock:
                self.routes.setdefault(key, value)
        return self.routes[key]

    def task_logits(self, key, x, task):
        if (key, task) not in self.logits:
            value = task_logits(x, self.model, task)
            with self._lock:
                self.logits.setdefault((key, task), value)
        return self.logits[(key, task)]


@dataclass
class SampleOutcome:
    true_task: int
    routed_task: int
    routed_correct: bool
    oracle_correct: bool


@dataclass
class CILMetrics:
    overall_acc: float
    routing_acc: float
    per_task_acc: dict = field(default_factory=dict)
    per_task_routing: dict = field(default_factory=dict)
    samples: int = 0
    oracle: bool = False


def _evaluate_sample(cache, key, x, label, task):
    routed_task, _ = cache.route(key, x)
    local = argmax(cache.task_logits(key, x, routed_task))
    routed_correct = routed_task == task and local == label
    oracle_correct = argmax(cache.task_logits(key, x, task)) == label
    return SampleOutcome(task, routed_task, routed_correct, oracle_correct)


def collect_outcomes(tasks, model, workers=1, cache=None):
    """Evaluate every test sample of ``tasks`` once; labels are task-local."""
    if model.num_tasks_seen == 0:
        raise ProtocolError('evaluation needs at least one finalized task')
    if model.cfg.mixer_mode is MixerMode.RANDOM and workers > 1:
        logger.info('random mixer shares one generator; evaluating on a single worker')
        workers = 1
    cache = cache if cache is not None else LogitCache(model)
    jobs = [
        ((task.task_id, i), task.test.x[i], int(task.test.y[i]), task.task_id)
        for task in tasks
        for i in range(len(task.test))
    ]
    if workers == 1:
        return [_evaluate_sample(cache, *job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: _evaluate_sample(cache, *job), jobs))


def _metrics(outcomes, oracle):
    def rate(hits):
        hits = list(hits)
        return sum(hits) / len(hits) if hits else 0.0

    per_task_acc, per_task_routing = {}, {}
    for task in sorted({o.true_task for o in outcomes}):
        mine = [o for o in outcomes if o.true_task == task]
        per_task_acc[task] = rate(o.oracle_correct if oracle else o.routed_correct for o in mine)
        per_task_routing[task] = rate(o.routed_task == task for o in mine)
    return CILMetrics(
        overall_acc=rate(o.oracle_correct if oracle else o.routed_correct for o in outcomes),
        routing_acc=1.0 if oracle else rate(o.routed_task == o.true_task for o in outcomes),
        per_task_acc=per_task_acc,
        per_task_routing=per_task_routing,
        samples=len(outcomes),
        oracle=oracle,
    )


def check_decomposition(outcomes):
    """Counting form of: routed <= routing, routed <= oracle, routed >= oracle - misrouted."""
    routed = sum(o.routed_correct for o in outcomes)
    oracle = sum(o.oracle_correct for o in outcomes)
    routed_ok = sum(o.routed_task == o.true_task for o in outcomes)
    misrouted = len(outcomes) - routed_ok
    if routed > routed_ok:
        raise InvariantViolation(f'{routed} correct classifications but only {routed_ok} correct routes')
    if routed > oracle:
        raise InvariantViolation(f'routed correct {routed} exceeds oracle correct {oracle}')
    if routed < oracle - misrouted:
        raise InvariantViolation(f'routed correct {routed} below oracle {oracle} minus {misrouted} misrouted')


def evaluate_cil(tasks, model, workers=1, cache=None):
    outcomes = collect_outcomes(tasks, model, workers, cache)
    check_decomposition(outcomes)
    return _metrics(outcomes, oracle=False)


def evaluate_with_oracle(tasks, model, workers=1, cache=None):
    outcomes = collect_outcomes(tasks, model, workers, cache)
    check_decomposition(outcomes)
    return _metrics(outcomes, oracle=True)


def evaluate(tasks, model, workers=1, cache=None):
    outcomes = collect_outcomes(tasks, model, workers, cache)
    check_decomposition(outcomes)
    routed, oracle = _metrics(outcomes, oracle=False), _metrics(outcomes, oracle=True)
    logger.info('eval over %d tasks: overall %.4f routing %.4f oracle %.4f',
                len(tasks), routed.overall_acc, routed.routing_acc, oracle.overall_acc)
    return routed, oracle


@dataclass(frozen=True)
class ForgettingPoint:
    after_task: int
    task: int
    acc: float
    oracle_acc: float
    routing_acc: float


def forgetting_profile(after_task, tasks, model, workers=1, cache=None):
    seen = [t for t in tasks if t.task_id <= after_task]
    routed, oracle = evaluate(seen, model, workers, cache)
    return [
        ForgettingPoint(after_task, t.task_id, routed.per_task_acc[t.task_id],
                        oracle.per_task_acc[t.task_id], routed.per_task_routing[t.task_id])
        for t in seen
        if t.task_id in routed.per_task_acc
    ]
