"""Dynamic-threshold LIF neurons and the per-task threshold bank."""
import hashlib
import logging
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from src.errors import (
    CheckpointFormatError,
    ConfigError,
    DimensionError,
    ImmutabilityError,
    ThresholdDomainError,
    UnknownLayerError,
    UnknownTaskError,
)
from src.models.tensor import (
    SurrogateSpec,
    Tensor,
    add,
    heaviside_surrogate,
    index,
    mul,
    scale,
    stack,
    sub,
    take_slice,
)

logger = logging.getLogger(__name__)

BASE = -1
PHI_MIN = 0.01
PHI_MAX = 10.0


@dataclass(frozen=True)
class DTLIFConfig:
    tau: float = 2.0
    phi_init: float = 0.5
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    full_bptt: bool = False

    def __post_init__(self):
        if not self.tau >= 1:
            raise ConfigError(f'tau must be >= 1, got {self.tau}')
        if not self.phi_init > 0:
            raise ConfigError(f'phi_init must be > 0, got {self.phi_init}')

    @property
    def leak(self):
        return 1.0 - 1.0 / self.tau

    @property
    def gain(self):
        return 1.0 / self.tau


@dataclass
class DTLIFState:
    V: Tensor = None


def reset_state(state):
    if state.V is not None:
        state.V = Tensor.zeros(state.V.shape)


def membrane_update(state, input_current, cfg):
    """Leaky integration: (1 - 1/tau) * V + (1/tau) * I."""
    if state.V is None:
        state.V = Tensor.zeros(input_current.shape)
    if state.V.shape != input_current.shape:
        raise DimensionError(f'membrane shape {state.V.shape} does not match input {input_current.shape}')
    return add(scale(state.V, cfg.leak), scale(input_current, cfg.gain))


def spike_and_reset(vtilde, phi, cfg):
    """Fire where vtilde >= phi, then subtract phi from the neurons that fired."""
    if phi.data.ndim != 1 or phi.shape[0] != vtilde.shape[-1]:
        raise DimensionError(f'thresholds {phi.shape} do not match channel axis of {vtilde.shape}')
    if (phi.data <= 0).any():
        raise ThresholdDomainError('firing thresholds must be strictly positive')
    spikes = heaviside_surrogate(sub(vtilde, phi), cfg.surrogate)
    v_next = sub(vtilde, mul(spikes, phi))
    return spikes, v_next


def dtlif_step(state, input_current, bank, layer_id, cfg):
    phi = bank.layer_thresholds(layer_id)
    vtilde = membrane_update(state, input_current, cfg)
    spikes, v_next = spike_and_reset(vtilde, phi, cfg)
    # Truncated mode carries V across timesteps without a gradient path.
    state.V = v_next if cfg.full_bptt else v_next.detach()
    return spikes


class SpikingState:
    """Membrane state of every DTLIF layer for one forward pass."""

    def __init__(self):
        self.layers = {}

    def layer(self, layer_id):
        if layer_id not in self.layers:
            self.layers[layer_id] = DTLIFState()
        return self.layers[layer_id]

    def reset(self):
        self.layers.clear()

    def __len__(self):
        return len(self.layers)


def dtlif_layer(currents, bank, layer_id, cfg, state):
    """Run one DTLIF layer over the leading time axis of ``currents``."""
    neuron = state.layer(layer_id)
    spikes = [dtlif_step(neuron, index(currents, t), bank, layer_id, cfg) for t in range(currents.shape[0])]
    return stack(spikes)


class ThresholdBank:
    """Per-task, per-channel thresholds laid out as one flat vector per task."""

    def __init__(self, layout, phi_init):
        self.layout = OrderedDict(layout)
        self.phi_init = float(phi_init)
        self.offsets = {}
        offset = 0
        for layer_id, channels in self.layout.items():
            self.offsets[layer_id] = (offset, offset + channels)
            offset += channels
        self.entry_count = offset
        self.per_task = {}
        self.finalized = set()
        self._selection = threading.local()
        self._base = Tensor.full((self.entry_count,), self.phi_init, name='thresholds/base')

    @property
    def active_task(self):
        # selection is per thread
        return getattr(self._selection, 'task', BASE)

    @property
    def bytes_per_task(self):
        return 4 * self.entry_count

    @property
    def tasks(self):
        return sorted(self.per_task)

    def thresholds(self, task):
        if task == BASE:
            return self._base
        if task not in self.per_task:
            raise UnknownTaskError(f'no thresholds stored for task {task}')
        return self.per_task[task]

    def select(self, task):
        self.thresholds(task)
        self._selection.task = task

    def layer_thresholds(self, layer_id, task=None):
        if layer_id not in self.offsets:
            raise UnknownLayerError(f'unknown DTLIF layer {layer_id!r}')
        start, stop = self.offsets[layer_id]
        return take_slice(self.thresholds(self.active_task if task is None else task), start, stop)

    def clone(self, from_task, to_task):
        if to_task in self.finalized:
            raise ImmutabilityError(f'thresholds of task {to_task} are finalized')
        if to_task == BASE:
            raise ImmutabilityError('BASE thresholds are fixed at phi_init')
        source = self.thresholds(from_task)
        self.per_task[to_task] = Tensor(source.data.copy(), name=f'thresholds/{to_task}')
        logger.debug('thresholds %s -> task %d (%d entries)', 'BASE' if from_task == BASE else from_task,
                     to_task, self.entry_count)

    def clamp_(self, task):
        phi = self.per_task[task]
        np.clip(phi.data, PHI_MIN, PHI_MAX, out=phi.data)

    def finalize(self, task):
        self.thresholds(task).requires_grad = False
        self.finalized.add(task)

    def checksum(self, task):
        return hashlib.sha256(self.to_bytes(task)).hexdigest()

    def to_bytes(self, task):
        data = self.thresholds(task).data.astype('<f4')
        return struct.pack('<II', task, data.size) + data.tobytes()

    def load_bytes(self, payload):
        if len(payload) < 8:
            raise CheckpointFormatError('threshold record shorter than its header')
        task, count = struct.unpack_from('<II', payload, 0)
        if count != self.entry_count or len(payload) != 8 + 4 * count:
            raise CheckpointFormatError(
                f'threshold record for task {task} has {count} entries, model expects {self.entry_count}')
        self.per_task[task] = Tensor(np.frombuffer(payload, dtype='<f4', offset=8), name=f'thresholds/{task}')
        return task

    def to_dict(self):
        return {
            'layers': dict(self.layout),
            'entry_count': self.entry_count,
            'bytes_per_task': self.bytes_per_task,
            'tasks': self.tasks,
            'finalized': sorted(self.finalized),
            'active_task': self.active_task,
        }


def clone_thresholds(bank, from_task, to_task):
    bank.clone(from_task, to_task)
