import threading

import numpy as np
import pytest

from src.errors import (
    CheckpointFormatError,
    DimensionError,
    ImmutabilityError,
    ThresholdDomainError,
    UnknownLayerError,
    UnknownTaskError,
)
from src.models.backbone import ModelConfig, dtlif_layout
from src.models.dtlif import (
    BASE,
    PHI_MAX,
    PHI_MIN,
    DTLIFConfig,
    DTLIFState,
    SpikingState,
    ThresholdBank,
    clone_thresholds,
    dtlif_layer,
    membrane_update,
    reset_state,
    spike_and_reset,
)
from src.models.tensor import Tape, Tensor, backward, sum_
from tests.oracles import scalar_dtlif


def run_neuron(inputs, tau, phi, full_bptt=False):
    """Single-channel DTLIF layer over ``inputs``: (spikes, final membrane)."""
    bank = ThresholdBank({'n': 1}, phi)
    state = SpikingState()
    currents = Tensor(np.asarray(inputs, dtype=np.float64).reshape(-1, 1))
    spikes = dtlif_layer(currents, bank, 'n', DTLIFConfig(tau=tau, phi_init=phi, full_bptt=full_bptt), state)
    return spikes.data[:, 0].tolist(), float(state.layer('n').V.data[0])


def test_membrane_update_examples():
    state = DTLIFState(V=Tensor([1.0]))
    assert membrane_update(state, Tensor([0.5]), DTLIFConfig(tau=2.0)).data.tolist() == [0.75]

    state = DTLIFState(V=Tensor([123.0]))
    out = membrane_update(state, Tensor([0.3]), DTLIFConfig(tau=1.0))
    assert out.data[0] == np.float32(0.3)

    cfg = DTLIFConfig(tau=4.0)
    state = DTLIFState()
    for current in (0.0, 0.0, 0.0):
        state.V = membrane_update(state, Tensor([current]), cfg)
    assert membrane_update(state, Tensor([4.0]), cfg).data.tolist() == [1.0]


def test_membrane_update_shape_mismatch():
    state = DTLIFState(V=Tensor([0.0, 0.0]))
    with pytest.raises(DimensionError):
        membrane_update(state, Tensor([1.0, 2.0, 3.0]), DTLIFConfig())


def test_spike_and_reset_examples():
    spikes, v_next = spike_and_reset(Tensor([0.75, 0.4, 1.2]), Tensor([0.5, 0.5, 0.5]), DTLIFConfig())
    assert spikes.data.tolist() == [1.0, 0.0, 1.0]
    np.testing.assert_allclose(v_next.data, [0.25, 0.4, 0.7], atol=1e-6)


def test_spike_and_reset_rejects_non_positive_thresholds():
    with pytest.raises(ThresholdDomainError):
        spike_and_reset(Tensor([0.5, 0.5]), Tensor([0.5, 0.0]), DTLIFConfig())
    with pytest.raises(DimensionError):
        spike_and_reset(Tensor([0.5, 0.5]), Tensor([0.5]), DTLIFConfig())


def test_memoryless_neuron_sequences():
    # tau = 1 keeps no membrane between steps, so only the current step's input can cross phi
    assert run_neuron([0.3, 0.3, 0.3, 0.3], tau=1.0, phi=0.5)[0] == [0.0, 0.0, 0.0, 0.0]
    assert run_neuron([0.3, 0.6, 0.3, 0.6], tau=1.0, phi=0.5)[0] == [0.0, 1.0, 0.0, 1.0]
    assert run_neuron([0.3, 0.6, 0.8, 0.6], tau=1.0, phi=0.7)[0] == [0.0, 0.0, 1.0, 0.0]


def test_leaky_neuron_matches_scalar_simulation():
    for inputs, phi in (([0.6] * 6, 0.5), ([1.0, 0.0, 1.0, 1.0], 0.7)):
        spikes, v = run_neuron(inputs, tau=2.0, phi=phi)
        expected_spikes, expected_v = scalar_dtlif(inputs, 2.0, phi)
        assert spikes == expected_spikes
        assert v == pytest.approx(expected_v[-1], abs=1e-6)


def test_zero_input_never_fires():
    spikes, v = run_neuron([0.0] * 5, tau=3.0, phi=0.2)
    assert spikes == [0.0] * 5
    assert v == 0.0


def test_layer_matches_scalar_oracle_on_random_cases():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        tau = float(rng.uniform(1.0, 8.0))
        phi = float(rng.uniform(0.05, 2.0))
        inputs = rng.uniform(0.0, 2.0, size=int(rng.integers(1, 9))).astype(np.float32).tolist()
        spikes, v = run_neuron(inputs, tau, phi)
        expected_spikes, expected_v = scalar_dtlif(inputs, tau, phi)
        assert spikes == expected_spikes
        assert abs(v - expected_v[-1]) <= 1e-6


def test_reset_state_is_idempotent():
    state = DTLIFState(V=Tensor([0.3, 0.9]))
    reset_state(state)
    assert state.V.data.tolist() == [0.0, 0.0]
    reset_state(state)
    assert state.V.data.tolist() == [0.0, 0.0]
    empty = DTLIFState()
    reset_state(empty)
    assert empty.V is None


def test_spikes_are_binary_and_soft_reset_is_exact():
    rng = np.random.default_rng(7)
    phi = rng.uniform(0.05, 2.0, size=256).astype(np.float32)
    # phi <= vtilde <= 2 phi keeps the reset subtraction exact
    vtilde = (phi * rng.uniform(0.0, 2.0, size=256)).astype(np.float32)
    spikes, v_next = spike_and_reset(Tensor(vtilde), Tensor(phi), DTLIFConfig())
    assert set(np.unique(spikes.data)) <= {0.0, 1.0}
    np.testing.assert_array_equal(v_next.data + spikes.data * phi, vtilde)


def test_membrane_decays_without_input():
    cfg = DTLIFConfig(tau=2.0)
    state = DTLIFState(V=Tensor([0.4]))
    trace = []
    for _ in range(3):
        state.V = membrane_update(state, Tensor([0.0]), cfg)
        trace.append(float(state.V.data[0]))
    np.testing.assert_allclose(trace, [0.2, 0.1, 0.05], rtol=1e-6)


def test_spike_count_never_grows_with_threshold():
    rng = np.random.default_rng(11)
    sweep = np.linspace(0.05, 2.0, 50)
    for _ in range(200):
        inputs = rng.uniform(0.0, 2.0, size=8)
        counts = [sum(scalar_dtlif(inputs, 1.0, phi)[0]) for phi in sweep]
        assert all(later <= earlier for earlier, later in zip(counts, counts[1:]))


def test_layer_spike_counts_never_grow_with_threshold():
    rng = np.random.default_rng(12)
    sweep = np.linspace(0.05, 2.0, 50)
    bank = ThresholdBank({'n': len(sweep)}, 0.5)
    bank.clone(BASE, 0)
    bank.thresholds(0).data[:] = sweep
    inputs = rng.uniform(0.0, 2.0, size=(8, 200, 1))
    currents = Tensor(np.repeat(inputs, len(sweep), axis=2))
    bank.select(0)
    try:
        spikes = dtlif_layer(currents, bank, 'n', DTLIFConfig(tau=1.0), SpikingState())
    finally:
        bank.select(BASE)
    counts = spikes.data.sum(axis=0)
    assert counts.shape == (200, 50)
    assert (np.diff(counts, axis=1) <= 0).all()
    expected = [[sum(scalar_dtlif(inputs[:, s, 0], 1.0, phi)[0]) for phi in sweep[::7]] for s in range(0, 200, 25)]
    np.testing.assert_array_equal(counts[::25, ::7], expected)


def test_threshold_gradient_of_spike_count_is_non_positive():
    rng = np.random.default_rng(3)
    bank = ThresholdBank({'n': 8}, 0.5)
    bank.clone(BASE, 0)
    phi = bank.thresholds(0)
    phi.requires_grad = True
    bank.select(0)
    try:
        with Tape() as tape:
            spikes = dtlif_layer(Tensor(rng.uniform(0, 1, (6, 4, 8))), bank, 'n', DTLIFConfig(), SpikingState())
            loss = sum_(spikes)
        backward(loss, tape)
    finally:
        bank.select(BASE)
    assert (phi.grad <= 0).all()
    assert phi.grad.sum() < 0


def test_truncated_mode_detaches_the_membrane():
    bank = ThresholdBank({'n': 1}, 0.5)
    currents = Tensor([[0.3], [0.3]], requires_grad=True)
    for full_bptt in (False, True):
        state = SpikingState()
        with Tape():
            dtlif_layer(currents, bank, 'n', DTLIFConfig(tau=2.0, full_bptt=full_bptt), state)
        assert state.layer('n').V.requires_grad is full_bptt


def test_bank_clone_and_immutability():
    bank = ThresholdBank({'a': 3, 'b': 2}, 0.5)
    bank.clone(BASE, 3)
    assert bank.thresholds(3).data.tolist() == [0.5] * 5
    bank.thresholds(3).data[:] = [1, 2, 3, 4, 5]
    clone_thresholds(bank, 3, 1)
    np.testing.assert_array_equal(bank.thresholds(1).data, bank.thresholds(3).data)
    assert bank.thresholds(1) is not bank.thresholds(3)

    bank.finalize(1)
    with pytest.raises(ImmutabilityError):
        bank.clone(3, 1)
    with pytest.raises(ImmutabilityError):
        bank.clone(3, BASE)
    with pytest.raises(UnknownTaskError):
        bank.thresholds(7)
    with pytest.raises(UnknownLayerError):
        bank.layer_thresholds('c')
    assert bank.layer_thresholds('b', task=1).data.tolist() == [4.0, 5.0]


def test_clamp_keeps_thresholds_in_range():
    bank = ThresholdBank({'a': 3}, 0.5)
    bank.clone(BASE, 0)
    bank.thresholds(0).data[:] = [-1.0, 0.5, 50.0]
    bank.clamp_(0)
    np.testing.assert_allclose(bank.thresholds(0).data, [PHI_MIN, 0.5, PHI_MAX])


def test_bank_sizing():
    layout = dtlif_layout(ModelConfig())
    bank = ThresholdBank(layout, 0.5)
    assert bank.entry_count == sum(layout.values()) == 1152
    assert bank.bytes_per_task == 4608

    desk = ThresholdBank({'embed': 64, 'block0.in': 64, 'out': 64}, 0.5)
    assert desk.bytes_per_task == 768
    assert 64 * 2 + 2 + desk.entry_count == 322

    full_scale = ThresholdBank({'all': 16032}, 0.5)
    assert full_scale.bytes_per_task == 64128 <= 64200


def test_threshold_record_layout():
    bank = ThresholdBank({'a': 2}, 0.5)
    bank.clone(BASE, 4)
    raw = bank.to_bytes(4)
    assert raw[:8] == (4).to_bytes(4, 'little') + (2).to_bytes(4, 'little')
    assert len(raw) == 8 + 4 * 2
    with pytest.raises(CheckpointFormatError):
        ThresholdBank({'a': 3}, 0.5).load_bytes(raw)


def test_selection_is_per_thread():
    bank = ThresholdBank({'a': 2}, 0.5)
    bank.clone(BASE, 0)
    bank.select(0)
    seen = []
    worker = threading.Thread(target=lambda: seen.append(bank.active_task))
    worker.start()
    worker.join()
    assert seen == [BASE]
    assert bank.active_task == 0
