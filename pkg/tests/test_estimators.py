import numpy as np
import pytest

from spikeid import autodiff as ad
from spikeid.autodiff import SurrogateConfig, Tape, Tensor
from spikeid.converter import ConverterParams, EmiConfig, add_emi, simulate, subsample
from spikeid.estimators import (B_PARAM_INIT, LifLayer, SnnState, SpikeRecord, clone, estimate,
                                ff_forward, init_weights, lif_step, load_checkpoint,
                                normalize_input, save_checkpoint, snn_forward)


@pytest.fixture(scope="module")
def window():
    p = ConverterParams()
    return subsample(add_emi(simulate(p), EmiConfig(seed=1), p), 30)


def test_normalize_input_zscore(window):
    x = normalize_input(window)
    assert x.shape == (100, 2)
    np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(x.std(axis=0), 1.0, rtol=1e-12)


def test_lif_step_hand_values():
    layer = LifLayer(Tensor([[1.0, 0.5]]), beta=0.9, u_thr=1.0)
    u, s = lif_step(layer, Tensor([0.5, 0.5]), np.array([0.0, 1.0]), Tensor([0.8]))
    # u = 0.9*0.5 + 0.8*W - 1*s_prev
    np.testing.assert_allclose(u.values, [1.25, -0.15])
    assert s.values.tolist() == [1.0, 0.0]


def test_lif_reset_carries_no_gradient():
    layer = LifLayer(Tensor([[1.0]]), 0.9, 1.0)
    s_prev = Tensor([1.0], requires_grad=True)
    u0 = Tensor([0.2], requires_grad=True)
    with Tape() as tape:
        u, _ = lif_step(layer, u0, s_prev, Tensor([0.3]))
        loss = ad.sum(u)
    ad.backward(loss, tape, [u0, s_prev])
    assert s_prev.grad.tolist() == [0.0]
    assert u0.grad.tolist() == [0.9]


def test_membrane_decays_without_input():
    layer = LifLayer(Tensor([[0.0]]), 0.9, 1.0)
    u = Tensor([0.5])
    for _ in range(10):
        u, s = lif_step(layer, u, np.zeros(1), Tensor([0.0]))
        assert s.values[0] == 0.0
    assert u.values[0] == pytest.approx(0.5 * 0.9 ** 10)


def test_layer_validation():
    with pytest.raises(ValueError):
        LifLayer(Tensor([[1.0]]), beta=1.0)
    with pytest.raises(ValueError):
        LifLayer(Tensor([[1.0]]), u_thr=0.0)


def test_fused_matches_stepwise_values_and_gradients(window):
    x = normalize_input(window)[:40]
    grads = {}
    outs = {}
    for fused in (True, False):
        est = init_weights(3, "snn", H=16)
        for layer in est.layers:
            layer.W.values = layer.W.values * 3.0  # make the small net spike
        with Tape() as tape:
            p, rec, final = snn_forward(est, x, fused=fused)
            loss = ad.sum(ad.log(p))
        ad.backward(loss, tape, est.parameters())
        grads[fused] = [t.grad for t in est.parameters()]
        outs[fused] = (p.values, rec.counts, final.m)
    assert outs[True][1].sum() > 0
    np.testing.assert_allclose(outs[True][0], outs[False][0], rtol=1e-12)
    assert np.array_equal(outs[True][1], outs[False][1])
    for a, b in zip(grads[True], grads[False]):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_readout_gradient_matches_finite_differences(window):
    """W_out and b_param sit after the last spike, so FD is valid there."""
    x = normalize_input(window)
    est = init_weights(0, "snn")
    with Tape() as tape:
        p, _, _ = snn_forward(est, x)
        loss = ad.sum(ad.square(ad.log(p)))
    ad.backward(loss, tape, est.parameters())
    g = est.readout.W_out.grad
    rng = np.random.default_rng(0)
    for _ in range(5):
        i, j = rng.integers(128), rng.integers(3)
        vals = []
        for eps in (1e-6, -1e-6):
            e2 = clone(est)
            e2.readout.W_out.values[i, j] += eps
            q, _, _ = snn_forward(e2, x, record=False)
            vals.append(float(np.sum(np.log(q.values) ** 2)))
        assert g[i, j] == pytest.approx((vals[0] - vals[1]) / 2e-6, rel=1e-5, abs=1e-9)


def test_batched_forward_matches_loop(window):
    est = init_weights(0, "snn")
    x = normalize_input(window)
    xb = np.stack([x, -x])
    pb, recb, _ = snn_forward(est, xb)
    p0, r0, _ = snn_forward(est, x)
    p1, r1, _ = snn_forward(est, -x)
    np.testing.assert_allclose(pb.values, np.stack([p0.values, p1.values]), rtol=1e-12)
    assert np.array_equal(recb.counts, r0.counts + r1.counts)
    assert recb.sizes == (256, 256, 256)


def test_untrained_output_equals_prior_without_spikes():
    est = init_weights(0, "snn")
    p, rec, _ = snn_forward(est, np.zeros((100, 2)))
    assert rec.counts.sum() == 0
    np.testing.assert_allclose(p.values, np.exp(B_PARAM_INIT))


def test_persistent_state_changes_response(window):
    est = init_weights(0, "snn")
    x = normalize_input(window)
    pa, rec_a, st = snn_forward(est, x)
    pb, _, _ = snn_forward(est, x, init_state=st)
    pc, rec_c, _ = snn_forward(est, x, init_state=SnnState.zeros(est.layer_sizes))
    assert np.array_equal(rec_a.counts, rec_c.counts) and np.array_equal(pa.values, pc.values)
    assert not np.array_equal(pa.values, pb.values)


def test_spike_record_validation():
    with pytest.raises(ValueError):
        SpikeRecord(np.array([[5]]), (4,))
    rec = SpikeRecord.from_rasters([np.eye(3), np.zeros((3, 2))])
    assert rec.counts.tolist() == [[1, 1, 1], [0, 0, 0]]
    assert rec.total_rate() == pytest.approx(3 / 15)


def test_input_projection_is_first_layer():
    est = init_weights(0, "snn")
    assert est.input_proj is est.layers[0].W and est.input_proj.shape == (2, 128)
    assert est.layer_sizes == (128, 128, 128)


def test_ff_shapes_and_input_forms(window):
    est = init_weights(0, "ff")
    assert est.dims == (200, 128, 128, 128, 3)
    a = ff_forward(est, window).values
    b = ff_forward(est, normalize_input(window)).values
    c = ff_forward(est, normalize_input(window)[None]).values
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(c[0], a)
    assert np.all(a > 0)
    with pytest.raises(ValueError):
        ff_forward(est, np.zeros((50, 2)))


def test_ff_interleaves_channels():
    est = init_weights(0, "ff")
    x = np.zeros((100, 2))
    x[0, 1] = 1.0  # Vo of sample 0 -> flat index 1
    h = np.tanh(x.reshape(-1) @ est.weights[0].values + est.biases[0].values)
    ref = est.weights[0].values[1]
    np.testing.assert_allclose(h, np.tanh(ref + est.biases[0].values))


@pytest.mark.parametrize("kind", ["snn", "ff"])
def test_checkpoint_round_trip(tmp_path, window, kind):
    est = init_weights(5, kind)
    before = estimate(est, window)[0]
    save_checkpoint(est, tmp_path / "c.json", {"protocol": "single"})
    back, extra = load_checkpoint(tmp_path / "c.json")
    assert extra == {"protocol": "single"}
    assert estimate(back, window)[0] == before
    for (n1, t1), (n2, t2) in zip(est.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(t1.values, t2.values)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_init_is_seeded():
    a, b, c = init_weights(1, "snn"), init_weights(1, "snn"), init_weights(2, "snn")
    assert np.array_equal(a.layers[1].W.values, b.layers[1].W.values)
    assert not np.array_equal(a.layers[1].W.values, c.layers[1].W.values)
    with pytest.raises(ValueError):
        init_weights(0, "cnn")


def test_surrogate_alpha_threads_through():
    est = init_weights(0, "snn", alpha=5.0)
    assert est.surrogate == SurrogateConfig(5.0)
