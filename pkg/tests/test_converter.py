import numpy as np
import pytest
from scipy.linalg import expm

from spikeid import autodiff as ad
from spikeid.autodiff import NonFiniteError, Tape, Tensor
from spikeid.converter import (ConverterParams, EmiConfig, Waveform, add_emi, at_times, buck_rhs,
                               read_waveform_csv, rk4_integrate, simulate, subsample,
                               switching_edges, write_waveform_csv)
from spikeid.training import reconstruction_loss

P = ConverterParams()


def expm_oracle(p, t):
    """Exact solution of x' = Ax + b from rest: x(t) = A^-1 (e^{At} - I) b."""
    A = np.array([[-p.Rs / p.L, -1 / p.L], [1 / p.C, -1 / (p.R * p.C)]])
    b = np.array([p.d * p.Vg / p.L, 0.0])
    Ainv_b = np.linalg.solve(A, b)
    return np.array([expm(A * tk) @ Ainv_b - Ainv_b for tk in t])


def test_steady_state_formula():
    iL, vo = P.steady_state()
    assert vo == pytest.approx(10 * 10 / 10.1, rel=1e-12)
    assert iL == pytest.approx(vo / 10, rel=1e-12)


def test_rhs_vanishes_at_steady_state():
    di, dv = buck_rhs(P.steady_state(), P)
    assert abs(di) < 1e-9 and abs(dv) < 1e-9


def test_rk4_matches_expm_oracle():
    w = simulate(P)
    ref = expm_oracle(P, w.t[::50])
    got = np.column_stack([w.iL[::50], w.Vo[::50]])
    rel = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-3)
    assert rel.max() < 1e-6


@pytest.mark.parametrize("L,C,Rs", [(80e-6, 5e-6, 0.02), (200e-6, 15e-6, 0.5), (120e-6, 7e-6, 0.3)])
def test_rk4_oracle_across_ranges(L, C, Rs):
    p = P.with_unknowns(L, C, Rs)
    iL, vo = rk4_integrate(L, C, Rs, p, dt=5e-6)
    t = 5e-6 * np.arange(1, 301)
    ref = expm_oracle(p, t[::10])
    got = np.column_stack([iL.values[::10], vo.values[::10]])
    assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-3)) < 1e-3


def test_grid_layout():
    w = simulate(P)
    assert len(w) == 3000 and w.t[0] == pytest.approx(0.5e-6) and w.t[-1] == pytest.approx(1.5e-3)
    iL, vo = rk4_integrate(*P.unknowns, P)
    assert iL.shape == (300,) and vo.shape == (300,)


def test_batched_matches_unbatched():
    Ls, Cs, Rss = np.array([100e-6, 150e-6]), np.array([8e-6, 12e-6]), np.array([0.1, 0.4])
    iL, vo = rk4_integrate(Ls, Cs, Rss, P)
    for k in range(2):
        i1, v1 = rk4_integrate(Ls[k], Cs[k], Rss[k], P)
        np.testing.assert_allclose(iL.values[k], i1.values, rtol=1e-13)
        np.testing.assert_allclose(vo.values[k], v1.values, rtol=1e-13)


def _loss_logp(logp, meas):
    t = [Tensor(v, requires_grad=True) for v in logp]
    with Tape() as tape:
        iL, vo = rk4_integrate(ad.exp(t[0]), ad.exp(t[1]), ad.exp(t[2]), P)
        loss = reconstruction_loss(iL, vo, meas[0], meas[1])
    ad.backward(loss, tape, t)
    return loss.item(), np.array([x.grad for x in t])


def test_solver_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    ref = rk4_integrate(*P.unknowns, P)
    meas = (ref[0].values, ref[1].values)
    for _ in range(20):
        logp = np.log(P.unknowns) + rng.uniform(-0.4, 0.4, 3)
        _, g = _loss_logp(logp, meas)
        fd = np.zeros(3)
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-6
            fd[j] = (_loss_logp(logp + e, meas)[0] - _loss_logp(logp - e, meas)[0]) / 2e-6
        assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-4


def test_divergent_parameters_raise_nonfinite():
    with pytest.raises(NonFiniteError) as exc:
        rk4_integrate(1e-12, 1e-12, 0.1, P, dt=5e-6)
    assert "step" in str(exc.value)


def test_bad_grid_rejected():
    with pytest.raises(ValueError):
        rk4_integrate(*P.unknowns, P, dt=7e-6)


def test_params_validation():
    with pytest.raises(ValueError):
        ConverterParams(L=-1.0)
    with pytest.raises(ValueError):
        ConverterParams(d=1.0)


def test_switching_edges_count_and_positions():
    w = simulate(P)
    edges = switching_edges(w, P)
    assert edges.size == 30
    np.testing.assert_allclose(edges[:4], [0.0, 50e-6, 100e-6, 150e-6], atol=1e-15)


def test_emi_reproducible_and_seed_sensitive():
    w = simulate(P)
    a = add_emi(w, EmiConfig(seed=3), P)
    b = add_emi(w, EmiConfig(seed=3), P)
    c = add_emi(w, EmiConfig(seed=4), P)
    assert np.array_equal(a.iL, b.iL) and np.array_equal(a.Vo, b.Vo)
    assert not np.array_equal(a.iL, c.iL)


def test_emi_draw_order_oracle():
    """Rebuild the corruption by hand from the documented draw order."""
    w = simulate(P)
    cfg = EmiConfig(seed=11)
    got = add_emi(w, cfg, P)
    rng = np.random.default_rng(11)
    edges = switching_edges(w, P)
    for x, y in ((w.iL, got.iL), (w.Vo, got.Vo)):
        s = np.std(x)
        noise = rng.standard_normal(x.size) * 0.02 * s
        signs = np.where(rng.random(edges.size) < 0.5, -1.0, 1.0)
        pulses = np.zeros_like(x)
        for e, sg in zip(edges, signs):
            pulses += sg * 0.25 * s * np.exp(-((w.t - e) ** 2) / (2 * (2e-6) ** 2))
        np.testing.assert_allclose(y, x + noise + pulses, rtol=0, atol=1e-12 * s)


def test_emi_pulse_amplitude_at_edge():
    w = simulate(P)
    got = add_emi(w, EmiConfig(background_sigma_frac=0.0, seed=0), P)
    s = np.std(w.Vo)
    k = int(np.argmin(np.abs(w.t - 0.5e-3)))  # an edge on the sample grid
    assert abs(got.Vo[k] - w.Vo[k]) == pytest.approx(0.25 * s, rel=1e-6)


def test_emi_zero_config_is_identity():
    w = simulate(P)
    got = add_emi(w, EmiConfig(0.0, 4e-6, 0.0, 0), P)
    assert np.array_equal(got.iL, w.iL)


def test_emi_config_validation():
    with pytest.raises(ValueError):
        EmiConfig(background_sigma_frac=-0.1)


def test_subsample_and_at_times():
    w = simulate(P)
    s = subsample(w, 30)
    assert len(s) == 100 and s.t[0] == w.t[0] and s.dt == pytest.approx(15e-6)
    g = at_times(w, 5e-6 * np.arange(1, 301))
    assert len(g) == 300
    np.testing.assert_array_equal(g.iL, w.iL[9::10])
    with pytest.raises(ValueError):
        at_times(w, [0.7e-6])


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(1e-6, 0.0, [1.0, np.nan], [0.0, 0.0])
    with pytest.raises(ValueError):
        Waveform(1e-6, 0.0, [1.0], [0.0, 0.0])


def test_csv_round_trip_17_digits(tmp_path):
    w = add_emi(simulate(P), EmiConfig(seed=5), P)
    path = tmp_path / "w.csv"
    write_waveform_csv(w, path)
    back = read_waveform_csv(path)
    assert np.array_equal(back.iL, w.iL) and np.array_equal(back.Vo, w.Vo)
    assert back.dt == pytest.approx(w.dt, rel=1e-9) and back.t0 == w.t0


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_waveform_csv(path)
