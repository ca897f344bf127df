import csv

import numpy as np
import pytest

from spikeid.converter import ConverterParams, EmiConfig, add_emi, simulate, subsample
from spikeid.efficiency import (EnergyCatalog, count_macs, count_sops, efficiency_rows,
                                energy_report, input_projection_ops, rate_profiles, snn_fanouts,
                                sparsity, write_raster_csv, write_rate_series_csv)
from spikeid.estimators import SpikeRecord, estimate, init_weights


def brute_force_sops(rasters, fanouts):
    """Walk every (timestep, neuron) event and add one op per outgoing synapse."""
    total = 0
    for raster, fan in zip(rasters, fanouts):
        for row in raster:
            for spike in row:
                if spike:
                    for _ in range(fan):
                        total += 1
    return total


def random_record(rng):
    n_layers = int(rng.integers(1, 4))
    steps = int(rng.integers(1, 30))
    rate = rng.uniform(0, 1)
    rasters = [(rng.random((steps, int(rng.integers(1, 20)))) < rate) for _ in range(n_layers)]
    fanouts = [int(rng.integers(1, 10)) for _ in range(n_layers)]
    return SpikeRecord.from_rasters(rasters), rasters, fanouts


def test_mac_count_of_ff_baseline():
    assert count_macs((200, 128, 128, 128, 3)) == 58752


def test_sops_equal_brute_force_on_random_records():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rec, rasters, fan = random_record(rng)
        assert count_sops(rec, fan) == brute_force_sops(rasters, fan)


def test_sops_validation():
    rec = SpikeRecord.from_rasters([np.ones((2, 2))])
    with pytest.raises(ValueError):
        count_sops(rec, [1, 2])
    with pytest.raises(ValueError):
        count_macs([5])


def test_sparsity_edges():
    assert sparsity(SpikeRecord.from_rasters([np.zeros((4, 3))])) == 1.0
    assert sparsity(SpikeRecord.from_rasters([np.ones((4, 3))])) == 0.0
    half = np.zeros((4, 2))
    half[:, 0] = 1
    assert sparsity(SpikeRecord.from_rasters([half, np.zeros((4, 2))])) == 0.75


def test_rate_profiles():
    r1 = np.array([[1, 1], [0, 0]])
    r2 = np.array([[0, 0, 0, 0], [1, 0, 0, 0]])
    means, series = rate_profiles(SpikeRecord.from_rasters([r1, r2]))
    np.testing.assert_allclose(means, [0.5, 0.125])
    np.testing.assert_allclose(series, [[1, 0], [0, 0.25]])


def test_energy_from_published_counts():
    rep = energy_report(58752, 333470)
    assert rep.ff_energy * 1e6 == pytest.approx(881.28)
    assert rep.snn_energy * 1e6 == pytest.approx(3.301353)
    assert float(f"{rep.ratio:.2g}") == 270.0


def test_energy_ratio_undefined_without_spikes():
    assert energy_report(100, 0).ratio is None


def test_always_on_power_scales_with_rate():
    rep = energy_report(58752, 333470, snapshot_rate=10.0)
    assert rep.snn_power == pytest.approx(10 * rep.snn_energy)


def test_catalog_validation():
    with pytest.raises(ValueError):
        EnergyCatalog(mac_energy=0.0)


def test_snn_fanouts_and_projection():
    est = init_weights(0, "snn")
    assert snn_fanouts(est) == (128, 128, 3)
    assert input_projection_ops(est, 100) == 25600


def test_efficiency_rows_and_csvs(tmp_path):
    p = ConverterParams()
    w = subsample(add_emi(simulate(p), EmiConfig(seed=1), p), 30)
    est = init_weights(0, "snn")
    _, rec, _ = estimate(est, w)
    rows = {r[0]: r for r in efficiency_rows(rec, est)}
    assert rows["macs"][1] == 58752
    assert rows["sops"][1] == count_sops(rec, (128, 128, 3))
    assert rows["sops_incl_input"][1] == rows["sops"][1] + 25600
    assert {r[3] for r in rows.values()} <= {"measured", "counted", "estimated"}

    write_raster_csv(tmp_path / "r.csv", rec)
    with open(tmp_path / "r.csv") as fh:
        events = list(csv.DictReader(fh))
    assert len(events) == rec.counts.sum()
    assert list(events[0]) == ["layer", "neuron", "timestep"]

    write_rate_series_csv(tmp_path / "s.csv", rec)
    with open(tmp_path / "s.csv") as fh:
        series = list(csv.DictReader(fh))
    assert len(series) == 100
    assert float(series[5]["layer1"]) == rec.counts[0, 5] / 128
