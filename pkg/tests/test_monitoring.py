import numpy as np
import pytest

from spikeid.estimators import init_weights
from spikeid.monitoring import (DegradationSchedule, MonitorLog, Scenario, detect_fault, rs_mae,
                                run_degradation, run_event_driven, window_rate)


@pytest.fixture(scope="module")
def nets():
    return init_weights(0, "snn"), init_weights(0, "ff")


def test_schedule_endpoints_and_linearity():
    s = DegradationSchedule()
    a, z = s.params_at(1), s.params_at(50)
    assert (a.L, a.C, a.Rs) == pytest.approx((138e-6, 10e-6, 0.1))
    assert (z.L, z.C, z.Rs) == pytest.approx((120e-6, 7e-6, 0.3))
    mid = [s.params_at(i).Rs for i in range(1, 51)]
    assert np.allclose(np.diff(mid), 0.2 / 49)
    with pytest.raises(ValueError):
        s.params_at(0)


def test_scenarios():
    assert Scenario("healthy").rs_at(40) == 0.1
    ab = Scenario("abrupt")
    assert ab.rs_at(20) == 0.1 and ab.rs_at(21) == 0.3
    gr = Scenario("gradual")
    assert gr.rs_at(1) == pytest.approx(0.1) and gr.rs_at(40) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        Scenario("sudden")
    with pytest.raises(ValueError):
        Scenario("abrupt", cycles=10, fault_cycle=11)


def test_detect_fault():
    assert detect_fault([0.10, 0.10, 0.125, 0.13]) == 3
    assert detect_fault([0.10, 0.11, 0.12]) is None
    assert detect_fault([0.10, 0.12]) == 2  # exactly at threshold
    assert detect_fault([0.2, 0.1, 0.105]) is None  # drops do not count
    with pytest.raises(ValueError):
        detect_fault([0.1])


def test_log_round_trip(tmp_path, nets):
    log = run_event_driven(*nets, Scenario("abrupt", cycles=4, fault_cycle=3), seed=1)
    log.to_csv(tmp_path / "m.csv")
    back = MonitorLog.from_csv(tmp_path / "m.csv")
    for col in ("cycle", "true_Rs", "snn_Rs", "ff_Rs", "spike_rate"):
        assert np.array_equal(back.column(col), log.column(col))


def test_event_driven_persistence_matters(nets):
    sc = Scenario("healthy", cycles=3)
    on = run_event_driven(*nets, sc, seed=2, persistent=True)
    off = run_event_driven(*nets, sc, seed=2, persistent=False)
    assert on.rows[0]["snn_Rs"] == off.rows[0]["snn_Rs"]
    assert on.rows[1]["snn_Rs"] != off.rows[1]["snn_Rs"]
    assert on.column("ff_Rs").tolist() == off.column("ff_Rs").tolist()


def test_degradation_summary_shape(nets):
    sched = DegradationSchedule(n_snapshots=4)
    log, summary = run_degradation(*nets, sched, seed=0)
    assert len(log) == 4
    assert set(summary) == {"snn", "ff"} and set(summary["snn"]) == {"L", "C", "Rs"}
    err = np.mean(np.abs(log.column("ff_Rs") - log.column("true_Rs")) / log.column("true_Rs"))
    assert summary["ff"]["Rs"] == pytest.approx(err)


def test_window_helpers():
    rows = [{"cycle": c, "true_Rs": 0.1, "snn_Rs": 0.1 + 0.01 * c, "ff_Rs": 0.1,
             "spike_rate": 0.01 * c} for c in range(1, 5)]
    log = MonitorLog(rows)
    assert rs_mae(log, (1, 2)) == pytest.approx(0.015)
    assert rs_mae(log, (1, 4), "ff") == 0.0
    assert window_rate(log, (3, 4)) == pytest.approx(0.035)
    with pytest.raises(ValueError):
        rs_mae(log, (7, 9))
