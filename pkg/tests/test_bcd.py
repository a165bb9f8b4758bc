import math
import warnings

import numpy as np
import pytest

from rsma_platoon.bcd import (BcdConfig, CommTemplate, JointState, bcd_run, csit_penalty, downlink_spec,
                              joint_objective, link_inputs)
from rsma_platoon.channel import RadioConfig
from rsma_platoon.errors import ConsistencyError, InvalidConfigError
from rsma_platoon.mpc import MpcConfig, control_cost
from rsma_platoon.rsma_sca import sca_solve
from rsma_platoon.runner import reference_trace
from rsma_platoon.scenario import scenario_s1

warnings.filterwarnings("ignore", category=RuntimeWarning)


def small_case(B0=2e7, **kw):
    sc = scenario_s1(2, T=40)
    tmpl = CommTemplate(radio=RadioConfig(K=2, M=4), B0=B0, **kw)
    return sc, tmpl


@pytest.fixture(scope="module")
def run_small():
    sc, tmpl = small_case()
    return sc, tmpl, bcd_run(sc, tmpl, MpcConfig(), BcdConfig(max_outer=4))


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        BcdConfig(max_outer=0)
    with pytest.raises(InvalidConfigError):
        BcdConfig(stop_tol=0.0)
    assert BcdConfig().threshold(10.0) == pytest.approx(1.1e-4)


def test_radio_mismatch():
    sc, _ = small_case()
    with pytest.raises(InvalidConfigError):
        bcd_run(sc, CommTemplate(radio=RadioConfig(K=3)))


def test_link_inputs_follow_the_trace():
    sc, tmpl = small_case()
    tr = reference_trace(sc)
    H, eps = link_inputs(tr, sc, tmpl.radio)
    assert H.shape == (2, 40, 4) and eps.shape == (2, 40)
    d = np.linalg.norm(sc.references[1, 7, :2] - sc.references[0, 7, :2])
    np.testing.assert_allclose(H[0, 7].real, d ** -2.0)
    assert np.all((eps >= 0) & (eps <= 1))


def _reference_state(sc, tmpl):
    tr = reference_trace(sc)
    spec = downlink_spec(tr, sc, tmpl)
    rep = sca_solve(spec)
    H, eps = link_inputs(tr, sc, tmpl.radio)
    return JointState(rep, tr, H, eps), rep, spec


def test_joint_objective_all_weights_zero():
    sc, tmpl = small_case(B0=1e5, Q_t=0.0, Q_h=0.0)
    state, _, _ = _reference_state(sc, tmpl)
    cfg = MpcConfig(Q_z=(0, 0, 0, 0), Q_u=(0, 0), Q_du=(0, 0), Q_h=0.0)
    total, _ = joint_objective(state, sc, tmpl, cfg)
    assert total == 0.0


def test_joint_objective_perfect_tracking():
    sc, tmpl = small_case(B0=1e5)
    state, rep, spec = _reference_state(sc, tmpl)
    assert rep.latency_index == 1
    total, parts = joint_objective(state, sc, tmpl, MpcConfig())
    assert parts["control"] == 0.0
    from rsma_platoon.rsma_sca import penalty
    assert total == pytest.approx(tmpl.Q_t * 1 + penalty(spec, rep.final.pp), rel=1e-12)


def test_inconsistent_state_names_slot():
    sc, tmpl = small_case(B0=1e5)
    state, _, _ = _reference_state(sc, tmpl)
    state.channels = state.channels.copy()
    state.channels[:, 5] *= 1.01
    with pytest.raises(ConsistencyError) as info:
        joint_objective(state, sc, tmpl, MpcConfig())
    assert info.value.slot == 6


def test_single_outer_iteration():
    sc, tmpl = small_case()
    res = bcd_run(sc, tmpl, MpcConfig(), BcdConfig(max_outer=1))
    assert len(res.rows) == 1 and res.status == "iteration-limit"


def test_infinite_tolerance_stops_after_one():
    sc, tmpl = small_case()
    res = bcd_run(sc, tmpl, MpcConfig(), BcdConfig(max_outer=5, stop_tol=math.inf))
    assert len(res.rows) == 1 and res.status == "converged"


def test_run_monotone_and_consistent(run_small):
    sc, tmpl, res = run_small
    obj = res.objectives
    assert all(b <= a + 1e-6 * (1 + abs(a)) for a, b in zip(obj, obj[1:]))
    assert res.status == "converged" and len(obj) <= 4
    total, parts = joint_objective(res.state, sc, tmpl, MpcConfig())
    row = res.rows[-1]
    assert total == pytest.approx(row.objective, abs=1e-6)
    assert parts["control"] == pytest.approx(control_cost(res.state.control, sc, MpcConfig()))
    # penalty counted once
    assert total == pytest.approx(tmpl.Q_t * parts["latency"] + parts["penalty"] + parts["control"])


def test_run_deterministic(run_small):
    sc, tmpl, res = run_small
    again = bcd_run(sc, tmpl, MpcConfig(), BcdConfig(max_outer=4))
    assert len(again.rows) == len(res.rows)
    np.testing.assert_allclose(again.objectives, res.objectives, rtol=0, atol=1e-9)


def test_penalty_factors_from_precoders(run_small):
    sc, tmpl, res = run_small
    pen = csit_penalty(res.state.comm, sc, tmpl.radio)
    assert pen.precoder_power4.shape == (sc.V, sc.T)
    assert np.all(pen.precoder_power4[0] == 0) and np.all(pen.precoder_power4 >= 0)
