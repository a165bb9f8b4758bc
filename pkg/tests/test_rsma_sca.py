import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsma_platoon.channel import RadioConfig, path_loss_channel
from rsma_platoon.errors import InvalidLinearizationError, PayloadInfeasibleError, QosInfeasibleError
from rsma_platoon.rsma_sca import (DownlinkSpec, baseline_mulp, baseline_noma, build_subproblem, delivered_bits,
                                   init_feasible, minorant_bilinear, minorant_bilinear_dc, minorant_qol,
                                   original_violation, round_schedule, sca_solve, to_complex, to_real)


def make_spec(K=2, M=2, T=8, B0=2e7, eps=0.01, power_dbm=25.0, R_th=0.5e6, Q_h=100.0, base=10.0):
    radio = RadioConfig.from_dbm(power_dbm, M=M, K=K)
    H = np.array([[path_loss_channel(base * (k + 1) + 0.01 * t, radio) for t in range(T)] for k in range(K)])
    return DownlinkSpec(H, eps, radio, B0=B0, R_th=R_th, Q_h=Q_h)


@pytest.fixture(scope="module")
def small():
    spec = make_spec(T=12)
    return spec, {s: sca_solve(spec, scheme=s) for s in ("rsma", "mulp", "noma")}


# -- minorants ------------------------------------------------------------

def test_bilinear_examples():
    om = minorant_bilinear(0.3, 2.0)
    assert om(0.3, 2.0) == pytest.approx(0.6)
    assert minorant_bilinear(0.0, 0.0)(0.7, 3.0) == 0.0
    assert minorant_bilinear(1.0, 5.0)(0.5, 4.0) == pytest.approx(1.5)


@given(st.floats(0, 1), st.floats(0, 50), st.floats(0, 1), st.floats(0, 50))
def test_bilinear_dc_lower_bound_and_tangency(pn, cn, p, c):
    om = minorant_bilinear_dc(pn, cn)
    assert om(pn, cn) == pytest.approx(pn * cn, abs=1e-10 * (1 + pn * cn))
    assert om(p, c) <= p * c + 1e-9 * (1 + p * c)


def test_qol_examples():
    h = np.array([1.0 + 0j])
    psi = minorant_qol(np.array([1.0 + 0j]), 1.0, h)
    assert psi(np.array([2.0 + 0j]), 1.0) == pytest.approx(3.0)
    assert psi(np.array([1.0 + 0j]), 1.0) == pytest.approx(1.0)
    h2 = np.array([1.0, 0.0], dtype=complex)
    orth = minorant_qol(np.array([0.0, 1.0], dtype=complex), 0.5, h2)
    assert orth(np.array([3.0, -2.0], dtype=complex), 7.0) == 0.0
    with pytest.raises(InvalidLinearizationError):
        minorant_qol(np.array([1.0 + 0j]), 0.0, h)


def _cvec(rng, M):
    return rng.normal(size=M) + 1j * rng.normal(size=M)


@pytest.mark.parametrize("seed", range(5))
def test_qol_lower_bound_on_samples(seed):
    rng = np.random.default_rng(seed)
    M = 3
    h, pn = _cvec(rng, M), _cvec(rng, M)
    xin = float(rng.uniform(0.1, 3))
    psi = minorant_qol(pn, xin, h)
    assert psi(pn, xin) == pytest.approx(abs(np.vdot(h, pn)) ** 2 / xin, rel=1e-10)
    for _ in range(1000):
        p = _cvec(rng, M) * rng.uniform(0, 3)
        xi = float(rng.uniform(1e-3, 10))
        assert psi(p, xi) <= abs(np.vdot(h, p)) ** 2 / xi + 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_qol_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    M = 2
    h, pn = _cvec(rng, M), _cvec(rng, M)
    xin = 1.3
    psi = minorant_qol(pn, xin, h)
    f = lambda x, xi: abs(np.vdot(h, to_complex(x))) ** 2 / xi
    x0 = to_real(pn)
    step = 1e-6
    for i in range(2 * M):
        e = np.zeros(2 * M)
        e[i] = step
        fd = (f(x0 + e, xin) - f(x0 - e, xin)) / (2 * step)
        assert psi.coef_p[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)
    fd_xi = (f(x0, xin + step) - f(x0, xin - step)) / (2 * step)
    assert psi.coef_xi == pytest.approx(fd_xi, rel=1e-5)


# -- initial point ----------------------------------------------------------

def test_init_feasible_single_user():
    spec = make_spec(K=1, M=1, T=3, power_dbm=60.0)
    v = init_feasible(spec)
    assert np.all(v.C == 0)
    assert np.all(v.psi == 1)
    power = np.sum(np.abs(v.pc) ** 2, axis=1) + np.sum(np.abs(v.pp) ** 2, axis=(1, 2))
    assert np.all(power <= 1 + 1e-9)
    assert original_violation(spec, v) <= 1e-9


def test_init_feasible_without_qos():
    v = init_feasible(make_spec(R_th=0.0, power_dbm=-20.0))
    assert np.all(v.C0 >= 0)


def test_init_qos_infeasible_names_slot():
    spec = make_spec(power_dbm=-150.0, R_th=1e6)
    with pytest.raises(QosInfeasibleError) as info:
        init_feasible(spec)
    assert info.value.slot == 1


# -- subproblem -------------------------------------------------------------

def test_subproblem_feasible_at_expansion_point():
    spec = make_spec()
    v = init_feasible(spec)
    from rsma_platoon.rsma_sca import _pack
    layout = build_subproblem(spec, v)
    x = _pack(layout, v)
    assert layout.prog.compile().rel_violation(x) <= 1e-9


@pytest.mark.parametrize("scheme", ["rsma", "mulp", "noma"])
def test_subproblem_rows_grow_linearly_in_slots(scheme):
    counts = []
    for T in (2, 3, 4):
        spec = make_spec(T=T)
        counts.append(build_subproblem(spec, init_feasible(spec, scheme), scheme).prog.num_constraints())
    assert counts[2] - counts[1] == counts[1] - counts[0] > 0


def test_zero_penalty_weight_leaves_latency_objective():
    spec = make_spec(Q_h=0.0)
    v = init_feasible(spec)
    layout = build_subproblem(spec, v)
    from rsma_platoon.rsma_sca import _pack
    x = _pack(layout, v)
    assert layout.prog.objective(x) == pytest.approx(v.latency_bound)


def test_malformed_point_rejected():
    spec = make_spec()
    v = init_feasible(spec)
    v.xi = v.xi[:, :1]
    with pytest.raises(InvalidLinearizationError):
        build_subproblem(spec, v)


# -- SCA ----------------------------------------------------------------------

def test_infinite_tolerance_single_iteration():
    rep = sca_solve(make_spec(), tol=math.inf)
    assert len(rep.iterates) == 2


def test_sca_traces_monotone_and_feasible(small):
    spec, reports = small
    for rep in reports.values():
        obj = [o for _, o in rep.iterates]
        assert all(b <= a + 1e-8 * max(1, abs(a)) for a, b in zip(obj, obj[1:]))
        assert all(row[3] <= 1e-7 for row in rep.trace)
        assert np.all(rep.delivered >= spec.B0 * (1 - 1e-12))


def test_scheme_ordering_small(small):
    _, r = small
    assert r["rsma"].latency_index <= r["mulp"].latency_index <= r["noma"].latency_index
    assert r["rsma"].iterates[-1][1] <= r["mulp"].iterates[-1][1] + 1e-5


def test_payload_fits_one_slot():
    spec = make_spec(K=1, M=1, T=2, B0=1e5)
    assert sca_solve(spec).latency_index == 1


def test_overloaded_instance():
    spec = make_spec(K=3, M=2, T=10)
    assert sca_solve(spec).latency_index <= baseline_mulp(spec).latency_index


def test_noma_single_user_not_better():
    spec = make_spec(K=1, M=2)
    assert baseline_noma(spec).latency_index >= sca_solve(spec).latency_index


def test_noma_delivers_payload_to_each_follower(small):
    spec, r = small
    assert r["noma"].delivered.shape == (spec.K,)
    assert np.all(r["noma"].delivered >= spec.B0 * (1 - 1e-12))


def test_payload_infeasible():
    with pytest.raises(PayloadInfeasibleError):
        sca_solve(make_spec(T=2, B0=1e10))


# -- rounding ----------------------------------------------------------------

def _with_psi(psi, rates):
    spec = make_spec(T=len(psi))
    v = init_feasible(spec)
    v.psi = np.array(psi, dtype=float)
    v.C0 = np.array(rates, dtype=float)
    return v


def test_round_binary_unchanged():
    v = _with_psi([1, 0, 1], [2, 2, 2])
    np.testing.assert_array_equal(round_schedule(v, payload=4.0).psi, [1, 0, 1])


def test_round_threshold():
    v = _with_psi([0.9, 0.1], [5, 5])
    np.testing.assert_array_equal(round_schedule(v, payload=4.0).psi, [1, 0])


def test_round_greedy_fill():
    v = _with_psi([0.4, 0.4], [1, 1])
    out = round_schedule(v, payload=2.0)
    np.testing.assert_array_equal(out.psi, [1, 1])
    assert np.sum(out.psi * v.C0) >= 2.0


def test_round_payload_infeasible():
    with pytest.raises(PayloadInfeasibleError):
        round_schedule(_with_psi([1, 1], [1, 1]), payload=3.0)


@settings(max_examples=40)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5), st.lists(st.floats(0.1, 5), min_size=5, max_size=5),
       st.floats(0.05, 1.0))
def test_round_delivers(psi, rates, frac):
    payload = frac * sum(rates)
    out = round_schedule(_with_psi(psi, rates), payload=payload)
    assert set(np.unique(out.psi)) <= {0.0, 1.0}
    assert np.sum(out.psi * np.array(rates)) >= payload * (1 - 1e-9)


def test_delivered_bits_ledger(small):
    spec, r = small
    rep = r["rsma"]
    np.testing.assert_allclose(delivered_bits(spec, rep.final), rep.delivered)
