import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbteleport.analytics import (
    TeleportModelParams,
    VisibilityParams,
    avg_fidelity,
    classical_bound,
    emission_probabilities,
    fidelity_eq,
    fidelity_model,
    fidelity_mp,
    fidelity_pole,
    p_bg_eq,
    p_bg_pole,
    readout_fidelity,
    visibility_model,
)
from tbteleport.errors import DomainError, NoHeraldError
from tbteleport.sources import NvParams, WcsParams

P_TPQI = 5.76e-4
Q_TPQI = 11.7 * 30e-9


def tele(p_nv=4.5e-4, x=1.2, eps=0.04, eta=0.895, q=5.5e-6, g2=0.011, label="+X"):
    return TeleportModelParams(NvParams.from_g2(p_nv, g2), WcsParams(x * p_nv, eps).with_qubit(label), eta, q)


# --- visibility ------------------------------------------------------------------


@pytest.mark.parametrize(
    "params, expected",
    [
        (VisibilityParams(0.0, 0.011, P_TPQI, Q_TPQI, 0.895), 0.0),
        (VisibilityParams(2.0, 0.0, P_TPQI, 0.0, 1.0), 0.5),
        (VisibilityParams(1.0, 0.0, P_TPQI, 0.0, 1.0), 1 / 1.5),
        (VisibilityParams(1.19, 0.011, P_TPQI, Q_TPQI, 0.0), 0.0),
    ],
)
def test_visibility_examples(params, expected):
    assert visibility_model(params) == pytest.approx(expected, abs=1e-15)


def test_visibility_reference_point():
    # Fixed against the Fock-space enumeration (0.558783) before the build.
    v = visibility_model(VisibilityParams(1.19, 0.011, P_TPQI, Q_TPQI, 0.895))
    assert v == pytest.approx(0.558724, abs=2e-6)
    assert v == pytest.approx(0.558783, abs=1e-4)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(0.01, 10), eta=st.floats(0, 0.99), g2=st.floats(0, 0.1))
def test_visibility_increasing_in_eta(x, eta, g2):
    lo = visibility_model(VisibilityParams(x, g2, P_TPQI, Q_TPQI, eta))
    hi = visibility_model(VisibilityParams(x, g2, P_TPQI, Q_TPQI, eta + 0.01))
    assert hi > lo


@pytest.mark.parametrize("g2, q", [(0.011, Q_TPQI), (0.05, 0.0), (0.0, 1e-5)])
def test_visibility_single_interior_maximum(g2, q):
    xs = np.geomspace(1e-3, 100, 4000)
    v = np.array([visibility_model(VisibilityParams(x, g2, P_TPQI, q, 0.895)) for x in xs])
    signs = np.sign(np.diff(v))
    assert np.count_nonzero(signs[1:] != signs[:-1]) == 1
    assert 0 < np.argmax(v) < len(xs) - 1


def test_visibility_without_g2_or_noise_peaks_at_zero():
    xs = np.linspace(1e-4, 4, 200)
    v = [visibility_model(VisibilityParams(x, 0.0, P_TPQI, 0.0, 1.0)) for x in xs]
    assert all(b < a for a, b in zip(v, v[1:]))


@pytest.mark.parametrize(
    "kwargs", [dict(x=-1.0), dict(eta=1.2), dict(p_nv=0.0), dict(g2=-0.1)]
)
def test_visibility_params_validation(kwargs):
    base = dict(x=1.0, g2=0.0, p_nv=P_TPQI, p_noise=0.0, eta=1.0)
    base.update(kwargs)
    with pytest.raises(DomainError):
        VisibilityParams(**base)


def test_visibility_degenerate_denominator():
    with pytest.raises(DomainError):
        visibility_model(VisibilityParams(0.0, 0.0, P_TPQI, 0.0, 1.0))


# --- emission and background ------------------------------------------------------


def test_emission_probabilities_compose():
    p = tele()
    P = emission_probabilities(p)
    mu, eps, pnv = p.wcs.mu, p.wcs.leak_epsilon, p.nv.p_nv
    assert P["110"] == pytest.approx(pnv * (1 - p.nv.p_de) * mu * math.exp(-mu) * math.exp(-eps * mu), rel=1e-14)
    assert P["11"] == pytest.approx(pnv * (1 - p.nv.p_de) * mu * math.exp(-mu), rel=1e-14)


def test_background_vanishes_without_noise():
    assert p_bg_pole(tele(q=0.0, label="+Z")) == 0.0
    assert p_bg_eq(tele(q=0.0)) == 0.0


def test_background_with_no_emission():
    q = 1e-3
    p = TeleportModelParams(NvParams(0.0), WcsParams(0.0, 0.04).with_qubit("+Z"), 0.895, q)
    assert p_bg_pole(p) == pytest.approx(4 * q * q, rel=1e-14)
    assert p_bg_eq(p) == pytest.approx(4 * q * q, rel=1e-14)


# --- fidelity --------------------------------------------------------------------------


def test_pole_perfect_without_imperfections():
    p = tele(eps=0.0, q=0.0, g2=0.0, label="+Z")
    assert fidelity_pole(p) == pytest.approx(1.0, abs=1e-3)


def test_pole_identity_only_is_half():
    # WCS alone: P_110 = P_210 = 0, only background and leak-type events remain.
    p = TeleportModelParams(NvParams(0.0), WcsParams(1e-3, 0.04).with_qubit("+Z"), 0.895, 1e-5)
    assert fidelity_pole(p) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("eta, expected", [(1.0, 1.0), (0.895, 0.9475)])
def test_equatorial_only_p11(eta, expected):
    # Tiny flux puts all weight on P_11; P_02 and P_21 are second order.
    p = TeleportModelParams(NvParams(1e-7), WcsParams(1e-7 * 1e-6), eta, 0.0)
    assert fidelity_eq(p) == pytest.approx(expected, abs=1e-6)


def test_equatorial_identity_only_is_half():
    p = TeleportModelParams(NvParams(0.0), WcsParams(1e-3), 0.895, 1e-5)
    assert fidelity_eq(p) == pytest.approx(0.5, abs=1e-15)


def test_no_herald_raises():
    p = TeleportModelParams(NvParams(0.0), WcsParams(0.0), 0.895, 0.0)
    with pytest.raises(NoHeraldError):
        fidelity_eq(p)
    with pytest.raises(NoHeraldError):
        fidelity_pole(p)


def test_reference_point_model():
    # Fixed against the Fock-space enumeration (0.890701 / 0.764746 / 0.806731).
    m = fidelity_model(tele())
    assert m["+Z"] == pytest.approx(0.890716, abs=2e-6)
    assert m["+X"] == pytest.approx(0.764741, abs=2e-6)
    assert m["avg"] == pytest.approx(0.806732, abs=2e-6)


@pytest.mark.parametrize(
    "fids, expected",
    [
        ({k: 1.0 for k in ("+Z", "-Z", "+X", "-X", "+Y", "-Y")}, 1.0),
        ({k: 0.5 for k in ("+Z", "-Z", "+X", "-X", "+Y", "-Y")}, 0.5),
        ({"+Z": 0.96, "-Z": 0.96, "+X": 0.7, "-X": 0.7, "+Y": 0.7, "-Y": 0.7}, 0.78667),
    ],
)
def test_avg_fidelity(fids, expected):
    assert avg_fidelity(fids) == pytest.approx(expected, abs=5e-6)


def test_avg_fidelity_rejects_out_of_range():
    with pytest.raises(DomainError):
        avg_fidelity({"+Z": 1.1, "-Z": 1, "+X": 1, "-X": 1, "+Y": 1, "-Y": 1})


# --- classical bound -------------------------------------------------------------------


def test_classical_bound_reference_value():
    assert f"{classical_bound(6.5e-4):.6f}" == "0.666694"


def test_classical_bound_low_flux_limit():
    assert classical_bound(1e-12) == pytest.approx(2 / 3, abs=1e-9)


def test_measure_and_prepare():
    assert fidelity_mp(1) == pytest.approx(2 / 3)
    assert fidelity_mp(2) == 0.75


@settings(max_examples=200, deadline=None)
@given(mu=st.floats(1e-9, 50))
def test_classical_bound_range(mu):
    f = classical_bound(mu)
    assert 2 / 3 - 1e-15 <= f < 1


def test_classical_bound_monotone():
    mus = np.geomspace(1e-6, 20, 300)
    f = [classical_bound(m) for m in mus]
    assert all(b > a for a, b in zip(f, f[1:]))


@pytest.mark.parametrize("mu", [6.5e-4, 0.3, 5.0])
def test_classical_bound_converged(mu):
    # A long explicit sum agrees with the early-stopping series.
    tail = sum(fidelity_mp(n) * math.exp(n * math.log(mu) - math.lgamma(n + 1)) / math.expm1(mu) for n in range(1, 200))
    assert abs(classical_bound(mu) - tail) < 1e-12


@pytest.mark.parametrize("mu", [0.0, -1.0, math.inf])
def test_classical_bound_domain(mu):
    with pytest.raises(DomainError):
        classical_bound(mu)


# --- readout --------------------------------------------------------------------------


@pytest.mark.parametrize("counts, expected", [((5, 5), 0.5), ((1, 0), 1.0), ((3, 1), 0.75), ((0, 4), 0.0)])
def test_readout_fidelity(counts, expected):
    assert readout_fidelity(*counts) == pytest.approx(expected)


@pytest.mark.parametrize("counts", [(0, 0), (-1, 2)])
def test_readout_fidelity_invalid(counts):
    with pytest.raises(DomainError):
        readout_fidelity(*counts)
