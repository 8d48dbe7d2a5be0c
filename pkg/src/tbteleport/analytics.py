"""Closed-form visibility, teleportation-fidelity and classical-bound models.

Emission probabilities are truncated at two photons per source, matching
the second-order treatment of the models.  ``P_ijk`` denotes the joint
probability of ``i`` NV photons, ``j`` photons in the intended time bin of
the weak coherent state and ``k`` leaked photons in the orthogonal bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .errors import DomainError, NoHeraldError
from .sources import NvParams, WcsParams, nv_photon_number_dist

__all__ = [
    "VisibilityParams",
    "TeleportModelParams",
    "visibility_model",
    "emission_probabilities",
    "p_bg_pole",
    "p_bg_eq",
    "fidelity_pole",
    "fidelity_eq",
    "fidelity_model",
    "avg_fidelity",
    "fidelity_mp",
    "classical_bound",
    "readout_fidelity",
]


@dataclass(frozen=True)
class VisibilityParams:
    x: float
    g2: float
    p_nv: float
    p_noise: float = 0.0
    eta: float = 1.0

    def __post_init__(self):
        if self.x < 0:
            raise DomainError(f"x must be >= 0, got {self.x!r}")
        if self.g2 < 0 or self.p_noise < 0:
            raise DomainError("g2 and p_noise must be >= 0")
        if not (0 < self.p_nv <= 1):
            raise DomainError(f"p_nv must lie in (0, 1], got {self.p_nv!r}")
        if not (0 <= self.eta <= 1):
            raise DomainError(f"eta must lie in [0, 1], got {self.eta!r}")


def visibility_model(p: VisibilityParams) -> float:
    r"""Expected zero-delay TPQI visibility.

    .. math::

        V = \frac{\eta x}{g^{(2)}/2 + x^2/2 + x + 2 p_n (1 + x)/p_{NV} + 2 p_n^2 / p_{NV}^2}
    """
    r = p.p_noise / p.p_nv
    denom = 0.5 * p.g2 + 0.5 * p.x**2 + p.x + 2 * r * (1 + p.x) + 2 * r**2
    if denom <= 0:
        raise DomainError("visibility denominator vanishes (x, g2 and p_noise all zero)")
    return p.eta * p.x / denom


@dataclass(frozen=True)
class TeleportModelParams:
    nv: NvParams
    wcs: WcsParams
    eta: float
    p_noise: float = 0.0
    single_photon_input: bool = False

    def __post_init__(self):
        if not (0 <= self.eta <= 1):
            raise DomainError(f"eta must lie in [0, 1], got {self.eta!r}")
        if not (0 <= self.p_noise <= 1):
            raise DomainError(f"p_noise must lie in [0, 1], got {self.p_noise!r}")

    @property
    def x(self) -> float:
        return self.wcs.mu / self.nv.p_nv if self.nv.p_nv > 0 else math.inf


def _poisson2(mean: float) -> tuple[float, float, float]:
    e = math.exp(-mean)
    return e, e * mean, e * mean**2 / 2


def emission_probabilities(params: TeleportModelParams) -> dict[str, float]:
    """``P_ijk`` (keys like ``"110"``) and ``P_ij`` (keys like ``"11"``) for i, j, k <= 2."""
    nv = nv_photon_number_dist(params.nv)
    pw = _poisson2(params.wcs.mu)
    pleak = _poisson2(params.wcs.leak_epsilon * params.wcs.mu)
    out = {}
    for i in range(3):
        for j in range(3):
            out[f"{i}{j}"] = nv[i] * pw[j]
            for k in range(3):
                out[f"{i}{j}{k}"] = nv[i] * pw[j] * pleak[k]
    return out


def p_bg_pole(params: TeleportModelParams, P: Mapping[str, float] | None = None) -> float:
    P = P or emission_probabilities(params)
    q = params.p_noise
    return 2 * q * (2 * q * P["000"] + P["010"] + P["100"] + P["001"])


def p_bg_eq(params: TeleportModelParams, P: Mapping[str, float] | None = None) -> float:
    P = P or emission_probabilities(params)
    q = params.p_noise
    return 2 * q * (2 * q * P["00"] + P["10"] + P["01"])


def fidelity_pole(params: TeleportModelParams) -> float:
    """Expected fidelity for a pole input (+Z or -Z)."""
    P = emission_probabilities(params)
    bg = p_bg_pole(params, P)
    norm = (P["110"] + P["101"]) / 2 + (P["210"] + P["201"]) / 4 + P["011"] + bg
    if norm <= 0:
        raise NoHeraldError("no valid heralding event for pole inputs")
    return (P["110"] + P["210"] / 2 + P["011"] + bg) / (2 * norm)


def fidelity_eq(params: TeleportModelParams) -> float:
    """Expected fidelity for an equatorial input (X or Y axis)."""
    P = emission_probabilities(params)
    bg = p_bg_eq(params, P)
    eta = params.eta
    norm = (P["11"] + P["02"]) / 2 + P["21"] / 4 + bg
    if norm <= 0:
        raise NoHeraldError("no valid heralding event for equatorial inputs")
    return ((P["11"] * (1 + eta) + P["02"] + P["21"]) / 2 + bg) / (2 * norm)


def avg_fidelity(fidelities: Mapping[str, float]) -> float:
    """Mean over the Z, X and Y axes of the per-axis mean fidelity of the six cardinal states."""
    for k, f in fidelities.items():
        if not (0 <= f <= 1):
            raise DomainError(f"fidelity {k}={f!r} outside [0, 1]")
    axes = [(fidelities["+" + a] + fidelities["-" + a]) / 2 for a in ("Z", "X", "Y")]
    return sum(axes) / 3


def fidelity_model(params: TeleportModelParams) -> dict[str, float]:
    """Model fidelity for all six cardinal inputs plus ``"avg"``."""
    fp, fe = fidelity_pole(params), fidelity_eq(params)
    out = {"+Z": fp, "-Z": fp, "+X": fe, "-X": fe, "+Y": fe, "-Y": fe}
    out["avg"] = avg_fidelity(out)
    return out


def fidelity_mp(n: int) -> float:
    """Best measure-and-prepare fidelity with ``n`` identical copies of a qubit."""
    return (n + 1) / (n + 2)


def classical_bound(mu: float, tol: float = 1e-15) -> float:
    """Maximal classical teleportation fidelity for a Poissonian input of mean ``mu``.

    The series is conditioned on at least one photon.  Terms are added
    until the remaining Poisson tail, bounded geometrically, drops below
    ``tol`` relative to the normalization.
    """
    if not (mu > 0 and math.isfinite(mu)):
        raise DomainError(f"mu must be finite and > 0, got {mu!r}")
    # p(N)/(1 - p(0)) = mu^N / (N! (e^mu - 1)); start from N = 1.
    weight = mu / math.expm1(mu)
    total = 0.0
    n = 1
    while True:
        total += fidelity_mp(n) * weight
        n += 1
        weight *= mu / n
        # Remaining terms are <= weight * sum (mu/(n+1))^k.
        ratio = mu / (n + 1)
        if ratio < 1 and weight / (1 - ratio) < tol:
            break
    return total


def readout_fidelity(r_ii: float, r_ji: float) -> float:
    """Fidelity from readout counts in the prepared state and in its orthogonal state."""
    if r_ii < 0 or r_ji < 0:
        raise DomainError("readout counts must be >= 0")
    total = r_ii + r_ji
    if total <= 0:
        raise DomainError("no readout counts")
    return (1 + (r_ii - r_ji) / total) / 2
