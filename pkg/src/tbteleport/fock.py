"""Exact small-Fock-space enumeration of the interference and teleportation experiments.

Photonic modes are labeled by (time bin, port, distinguishability class).
Before the beam splitter the ports are the two inputs (A: weak coherent
source, B: NV); afterwards the same slots hold detectors D1 and D2.  The
three classes carry partial indistinguishability: photons in the MATCHED
class interfere with each other, ORTH_WCS and ORTH_NV photons are orthogonal
to everything else.

States are dictionaries from ``(occupation vector, spin)`` to amplitudes.
Classical mixtures are lists of ``(weight, FockAmplitudeState)``.
Everything is enumerated exactly up to a total photon-number cap; the
probability mass dropped by the cap is carried along and reported.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammainc

from .errors import DomainError, NoHeraldError, TruncationError, UndefinedVisibilityError
from .sources import (
    CARDINAL_STATES,
    EmissionBranch,
    InputQubit,
    NvParams,
    TimeBin,
    WcsParams,
    nv_emission_state,
    nv_photon_number_dist,
    prepare_wcs_amplitudes,
)

__all__ = [
    "Port",
    "PhotonClass",
    "ModeLabel",
    "N_MODES",
    "FockAmplitudeState",
    "NoiseParams",
    "Click",
    "ClickPattern",
    "HeraldClass",
    "DetectionOutcome",
    "split_indistinguishability",
    "coherent_state",
    "single_photon_state",
    "beam_splitter",
    "detect",
    "herald",
    "teleport_state_oracle",
    "teleport_oracle",
    "tpqi_oracle",
    "window_click_distribution",
    "g2_estimate",
    "is_valid_density_matrix",
]

DEFAULT_CAP = 3
_S = 1.0 / math.sqrt(2.0)
_Z = np.diag([1.0, -1.0]).astype(complex)


class Port(IntEnum):
    """Input ports A (weak coherent) / B (NV); after the splitter D1 / D2."""

    A = 0
    B = 1
    D1 = 0
    D2 = 1


class PhotonClass(IntEnum):
    MATCHED = 0
    ORTH_WCS = 1
    ORTH_NV = 2


N_BINS, N_PORTS, N_CLASSES = 2, 2, 3
N_MODES = N_BINS * N_PORTS * N_CLASSES


@dataclass(frozen=True)
class ModeLabel:
    time_bin: TimeBin
    port: int
    cls: PhotonClass

    @property
    def index(self) -> int:
        return (self.time_bin.value * N_PORTS + int(self.port)) * N_CLASSES + int(self.cls)

    @classmethod
    def from_index(cls, i: int) -> "ModeLabel":
        b, rem = divmod(i, N_PORTS * N_CLASSES)
        port, c = divmod(rem, N_CLASSES)
        return cls(TimeBin(b), port, PhotonClass(c))


def _mode(time_bin: TimeBin, port: int, c: PhotonClass) -> int:
    return (time_bin.value * N_PORTS + int(port)) * N_CLASSES + int(c)


Key = tuple[tuple[int, ...], "int | None"]


@dataclass
class FockAmplitudeState:
    """Pure state over occupation vectors of the 12 modes, tensored with an optional spin.

    ``truncated`` is the squared norm removed by the photon-number cap when
    the state was built; it is never renormalized away silently.
    """

    terms: dict[Key, complex]
    cap: int = DEFAULT_CAP
    truncated: float = 0.0
    after_splitter: bool = False

    @classmethod
    def vacuum(cls, spin: int | None = None, cap: int = DEFAULT_CAP) -> "FockAmplitudeState":
        return cls({((0,) * N_MODES, spin): 1.0 + 0j}, cap=cap)

    def norm_sq(self) -> float:
        return math.fsum(abs(a) ** 2 for a in self.terms.values())

    def max_photons(self) -> int:
        return max((sum(occ) for occ, _ in self.terms), default=0)

    def photons_per_group(self) -> dict[Key, float]:
        """Mean photon number per (time bin, class), summed over ports."""
        out: dict = defaultdict(float)
        for (occ, _), a in self.terms.items():
            w = abs(a) ** 2
            for i, n in enumerate(occ):
                if n:
                    lab = ModeLabel.from_index(i)
                    out[(lab.time_bin, lab.cls)] += w * n
        return dict(out)

    def tensor(self, other: "FockAmplitudeState") -> "FockAmplitudeState":
        """Product with a state on other modes; at most one factor may carry the spin."""
        cap = min(self.cap, other.cap)
        terms: dict[Key, complex] = defaultdict(complex)
        dropped = 0.0
        for (o1, s1), a1 in self.terms.items():
            for (o2, s2), a2 in other.terms.items():
                if s1 is not None and s2 is not None:
                    raise ValueError("both tensor factors carry a spin")
                if any(x and y for x, y in zip(o1, o2)):
                    raise ValueError("tensor factors share a populated mode")
                occ = tuple(x + y for x, y in zip(o1, o2))
                amp = a1 * a2
                if sum(occ) > cap:
                    dropped += abs(amp) ** 2
                    continue
                terms[(occ, s1 if s1 is not None else s2)] += amp
        n1, n2 = self.norm_sq(), other.norm_sq()
        truncated = self.truncated * n2 + other.truncated * n1 + self.truncated * other.truncated + dropped
        return FockAmplitudeState(dict(terms), cap=cap, truncated=truncated)


@dataclass(frozen=True)
class NoiseParams:
    """Independent dark/background click probability per detector per time window."""

    p_noise: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.p_noise <= 1.0):
            raise DomainError(f"p_noise must lie in [0, 1], got {self.p_noise!r}")


class Click(Enum):
    NONE = "none"
    D1 = "D1"
    D2 = "D2"
    BOTH = "both"


@dataclass(frozen=True)
class ClickPattern:
    early: Click = Click.NONE
    late: Click = Click.NONE


class HeraldClass(Enum):
    PSI_PLUS = "PsiPlus"
    PSI_MINUS = "PsiMinus"
    INVALID = "Invalid"


@dataclass
class DetectionOutcome:
    """Probability of one click pattern and the unnormalized conditional spin state."""

    probability: float = 0.0
    spin: np.ndarray | None = None

    def spin_state(self) -> np.ndarray | None:
        if self.spin is None or self.probability <= 0:
            return None
        return self.spin / np.trace(self.spin).real


def split_indistinguishability(alpha: complex, eta: float) -> tuple[complex, complex]:
    """Split an amplitude into the part that overlaps the NV mode and the orthogonal rest."""
    if not (0.0 <= eta <= 1.0):
        raise DomainError(f"eta must lie in [0, 1], got {eta!r}")
    return math.sqrt(eta) * alpha, math.sqrt(1.0 - eta) * alpha


def coherent_state(amplitudes: dict[int, complex], cap: int = DEFAULT_CAP) -> FockAmplitudeState:
    """Product of coherent states on the given modes, truncated at ``cap`` photons in total."""
    modes = [m for m, a in amplitudes.items() if a != 0]
    alphas = [amplitudes[m] for m in modes]
    mean = math.fsum(abs(a) ** 2 for a in alphas)
    pref = math.exp(-mean / 2)
    terms: dict[Key, complex] = {}
    for ns in _compositions_upto(len(modes), cap):
        amp = complex(pref)
        occ = [0] * N_MODES
        for m, a, n in zip(modes, alphas, ns):
            if n:
                amp *= a**n / math.sqrt(math.factorial(n))
                occ[m] = n
        terms[(tuple(occ), None)] = amp
    tail = float(gammainc(cap + 1, mean)) if mean > 0 else 0.0
    return FockAmplitudeState(terms, cap=cap, truncated=tail)


def single_photon_state(amplitudes: dict[int, complex], cap: int = DEFAULT_CAP) -> FockAmplitudeState:
    """One photon in the normalized superposition of the given modes."""
    norm = math.sqrt(math.fsum(abs(a) ** 2 for a in amplitudes.values()))
    if norm == 0:
        raise DomainError("single photon needs a nonzero mode amplitude")
    terms: dict[Key, complex] = {}
    for m, a in amplitudes.items():
        if a != 0:
            occ = [0] * N_MODES
            occ[m] = 1
            terms[(tuple(occ), None)] = a / norm
    return FockAmplitudeState(terms, cap=cap)


def _compositions_upto(k: int, total: int):
    for ns in itertools.product(range(total + 1), repeat=k):
        if sum(ns) <= total:
            yield ns


def beam_splitter(state: FockAmplitudeState) -> FockAmplitudeState:
    """Balanced splitter per time bin and class: a -> (c + d)/sqrt2, b -> (c - d)/sqrt2."""
    if state.after_splitter:
        raise ValueError("state has already passed the beam splitter")
    if state.max_photons() > state.cap:
        raise TruncationError(f"input holds {state.max_photons()} photons, cap is {state.cap}")
    out: dict[Key, complex] = defaultdict(complex)
    for (occ, spin), amp in state.terms.items():
        poly: dict[tuple[int, ...], complex] = {
            (0,) * N_MODES: amp / math.sqrt(math.prod(math.factorial(n) for n in occ))
        }
        for mode, n in enumerate(occ):
            if not n:
                continue
            lab = ModeLabel.from_index(mode)
            to_d1 = _mode(lab.time_bin, Port.D1, lab.cls)
            to_d2 = _mode(lab.time_bin, Port.D2, lab.cls)
            sign = 1.0 if lab.port == Port.A else -1.0
            for _ in range(n):
                nxt: dict[tuple[int, ...], complex] = defaultdict(complex)
                for mono, c in poly.items():
                    m1 = list(mono)
                    m1[to_d1] += 1
                    nxt[tuple(m1)] += c * _S
                    m2 = list(mono)
                    m2[to_d2] += 1
                    nxt[tuple(m2)] += c * sign * _S
                poly = nxt
        for mono, c in poly.items():
            out[(mono, spin)] += c * math.sqrt(math.prod(math.factorial(k) for k in mono))
    return FockAmplitudeState(dict(out), cap=state.cap, truncated=state.truncated, after_splitter=True)


_WINDOWS = [(b, d) for b in TimeBin for d in (Port.D1, Port.D2)]


def _fired(occ: Sequence[int], bins: Iterable[TimeBin]) -> frozenset:
    fired = set()
    for b in bins:
        for d in (Port.D1, Port.D2):
            if any(occ[_mode(b, d, c)] for c in PhotonClass):
                fired.add((b, d))
    return frozenset(fired)


def _pattern(fired: frozenset) -> ClickPattern:
    def one(b: TimeBin) -> Click:
        d1, d2 = (b, Port.D1) in fired, (b, Port.D2) in fired
        if d1 and d2:
            return Click.BOTH
        return Click.D1 if d1 else Click.D2 if d2 else Click.NONE

    return ClickPattern(one(TimeBin.EARLY), one(TimeBin.LATE))


Mixture = Sequence[tuple[float, FockAmplitudeState]]


def detect(
    state: FockAmplitudeState | Mixture,
    noise: NoiseParams = NoiseParams(),
    bins: Sequence[TimeBin] = (TimeBin.EARLY, TimeBin.LATE),
) -> dict[ClickPattern, DetectionOutcome]:
    """Threshold detection in each (time bin, detector) window plus independent dark clicks.

    Only windows in ``bins`` are observed.  Returns, for every click pattern
    with nonzero probability, its probability and the unnormalized
    conditional spin density matrix (``None`` when the state has no spin).
    The probability mass removed by truncation is excluded: outcome
    probabilities sum to ``1 - truncated`` of the (normalized) input.
    """
    mixture: Mixture = [(1.0, state)] if isinstance(state, FockAmplitudeState) else state
    bins = tuple(bins)
    # Photon-fired window set -> unnormalized spin matrix (or scalar mass).
    fired_mass: dict[frozenset, list] = {}
    for weight, st in mixture:
        if not st.after_splitter:
            raise ValueError("detect() expects a state after the beam splitter")
        by_occ: dict[tuple[int, ...], dict] = defaultdict(dict)
        for (occ, spin), amp in st.terms.items():
            by_occ[occ][spin] = by_occ[occ].get(spin, 0) + amp
        for occ, spins in by_occ.items():
            f = _fired(occ, bins)
            entry = fired_mass.setdefault(f, [0.0, None])
            if None in spins:
                entry[0] += weight * abs(spins[None]) ** 2
            else:
                v = np.array([spins.get(0, 0), spins.get(1, 0)], dtype=complex)
                rho = weight * np.outer(v, v.conj())
                entry[0] += float(np.trace(rho).real)
                entry[1] = rho if entry[1] is None else entry[1] + rho

    q = noise.p_noise
    windows = [w for w in _WINDOWS if w[0] in bins]
    out: dict[ClickPattern, DetectionOutcome] = {}
    for f, (mass, rho) in fired_mass.items():
        for k in range(len(windows) + 1):
            for dark in itertools.combinations(windows, k):
                pd = q**k * (1.0 - q) ** (len(windows) - k)
                if pd == 0.0:
                    continue
                pat = _pattern(f | frozenset(dark))
                o = out.setdefault(pat, DetectionOutcome())
                o.probability += pd * mass
                if rho is not None:
                    o.spin = pd * rho if o.spin is None else o.spin + pd * rho
    return out


def herald(pattern: ClickPattern) -> HeraldClass:
    """Same detector in both bins -> Psi+, different detectors -> Psi-; anything else invalid."""
    e, l = pattern.early, pattern.late
    if e in (Click.D1, Click.D2) and l in (Click.D1, Click.D2):
        return HeraldClass.PSI_PLUS if e == l else HeraldClass.PSI_MINUS
    return HeraldClass.INVALID


def is_valid_density_matrix(rho: np.ndarray, tol: float = 1e-10) -> bool:
    rho = np.asarray(rho)
    if rho.shape != (2, 2):
        return False
    if not np.allclose(rho, rho.conj().T, atol=tol, rtol=0):
        return False
    if abs(np.trace(rho).real - 1.0) > tol:
        return False
    return bool(np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() >= -tol)


# --- experiment assemblies -------------------------------------------------


def _wcs_input(wcs: WcsParams, eta: float, cap: int, single_photon: bool) -> FockAmplitudeState:
    amps: dict[int, complex] = {}
    if single_photon:
        q = wcs.qubit
        unit = WcsParams(1.0, wcs.leak_epsilon, wcs.theta, q)
        per_bin = prepare_wcs_amplitudes(unit)
    else:
        per_bin = prepare_wcs_amplitudes(wcs)
    for b, alpha in zip(TimeBin, per_bin):
        matched, orth = split_indistinguishability(alpha, eta)
        amps[_mode(b, Port.A, PhotonClass.MATCHED)] = matched
        amps[_mode(b, Port.A, PhotonClass.ORTH_WCS)] = orth
    if single_photon:
        return single_photon_state(amps, cap)
    return coherent_state(amps, cap)


def _nv_branch_state(branch: EmissionBranch, cap: int) -> FockAmplitudeState:
    terms: dict[Key, complex] = defaultdict(complex)
    for t in branch.terms:
        occ = [0] * N_MODES
        for b, extra in t.photons:
            occ[_mode(b, Port.B, PhotonClass.ORTH_NV if extra else PhotonClass.MATCHED)] += 1
        terms[(tuple(occ), t.spin)] += t.amplitude
    return FockAmplitudeState(dict(terms), cap=cap)


@dataclass
class TeleportStateResult:
    qubit: InputQubit
    p_psi_plus: float
    p_psi_minus: float
    rho: np.ndarray | None
    fidelity: float | None
    truncated: float
    rho_plus: np.ndarray | None = None
    rho_minus: np.ndarray | None = None

    @property
    def p_herald(self) -> float:
        return self.p_psi_plus + self.p_psi_minus

    @property
    def heralded(self) -> bool:
        return self.p_herald > 0

    def bloch(self) -> np.ndarray:
        r = self.rho
        return np.array([2 * r[0, 1].real, -2 * r[0, 1].imag, (r[0, 0] - r[1, 1]).real])


def _conditional(outcomes: dict[ClickPattern, DetectionOutcome], correction: bool):
    p = {HeraldClass.PSI_PLUS: 0.0, HeraldClass.PSI_MINUS: 0.0}
    rho = {HeraldClass.PSI_PLUS: np.zeros((2, 2), complex), HeraldClass.PSI_MINUS: np.zeros((2, 2), complex)}
    for pat, o in outcomes.items():
        h = herald(pat)
        if h is HeraldClass.INVALID:
            continue
        p[h] += o.probability
        rho[h] = rho[h] + o.spin
    if correction:
        rho[HeraldClass.PSI_MINUS] = _Z @ rho[HeraldClass.PSI_MINUS] @ _Z
    return p, rho


def teleport_outcomes(
    nv: NvParams,
    wcs: WcsParams,
    eta: float,
    noise: NoiseParams,
    *,
    cap: int = DEFAULT_CAP,
    single_photon_input: bool = False,
) -> tuple[dict[ClickPattern, DetectionOutcome], float]:
    """All click patterns with conditional spin states for one prepared input; second item is truncated mass."""
    photon = _wcs_input(wcs, eta, cap, single_photon_input)
    mixture = []
    truncated = 0.0
    for branch in nv_emission_state(nv):
        joint = _nv_branch_state(branch, cap).tensor(photon)
        truncated += branch.weight * joint.truncated
        mixture.append((branch.weight, beam_splitter(joint)))
    return detect(mixture, noise), truncated


def teleport_state_oracle(
    nv: NvParams,
    wcs: WcsParams,
    eta: float,
    noise: NoiseParams = NoiseParams(),
    *,
    correction: bool = True,
    cap: int = DEFAULT_CAP,
    single_photon_input: bool = False,
) -> TeleportStateResult:
    """Herald probabilities and post-feedforward spin state for the qubit in ``wcs``.

    Psi- heralds receive the Z correction.  When no herald is possible the
    result carries ``rho=None`` and ``fidelity=None``.
    """
    outcomes, truncated = teleport_outcomes(
        nv, wcs, eta, noise, cap=cap, single_photon_input=single_photon_input
    )
    p, rho_h = _conditional(outcomes, correction)
    total = p[HeraldClass.PSI_PLUS] + p[HeraldClass.PSI_MINUS]
    if total <= 0:
        return TeleportStateResult(wcs.qubit, 0.0, 0.0, None, None, truncated)
    rho = (rho_h[HeraldClass.PSI_PLUS] + rho_h[HeraldClass.PSI_MINUS]) / total
    psi = wcs.qubit.spin_vector()
    fidelity = float((psi.conj() @ rho @ psi).real)
    per_class = {
        h: rho_h[h] / p[h] if p[h] > 0 else None for h in (HeraldClass.PSI_PLUS, HeraldClass.PSI_MINUS)
    }
    return TeleportStateResult(
        wcs.qubit,
        p[HeraldClass.PSI_PLUS],
        p[HeraldClass.PSI_MINUS],
        rho,
        fidelity,
        truncated,
        per_class[HeraldClass.PSI_PLUS],
        per_class[HeraldClass.PSI_MINUS],
    )


@dataclass
class TeleportOracleResult:
    states: dict[str, TeleportStateResult]
    axis_fidelity: dict[str, float]
    f_avg: float | None

    @property
    def fidelities(self) -> dict[str, float | None]:
        return {k: s.fidelity for k, s in self.states.items()}

    @property
    def truncated(self) -> float:
        return max(s.truncated for s in self.states.values())


def teleport_oracle(
    nv: NvParams,
    wcs: WcsParams,
    eta: float,
    noise: NoiseParams = NoiseParams(),
    *,
    correction: bool = True,
    cap: int = DEFAULT_CAP,
    single_photon_input: bool = False,
) -> TeleportOracleResult:
    """Run the enumeration for all six cardinal inputs; ``wcs.qubit`` is ignored."""
    states = {
        label: teleport_state_oracle(
            nv, wcs.with_qubit(q), eta, noise,
            correction=correction, cap=cap, single_photon_input=single_photon_input,
        )
        for label, q in CARDINAL_STATES.items()
    }
    if not all(s.heralded for s in states.values()):
        return TeleportOracleResult(states, {}, None)
    axis = {
        ax: (states["+" + ax].fidelity + states["-" + ax].fidelity) / 2 for ax in ("Z", "X", "Y")
    }
    return TeleportOracleResult(states, axis, sum(axis.values()) / 3)


# --- two-photon interference ------------------------------------------------


def _tpqi_mixture(nv: NvParams | None, mu: float, eta: float, cap: int) -> list:
    e = TimeBin.EARLY
    if mu > 0:
        matched, orth = split_indistinguishability(math.sqrt(mu), eta)
        photon = coherent_state(
            {_mode(e, Port.A, PhotonClass.MATCHED): matched, _mode(e, Port.A, PhotonClass.ORTH_WCS): orth}, cap
        )
    else:
        photon = FockAmplitudeState.vacuum(cap=cap)
    branches = []
    if nv is None:
        branches.append((1.0, FockAmplitudeState.vacuum(cap=cap)))
    else:
        dist = nv_photon_number_dist(nv)
        one = [0] * N_MODES
        one[_mode(e, Port.B, PhotonClass.MATCHED)] = 1
        two = list(one)
        two[_mode(e, Port.B, PhotonClass.ORTH_NV)] = 1
        branches += [
            (dist[0], FockAmplitudeState.vacuum(cap=cap)),
            (dist[1], FockAmplitudeState({(tuple(one), None): 1.0 + 0j}, cap=cap)),
            (dist[2], FockAmplitudeState({(tuple(two), None): 1.0 + 0j}, cap=cap)),
        ]
    mixture = []
    for w, st in branches:
        if w > 0:
            joint = st.tensor(photon)
            mixture.append((w, joint))
    return mixture


def window_click_distribution(
    nv: NvParams | None,
    mu: float,
    eta: float,
    noise: NoiseParams = NoiseParams(),
    cap: int = DEFAULT_CAP,
) -> dict[Click, float]:
    """Click distribution in one detection window with the NV and/or weak coherent pulse present.

    ``nv=None`` or ``mu=0`` removes that source.  The dropped truncation
    mass is returned under the key ``None``.
    """
    if mu < 0:
        raise DomainError("mu must be >= 0")
    mixture = _tpqi_mixture(nv, mu, eta, cap)
    truncated = math.fsum(w * st.truncated for w, st in mixture)
    outcomes = detect([(w, beam_splitter(st)) for w, st in mixture], noise, bins=(TimeBin.EARLY,))
    dist = {c: 0.0 for c in Click}
    for pat, o in outcomes.items():
        dist[pat.early] += o.probability
    dist[None] = truncated
    return dist


@dataclass(frozen=True)
class TpqiOracleResult:
    p_ind: float
    p_dist: float
    visibility: float
    truncated: float


def tpqi_oracle(
    nv: NvParams, mu: float, eta: float, noise: NoiseParams = NoiseParams(), cap: int = DEFAULT_CAP
) -> TpqiOracleResult:
    """Zero-delay coincidence probabilities with overlap ``eta`` and with ``eta = 0``."""
    ind = window_click_distribution(nv, mu, eta, noise, cap)
    dist = window_click_distribution(nv, mu, 0.0, noise, cap)
    p_ind, p_dist = ind[Click.BOTH], dist[Click.BOTH]
    if p_dist <= 0:
        raise UndefinedVisibilityError("distinguishable coincidence probability is zero")
    return TpqiOracleResult(p_ind, p_dist, 1.0 - p_ind / p_dist, max(ind[None], dist[None]))


def g2_estimate(p_coinc: float, p_d1: float, p_d2: float) -> float:
    """Zero-delay autocorrelation from coincidence and single-detector click probabilities."""
    if p_d1 <= 0 or p_d2 <= 0:
        raise DomainError("single-detector click probabilities must be positive")
    if p_coinc < 0:
        raise DomainError("coincidence probability must be >= 0")
    return p_coinc / (p_d1 * p_d2)
