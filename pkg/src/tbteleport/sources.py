"""Photon sources: Poissonian weak coherent time-bin qubits and the NV emitter.

The weak coherent source is described by per-time-bin coherent amplitudes.
Leakage of an imperfect intensity modulator adds extra light in the time bin
orthogonal to a pole state; it is added *on top of* the nominal mean photon
number (``|alpha_main|^2 = mu``, ``|alpha_leak|^2 = leak_epsilon * mu``).

The NV source emits its photon in the early bin when the spin is ``|1>`` and
in the late bin when it is ``|0>``.  A double excitation produces a second
photon in the same bin but in an internal mode that is distinguishable from
every other photon in the experiment.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import gammainc

from .errors import DomainError

__all__ = [
    "TimeBin",
    "InputQubit",
    "CARDINAL_STATES",
    "WcsParams",
    "NvParams",
    "PhotonNumberDist",
    "SpinPhotonTerm",
    "EmissionBranch",
    "p_de_from_g2",
    "wcs_photon_number_dist",
    "nv_photon_number_dist",
    "prepare_wcs_amplitudes",
    "nv_emission_state",
]

_NORM_TOL = 1e-12


class TimeBin(Enum):
    EARLY = 0
    LATE = 1


@dataclass(frozen=True)
class InputQubit:
    """Time-bin qubit ``a|E> + exp(i*theta) b|L>`` with real ``a, b >= 0``."""

    a: float
    b: float
    theta: float = 0.0
    label: str = "general"

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise DomainError("qubit amplitudes a, b must be non-negative reals")
        if abs(self.a**2 + self.b**2 - 1.0) > _NORM_TOL:
            raise DomainError(f"qubit not normalized: a^2 + b^2 = {self.a**2 + self.b**2!r}")
        if not math.isfinite(self.theta):
            raise DomainError("qubit phase must be finite")

    @classmethod
    def cardinal(cls, label: str) -> "InputQubit":
        try:
            return CARDINAL_STATES[label]
        except KeyError:
            raise DomainError(f"unknown cardinal state {label!r}; expected one of {sorted(CARDINAL_STATES)}") from None

    @property
    def is_pole(self) -> bool:
        return self.a == 0.0 or self.b == 0.0

    @property
    def axis(self) -> str | None:
        """Bloch axis ('Z', 'X', 'Y') for cardinal states, else None."""
        if self.label in CARDINAL_STATES:
            return self.label[1]
        return None

    def spin_vector(self) -> np.ndarray:
        """Ideal teleported spin state; |E> maps to |0>, |L> to |1>."""
        return np.array([self.a, self.b * cmath.exp(1j * self.theta)], dtype=complex)

    def orthogonal(self) -> np.ndarray:
        v = self.spin_vector()
        return np.array([-np.conj(v[1]), np.conj(v[0])], dtype=complex)


_H = 1.0 / math.sqrt(2.0)
CARDINAL_STATES: dict[str, InputQubit] = {
    "+Z": InputQubit(1.0, 0.0, 0.0, "+Z"),
    "-Z": InputQubit(0.0, 1.0, 0.0, "-Z"),
    "+X": InputQubit(_H, _H, 0.0, "+X"),
    "-X": InputQubit(_H, _H, math.pi, "-X"),
    "+Y": InputQubit(_H, _H, math.pi / 2, "+Y"),
    "-Y": InputQubit(_H, _H, -math.pi / 2, "-Y"),
}


@dataclass(frozen=True)
class WcsParams:
    """Weak coherent time-bin source.

    ``theta`` is an extra phase applied to the late bin on top of the
    qubit's own phase (e.g. a phase-modulator offset); it is 0 for the
    nominal cardinal states.
    """

    mu: float
    leak_epsilon: float = 0.0
    theta: float = 0.0
    qubit: InputQubit = field(default_factory=lambda: CARDINAL_STATES["+X"])

    def __post_init__(self):
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise DomainError(f"mu must be finite and >= 0, got {self.mu!r}")
        if not (0.0 <= self.leak_epsilon < 1.0):
            raise DomainError(f"leak_epsilon must lie in [0, 1), got {self.leak_epsilon!r}")
        if not math.isfinite(self.theta):
            raise DomainError("theta must be finite")

    def with_qubit(self, qubit: InputQubit | str) -> "WcsParams":
        if isinstance(qubit, str):
            qubit = InputQubit.cardinal(qubit)
        return WcsParams(self.mu, self.leak_epsilon, self.theta, qubit)


def p_de_from_g2(g2: float, p_nv: float) -> float:
    """Double-excitation probability that makes the NV two-photon coincidence equal ``p_nv^2 g2 / 4``.

    With the extra photon distinguishable, a double emission yields a
    cross-detector coincidence half of the time, so ``p_nv * p_de / 2``
    must equal ``p_nv^2 g2 / 4``.
    """
    if g2 < 0 or not (0 <= p_nv <= 1):
        raise DomainError("need g2 >= 0 and p_nv in [0, 1]")
    p_de = g2 * p_nv / 2.0
    if p_de > 1:
        raise DomainError(f"g2 * p_nv / 2 = {p_de!r} exceeds 1")
    return p_de


@dataclass(frozen=True)
class NvParams:
    p_nv: float
    g2: float = 0.0
    p_de: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.p_nv <= 1.0):
            raise DomainError(f"p_nv must lie in [0, 1], got {self.p_nv!r}")
        if not (self.g2 >= 0 and math.isfinite(self.g2)):
            raise DomainError(f"g2 must be finite and >= 0, got {self.g2!r}")
        if not (0.0 <= self.p_de <= 1.0):
            raise DomainError(f"p_de must lie in [0, 1], got {self.p_de!r}")

    @classmethod
    def from_g2(cls, p_nv: float, g2: float) -> "NvParams":
        return cls(p_nv=p_nv, g2=g2, p_de=p_de_from_g2(g2, p_nv))


@dataclass(frozen=True)
class PhotonNumberDist:
    probs: tuple[float, ...]
    truncation_tail: float = 0.0

    def __post_init__(self):
        if any(not (0.0 <= p <= 1.0) for p in self.probs):
            raise DomainError("probabilities must lie in [0, 1]")
        total = math.fsum(self.probs) + self.truncation_tail
        if abs(total - 1.0) > _NORM_TOL:
            raise DomainError(f"distribution mass {total!r} != 1")

    def __getitem__(self, n: int) -> float:
        return self.probs[n] if n < len(self.probs) else 0.0

    @property
    def n_max(self) -> int:
        return len(self.probs) - 1


def wcs_photon_number_dist(mu: float, n_max: int = 3) -> PhotonNumberDist:
    """Poisson photon-number distribution truncated at ``n_max``."""
    if not (mu >= 0 and math.isfinite(mu)):
        raise DomainError(f"mu must be finite and >= 0, got {mu!r}")
    if n_max < 0:
        raise DomainError("n_max must be >= 0")
    if mu == 0:
        probs = [1.0] + [0.0] * n_max
    else:
        log_mu = math.log(mu)
        probs = [math.exp(n * log_mu - mu - math.lgamma(n + 1)) for n in range(n_max + 1)]
    # P(N >= n_max + 1) directly; avoids cancellation in 1 - sum(probs).
    tail = float(gammainc(n_max + 1, mu)) if mu > 0 else 0.0
    return PhotonNumberDist(tuple(probs), tail)


def nv_photon_number_dist(p: NvParams) -> PhotonNumberDist:
    return PhotonNumberDist((1.0 - p.p_nv, p.p_nv * (1.0 - p.p_de), p.p_nv * p.p_de), 0.0)


def prepare_wcs_amplitudes(w: WcsParams) -> tuple[complex, complex]:
    """Coherent amplitudes ``(alpha_E, alpha_L)`` of the prepared time-bin state.

    Pole states get a leak amplitude ``sqrt(leak_epsilon * mu)`` in the
    empty bin, so the total mean photon number is ``mu * (1 + leak_epsilon)``
    for poles and ``mu`` otherwise.
    """
    q = w.qubit
    root_mu = math.sqrt(w.mu)
    alpha_e = complex(q.a * root_mu)
    alpha_l = q.b * root_mu * cmath.exp(1j * (q.theta + w.theta))
    if q.is_pole and w.leak_epsilon > 0:
        leak = math.sqrt(w.leak_epsilon * w.mu)
        if q.b == 0.0:
            alpha_l = leak * cmath.exp(1j * w.theta)
        else:
            alpha_e = complex(leak)
    return alpha_e, complex(alpha_l)


def wcs_total_mean(w: WcsParams) -> float:
    if w.qubit.is_pole:
        return w.mu * (1.0 + w.leak_epsilon)
    return w.mu


@dataclass(frozen=True)
class SpinPhotonTerm:
    """One amplitude of a spin-photon state.

    ``photons`` lists (time bin, extra) pairs; ``extra`` marks the
    distinguishable photon from a double excitation.
    """

    amplitude: complex
    spin: int
    photons: tuple[tuple[TimeBin, bool], ...]


@dataclass(frozen=True)
class EmissionBranch:
    """A pure spin-photon component occurring with classical probability ``weight``."""

    weight: float
    terms: tuple[SpinPhotonTerm, ...]
    label: str


def nv_emission_state(p: NvParams) -> tuple[EmissionBranch, ...]:
    """Spin-photon branches after the two-pulse time-bin emission sequence.

    The entangled component is ``(|1>|E> + |0>|L>)/sqrt(2)``.  An undetected
    photon still carries its time bin away, so the no-photon component is
    the spin dephased in Z, i.e. an equal mixture of ``|0>`` and ``|1>``
    with the photonic modes in vacuum.
    """
    w_none = 1.0 - p.p_nv
    w_single = p.p_nv * (1.0 - p.p_de)
    w_double = p.p_nv * p.p_de
    E, L = TimeBin.EARLY, TimeBin.LATE
    branches = [
        EmissionBranch(
            w_single,
            (
                SpinPhotonTerm(_H, 1, ((E, False),)),
                SpinPhotonTerm(_H, 0, ((L, False),)),
            ),
            "single",
        ),
        EmissionBranch(w_none / 2, (SpinPhotonTerm(1.0, 1, ()),), "lost_spin1"),
        EmissionBranch(w_none / 2, (SpinPhotonTerm(1.0, 0, ()),), "lost_spin0"),
        EmissionBranch(
            w_double,
            (
                SpinPhotonTerm(_H, 1, ((E, False), (E, True))),
                SpinPhotonTerm(_H, 0, ((L, False), (L, True))),
            ),
            "double",
        ),
    ]
    return tuple(b for b in branches if b.weight > 0)
