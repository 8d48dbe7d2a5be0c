"""Monte Carlo reproduction of the TPQI and teleportation experiment sequences.

Per-window click probabilities and per-herald spin states come from the
exact oracle in :mod:`tbteleport.fock`; this module only adds sampling
statistics, sequencing (trains, CR gating, attempt caps) and bookkeeping.

Randomness
----------
Work is cut into fixed chunks (``TPQI_CHUNK_REPS`` train repetitions or
``TELEPORT_CHUNK_EPISODES`` teleportation sequences).  Chunk ``c`` draws
from ``numpy.random.Generator(PCG64(SeedSequence(seed, spawn_key=key)))``
with ``key = (0, c)`` for TPQI and ``(1, state_index, c)`` for
teleportation.  Chunks are independent and summed in index order, so
results do not depend on the number of worker threads.  Chunk sizes and
stream keys are part of the reproducibility contract and must not change.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .analytics import TeleportModelParams, readout_fidelity
from .errors import DomainError
from .fock import (
    Click,
    HeraldClass,
    NoiseParams,
    teleport_state_oracle,
    window_click_distribution,
)
from .sources import CARDINAL_STATES, NvParams

__all__ = [
    "SequenceConfig",
    "TimetagRecord",
    "Timetags",
    "BinDiffHistogram",
    "TpqiRun",
    "TeleportStateTally",
    "TeleportRun",
    "run_tpqi_experiment",
    "run_teleport_experiment",
    "histogram_bin_difference",
    "expected_histograms",
    "TPQI_CHUNK_REPS",
    "TELEPORT_CHUNK_EPISODES",
]

TPQI_CHUNK_REPS = 1_000_000
TELEPORT_CHUNK_EPISODES = 1_000_000

# Window kinds inside a bin.
NV_WINDOW, WCS_WINDOW = 0, 1
INDIST, DIST = 0, 1


@dataclass(frozen=True)
class SequenceConfig:
    """Timing and gating of the experiment sequences (times in ns)."""

    bins_per_train: int = 10
    train_repetitions: int = 100
    bin_spacing: float = 500.0
    distinguishable_offset: float = 50.0
    coincidence_window: float = 30.0
    teleport_attempt_cap: int = 50
    herald_window_hw: float = 50.0
    herald_window_analysis: float = 20.0
    time_bin_separation: float = 300.0
    cr_pass_prob: float = 1.0

    def __post_init__(self):
        for name in (
            "bins_per_train", "train_repetitions", "bin_spacing", "distinguishable_offset",
            "coincidence_window", "teleport_attempt_cap", "herald_window_hw",
            "herald_window_analysis", "time_bin_separation", "cr_pass_prob",
        ):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.cr_pass_prob > 1:
            raise DomainError("cr_pass_prob must be <= 1")
        if self.herald_window_analysis > self.herald_window_hw:
            raise DomainError("analysis herald window must not exceed the hardware window")
        if self.distinguishable_offset >= self.bin_spacing:
            raise DomainError("distinguishable_offset must be smaller than bin_spacing")
        if self.distinguishable_offset < self.coincidence_window:
            raise DomainError("distinguishable_offset must separate the NV and converted windows")
        if self.distinguishable_offset + self.coincidence_window > self.bin_spacing:
            raise DomainError("converted-photon window overruns the bin")

    @property
    def train_duration(self) -> float:
        return self.bins_per_train * self.bin_spacing

    @property
    def repetition_duration(self) -> float:
        return 2 * self.train_duration


@dataclass(frozen=True)
class TimetagRecord:
    detector: int  # 1 or 2
    time: float
    shot_index: int


@dataclass
class Timetags:
    """Columnar timetag store; ``shot`` is the train-repetition index."""

    shot: np.ndarray
    detector: np.ndarray
    time_ns: np.ndarray

    @classmethod
    def empty(cls) -> "Timetags":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int8), np.zeros(0, float))

    @classmethod
    def concat(cls, parts: list["Timetags"]) -> "Timetags":
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.shot for p in parts]),
            np.concatenate([p.detector for p in parts]),
            np.concatenate([p.time_ns for p in parts]),
        )

    def __len__(self) -> int:
        return len(self.shot)

    def __iter__(self) -> Iterator[TimetagRecord]:
        for s, d, t in zip(self.shot, self.detector, self.time_ns):
            yield TimetagRecord(int(d), float(t), int(s))

    def sorted(self) -> "Timetags":
        order = np.lexsort((self.time_ns, self.shot))
        return Timetags(self.shot[order], self.detector[order], self.time_ns[order])


@dataclass
class BinDiffHistogram:
    """Cross-detector coincidences versus bin difference ``bin(D2) - bin(D1)``.

    For the distinguishable train, ``by_window`` splits the counts into
    pairs inside the NV window, inside the converted-photon window, and
    across the two.
    """

    deltas: np.ndarray
    counts: np.ndarray
    by_window: dict[str, np.ndarray] | None = None

    @classmethod
    def zeros(cls, bins_per_train: int, with_windows: bool = False) -> "BinDiffHistogram":
        d = np.arange(-(bins_per_train - 1), bins_per_train)
        w = {k: np.zeros(len(d), np.int64) for k in ("nv", "converted", "combined")} if with_windows else None
        return cls(d, np.zeros(len(d), np.int64), w)

    def at(self, delta: int) -> int:
        return int(self.counts[delta - self.deltas[0]])

    def __iadd__(self, other: "BinDiffHistogram") -> "BinDiffHistogram":
        self.counts = self.counts + other.counts
        if self.by_window is not None and other.by_window is not None:
            self.by_window = {k: v + other.by_window[k] for k, v in self.by_window.items()}
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinDiffHistogram):
            return NotImplemented
        same = np.array_equal(self.deltas, other.deltas) and np.array_equal(self.counts, other.counts)
        if self.by_window is None or other.by_window is None:
            return same and self.by_window is other.by_window
        return same and all(np.array_equal(self.by_window[k], other.by_window[k]) for k in self.by_window)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _bernoulli_positions(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Sorted indices of successes in ``n`` Bernoulli(p) trials, via geometric gaps."""
    if n <= 0 or p <= 0:
        return np.zeros(0, np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    parts = []
    last = -1
    while True:
        m = int(n * p + 6 * math.sqrt(n * p) + 16)
        pos = last + np.cumsum(rng.geometric(p, size=m))
        if pos[-1] >= n:
            parts.append(pos[pos < n])
            break
        parts.append(pos)
        last = int(pos[-1])
    return np.concatenate(parts).astype(np.int64)


_CATEGORIES = (Click.D1, Click.D2, Click.BOTH)


def _window_probs(dist: dict) -> np.ndarray:
    return np.array([dist[c] for c in _CATEGORIES])


@dataclass
class _Events:
    """Single-detector click events of one chunk."""

    rep: np.ndarray
    train: np.ndarray
    bin: np.ndarray
    window: np.ndarray
    detector: np.ndarray  # 1 or 2
    jitter: np.ndarray


def _sample_windows(
    rng: np.random.Generator, n_windows: int, probs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Positions of windows with any click and the click category index for each."""
    p_click = float(probs.sum())
    pos = _bernoulli_positions(rng, n_windows, p_click)
    if len(pos) == 0:
        return pos, np.zeros(0, np.int64)
    cat = rng.choice(3, size=len(pos), p=probs / p_click)
    return pos, cat


def _tpqi_chunk(
    seed: int,
    chunk: int,
    first_rep: int,
    n_reps: int,
    cfg: SequenceConfig,
    probs: dict[tuple[int, int], np.ndarray],
    record: bool,
):
    rng = _rng(seed, 0, chunk)
    # CR blocks are aligned with absolute repetition indices.
    blk_first = first_rep // cfg.train_repetitions
    blk_last = (first_rep + n_reps - 1) // cfg.train_repetitions
    passed = rng.random(blk_last - blk_first + 1) < cfg.cr_pass_prob
    nb = cfg.bins_per_train
    parts = []
    for (train, window), pr in probs.items():
        pos, cat = _sample_windows(rng, n_reps * nb, pr)
        rep, b = np.divmod(pos, nb)
        fires_d1 = cat != 1
        fires_d2 = cat != 0
        for det, mask in ((1, fires_d1), (2, fires_d2)):
            k = int(mask.sum())
            parts.append(
                _Events(
                    rep[mask] + first_rep,
                    np.full(k, train, np.int8),
                    b[mask],
                    np.full(k, window, np.int8),
                    np.full(k, det, np.int8),
                    rng.random(k) * cfg.coincidence_window,
                )
            )
    ev = _Events(*(np.concatenate([getattr(p, f) for p in parts]) for f in _Events.__dataclass_fields__))
    keep = passed[ev.rep // cfg.train_repetitions - blk_first]
    ev = _Events(*(getattr(ev, f)[keep] for f in _Events.__dataclass_fields__))
    n_valid_reps = int(
        sum(
            min((blk + 1) * cfg.train_repetitions, first_rep + n_reps) - max(blk * cfg.train_repetitions, first_rep)
            for blk, ok in zip(range(blk_first, blk_last + 1), passed)
            if ok
        )
    )
    hists = _histograms_from_events(ev, cfg)
    tags = _events_to_timetags(ev, cfg) if record else None
    return hists, n_valid_reps, tags


def _events_to_timetags(ev: _Events, cfg: SequenceConfig) -> Timetags:
    offset = np.where(ev.window == WCS_WINDOW, cfg.distinguishable_offset, 0.0)
    t = ev.train * cfg.train_duration + ev.bin * cfg.bin_spacing + offset + ev.jitter
    return Timetags(ev.rep.astype(np.int64), ev.detector.astype(np.int8), t).sorted()


def _pairs(key1: np.ndarray, key2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs (i, j) with key1[i] == key2[j]."""
    order = np.argsort(key2, kind="stable")
    k2 = key2[order]
    lo = np.searchsorted(k2, key1, side="left")
    hi = np.searchsorted(k2, key1, side="right")
    n = hi - lo
    i = np.repeat(np.arange(len(key1)), n)
    starts = np.repeat(lo, n)
    within = np.arange(len(i)) - np.repeat(np.cumsum(n) - n, n)
    j = order[starts + within]
    return i, j


def _histograms_from_events(ev: _Events, cfg: SequenceConfig) -> tuple[BinDiffHistogram, BinDiffHistogram]:
    nb = cfg.bins_per_train
    ind = BinDiffHistogram.zeros(nb)
    dis = BinDiffHistogram.zeros(nb, with_windows=True)
    key = ev.rep.astype(np.int64) * 2 + ev.train
    d1 = np.flatnonzero(ev.detector == 1)
    d2 = np.flatnonzero(ev.detector == 2)
    i, j = _pairs(key[d1], key[d2])
    a, b = d1[i], d2[j]
    delta = ev.bin[b] - ev.bin[a] + (nb - 1)
    train = ev.train[a]
    nbins = 2 * nb - 1
    ind.counts = np.bincount(delta[train == INDIST], minlength=nbins).astype(np.int64)
    m = train == DIST
    dis.counts = np.bincount(delta[m], minlength=nbins).astype(np.int64)
    w1, w2 = ev.window[a][m], ev.window[b][m]
    dsel = delta[m]
    dis.by_window = {
        "nv": np.bincount(dsel[(w1 == NV_WINDOW) & (w2 == NV_WINDOW)], minlength=nbins).astype(np.int64),
        "converted": np.bincount(dsel[(w1 == WCS_WINDOW) & (w2 == WCS_WINDOW)], minlength=nbins).astype(np.int64),
        "combined": np.bincount(dsel[w1 != w2], minlength=nbins).astype(np.int64),
    }
    return ind, dis


@dataclass
class TpqiRun:
    indistinguishable: BinDiffHistogram
    distinguishable: BinDiffHistogram
    valid_repetitions: int
    total_repetitions: int
    visibility: float
    visibility_stderr: float
    window_probs: dict[str, dict]
    expected_visibility: float
    timetags: Timetags | None = None

    @property
    def attempts(self) -> int:
        """Emission bins of the indistinguishable train that entered the estimator."""
        return self.valid_repetitions * (len(self.indistinguishable.deltas) + 1) // 2


def _visibility_estimate(n_ind: int, n_dist: int, n_bins: int) -> tuple[float, float]:
    """``V = 1 - n_ind/n_dist`` with a delta-method binomial standard error.

    A zero indistinguishable count is replaced by one count in the error
    only, so an empty bin does not claim zero uncertainty.
    """
    if n_dist == 0 or n_bins == 0:
        return math.nan, math.nan
    v = 1.0 - n_ind / n_dist
    a = max(n_ind, 1)
    rel_var = (1 - a / n_bins) / a + max(1 - n_dist / n_bins, 0.0) / n_dist
    return v, (a / n_dist) * math.sqrt(rel_var)


def tpqi_window_distributions(nv: NvParams, mu: float, eta: float, noise: NoiseParams) -> dict[str, dict]:
    return {
        "indistinguishable": window_click_distribution(nv, mu, eta, noise),
        "nv_window": window_click_distribution(nv, 0.0, 0.0, noise),
        "converted_window": window_click_distribution(None, mu, 0.0, noise),
    }


def run_tpqi_experiment(
    cfg: SequenceConfig,
    nv: NvParams,
    mu: float,
    eta: float,
    noise: NoiseParams,
    seed: int,
    shots: int,
    *,
    workers: int = 1,
    record_timetags: bool = False,
) -> TpqiRun:
    """Simulate ``shots`` repetitions of (indistinguishable train, distinguishable train).

    Repetitions are grouped into CR blocks of ``cfg.train_repetitions``;
    a block is kept only if its validating CR check passes.
    """
    if shots <= 0:
        raise DomainError("need at least one shot")
    wd = tpqi_window_distributions(nv, mu, eta, noise)
    probs = {
        (INDIST, NV_WINDOW): _window_probs(wd["indistinguishable"]),
        (DIST, NV_WINDOW): _window_probs(wd["nv_window"]),
        (DIST, WCS_WINDOW): _window_probs(wd["converted_window"]),
    }
    chunks = [(c, c * TPQI_CHUNK_REPS, min(TPQI_CHUNK_REPS, shots - c * TPQI_CHUNK_REPS))
              for c in range(-(-shots // TPQI_CHUNK_REPS))]

    def work(args):
        c, first, n = args
        return _tpqi_chunk(seed, c, first, n, cfg, probs, record_timetags)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(a) for a in chunks]

    ind = BinDiffHistogram.zeros(cfg.bins_per_train)
    dis = BinDiffHistogram.zeros(cfg.bins_per_train, with_windows=True)
    valid = 0
    tags = []
    for (h_i, h_d), n_valid, t in results:
        ind += h_i
        dis += h_d
        valid += n_valid
        if t is not None:
            tags.append(t)
    v, err = _visibility_estimate(ind.at(0), dis.at(0), valid * cfg.bins_per_train)
    e_ind, e_dis = expected_histograms(cfg, wd, 1)
    zero = cfg.bins_per_train - 1
    return TpqiRun(
        ind, dis, valid, shots, v, err, wd, 1.0 - e_ind[zero] / e_dis[zero],
        Timetags.concat(tags) if record_timetags else None,
    )


def expected_histograms(
    cfg: SequenceConfig, window_probs: dict[str, dict], n_reps: int
) -> tuple[np.ndarray, np.ndarray]:
    """Expected coincidence counts per bin difference for both trains.

    Different bins are independent, so a pair of bins ``|delta|`` apart
    contributes the product of the single-detector click rates, and there
    are ``bins_per_train - |delta|`` such pairs per train.
    """

    def rate(d, det):
        return d[Click.D1 if det == 1 else Click.D2] + d[Click.BOTH]

    nb = cfg.bins_per_train
    deltas = np.arange(-(nb - 1), nb)
    ind_d = window_probs["indistinguishable"]
    nv_d, wcs_d = window_probs["nv_window"], window_probs["converted_window"]
    r1_i, r2_i = rate(ind_d, 1), rate(ind_d, 2)
    r1_d = rate(nv_d, 1) + rate(wcs_d, 1)
    r2_d = rate(nv_d, 2) + rate(wcs_d, 2)
    pairs = (nb - np.abs(deltas)).astype(float) * n_reps
    ind = pairs * r1_i * r2_i
    dis = pairs * r1_d * r2_d
    zero = nb - 1
    ind[zero] = nb * n_reps * ind_d[Click.BOTH]
    dis[zero] = nb * n_reps * (
        nv_d[Click.BOTH] + wcs_d[Click.BOTH] + rate(nv_d, 1) * rate(wcs_d, 2) + rate(wcs_d, 1) * rate(nv_d, 2)
    )
    return ind, dis


@dataclass
class HistogramReport:
    indistinguishable: BinDiffHistogram
    distinguishable: BinDiffHistogram
    rejected: list[tuple[int, str]] = field(default_factory=list)


def histogram_bin_difference(timetags: Timetags | Iterable, cfg: SequenceConfig) -> HistogramReport:
    """Rebuild both bin-difference histograms from raw timetags.

    Records are assigned to (train, bin, window) from their time within the
    repetition.  Records that fall outside every detection window, carry an
    unknown detector or a time outside the repetition are rejected and
    listed by record index.
    """
    if not isinstance(timetags, Timetags):
        rows = [(r.shot_index, r.detector, r.time) if isinstance(r, TimetagRecord) else tuple(r) for r in timetags]
        if rows:
            s, d, t = zip(*rows)
            timetags = Timetags(np.asarray(s, np.int64), np.asarray(d, np.int8), np.asarray(t, float))
        else:
            timetags = Timetags.empty()
    t = timetags.time_ns
    rejected: list[tuple[int, str]] = []
    ok = np.ones(len(t), bool)
    bad_det = ~np.isin(timetags.detector, (1, 2))
    bad_time = ~np.isfinite(t) | (t < 0) | (t >= cfg.repetition_duration)
    bad_shot = timetags.shot < 0
    with np.errstate(invalid="ignore"):
        train = np.floor_divide(t, cfg.train_duration)
        within = t - train * cfg.train_duration
        b = np.floor_divide(within, cfg.bin_spacing)
        phase = within - b * cfg.bin_spacing
    in_nv = phase < cfg.coincidence_window
    in_wcs = (train == DIST) & (phase >= cfg.distinguishable_offset) & (
        phase < cfg.distinguishable_offset + cfg.coincidence_window
    )
    outside = ~(in_nv | in_wcs) & ~bad_time
    for idx in np.flatnonzero(bad_det | bad_time | bad_shot | outside):
        if bad_det[idx]:
            rejected.append((int(idx), f"unknown detector {timetags.detector[idx]!r}"))
        elif bad_time[idx] or bad_shot[idx]:
            rejected.append((int(idx), f"time {t[idx]!r} or shot {timetags.shot[idx]!r} outside the repetition"))
        else:
            rejected.append((int(idx), f"time {t[idx]!r} outside every detection window"))
    ok &= ~(bad_det | bad_time | bad_shot | outside)
    ev = _Events(
        timetags.shot[ok].astype(np.int64),
        train[ok].astype(np.int8),
        b[ok].astype(np.int64),
        np.where(in_nv[ok], NV_WINDOW, WCS_WINDOW).astype(np.int8),
        timetags.detector[ok].astype(np.int8),
        np.zeros(int(ok.sum())),
    )
    ind, dis = _histograms_from_events(ev, cfg)
    return HistogramReport(ind, dis, rejected)


# --- teleportation -----------------------------------------------------------


@dataclass
class TeleportStateTally:
    label: str
    episodes: int
    valid_episodes: int
    attempts: int
    heralds_plus: int
    heralds_minus: int
    r_ii: int
    r_ji: int
    max_attempts_in_sequence: int
    expected_fidelity: float | None

    @property
    def heralds(self) -> int:
        return self.heralds_plus + self.heralds_minus

    @property
    def has_data(self) -> bool:
        return self.r_ii + self.r_ji > 0

    @property
    def fidelity(self) -> float | None:
        return readout_fidelity(self.r_ii, self.r_ji) if self.has_data else None

    @property
    def fidelity_stderr(self) -> float | None:
        if not self.has_data:
            return None
        f = self.fidelity
        return math.sqrt(f * (1 - f) / (self.r_ii + self.r_ji))


@dataclass
class TeleportRun:
    states: dict[str, TeleportStateTally]
    correction: bool

    @property
    def has_data(self) -> bool:
        return all(s.has_data for s in self.states.values())

    @property
    def f_avg(self) -> float | None:
        if not self.has_data:
            return None
        s = self.states
        return sum((s["+" + a].fidelity + s["-" + a].fidelity) / 2 for a in "ZXY") / 3

    @property
    def f_avg_stderr(self) -> float | None:
        if not self.has_data:
            return None
        return math.sqrt(sum(t.fidelity_stderr**2 for t in self.states.values())) / 6

    @property
    def expected_f_avg(self) -> float | None:
        s = self.states
        if any(t.expected_fidelity is None for t in s.values()):
            return None
        return sum((s["+" + a].expected_fidelity + s["-" + a].expected_fidelity) / 2 for a in "ZXY") / 3


def _truncated_geometric(rng: np.random.Generator, p: float, cap: int, n: int) -> np.ndarray:
    """Attempt index (1-based) of the first herald, conditioned on it happening within ``cap``."""
    if n == 0:
        return np.zeros(0, np.int64)
    if p >= 1:
        return np.ones(n, np.int64)
    c = -math.expm1(cap * math.log1p(-p))
    u = rng.random(n)
    k = np.ceil(np.log1p(-u * c) / math.log1p(-p)).astype(np.int64)
    return np.clip(k, 1, cap)


def _teleport_chunk(seed, state_idx, chunk, n, cfg, p_plus, p_minus, f_plus, f_minus):
    rng = _rng(seed, 1, state_idx, chunk)
    cap = cfg.teleport_attempt_cap
    p_h = p_plus + p_minus
    p_ep = -math.expm1(cap * math.log1p(-p_h)) if p_h < 1 else 1.0
    n_her = int(rng.binomial(n, p_ep))
    attempts_her = _truncated_geometric(rng, p_h, cap, n_her)
    valid_her = rng.random(n_her) < cfg.cr_pass_prob
    n_valid_miss = int(rng.binomial(n - n_her, cfg.cr_pass_prob))
    nv_her = int(valid_her.sum())
    n_plus = int(rng.binomial(nv_her, p_plus / p_h)) if nv_her else 0
    n_minus = nv_her - n_plus
    good = int(rng.binomial(n_plus, f_plus)) + int(rng.binomial(n_minus, f_minus))
    attempts = int(attempts_her[valid_her].sum()) + n_valid_miss * cap
    max_used = int(attempts_her.max()) if n_her else (cap if n > n_her else 0)
    return np.array([n, nv_her + n_valid_miss, attempts, n_plus, n_minus, good, nv_her - good, max_used], np.int64)


def run_teleport_experiment(
    cfg: SequenceConfig,
    params: TeleportModelParams,
    seed: int,
    shots: int,
    *,
    correction: bool = True,
    workers: int = 1,
    states: Iterable[str] = tuple(CARDINAL_STATES),
) -> TeleportRun:
    """Simulate ``shots`` CR-gated attempt sequences for every input state.

    Each sequence repeats the attempt up to ``cfg.teleport_attempt_cap``
    times and stops at the first valid herald, after which the spin is read
    out in the basis of the prepared state.  With ``correction`` the Psi-
    outcomes are phase-flip corrected before readout.  A sequence is kept
    only if its validating CR check passes.
    """
    if shots <= 0:
        raise DomainError("need at least one shot")
    noise = NoiseParams(params.p_noise)
    tallies = {}
    for idx, label in enumerate(CARDINAL_STATES):
        if label not in states:
            continue
        res = teleport_state_oracle(
            params.nv, params.wcs.with_qubit(label), params.eta, noise,
            correction=correction, single_photon_input=params.single_photon_input,
        )
        psi = res.qubit.spin_vector()

        def overlap(rho):
            return 0.0 if rho is None else float(np.clip((psi.conj() @ rho @ psi).real, 0.0, 1.0))

        f_plus, f_minus = overlap(res.rho_plus), overlap(res.rho_minus)
        p_plus, p_minus = res.p_psi_plus, res.p_psi_minus
        if p_plus + p_minus <= 0:
            tallies[label] = TeleportStateTally(label, shots, 0, 0, 0, 0, 0, 0, 0, None)
            continue
        chunks = [(c, min(TELEPORT_CHUNK_EPISODES, shots - c * TELEPORT_CHUNK_EPISODES))
                  for c in range(-(-shots // TELEPORT_CHUNK_EPISODES))]

        def work(args, idx=idx, p_plus=p_plus, p_minus=p_minus, f_plus=f_plus, f_minus=f_minus):
            c, n = args
            return _teleport_chunk(seed, idx, c, n, cfg, p_plus, p_minus, f_plus, f_minus)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(work, chunks))
        else:
            rows = [work(a) for a in chunks]
        tot = np.sum(rows, axis=0)
        max_used = int(max(r[7] for r in rows))
        tallies[label] = TeleportStateTally(
            label,
            episodes=int(tot[0]),
            valid_episodes=int(tot[1]),
            attempts=int(tot[2]),
            heralds_plus=int(tot[3]),
            heralds_minus=int(tot[4]),
            r_ii=int(tot[5]),
            r_ji=int(tot[6]),
            max_attempts_in_sequence=max_used,
            expected_fidelity=res.fidelity,
        )
    return TeleportRun(tallies, correction)
