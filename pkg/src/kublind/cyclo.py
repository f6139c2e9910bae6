"""Cyclostationarity-based blind estimation of N, Fs, Ng, and Tf.

The cyclic-prefix structure makes the received signal wide-sense
cyclostationary with period N + Ng, so the empirical cyclic
autocorrelation carries peaks that identify the subcarrier count, channel
bandwidth, guard length, and frame period without any prior time or
frequency synchronization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as _fft

from .errors import AmbiguousPeakError, NoCyclicPeakError, NoLongLagPeakError
from .params import DEFAULT_DELAY_SPREAD_S
from .sampling import SampleStream, resample_stream


@dataclass
class CyclicCorrConfig:
    """Knobs for the empirical cyclic-autocorrelation estimators."""

    M: Optional[int] = None      # averaging length; None = as much as possible
    Np: int = 1                  # cyclic harmonics per side in the Ng score
    p: float = 0.05              # relative uncertainty of the Fs guess
    nu: float = 10.0             # validation threshold, linear ratio

    def __post_init__(self):
        if self.Np < 1:
            raise ValueError("Np must be >= 1")
        if not 0 < self.p < 1 / 3:
            raise ValueError("p must be in (0, 1/3) to keep intervals disjoint")
        if self.nu <= 1:
            raise ValueError("nu must exceed 1")


@dataclass
class CandidateSets:
    """Receiver-lag candidate intervals for each possible subcarrier count."""

    S: List[int]                         # possible N values
    intervals: Dict[int, Tuple[int, int]]  # b -> inclusive lag interval
    taus: np.ndarray                     # sorted union of all intervals

    def f_r(self, tau: int) -> int:
        for b, (lo, hi) in self.intervals.items():
            if lo <= tau <= hi:
                return b
        raise KeyError(f"lag {tau} not in any candidate interval")

    def in_interval(self, b: int) -> np.ndarray:
        lo, hi = self.intervals[b]
        return (self.taus >= lo) & (self.taus <= hi)


def build_candidate_sets(Fr: float, Fs_bar: float, p: float,
                         S: Optional[Sequence[int]] = None) -> CandidateSets:
    """Per-candidate lag intervals sized by the Fs-guess uncertainty ``p``."""
    if S is None:
        S = [2 ** q for q in range(9, 13)]
    eta = Fr / Fs_bar
    intervals = {}
    for b in S:
        lo = int(np.ceil(b * eta * (1.0 - p)))
        hi = int(np.floor(b * eta * (1.0 + p)))
        if lo > hi:
            raise ValueError(f"empty candidate interval for N={b}")
        intervals[b] = (lo, hi)
    taus = np.unique(np.concatenate(
        [np.arange(lo, hi + 1) for lo, hi in intervals.values()]))
    return CandidateSets(S=list(S), intervals=intervals, taus=taus)


# ---------------------------------------------------------------------------
# Empirical cyclic autocorrelation


def cyclic_autocorr(y, alpha: float, tau: int, M: Optional[int] = None) -> complex:
    """(1/M) sum_n y(n+tau) y*(n) exp(-j 2 pi n alpha), n < M."""
    x = y.samples if isinstance(y, SampleStream) else np.asarray(y)
    tau = int(tau)
    if M is None:
        M = len(x) - tau
    if M <= 0 or M + tau > len(x):
        raise ValueError("insufficient samples for requested lag")
    z = x[tau:tau + M] * np.conj(x[:M])
    if alpha == 0.0:
        return complex(z.sum() / M)
    n = np.arange(M)
    return complex(np.sum(z * np.exp(-2j * np.pi * n * alpha)) / M)


def autocorr_lags(x: np.ndarray, taus: np.ndarray, M: int) -> np.ndarray:
    """|R^0(tau)| for a modest set of lags, direct evaluation."""
    out = np.empty(len(taus))
    ref = np.conj(x[:M])
    for i, tau in enumerate(taus):
        out[i] = abs(np.dot(x[tau:tau + M], ref)) / M
    return out


def autocorr_all_lags(x: np.ndarray, tau_max: int, M: int) -> np.ndarray:
    """|R^0(tau)| for every lag 0..tau_max via one FFT cross-correlation."""
    if M + tau_max > len(x):
        raise ValueError("need M + tau_max <= len(x)")
    a = x[:M + tau_max]
    b = x[:M]
    L = _fft.next_fast_len(M + tau_max)
    fa = _fft.fft(a, L)
    fb = _fft.fft(b, L)
    c = _fft.ifft(fa * np.conj(fb), L)[:tau_max + 1]
    return np.abs(c) / M


def cyclic_alpha_profile(y, tau: int, alpha_max: float,
                         M: Optional[int] = None,
                         pad_factor: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """|R^alpha(tau)| on a dense alpha grid in [0, alpha_max], for plots."""
    x = y.samples if isinstance(y, SampleStream) else np.asarray(y)
    if M is None:
        M = len(x) - tau
    z = x[tau:tau + M] * np.conj(x[:M])
    L = _fft.next_fast_len(pad_factor * M)
    Z = _fft.fft(z, L)
    k_max = int(np.floor(alpha_max * L))
    alphas = np.arange(k_max + 1) / L
    return alphas, np.abs(Z[:k_max + 1]) / M


# ---------------------------------------------------------------------------
# Stage estimators


@dataclass
class NEstimate:
    N_hat: int
    Nr_hat: int
    diagnostics: dict = field(repr=False, default_factory=dict)


def estimate_N(y: SampleStream, Fs_bar: float,
               cfg: Optional[CyclicCorrConfig] = None,
               S: Optional[Sequence[int]] = None) -> NEstimate:
    """Blind subcarrier count from the lag-domain autocorrelation peak.

    The argmax over the union of candidate intervals is accepted only when
    it stands at least ``nu`` above the smallest value in its own interval;
    otherwise that candidate is removed and the search repeats.  The
    validation step rejects broad autocorrelation lobes that operational
    traffic superimposes on the cyclic-prefix peak.
    """
    cfg = cfg or CyclicCorrConfig()
    sets = build_candidate_sets(y.rate, Fs_bar, cfg.p, S)
    x = y.samples
    max_tau = int(sets.taus[-1])
    M = cfg.M if cfg.M is not None else len(x) - max_tau
    if M <= 0 or M + max_tau > len(x):
        raise ValueError("capture too short for the candidate lags")

    mags = autocorr_lags(x, sets.taus, M)
    diag = {
        "taus": sets.taus.copy(),
        "mags": mags.copy(),
        "intervals": dict(sets.intervals),
        "M": M,
        "ratios": {},
        "rejected": [],
    }

    remaining = list(sets.S)
    while remaining:
        allowed = np.zeros(len(sets.taus), dtype=bool)
        for b in remaining:
            allowed |= sets.in_interval(b)
        idx = int(np.argmax(np.where(allowed, mags, -1.0)))
        b = sets.f_r(int(sets.taus[idx]))
        sel = sets.in_interval(b)
        peak = mags[sel].max()
        trough = max(mags[sel].min(), np.finfo(float).tiny)
        ratio = peak / trough
        diag["ratios"][b] = ratio
        if ratio > cfg.nu:
            nr = int(sets.taus[sel][int(np.argmax(mags[sel]))])
            diag["accepted"] = b
            return NEstimate(N_hat=b, Nr_hat=nr, diagnostics=diag)
        diag["rejected"].append(b)
        remaining.remove(b)
    raise NoCyclicPeakError(
        "no candidate passed the peak validation test", diag)


def estimate_Fs(N_hat: int, Nr_hat: int, Fr: float) -> float:
    """Channel bandwidth in Hz, snapped to an integer number of MHz."""
    mhz = round(N_hat * Fr / Nr_hat / 1e6)
    return float(mhz) * 1e6


def resample(y: SampleStream, to_rate: float,
             new_bandwidth: Optional[float] = None) -> SampleStream:
    """Rate conversion between pipeline stages (windowed sinc)."""
    return resample_stream(y, to_rate, new_bandwidth=new_bandwidth)


def guard_candidates(Fs_hat: float, N_hat: int,
                     Td: float = float(DEFAULT_DELAY_SPREAD_S)) -> np.ndarray:
    """Even guard-length candidates spanning half to twice the delay spread."""
    q_lo = int(np.ceil(Td * Fs_hat / 4.0))
    q_hi = int(np.floor(Td * Fs_hat))
    if q_hi < q_lo:
        raise ValueError("delay spread too small for any guard candidate")
    return 2 * np.arange(q_lo, q_hi + 1)


@dataclass
class NgEstimate:
    Ng_hat: int
    diagnostics: dict = field(repr=False, default_factory=dict)


def estimate_Ng(y: SampleStream, N_hat: int,
                cfg: Optional[CyclicCorrConfig] = None,
                Td: float = float(DEFAULT_DELAY_SPREAD_S)) -> NgEstimate:
    """Guard length from cyclic-frequency energy at lag N_hat.

    For each candidate symbol length xi = N + Ng the scores sum
    |R^alpha(N_hat)| over harmonics alpha = p/xi, |p| <= Np.  The p = 0
    term is candidate-independent and only pedestals the score, so the
    margin test is applied after subtracting it.
    """
    cfg = cfg or CyclicCorrConfig()
    x = y.samples
    ng_cands = guard_candidates(y.rate, N_hat, Td)
    xis = N_hat + ng_cands
    M = cfg.M if cfg.M is not None else len(x) - N_hat
    if M <= 0 or M + N_hat > len(x):
        raise ValueError("capture too short for lag N_hat")

    z = x[N_hat:N_hat + M] * np.conj(x[:M])
    n = np.arange(M)
    pedestal = abs(z.sum()) / M
    scores = np.empty(len(xis))
    for i, xi in enumerate(xis):
        total = pedestal
        for p in range(1, cfg.Np + 1):
            alpha = p / xi
            ph = np.exp(-2j * np.pi * n * alpha)
            total += abs(np.dot(z, ph)) / M + abs(np.dot(z, np.conj(ph))) / M
        scores[i] = total

    best = int(np.argmax(scores))
    harm = scores - pedestal
    others = np.delete(harm, best)
    margin = harm[best] / max(np.median(others), np.finfo(float).tiny)
    diag = {"ng_candidates": ng_cands, "xis": xis, "scores": scores,
            "pedestal": pedestal, "margin": margin, "M": M}
    if margin < 2.0:
        raise AmbiguousPeakError(
            f"guard-length score margin {margin:.2f} too small", diag)
    return NgEstimate(Ng_hat=int(ng_cands[best]), diagnostics=diag)


@dataclass
class TfEstimate:
    Tf_hat: Fraction
    frame_rate_hz: int
    tau_star: int
    diagnostics: dict = field(repr=False, default_factory=dict)


def estimate_Tf(y: SampleStream, N_hat: int, Ng_hat: int, Tm: float,
                cfg: Optional[CyclicCorrConfig] = None,
                min_peak_ratio: float = 5.0) -> TfEstimate:
    """Frame period from the long-lag autocorrelation peak.

    Synchronization sequences repeat each frame, so |R^0| peaks at the
    frame period (and its multiples).  The winning lag is snapped to the
    smallest near-equal divisor peak before rounding the frame rate to an
    integer number of Hz.
    """
    cfg = cfg or CyclicCorrConfig()
    x = y.samples
    tau_lo = N_hat + Ng_hat
    tau_max = int(np.floor(y.rate * Tm))
    if tau_max <= tau_lo:
        raise ValueError("Tm bound leaves no candidate lags")
    M = cfg.M if cfg.M is not None else len(x) - tau_max
    if M < 4 * (N_hat + Ng_hat):
        raise NoLongLagPeakError(
            "capture too short to span multiple frames", {"M": M})

    mags = autocorr_all_lags(x, tau_max, M)
    window = mags[tau_lo + 1:tau_max + 1]
    rel = int(np.argmax(window))
    tau_star = tau_lo + 1 + rel
    peak = window[rel]
    floor = np.median(window)
    diag = {"tau_lo": tau_lo, "tau_max": tau_max, "M": M,
            "peak": peak, "floor": floor, "mags": mags}
    if peak < min_peak_ratio * max(floor, np.finfo(float).tiny):
        raise NoLongLagPeakError(
            f"long-lag peak {peak:.3g} below {min_peak_ratio} x floor "
            f"{floor:.3g}", diag)

    # Prefer the fundamental if the argmax landed on a multiple.
    tau_fund = tau_star
    for j in range(2, 9):
        cand = int(round(tau_star / j))
        if cand <= tau_lo:
            break
        w = max(2, cand // 2000)
        local = mags[cand - w:cand + w + 1]
        if local.size and local.max() >= 0.6 * peak:
            tau_fund = cand - w + int(np.argmax(local))
    rate_hz = int(round(y.rate / tau_fund))
    diag["tau_fund"] = tau_fund
    return TfEstimate(Tf_hat=Fraction(1, rate_hz), frame_rate_hz=rate_hz,
                      tau_star=int(tau_star), diagnostics=diag)
