"""Recovery of the frame synchronization sequences from captures.

The time-domain first-symbol sequence is recovered by coherently stacking
its eight repetitions across frames; the second symbol (a standard 4QAM
OFDM symbol) is recovered differentially, stitched across sub-band
captures, and completed by a small candidate search over the two
unobservable anchor symbols.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CoherenceError, SequenceAmbiguityError, StitchError
from .sampling import (
    SampleStream,
    design_lowpass_fir,
    fir_filter,
    sinc_interpolate,
)
from .synth import gutter_indices, ofdm_time_symbol


# ---------------------------------------------------------------------------
# Locating repeatable symbol intervals


def find_sync_symbols(frames: Sequence[np.ndarray], N: int, Ng: int,
                      threshold: float = 0.9) -> Tuple[np.ndarray, np.ndarray]:
    """Cross-frame repeatability score per symbol index.

    Scores are normalized correlation magnitudes between the same symbol
    interval in consecutive frames, averaged over frame pairs; indices
    scoring above ``threshold`` are flagged as synchronization symbols.
    """
    if len(frames) < 2:
        raise ValueError("need at least 2 frames to measure repeatability")
    L = N + Ng
    nsym = min(len(f) // L for f in frames)
    if nsym == 0:
        raise ValueError("frames shorter than one symbol interval")
    scores = np.zeros(nsym)
    for i in range(nsym):
        vals = []
        for a, b in zip(frames[:-1], frames[1:]):
            u = a[i * L:(i + 1) * L]
            v = b[i * L:(i + 1) * L]
            den = np.linalg.norm(u) * np.linalg.norm(v)
            vals.append(abs(np.vdot(v, u)) / den if den > 0 else 0.0)
        scores[i] = np.mean(vals)
    return scores, np.flatnonzero(scores > threshold)


# ---------------------------------------------------------------------------
# First-symbol subsequence by coherent stacking


def estimate_pss_subsequence(y: SampleStream, n00s: Sequence[float],
                             betas: Sequence[float], N: int, Ng: int,
                             Fc_bar: Optional[float] = None,
                             half_width: int = 160,
                             min_coherence: float = 0.5
                             ) -> Tuple[np.ndarray, Dict]:
    """Recover the length-N/8 repeated subsequence from symbol-0 intervals.

    Per frame: extract the useful interval with Doppler correction,
    partition into 8 blocks, negate the first (it is transmitted
    inverted), and average.  Frame stacks are phase-aligned to the running
    mean before accumulation since each frame carries its own carrier
    phase.  Requires a capture spanning the full channel bandwidth.
    """
    if len(n00s) == 0:
        raise ValueError("no frames supplied")
    if len(n00s) != len(betas):
        raise ValueError("need one beta per frame start")
    if Fc_bar is None:
        Fc_bar = y.center
    sub = N // 8
    signs = np.array([-1.0] + [1.0] * 7)
    x = y.samples

    acc = np.zeros(sub, dtype=np.complex128)
    aligned_blocks: List[np.ndarray] = []
    count = 0
    for n0, beta in zip(n00s, betas):
        scale = 1.0 / (1.0 - beta)
        pos0 = n0 + Ng * scale
        if pos0 < half_width or pos0 + N * scale + half_width >= len(x):
            continue
        lo = int(np.floor(pos0)) - half_width - 4
        seg = x[lo:int(np.ceil(pos0 + N * scale)) + half_width + 4]
        pos = (pos0 - lo) + np.arange(N) * scale
        block = sinc_interpolate(seg, pos, half_width=half_width)
        t = (Ng + np.arange(N)) * scale / y.rate
        block = block * np.exp(2j * np.pi * beta * Fc_bar * t)
        blocks = signs[:, None] * block.reshape(8, sub)
        stack = blocks.mean(axis=0)
        if count == 0:
            phase = 1.0 + 0.0j
        else:
            ip = np.vdot(acc / count, stack)
            phase = ip / abs(ip) if abs(ip) > 0 else 1.0 + 0.0j
        acc += stack * np.conj(phase)
        aligned_blocks.append(blocks * np.conj(phase))
        count += 1

    if count == 0:
        raise ValueError("no frame interval fell inside the capture")
    mean = acc / count
    allb = np.concatenate(aligned_blocks, axis=0)
    resultant = np.abs(allb.sum(axis=0))
    spread = np.abs(allb).sum(axis=0)
    mrl = float(np.mean(resultant / np.maximum(spread, np.finfo(float).tiny)))
    diag = {"frames_used": count, "coherence": mrl, "raw_mean": mean}
    if mrl < min_coherence:
        raise CoherenceError(
            f"stacked coherence {mrl:.2f} below {min_coherence}", diag)
    out = mean / np.abs(mean)
    return out, diag


def pss_subsequence_to_hex(subseq: np.ndarray) -> str:
    """Pack a recovered subsequence into the 128-bit hex convention.

    The inter-sample rotations are quantized to +/- pi/2; a negative
    rotation marks bit 1.  Bit l of the result drives rotation step l; the
    appended LSB is zero, so the packing is invariant to the global phase.
    """
    sub = np.asarray(subseq)
    if len(sub) != 128:
        raise ValueError("subsequence must have 128 samples")
    rot = np.angle(sub[1:] * np.conj(sub[:-1]))
    q = 0
    for r, a in enumerate(rot):
        if a < 0:
            q |= 1 << (r + 1)
    return format(q, "032X")


# ---------------------------------------------------------------------------
# Second-symbol differential estimation


@dataclass
class DifferentialSequence:
    """Adjacent-subcarrier products X*_{k+1} X_k of the second symbol."""

    values: np.ndarray        # complex, index k = pair (k, k+1)
    observed: np.ndarray      # bool
    confidence: np.ndarray    # cross-frame coherence in [0, 1]
    quantized: np.ndarray     # phase index 0..3, -1 where unobserved
    low_confidence: np.ndarray  # pairs bordering the mid-channel gutter

    @property
    def n_pairs(self) -> int:
        return len(self.values)

    def observed_count(self, include_low_confidence: bool = True) -> int:
        sel = self.observed.copy()
        if not include_low_confidence:
            sel &= ~self.low_confidence
        return int(sel.sum())


def _gutter_adjacent_pairs(N: int) -> np.ndarray:
    """Pairs whose neighborhood touches a gutter subcarrier: k in {2, N-4}."""
    flags = np.zeros(N - 1, dtype=bool)
    gut = set(int(g) for g in gutter_indices(N))
    for k in range(N - 1):
        if (k - 1) in gut or (k + 2) in gut:
            if 2 <= k <= N - 4:
                flags[k] = True
    return flags


def estimate_sss_differential(Y_rows: np.ndarray,
                              band_mask: Optional[np.ndarray] = None
                              ) -> DifferentialSequence:
    """Average Y*_{k+1} Y_k across frames and quantize to the 4QAM grid.

    Per-frame carrier phase cancels in the product, so no cross-frame
    phase alignment is needed.  ``band_mask`` marks subcarriers inside the
    capture band; pairs need both ends observed.  Pairs bordering the
    gutter are kept but flagged low-confidence (mixing leakage corrupts
    them in real captures).
    """
    Y = np.atleast_2d(np.asarray(Y_rows, dtype=np.complex128))
    F, N = Y.shape
    if band_mask is None:
        band_mask = np.ones(N, dtype=bool)
    designed = np.zeros(N, dtype=bool)
    designed[2:N - 2] = True
    ok = designed & np.asarray(band_mask, dtype=bool)

    prod = np.conj(Y[:, 1:]) * Y[:, :-1]
    mean = prod.mean(axis=0)
    resultant = np.abs(prod.sum(axis=0))
    spread = np.abs(prod).sum(axis=0)
    conf = resultant / np.maximum(spread, np.finfo(float).tiny)

    observed = ok[:-1] & ok[1:]
    quant = np.full(N - 1, -1, dtype=np.int64)
    idx = np.flatnonzero(observed)
    quant[idx] = np.round(np.angle(mean[idx]) / (np.pi / 2)).astype(np.int64) % 4
    conf = np.where(observed, conf, 0.0)
    return DifferentialSequence(values=np.where(observed, mean, 0.0),
                                observed=observed, confidence=conf,
                                quantized=quant,
                                low_confidence=_gutter_adjacent_pairs(N))


def stitch_bands(segments: Sequence[DifferentialSequence],
                 min_overlap: int = 8,
                 min_agreement: float = 0.9
                 ) -> Tuple[DifferentialSequence, Dict]:
    """Merge per-band differential estimates into one full-band sequence.

    Segments are chained in coverage order; consecutive segments must
    share at least ``min_overlap`` observed pairs and agree on at least
    ``min_agreement`` of their quantized values.  Conflicts resolve toward
    the higher-confidence estimate.  Output is independent of segment
    order.
    """
    if not segments:
        raise ValueError("no segments to stitch")
    n = segments[0].n_pairs
    if any(s.n_pairs != n for s in segments):
        raise ValueError("segments disagree on subcarrier count")
    if len(segments) == 1:
        s = segments[0]
        report = {"unobserved": np.flatnonzero(~s.observed
                                               & (np.arange(n) >= 2)
                                               & (np.arange(n) <= n - 3)),
                  "conflicts": 0}
        return s, report

    order = sorted(range(len(segments)),
                   key=lambda i: float(np.mean(np.flatnonzero(
                       segments[i].observed))) if segments[i].observed.any()
                   else np.inf)
    chain = [segments[i] for i in order]
    for a, b in zip(chain[:-1], chain[1:]):
        shared = np.flatnonzero(a.observed & b.observed)
        if len(shared) < min_overlap:
            raise StitchError(
                f"segments share only {len(shared)} pairs "
                f"(need {min_overlap})")
        agree = np.mean(a.quantized[shared] == b.quantized[shared])
        if agree < min_agreement:
            raise StitchError(
                f"overlap agreement {agree:.2f} below {min_agreement}")

    values = np.zeros(n, dtype=np.complex128)
    conf = np.zeros(n)
    observed = np.zeros(n, dtype=bool)
    quant = np.full(n, -1, dtype=np.int64)
    conflicts = 0
    for s in segments:
        idx = np.flatnonzero(s.observed)
        for k in idx:
            if not observed[k]:
                observed[k] = True
                values[k] = s.values[k]
                conf[k] = s.confidence[k]
                quant[k] = s.quantized[k]
            else:
                if s.quantized[k] != quant[k]:
                    conflicts += 1
                if s.confidence[k] > conf[k]:
                    values[k] = s.values[k]
                    conf[k] = s.confidence[k]
                    quant[k] = s.quantized[k]
    merged = DifferentialSequence(values=values, observed=observed,
                                  confidence=conf, quantized=quant,
                                  low_confidence=segments[0].low_confidence)
    k = np.arange(n)
    report = {"unobserved": np.flatnonzero(~observed & (k >= 2) & (k <= n - 3)),
              "conflicts": conflicts}
    return merged, report


# ---------------------------------------------------------------------------
# Anchor-symbol resolution


def _chain_coefficients(diffs: DifferentialSequence, N: int,
                        anchor2: complex, anchor_half: complex) -> np.ndarray:
    """Integrate quantized differentials into coefficients.

    Chains run k = 2 upward and k = N/2 upward from the two anchors; the
    cross-band pair (N/2 - 1, N/2) is never used even when observed, so
    both anchors stay free parameters of the search.
    """
    half = N // 2
    X = np.zeros(N, dtype=np.complex128)
    X[2] = anchor2
    for k in range(2, half - 1):
        if not diffs.observed[k]:
            raise ValueError(f"differential chain broken at pair {k}")
        X[k + 1] = X[k] * np.exp(-1j * diffs.quantized[k] * np.pi / 2)
    X[half] = anchor_half
    for k in range(half, N - 3):
        if not diffs.observed[k]:
            raise ValueError(f"differential chain broken at pair {k}")
        X[k + 1] = X[k] * np.exp(-1j * diffs.quantized[k] * np.pi / 2)
    return X


@dataclass
class FrameObservation:
    """One frame's corrected first-two-symbol interval for replica scoring."""

    block: np.ndarray   # 2(N+Ng) Doppler-corrected samples at the channel rate


def extract_sync_block(y: SampleStream, n0: float, beta: float, N: int,
                       Ng: int, Fc_bar: Optional[float] = None,
                       half_width: int = 96) -> FrameObservation:
    """Doppler-corrected time-domain samples of symbol intervals 0 and 1."""
    if Fc_bar is None:
        Fc_bar = y.center
    L = 2 * (N + Ng)
    scale = 1.0 / (1.0 - beta)
    x = y.samples
    lo = max(0, int(np.floor(n0)) - half_width - 4)
    hi = min(len(x), int(np.ceil(n0 + L * scale)) + half_width + 4)
    seg = x[lo:hi]
    pos = (n0 - lo) + np.arange(L) * scale
    block = sinc_interpolate(seg, pos, half_width=half_width)
    t = np.arange(L) * scale / y.rate
    block = block * np.exp(2j * np.pi * beta * Fc_bar * t)
    return FrameObservation(block=block)


def resolve_sss_ambiguity(diffs: DifferentialSequence,
                          pss_time: np.ndarray,
                          obs_groups: Sequence[Tuple[Sequence[FrameObservation],
                                                     Optional[float]]],
                          N: int = 1024, Ng: int = 32,
                          rate: float = 240e6,
                          margin_db: float = 1.0
                          ) -> Tuple[np.ndarray, np.ndarray, Dict]:
    """Resolve the two anchor symbols by replica correlation.

    Each of the 16 (X_2, X_{N/2}) hypotheses generates a candidate
    second-symbol waveform; concatenated after the known first-symbol
    sequence it is correlated against the received sync intervals.  The
    known first symbol pins the frame phase, making the score sensitive
    to the candidates' absolute phases.  ``obs_groups`` holds per-capture
    (observations, bandwidth) pairs so candidates are band-limited to
    match each capture.
    """
    if not obs_groups or all(len(g[0]) == 0 for g in obs_groups):
        raise ValueError("no frame observations supplied")
    phases = np.exp(1j * np.arange(4) * np.pi / 2)
    taps_per_group = []
    for _, bandwidth in obs_groups:
        if bandwidth is not None and bandwidth < 0.98 * rate:
            stop = min(0.49 * rate,
                       bandwidth / 2 + max(2.5e6, 0.15 * bandwidth))
            taps_per_group.append(design_lowpass_fir(rate, bandwidth / 2, stop))
        else:
            taps_per_group.append(None)

    scores = np.zeros((4, 4))
    for i2, a2 in enumerate(phases):
        for ih, ah in enumerate(phases):
            X = _chain_coefficients(diffs, N, a2, ah)
            sss_t = ofdm_time_symbol(X, N, Ng)
            full = np.concatenate([pss_time, sss_t])
            total = 0.0
            for (observations, _), taps in zip(obs_groups, taps_per_group):
                rep = fir_filter(full, taps) if taps is not None else full
                rep = rep / np.linalg.norm(rep)
                for obs in observations:
                    total += abs(np.vdot(rep, obs.block))
            scores[i2, ih] = total

    flat = np.sort(scores.ravel())[::-1]
    margin = 20.0 * np.log10(flat[0] / max(flat[1], np.finfo(float).tiny))
    diag = {"scores": scores, "margin_db": margin}
    if margin < margin_db:
        raise SequenceAmbiguityError(
            f"candidate margin {margin:.2f} dB below {margin_db} dB", diag)
    i2, ih = np.unravel_index(int(np.argmax(scores)), scores.shape)
    X = _chain_coefficients(diffs, N, phases[i2], phases[ih])
    s = np.full(N, -1, dtype=np.int64)
    idx = np.arange(2, N - 2)
    s[idx] = np.round(np.angle(X[idx]) / (np.pi / 2)).astype(np.int64) % 4
    return X, s, diag


def sss_indices_to_hex(s: np.ndarray, N: int = 1024) -> str:
    """Pack phase indices into the little-indexed base-4 hex convention."""
    s = np.asarray(s)
    q = 0
    for k in range(2, N - 2):
        q |= int(s[k]) << (2 * (k - 2))
    digits = (2 * (N - 4) + 3) // 4
    return format(q, f"0{digits}X")


# ---------------------------------------------------------------------------
# Frame layout counts


@dataclass(frozen=True)
class FrameLayout:
    Nsf_hat: int
    Nsfd_hat: int
    Tfg_hat: Fraction


def frame_layout(Tf_hat, N_hat: int, Ng_hat: int, Fs_hat) -> FrameLayout:
    """Symbol counts and frame guard from the estimated timing parameters.

    The last whole symbol interval of each frame is vacant, so the
    nonzero-symbol count is floor(Tf/Tsym) - 1; four of those are
    synchronization symbols (two leading, two trailing).
    """
    Tf = Tf_hat if isinstance(Tf_hat, Fraction) else \
        Fraction(Tf_hat).limit_denominator(10**9)
    Fs = Fs_hat if isinstance(Fs_hat, Fraction) else Fraction(int(Fs_hat))
    Tsym = Fraction(N_hat + Ng_hat) / Fs
    nsf = int(Tf / Tsym) - 1
    return FrameLayout(Nsf_hat=nsf, Nsfd_hat=nsf - 4,
                       Tfg_hat=Tf - nsf * Tsym)
