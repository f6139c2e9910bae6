"""Published Starlink Ku-band downlink constants, replicas, and correlators.

The downlink's synchronization sequences are identical across frames and
satellites, so a receiver can build local replicas from these constants
and produce frame-timing observables by matched filtering.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from .errors import DetectionError
from .params import IndependentParams, channel_center_exact
from .sampling import (
    SampleStream,
    design_lowpass_fir,
    fir_filter,
    sinc_interpolate,
)
from .synth import gen_pss, gen_sss, ofdm_time_symbol, pss_q_constant

CHANNEL_RATE_HZ = 240e6

# 128-bit constant behind the PSS subsequence rotations (m-sequence bits
# packed MSB-first and appended with one zero).
Q_PSS_HEX = "C1B5D191024D3DC3F8EC52FAA16F3958"

# 2040-bit constant holding the 1020 SSS phase indices, two bits each,
# subcarrier 2 in the least-significant position.  Transcribed as data;
# no generator for it is known.
Q_SSS_HEX = (
    "BD565D5064E9B3A94958F28624DED5"
    "60946199F5B40F0E4FB5EFCB473B4C24"
    "B2D1E0BD01A6A04D5017DE91A8ECC0DA"
    "09EBFE57F9F1B44C532F161C583A4249"
    "0A5C09F2A117F9A28F9B2FD547A74C44"
    "BABB4BE85DA6A62B1235E2AD084C0018"
    "0142A8F7F357DEC4F31316BC58FA4049"
    "09A3FCA7F88E421902B6A2580AE80308"
    "03F65809DB347F590DBC46F010EBE3A2"
    "5C060D74429FC46BDF9B63719279798D"
    "232C5ABA274122FF66AD7E449F44CB40"
    "C49C24A1E2629F5BFE82CE531FDC34F8"
    "C64A43A963F40D5B71BDE6FB2F13492D"
    "6F2E8544B21D449722C635180342CD00"
    "26A1E7F7E80E91B175E852F919767E5A"
    "F9B6E909AF362F5218E2B908DC005803"
)

# Guards against transcription slips in the constants above.
_Q_PSS_SHA256 = "bb800890dfc56c81faca1a65055c4fb29f69bb9599d3afa8b5160fe67171bf82"
_Q_SSS_SHA256 = "9ca9de143333159b62367a1663123613036e7ba0acf6c332e1eb87d041613b48"


def q_pss() -> int:
    return int(Q_PSS_HEX, 16)


def q_sss() -> int:
    return int(Q_SSS_HEX, 16)


def verify_constants() -> None:
    """Raise if the stored constants fail their integrity checks."""
    if hashlib.sha256(Q_PSS_HEX.encode()).hexdigest() != _Q_PSS_SHA256:
        raise ValueError("q_pss constant failed its checksum")
    if hashlib.sha256(Q_SSS_HEX.encode()).hexdigest() != _Q_SSS_SHA256:
        raise ValueError("q_sss constant failed its checksum")
    if len(Q_SSS_HEX) != 510:
        raise ValueError("q_sss must have 510 hex digits")
    if pss_q_constant() != q_pss():
        raise ValueError("LFSR regeneration does not reproduce q_pss")


def sss_phase_indices(N: int = 1024) -> np.ndarray:
    """Phase indices s_k for subcarriers k = 2 .. N-3 (values 0..3)."""
    q = q_sss()
    k = np.arange(2, N - 2)
    return np.array([(q >> int(2 * (kk - 2))) & 3 for kk in k], dtype=np.int64)


def table2() -> IndependentParams:
    """The identified parameter set of the operational downlink."""
    return IndependentParams(
        Fs=Fraction(240_000_000),
        N=1024,
        Ng=32,
        Tf=Fraction(1, 750),
        Tfg=Fraction(68, 15_000_000),
        Nsf=302,
        Nsfd=298,
        Fc_i=channel_center_exact(3),
    )


@dataclass(frozen=True)
class ReferenceConstants:
    q_pss: int
    q_sss: int
    table2: IndependentParams


def reference_constants() -> ReferenceConstants:
    verify_constants()
    return ReferenceConstants(q_pss=q_pss(), q_sss=q_sss(), table2=table2())


# ---------------------------------------------------------------------------
# Replicas


@lru_cache(maxsize=None)
def _pss_replica_cached() -> np.ndarray:
    rep = gen_pss(1024, 32)
    rep.setflags(write=False)
    return rep


@lru_cache(maxsize=None)
def _sss_replica_cached() -> np.ndarray:
    rep = ofdm_time_symbol(gen_sss(1024), 1024, 32)
    rep.setflags(write=False)
    return rep


def pss_replica() -> np.ndarray:
    """Time-domain PSS, 1056 samples at the channel rate (shared, read-only)."""
    return _pss_replica_cached()


def sss_replica() -> np.ndarray:
    """Time-domain SSS with prefix, 1056 samples at the channel rate."""
    return _sss_replica_cached()


# ---------------------------------------------------------------------------
# Matched-filter correlators


def _prep_replica(replica: np.ndarray, stream_rate: float, beta: float,
                  Fc_bar: float, bandwidth: Optional[float]) -> np.ndarray:
    """Band-limit, Doppler-warp, and rate-convert a channel-rate replica."""
    rep = np.asarray(replica, dtype=np.complex128)
    if bandwidth is not None and bandwidth < 0.98 * CHANNEL_RATE_HZ:
        stop = min(0.49 * CHANNEL_RATE_HZ,
                   bandwidth / 2 + max(2.5e6, 0.15 * bandwidth))
        taps = design_lowpass_fir(CHANNEL_RATE_HZ, bandwidth / 2, stop)
        guard = len(taps) // 2
        rep = np.concatenate([np.zeros(guard, complex), rep,
                              np.zeros(guard, complex)])
        rep = fir_filter(rep, taps)
    ratio = CHANNEL_RATE_HZ * (1.0 - beta) / stream_rate
    n_out = int(np.floor((len(rep) - 1) / ratio)) + 1
    pos = np.arange(n_out) * ratio
    out = sinc_interpolate(rep, pos)
    if beta != 0.0:
        t = np.arange(n_out) / stream_rate
        out = out * np.exp(-2j * np.pi * beta * Fc_bar * t)
    return out


def correlate_pss(y: SampleStream, beta: float = 0.0,
                  bandwidth: Optional[float] = None) -> np.ndarray:
    """Normalized PSS matched-filter magnitude at every stream offset.

    The replica (not the data) is filtered to the stream's bandwidth and
    warped for the supplied CFO, so narrowband captures correlate without
    re-filtering.  Output[n] in [0, 1] scores a frame starting at sample n.
    """
    bw = bandwidth if bandwidth is not None else y.bandwidth
    rep = _prep_replica(pss_replica(), y.rate, beta, y.center, bw)
    return _normalized_correlation(y.samples, rep)


def _normalized_correlation(x: np.ndarray, rep: np.ndarray) -> np.ndarray:
    from scipy.signal import fftconvolve

    if len(x) < len(rep):
        raise ValueError("stream shorter than the replica")
    num = np.abs(fftconvolve(x, np.conj(rep[::-1]), mode="valid"))
    cum = np.concatenate([[0.0], np.cumsum(np.abs(x) ** 2)])
    power = cum[len(rep):] - cum[:len(x) - len(rep) + 1]
    den = np.linalg.norm(rep) * np.sqrt(np.maximum(power, 0.0))
    den = np.maximum(den, np.finfo(float).tiny)
    return num / den


@dataclass
class CoherentObservable:
    arrival_time: float        # seconds, sub-sample interpolated
    doppler_hz: float          # implied carrier offset -beta * center
    coherent_snr: float        # peak power over off-peak correlation power
    peak_index: int
    peak_value: float


def coherent_observable(y: SampleStream, n_hint: Optional[int] = None,
                        beta: float = 0.0,
                        bandwidth: Optional[float] = None,
                        search: Optional[int] = None,
                        threshold: float = 5.0) -> CoherentObservable:
    """Frame observable from joint PSS+SSS correlation.

    Correlates against the concatenated PSS and SSS (with prefixes),
    doubling the coherent length relative to PSS-only processing; the
    arrival time is refined by a quadratic fit around the peak.
    """
    bw = bandwidth if bandwidth is not None else y.bandwidth
    rep_full = np.concatenate([pss_replica(), sss_replica()])
    rep = _prep_replica(rep_full, y.rate, beta, y.center, bw)
    corr = _normalized_correlation(y.samples, rep)

    if n_hint is None:
        lo, hi = 0, len(corr)
    else:
        w = search if search is not None else len(rep)
        lo = max(0, n_hint - w)
        hi = min(len(corr), n_hint + w + 1)
    seg = corr[lo:hi]
    pk = lo + int(np.argmax(seg))
    peak = corr[pk]

    guard = len(rep) // 8
    off = np.concatenate([corr[:max(0, pk - guard)], corr[pk + guard:]])
    rms = np.sqrt(np.mean(off ** 2)) if off.size else np.finfo(float).tiny
    snr = (peak / rms) ** 2
    if peak < threshold * rms:
        raise DetectionError(
            f"peak {peak:.3f} below {threshold} x off-peak rms {rms:.3f}")

    frac = 0.0
    if 0 < pk < len(corr) - 1:
        a, b, c = corr[pk - 1], corr[pk], corr[pk + 1]
        denom = a - 2 * b + c
        if denom < 0:
            frac = 0.5 * (a - c) / denom
    arrival = y.epoch + (pk + frac) / y.rate
    return CoherentObservable(arrival_time=arrival,
                              doppler_hz=-beta * y.center,
                              coherent_snr=float(snr),
                              peak_index=pk, peak_value=float(peak))
