"""Ground-truth downlink frame synthesis and the LEO channel model.

Generates OFDM frames whose first two symbol intervals carry the published
synchronization sequences, then passes them through a Doppler (shift plus
time compression), AWGN, and receiver front-end model.  Everything is a
deterministic function of (config, seed) so closed-loop tests can compare
against exact truth.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from .params import IndependentParams
from .sampling import (
    SampleStream,
    design_lowpass_fir,
    fir_filter,
    interpolate_affine,
)

GUTTER_OFFSETS = (0, 1, -2, -1)  # vacant central subcarriers, FFT indexing


def gutter_indices(n: int) -> np.ndarray:
    return np.array([k % n for k in GUTTER_OFFSETS])


# ---------------------------------------------------------------------------
# Synchronization sequence generators


def lfsr_msequence(taps: Sequence[int] = (3, 7),
                   init: Sequence[int] = (0, 0, 1, 1, 0, 1, 0),
                   length: int = 127) -> np.ndarray:
    """Fibonacci LFSR output a_0 .. a_{length-1}.

    ``taps`` lists the nonzero delays of the feedback polynomial
    1 + D^t1 + ... + D^tk; ``init`` is the initial register state
    (a_-1, ..., a_-deg).  The recurrence is a_n = XOR of a_{n-t} over taps.
    """
    deg = max(taps)
    if len(init) != deg:
        raise ValueError(f"init must have {deg} entries")
    state = [int(b) & 1 for b in init]  # state[i] = a_{n-1-i}
    if not any(state):
        raise ValueError("all-zero LFSR state")
    out = np.empty(length, dtype=np.int8)
    for n in range(length):
        nxt = 0
        for t in taps:
            nxt ^= state[t - 1]
        out[n] = nxt
        state = [nxt] + state[:-1]
    return out


def pack_bits_msb_first(bits: Iterable[int], append_zero: bool = True) -> int:
    """Pack a bit sequence into an integer, first bit most significant."""
    q = 0
    for b in bits:
        q = (q << 1) | (int(b) & 1)
    if append_zero:
        q <<= 1
    return q


def pss_q_constant() -> int:
    """128-bit constant driving the PSS phase rotations, from the LFSR."""
    return pack_bits_msb_first(lfsr_msequence(), append_zero=True)


def gen_pss(N: int = 1024, Ng: int = 32) -> np.ndarray:
    """Time-domain primary synchronization sequence, N + Ng unit-modulus samples.

    Eight repetitions of a length-N/8 subsequence preceded by a cyclic
    prefix; the prefix and the first repetition are inverted.  The
    subsequence is a symmetric DPSK encoding of the LFSR m-sequence: bit
    l of the packed constant selects a +/- pi/2 rotation at step l.
    """
    if N % 8 != 0:
        raise ValueError("N must be divisible by 8")
    sub_len = N // 8
    q = pss_q_constant()
    bits = np.array([(q >> l) & 1 for l in range(sub_len)], dtype=np.int64)
    b = 2 * bits - 1
    cum = np.cumsum(b)  # cum[r] = sum of b_0..b_r
    k = np.arange(-Ng, N)
    inverted = (k < sub_len).astype(np.float64)
    phase = np.pi * (inverted - 0.25 - 0.5 * cum[k % sub_len])
    return np.exp(1j * phase)


def gen_sss(N: int = 1024) -> np.ndarray:
    """Frequency-domain secondary synchronization sequence coefficients.

    Unit-modulus 4QAM values on subcarriers 2..N-3, zeros in the gutter.
    Phase index s_k is read two bits at a time from the published constant.
    """
    from .starlink import Q_SSS_HEX, sss_phase_indices

    n_pop = N - 4
    expected_digits = (2 * n_pop + 3) // 4
    if len(Q_SSS_HEX) != expected_digits:
        raise ValueError(
            f"sequence constant has {len(Q_SSS_HEX)} hex digits, "
            f"expected {expected_digits}")
    s = sss_phase_indices(N)
    coeffs = np.zeros(N, dtype=np.complex128)
    coeffs[2:N - 2] = np.exp(1j * s * np.pi / 2)
    return coeffs


# ---------------------------------------------------------------------------
# OFDM symbol and payload generation


def ofdm_time_symbol(coeffs: np.ndarray, N: Optional[int] = None,
                     Ng: int = 32) -> np.ndarray:
    """Unitary inverse DFT plus cyclic prefix: N + Ng time samples."""
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    if N is None:
        N = len(coeffs)
    if len(coeffs) != N:
        raise ValueError(f"expected {N} coefficients, got {len(coeffs)}")
    useful = np.fft.ifft(coeffs) * np.sqrt(N)
    if Ng == 0:
        return useful
    return np.concatenate([useful[-Ng:], useful])


@dataclass
class SymbolGrid:
    """Frequency-domain coefficients for the payload symbols of one frame."""

    values: np.ndarray           # shape (nsym, N)
    modulation: List[str]        # per-symbol tag: 4qam | 16qam | zero

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ValueError("values must be (nsym, N)")
        if len(self.modulation) != self.values.shape[0]:
            raise ValueError("one modulation tag per symbol required")

    @property
    def nsym(self) -> int:
        return self.values.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.values.shape[1]


_QAM4 = (np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2))
_QAM16_LEVELS = np.array([-3, -1, 1, 3]) / np.sqrt(10)


def _draw_symbols(rng: np.random.Generator, shape, modulation: str) -> np.ndarray:
    if modulation == "4qam":
        return rng.choice(_QAM4, size=shape)
    if modulation == "16qam":
        re = rng.choice(_QAM16_LEVELS, size=shape)
        im = rng.choice(_QAM16_LEVELS, size=shape)
        return re + 1j * im
    raise ValueError(f"unknown modulation {modulation!r}")


def random_payload(nsym: int, N: int = 1024,
                   modulation: Union[str, Sequence[str]] = "4qam",
                   seed: int = 0,
                   pilot_subcarriers: Sequence[int] = (),
                   pilot_power_fraction: float = 0.0) -> SymbolGrid:
    """Seeded iid payload grid with unit average power per symbol.

    With ``pilot_subcarriers`` set, the same subcarrier subset is boosted
    in every symbol to carry ``pilot_power_fraction`` of the symbol power
    (values still drawn per symbol).  The boosted narrowband component
    slows the autocorrelation rolloff at small lags, imitating the
    redundancy structure of operational traffic.
    """
    if isinstance(modulation, str):
        schedule = [modulation] * nsym
    else:
        schedule = list(modulation)
        if len(schedule) != nsym:
            raise ValueError("modulation schedule length must equal nsym")
    rng = np.random.default_rng(seed)
    gut = gutter_indices(N)
    pilots = np.array(sorted(set(int(k) % N for k in pilot_subcarriers)),
                      dtype=np.int64)
    if np.intersect1d(pilots, gut).size:
        raise ValueError("pilot subcarriers may not sit in the gutter")
    rho = float(pilot_power_fraction)
    if not 0.0 <= rho < 1.0:
        raise ValueError("pilot_power_fraction must be in [0, 1)")
    if rho > 0 and pilots.size == 0:
        raise ValueError("pilot power requested but no pilot subcarriers given")

    data_mask = np.ones(N, dtype=bool)
    data_mask[gut] = False
    data_mask[pilots] = False
    n_data = int(data_mask.sum())
    data_amp = np.sqrt((1.0 - rho) * N / n_data)
    pilot_amp = np.sqrt(rho * N / pilots.size) if pilots.size else 0.0

    values = np.zeros((nsym, N), dtype=np.complex128)
    for i, mod in enumerate(schedule):
        if mod == "zero":
            continue
        values[i, data_mask] = data_amp * _draw_symbols(rng, n_data, mod)
        if pilots.size:
            values[i, pilots] = pilot_amp * _draw_symbols(rng, pilots.size, "4qam")
    return SymbolGrid(values=values, modulation=schedule)


# ---------------------------------------------------------------------------
# Frame assembly


def build_frames(grids: Union[SymbolGrid, Sequence[SymbolGrid]],
                 ind: IndependentParams,
                 n_frames: int,
                 occupancy: Optional[Sequence[bool]] = None,
                 amplitudes: Optional[Sequence[float]] = None) -> SampleStream:
    """Assemble frames at the channel rate Fs.

    Frame m begins at sample round(m * Tf * Fs).  Symbol interval 0 holds
    the PSS, interval 1 the SSS, payload grids follow; the final interval
    and the frame guard are left vacant.  ``occupancy`` marks which frame
    slots transmit (cycled if shorter than n_frames); ``amplitudes`` scales
    each transmitted frame.
    """
    N, Ng = ind.N, ind.Ng
    L = N + Ng
    fs = float(ind.Fs)
    if isinstance(grids, SymbolGrid):
        grids = [grids] * n_frames
    if len(grids) < n_frames:
        raise ValueError("need one payload grid per frame")
    occ = np.ones(n_frames, dtype=bool)
    if occupancy is not None:
        pattern = np.asarray(occupancy, dtype=bool)
        if pattern.size == 0:
            raise ValueError("occupancy pattern must be nonempty")
        occ = np.resize(pattern, n_frames)
    amp = np.ones(n_frames)
    if amplitudes is not None:
        amp = np.resize(np.asarray(amplitudes, dtype=np.float64), n_frames)

    pss = gen_pss(N, Ng)
    sss = ofdm_time_symbol(gen_sss(N), N, Ng)

    frame_starts = [round(m * float(ind.Tf) * fs) for m in range(n_frames + 1)]
    total = frame_starts[n_frames]
    out = np.zeros(total, dtype=np.complex128)
    for m in range(n_frames):
        if not occ[m]:
            continue
        grid = grids[m]
        if grid.n_subcarriers != N:
            raise ValueError("grid subcarrier count does not match N")
        if grid.nsym + 2 > ind.Nsf:
            raise ValueError(
                f"{grid.nsym} payload symbols plus sync exceed Nsf={ind.Nsf}")
        base = frame_starts[m]
        span = (grid.nsym + 2) * L
        if base + span > frame_starts[m + 1]:
            raise ValueError("frame layout overflows the frame period")
        out[base:base + L] = amp[m] * pss
        out[base + L:base + 2 * L] = amp[m] * sss
        for r in range(grid.nsym):
            s = base + (2 + r) * L
            out[s:s + L] = amp[m] * ofdm_time_symbol(grid.values[r], N, Ng)
    return SampleStream(samples=out, rate=fs, center=float(ind.Fc_i),
                        bandwidth=fs)


# ---------------------------------------------------------------------------
# Channel model


@dataclass
class ChannelConfig:
    """Doppler + AWGN + front-end description for one capture."""

    beta: float = 0.0            # CFO parameter (dimensionless)
    tau0: float = 0.0            # least-time path delay (s)
    Fc: float = 0.0              # true channel center (Hz)
    Fc_bar: float = 0.0          # receiver tune frequency (Hz)
    noise_density: float = 0.0   # N0; complex PSD, per-component N0/2
    Fr: float = 0.0              # receiver sampling rate (Hz)
    Fh: Optional[float] = None   # prefilter two-sided 3-dB bandwidth (Hz)
    prefilter: Optional[np.ndarray] = None  # explicit taps override

    def __post_init__(self):
        if abs(self.beta) > 1e-3:
            raise ValueError("|beta| must not exceed 1e-3")
        if self.noise_density < 0:
            raise ValueError("noise density must be nonnegative")
        if self.Fr <= 0:
            raise ValueError("receiver rate must be positive")
        if self.Fh is not None and self.Fh >= self.Fr:
            raise ValueError("aliasing contract violated: need Fh < Fr")


def noise_density_for_snr(snr_linear: float, Fs: float) -> float:
    """N0 that yields the requested in-band SNR for a unit-power signal."""
    if snr_linear <= 0:
        raise ValueError("snr must be positive")
    return 1.0 / (snr_linear * Fs)


def apply_channel(x: SampleStream, cfg: ChannelConfig,
                  noise_seed: Optional[int] = None) -> SampleStream:
    """Doppler-warp, shift, add noise, prefilter, and sample at Fr.

    Implements y(t) = x((t - tau0)(1 - beta)) * exp(j2pi (Fc(1-beta) - Fcbar)
    (t - tau0)) + w(t), then the lowpass prefilter and sampling at Fr.  The
    frequency shift is applied at an internal rate high enough that no
    shifted content aliases; the prefilter then confines the band to below
    Fr/2 so the final resampling is pure interpolation.
    """
    fs = x.rate
    beta = cfg.beta
    f_shift = cfg.Fc * (1.0 - beta) - cfg.Fc_bar

    bw = cfg.Fh if cfg.Fh is not None else min(fs, cfg.Fr)
    up = 1
    while abs(f_shift) + bw / 2 > 0.98 * (up * fs) / 2:
        up *= 2
    r_int = up * fs

    xs = x.samples
    if up > 1:
        xs = interpolate_affine(xs, 1.0 / up, 0.0, (len(xs) - 1) * up + 1)
    n_int = len(xs)
    if beta == 0.0 and cfg.tau0 == 0.0:
        v = xs if up > 1 else xs.copy()
    else:
        v = interpolate_affine(xs, 1.0 - beta,
                               -cfg.tau0 * (1.0 - beta) * r_int, n_int)
    if f_shift != 0.0 or cfg.tau0 != 0.0:
        t = np.arange(n_int, dtype=np.float64) / r_int
        v = v * np.exp(2j * np.pi * f_shift * (t - cfg.tau0))

    if cfg.noise_density > 0.0:
        rng = np.random.default_rng(noise_seed)
        sigma = np.sqrt(cfg.noise_density * r_int / 2.0)
        v = v + sigma * (rng.standard_normal(n_int)
                         + 1j * rng.standard_normal(n_int))

    if cfg.prefilter is not None:
        v = fir_filter(v, cfg.prefilter)
    elif cfg.Fh is not None:
        taps = design_lowpass_fir(r_int, cfg.Fh / 2.0, cfg.Fr / 2.0)
        v = fir_filter(v, taps)

    if cfg.Fr != r_int:
        n_out = int(np.floor((n_int - 1) * cfg.Fr / r_int)) + 1
        v = interpolate_affine(v, r_int / cfg.Fr, 0.0, n_out)

    snr = None
    if cfg.noise_density > 0.0:
        snr = 1.0 / (cfg.noise_density * fs)
    return SampleStream(samples=v, rate=cfg.Fr, center=cfg.Fc_bar,
                        epoch=x.epoch, snr_hint=snr,
                        bandwidth=cfg.Fh if cfg.Fh is not None else min(fs, cfg.Fr))
