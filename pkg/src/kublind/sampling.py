"""Sample streams and windowed-sinc rate conversion.

One interpolation core serves every stage that needs off-grid samples:
channel time-warping, rate conversion between capture and channel rates,
and replica warping.  The kernel is a Kaiser-windowed sinc; with the
default half-width of 64 taps and beta 12 the truncation error sits well
below the closed-loop test tolerances for content inside ~0.8 Nyquist.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import signal as _sig

DEFAULT_HALF_WIDTH = 64
DEFAULT_KAISER_BETA = 12.0


@dataclass
class SampleStream:
    """Uniformly sampled complex baseband data plus capture metadata."""

    samples: np.ndarray          # complex128
    rate: float                  # samples/s
    center: float = 0.0          # tuned center frequency (Hz)
    epoch: float = 0.0           # absolute time of sample 0 (s)
    snr_hint: Optional[float] = None   # linear SNR, if known
    bandwidth: Optional[float] = None  # two-sided 3-dB bandwidth (Hz), if known

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.rate <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples.view(np.float64))):
            raise ValueError("sample values must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    def copy_with(self, **kw) -> "SampleStream":
        fields = dict(samples=self.samples, rate=self.rate, center=self.center,
                      epoch=self.epoch, snr_hint=self.snr_hint,
                      bandwidth=self.bandwidth)
        fields.update(kw)
        return SampleStream(**fields)


def _kaiser_window(u: np.ndarray, half_width: int, beta: float) -> np.ndarray:
    x = u / half_width
    out = np.zeros_like(u)
    inside = np.abs(x) <= 1.0
    out[inside] = np.i0(beta * np.sqrt(1.0 - x[inside] ** 2)) / np.i0(beta)
    return out


_KERNEL_RESOLUTION = 1024
_kernel_banks: dict = {}


def _kernel_bank(half_width: int, beta: float) -> np.ndarray:
    """Windowed-sinc taps for fractional phases r/RES, r = 0..RES+1.

    Kernels at arbitrary phases are linearly interpolated between bank
    rows; with RES = 1024 the interpolation error sits near -100 dB, well
    under the truncation error of the window itself.  Row 0 is an exact
    unit impulse, so integer positions reproduce input samples exactly.
    """
    key = (half_width, beta)
    bank = _kernel_banks.get(key)
    if bank is None:
        offsets = np.arange(-half_width + 1, half_width + 1)
        fr = np.arange(_KERNEL_RESOLUTION + 2) / _KERNEL_RESOLUTION
        args = fr[:, None] - offsets[None, :]
        bank = np.sinc(args) * _kaiser_window(args, half_width, beta)
        _kernel_banks[key] = bank
    return bank


def sinc_interpolate(x: np.ndarray, positions: np.ndarray,
                     half_width: int = DEFAULT_HALF_WIDTH,
                     beta: float = DEFAULT_KAISER_BETA,
                     chunk: int = 32768) -> np.ndarray:
    """Evaluate the bandlimited reconstruction of ``x`` at fractional positions.

    Positions are in units of input samples (0 = first sample).  Points
    within ``half_width`` of the edges use zero padding.
    """
    x = np.asarray(x, dtype=np.complex128)
    positions = np.asarray(positions, dtype=np.float64)
    hw = int(half_width)
    pad = np.zeros(hw + 1, dtype=np.complex128)
    xpad = np.concatenate([pad, x, pad])
    offsets = np.arange(-hw + 1, hw + 1)
    bank = _kernel_bank(hw, beta)

    out = np.empty(len(positions), dtype=np.complex128)
    for lo in range(0, len(positions), chunk):
        p = positions[lo:lo + chunk]
        base = np.floor(p).astype(np.int64)
        frac = p - base
        fi = frac * _KERNEL_RESOLUTION
        row = np.floor(fi).astype(np.int64)
        a = (fi - row)[:, None]
        kern = bank[row] * (1.0 - a) + bank[row + 1] * a
        idx = np.clip(base[:, None] + offsets[None, :] + hw + 1,
                      0, len(xpad) - 1)
        seg = xpad[idx]
        out[lo:lo + chunk] = ((seg.real * kern).sum(axis=1)
                              + 1j * (seg.imag * kern).sum(axis=1))
    return out


def interpolate_affine(x: np.ndarray, stride: float, offset: float,
                       n_out: int,
                       half_width: int = DEFAULT_HALF_WIDTH,
                       beta: float = DEFAULT_KAISER_BETA) -> np.ndarray:
    """Interpolate at positions m * stride + offset, m = 0..n_out-1.

    Equivalent to :func:`sinc_interpolate` on an affine position grid but
    much faster for the two cases the pipeline actually hits: an exactly
    rational stride with zero offset (polyphase filtering) and a stride
    near unity (time warps; segmented constant-delay FIR, position
    quantization below 1/2048 sample).
    """
    x = np.asarray(x, dtype=np.complex128)
    frac_stride = Fraction(stride).limit_denominator(512)
    if offset == 0.0 and abs(float(frac_stride) - stride) < 1e-13:
        return _interp_polyphase(x, frac_stride, n_out, half_width, beta)
    if abs(stride - 1.0) < 0.02:
        return _interp_near_unity(x, stride, offset, n_out, half_width, beta)
    positions = np.arange(n_out) * stride + offset
    return sinc_interpolate(x, positions, half_width, beta)


def _interp_polyphase(x: np.ndarray, ratio: Fraction, n_out: int,
                      half_width: int, beta: float) -> np.ndarray:
    """Positions m * ratio via one exact kernel per phase residue.

    Within a residue class the window start advances by a fixed number of
    input samples, so the gather is a strided view feeding one matvec.
    """
    q, p = ratio.numerator, ratio.denominator  # positions m*q/p
    if ratio == 1:
        out = x[:n_out].copy()
        if n_out > len(x):
            out = np.concatenate([out, np.zeros(n_out - len(x), complex)])
        return out
    hw = int(half_width)
    offsets = np.arange(-hw + 1, hw + 1)
    max_base = (n_out - 1) * q // p
    pad_lo = hw
    pad_hi = max(0, max_base + hw + 1 - len(x))
    xpad = np.concatenate([np.zeros(pad_lo, np.complex128), x,
                           np.zeros(pad_hi, np.complex128)])
    out = np.empty(n_out, dtype=np.complex128)
    itemsize = xpad.itemsize
    for r in range(p):
        m = np.arange(r, n_out, p)
        if m.size == 0:
            continue
        base0 = r * q // p
        frac = (r * q - base0 * p) / p
        arg = frac - offsets
        kern = np.sinc(arg) * _kaiser_window(arg, hw, beta)
        start = base0 - hw + 1 + pad_lo
        rows = np.lib.stride_tricks.as_strided(
            xpad[start:], shape=(m.size, 2 * hw),
            strides=(q * itemsize, itemsize))
        out[m] = rows.real @ kern + 1j * (rows.imag @ kern)
    return out


_SEGMENT_RESOLUTION = 2048


def _interp_near_unity(x: np.ndarray, stride: float, offset: float,
                       n_out: int, half_width: int, beta: float) -> np.ndarray:
    """Slowly-drifting fractional delay as piecewise-constant FIR segments."""
    hw = int(half_width)
    bank = _kernel_bank(hw, beta)

    m = np.arange(n_out, dtype=np.float64)
    pos = m * stride + offset
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    key = (base - np.arange(n_out, dtype=np.int64)) * _SEGMENT_RESOLUTION + \
        np.floor(frac * _SEGMENT_RESOLUTION).astype(np.int64)
    cuts = np.concatenate([[0], 1 + np.flatnonzero(np.diff(key)), [n_out]])

    pad_lo = max(0, hw - int(base.min()))
    pad_hi = max(0, int(base.max()) + hw + 1 - len(x))
    xpad = np.concatenate([np.zeros(pad_lo, np.complex128), x,
                           np.zeros(pad_hi, np.complex128)])
    win = np.lib.stride_tricks.sliding_window_view(xpad, 2 * hw)

    out = np.empty(n_out, dtype=np.complex128)
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        fmid = float(np.mean(frac[s0:s1]))
        fi = fmid * _KERNEL_RESOLUTION
        row = int(fi)
        a = fi - row
        kern = bank[row] * (1.0 - a) + bank[row + 1] * a
        # inside a segment base[k] = k + const, so the window rows form a
        # contiguous slice starting at base - hw + 1 (plus padding shift)
        w0 = int(base[s0]) - hw + 1 + pad_lo
        rows = win[w0:w0 + (s1 - s0)]
        out[s0:s1] = rows.real @ kern + 1j * (rows.imag @ kern)
    return out


def design_lowpass_fir(rate: float, pass_hz: float, stop_hz: float,
                       atten_db: float = 60.0) -> np.ndarray:
    """Linear-phase Kaiser lowpass: flat to pass_hz, >= atten_db past stop_hz."""
    if not 0 < pass_hz < stop_hz <= rate / 2:
        raise ValueError("need 0 < pass_hz < stop_hz <= rate/2")
    width = (stop_hz - pass_hz) / (rate / 2)
    ntaps, kbeta = _sig.kaiserord(atten_db + 6.0, width)
    ntaps |= 1  # odd length keeps the group delay an integer
    cutoff = (pass_hz + stop_hz) / 2
    return _sig.firwin(ntaps, cutoff, window=("kaiser", kbeta), fs=rate)


def fir_filter(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase-aligned FIR filtering (group delay removed)."""
    return _sig.fftconvolve(x, taps, mode="same")


def resample_stream(stream: SampleStream, to_rate: float,
                    new_bandwidth: Optional[float] = None,
                    half_width: int = DEFAULT_HALF_WIDTH,
                    beta: float = DEFAULT_KAISER_BETA) -> SampleStream:
    """Windowed-sinc rate conversion preserving epoch and center.

    Upsampling (or equal rates) is pure interpolation.  Downsampling first
    applies an anti-alias FIR whose passband is ``new_bandwidth`` (two-sided)
    when given, else 80% of the output Nyquist band.
    """
    if to_rate <= 0:
        raise ValueError("target rate must be positive")
    if to_rate == stream.rate:
        return stream.copy_with(samples=stream.samples.copy())

    x = stream.samples
    bw = stream.bandwidth
    if to_rate < stream.rate:
        pass_hz = new_bandwidth / 2 if new_bandwidth else 0.4 * to_rate
        pass_hz = min(pass_hz, 0.93 * to_rate / 2)
        # 120 dB design keeps passband ripple near 1e-6 so round trips
        # stay inside the advertised tolerance
        taps = design_lowpass_fir(stream.rate, pass_hz, to_rate / 2,
                                  atten_db=120.0)
        x = fir_filter(x, taps)
        bw = 2 * pass_hz
    n_out = int(np.floor((len(x) - 1) * to_rate / stream.rate)) + 1
    y = interpolate_affine(x, stream.rate / to_rate, 0.0, n_out,
                           half_width=half_width, beta=beta)
    return stream.copy_with(samples=y, rate=float(to_rate), bandwidth=bw)


def recenter_stream(stream: SampleStream, new_center: float) -> SampleStream:
    """Digitally move the tune frequency; content shifts by center - new_center."""
    shift = stream.center - new_center
    if shift == 0.0:
        return stream.copy_with(samples=stream.samples.copy())
    n = np.arange(len(stream.samples))
    y = stream.samples * np.exp(2j * np.pi * shift * n / stream.rate)
    return stream.copy_with(samples=y, center=float(new_center))
