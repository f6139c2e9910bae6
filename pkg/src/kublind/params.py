"""Parameter algebra for Ku-band LEO OFDM downlink channels.

Independent parameters (channel bandwidth, subcarrier count, guard length,
frame timing) and the derived quantities that follow from them.  All
arithmetic is carried out on exact rationals because several of the
quantities (frame period 1/750 s, guard interval 2/15 us) have no finite
decimal or binary representation; floats appear only at the API edge.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Union

Rational = Union[int, Fraction]

# Worst-case 95% RMS delay spread reported for the Ku-band LEO-to-ground
# channel, and the ICI budget commonly allotted to residual CFO.
DEFAULT_DELAY_SPREAD_S = Fraction(108, 10**9)
DEFAULT_ICI_EPSILON = 0.02

_KU_BAND_BASE_HZ = Fraction(10_700_000_000)
_CHANNEL_SPACING_HZ = Fraction(250_000_000)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**12)
    if isinstance(x, str):
        return Fraction(x)
    raise TypeError(f"cannot interpret {x!r} as a rational")


@dataclass(frozen=True)
class IndependentParams:
    """Independent signal parameters of one downlink channel.

    Frequencies are in Hz, times in seconds, counts dimensionless.
    """

    Fs: Fraction            # channel bandwidth / information symbol rate
    N: int                  # subcarriers per channel
    Ng: int                 # guard (cyclic prefix) length in samples
    Tf: Fraction            # frame period
    Tfg: Fraction           # frame guard interval
    Nsf: int                # nonzero OFDM symbols per frame
    Nsfd: int               # data (non-synchronization) symbols per frame
    Fc_i: Fraction          # center frequency of the channel in use

    def __post_init__(self):
        object.__setattr__(self, "Fs", _as_fraction(self.Fs))
        object.__setattr__(self, "Tf", _as_fraction(self.Tf))
        object.__setattr__(self, "Tfg", _as_fraction(self.Tfg))
        object.__setattr__(self, "Fc_i", _as_fraction(self.Fc_i))
        validate_independent(self)

    def with_overrides(self, **kw) -> "IndependentParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class DerivedParams:
    """Quantities derived from :class:`IndependentParams` (exact rationals)."""

    T: Fraction             # useful symbol interval, N/Fs
    Tg: Fraction            # symbol guard interval, Ng/Fs
    Tsym: Fraction          # full OFDM symbol interval, T + Tg
    F: Fraction             # subcarrier spacing, Fs/N
    Fdelta: Fraction        # channel-to-channel spacing
    Fg: Fraction            # guard band between channels, Fdelta - Fs


@dataclass(frozen=True)
class DesignBounds:
    """Design-rule inputs used to build candidate sets for blind estimation."""

    Td: Fraction = DEFAULT_DELAY_SPREAD_S    # worst-case delay spread (s)
    epsilon: float = DEFAULT_ICI_EPSILON     # tolerated CFO-induced ICI fraction
    Nsync: int = 2**10                       # coherent sync sample count
    snr: float = 10.0                        # linear power ratio

    def __post_init__(self):
        object.__setattr__(self, "Td", _as_fraction(self.Td))
        if not (0 < self.epsilon < 1):
            raise ValueError("epsilon must lie in (0, 1)")
        if self.Td <= 0:
            raise ValueError("delay spread must be positive")


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def validate_independent(p: IndependentParams) -> None:
    if p.Fs <= 0:
        raise ValueError("Fs must be positive")
    if not is_power_of_two(p.N):
        raise ValueError(f"N must be a power of two, got {p.N}")
    if p.Ng < 0 or p.Ng >= p.N:
        raise ValueError("Ng must satisfy 0 <= Ng < N")
    if p.Ng % 2 != 0:
        raise ValueError("Ng must be even")
    if p.Nsfd > p.Nsf:
        raise ValueError("Nsfd cannot exceed Nsf")
    if p.Tfg < 0:
        raise ValueError("Tfg must be nonnegative")
    tsym = Fraction(p.N + p.Ng) / p.Fs
    # Frame must be able to hold Nsf symbols plus the vacant final interval,
    # with one sample period of slack for rounding at the layout edge.
    if tsym * (p.Nsf + 1) > p.Tf + Fraction(1) / p.Fs:
        raise ValueError("Nsf symbols plus the vacant interval exceed Tf")


def derive_params(ind: IndependentParams,
                  channel_spacing: Rational = _CHANNEL_SPACING_HZ) -> DerivedParams:
    """Evaluate every derived quantity of the parameter table exactly."""
    validate_independent(ind)
    fdelta = _as_fraction(channel_spacing)
    T = Fraction(ind.N) / ind.Fs
    Tg = Fraction(ind.Ng) / ind.Fs
    return DerivedParams(
        T=T,
        Tg=Tg,
        Tsym=T + Tg,
        F=ind.Fs / ind.N,
        Fdelta=fdelta,
        Fg=fdelta - ind.Fs,
    )


def channel_center(i: int) -> float:
    """Center frequency in Hz of downlink channel ``i`` (1-based, 1..8).

    The grid starts at 10.7 GHz with 250 MHz spacing; each center sits
    half a subcarrier above the mid-channel gutter.
    """
    if not 1 <= i <= 8:
        raise ValueError(f"channel index must be in 1..8, got {i}")
    return float(channel_center_exact(i))


def channel_center_exact(i: int) -> Fraction:
    if not 1 <= i <= 8:
        raise ValueError(f"channel index must be in 1..8, got {i}")
    f = Fraction(240_000_000, 1024)  # subcarrier spacing of the published plan
    return _KU_BAND_BASE_HZ + f / 2 + _CHANNEL_SPACING_HZ * Fraction(2 * i - 1, 2)


def ofdm_throughput(bits_per_symbol: int, Fs: float, N: int, Ng: int) -> float:
    """Aggregate bit rate of a fully-modulated OFDM channel, bits/s."""
    if bits_per_symbol < 1:
        raise ValueError("bits_per_symbol must be >= 1")
    return bits_per_symbol * Fs * N / (N + Ng)


def cfo_epsilon(N: int, snr: float, Nsync: int) -> float:
    """ICI fraction induced by the CFO estimation floor.

    Evaluates (N / 2 pi) * sqrt(6 / (SNR * Nsync^3)) for a coherent
    estimation window of Nsync samples at the given linear SNR.
    """
    import math

    if Nsync < 2:
        raise ValueError("Nsync must be >= 2")
    if snr <= 0:
        raise ValueError("snr must be positive")
    return (N / (2 * math.pi)) * math.sqrt(6.0 / (snr * Nsync**3))


# ---------------------------------------------------------------------------
# Config-file serialization: plain "key=value" lines, rationals as "p/q".

_PARAM_FIELDS = ("Fs", "N", "Ng", "Tf", "Tfg", "Nsf", "Nsfd", "Fc_i")


def format_rational(x: Rational) -> str:
    x = _as_fraction(x)
    if x.denominator == 1:
        return str(x.numerator)
    return f"{x.numerator}/{x.denominator}"


def params_to_text(p: IndependentParams) -> str:
    lines = []
    for name in _PARAM_FIELDS:
        v = getattr(p, name)
        lines.append(f"{name}={format_rational(v)}")
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> IndependentParams:
    kv = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    missing = [f for f in _PARAM_FIELDS if f not in kv]
    if missing:
        raise ValueError(f"config missing fields: {missing}")
    return IndependentParams(
        Fs=Fraction(kv["Fs"]),
        N=int(kv["N"]),
        Ng=int(kv["Ng"]),
        Tf=Fraction(kv["Tf"]),
        Tfg=Fraction(kv["Tfg"]),
        Nsf=int(kv["Nsf"]),
        Nsfd=int(kv["Nsfd"]),
        Fc_i=Fraction(kv["Fc_i"]),
    )
