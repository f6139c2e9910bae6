"""Blind OFDM symbol timing and CFO synchronization.

The search scores each (sample index, CFO) hypothesis by demodulating one
symbol under that hypothesis and measuring how tightly the resulting
constellation clusters; the exhaustive argmax over the search grid is the
synchronization estimate.  Channel center frequency falls out of the
difference between modulation-derived (frame timing) and carrier-derived
(constellation) CFO estimates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ClusteringError
from .sampling import SampleStream, sinc_interpolate
from .synth import gutter_indices

_KMEANS_SEED = 0x5EED  # fixed: scores must be reproducible run to run


def delta_beta_stride(epsilon: float, Fs_hat: float, N_hat: int,
                      Fc_bar: float) -> float:
    """CFO search stride keeping carrier error under epsilon subcarriers."""
    return epsilon * Fs_hat / (N_hat * Fc_bar)


@dataclass
class SyncSearchSpace:
    """Timing and CFO hypothesis grids for one OFDM symbol."""

    n_candidates: np.ndarray
    beta_candidates: np.ndarray

    def __post_init__(self):
        self.n_candidates = np.asarray(self.n_candidates, dtype=np.int64)
        self.beta_candidates = np.asarray(self.beta_candidates, dtype=np.float64)
        if self.n_candidates.size == 0 or self.beta_candidates.size == 0:
            raise ValueError("search space must be nonempty")

    @classmethod
    def build(cls, n_bar: int, d: int, beta_bar: float, beta_max: float,
              stride: float) -> "SyncSearchSpace":
        """Grid centered on priors: |n - n_bar| <= d, |q*stride - beta_bar|
        <= beta_max with beta on integer multiples of the stride."""
        n = np.arange(n_bar - d, n_bar + d + 1)
        q_lo = int(np.ceil((beta_bar - beta_max) / stride))
        q_hi = int(np.floor((beta_bar + beta_max) / stride))
        betas = np.arange(q_lo, q_hi + 1) * stride
        return cls(n_candidates=n, beta_candidates=betas)


@dataclass
class SyncEstimate:
    n_hat: int
    beta_hat: float
    score: float                       # empirical cluster SNR, linear
    constellation: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    centroids: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# Deterministic k-means for constellation scoring


def kmeans_cluster(points: np.ndarray, k: int, restarts: int = 8,
                   max_iter: int = 50,
                   seed: int = _KMEANS_SEED) -> Tuple[np.ndarray, np.ndarray]:
    """k-means on complex points; returns (centroids, labels).

    Fixed-seed k-means++ style initialization; all restarts iterate as one
    batch and the best inertia wins, so repeated calls give identical
    output regardless of timing or thread count.
    """
    pts = np.asarray(points, dtype=np.complex128)
    n = len(pts)
    if n < k:
        raise ClusteringError(f"{n} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    cents = np.stack([_kmeanspp_init(pts, k, rng) for _ in range(restarts)])

    pc = np.conj(pts)
    labels = np.full((restarts, n), -1, dtype=np.int64)
    active = np.ones(restarts, dtype=bool)
    reseeded = np.zeros(restarts, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        c = cents[idx]                              # (a, k)
        # |p - c|^2 up to the |p|^2 term, which argmin ignores
        cross = np.real(pc[None, :, None] * c[:, None, :])
        score = np.abs(c)[:, None, :] ** 2 - 2.0 * cross
        new_labels = np.argmin(score, axis=2)       # (a, n)
        stable = np.all(new_labels == labels[idx], axis=1)
        labels[idx] = new_labels
        active[idx[stable]] = False
        for a, r in enumerate(idx):
            if stable[a]:
                continue
            lab = new_labels[a]
            newc = cents[r]
            empty = []
            for ci in range(k):
                sel = lab == ci
                if sel.any():
                    newc[ci] = pts[sel].mean()
                else:
                    empty.append(ci)
            if empty and not reseeded[r]:
                reseeded[r] = True
                dist = np.abs(pts) ** 2 + score[a][np.arange(n), lab]
                order = np.argsort(dist)[::-1]
                for j, ci in enumerate(empty):
                    newc[ci] = pts[order[j]]
            cents[r] = newc

    cross = np.real(pc[None, :, None] * cents[:, None, :])
    d2 = (np.abs(pts) ** 2)[None, :, None] \
        + np.abs(cents)[:, None, :] ** 2 - 2.0 * cross
    labels = np.argmin(d2, axis=2)
    inertia = np.take_along_axis(d2, labels[:, :, None], axis=2)[:, :, 0].sum(1)
    r = int(np.argmin(inertia))
    lab = labels[r]
    if len(np.unique(lab)) < k:
        raise ClusteringError("degenerate clustering: empty cluster persists")
    return cents[r].copy(), lab


def _kmeanspp_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty(k, dtype=np.complex128)
    centroids[0] = pts[rng.integers(len(pts))]
    d2 = np.abs(pts - centroids[0]) ** 2
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c:] = pts[rng.integers(len(pts), size=k - c)]
            break
        probs = d2 / total
        centroids[c] = pts[rng.choice(len(pts), p=probs)]
        d2 = np.minimum(d2, np.abs(pts - centroids[c]) ** 2)
    return centroids


def cluster_score(points: np.ndarray, centroids: np.ndarray,
                  labels: np.ndarray) -> float:
    """Mean over clusters of |centroid|^2 / (2 * per-component variance).

    Matches the injected linear SNR when clusters are correct: the complex
    within-cluster variance is twice the per-component noise variance.
    """
    scores = []
    for c in range(len(centroids)):
        sel = labels == c
        resid = points[sel] - centroids[c]
        var_comp = np.mean(np.abs(resid) ** 2) / 2.0
        var_comp = max(var_comp, np.finfo(float).tiny)
        scores.append(np.abs(centroids[c]) ** 2 / (2.0 * var_comp))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Symbol demodulation under a (n, beta) hypothesis


def demod_symbol(y: SampleStream, n: float, beta: float, N_hat: int,
                 Ng_hat: int, Fc_bar: Optional[float] = None,
                 half_width: int = 64) -> np.ndarray:
    """Extract, Doppler-correct, and FFT one OFDM symbol; returns N coefficients.

    Resamples the block at (1 - beta) * Fs to undo time dilation, derotates
    the residual carrier beta * Fc_bar, drops the prefix, and applies the
    unitary DFT.  ``n`` may be fractional.
    """
    x = y.samples
    L = N_hat + Ng_hat
    if Fc_bar is None:
        Fc_bar = y.center
    if n < 0 or int(np.ceil(n / (1.0 - beta))) + L + 1 > len(x):
        raise ValueError("symbol interval outside the stream")

    pad = half_width + 4
    lo = max(0, int(np.floor(n)) - pad)
    hi = min(len(x), int(np.ceil(n + (L + 1) / (1.0 - beta))) + pad)
    seg = x[lo:hi]
    pos = (n - lo) + np.arange(L) / (1.0 - beta)
    block = sinc_interpolate(seg, pos, half_width=half_width)
    t = np.arange(L) / ((1.0 - beta) * y.rate)
    block = block * np.exp(2j * np.pi * beta * Fc_bar * t)
    useful = block[Ng_hat:]
    return np.fft.fft(useful) / np.sqrt(N_hat)


def score_sync(y: SampleStream, n: float, beta: float, N_hat: int, Ng_hat: int,
               Fc_bar: Optional[float] = None, bs: int = 2,
               subcarrier_mask: Optional[np.ndarray] = None,
               restarts: int = 8) -> float:
    """Empirical cluster SNR of the symbol demodulated at (n, beta).

    ``n`` may be fractional; grid searches use integers but the score is
    well defined at sub-sample hypotheses too.
    """
    if bs not in (2, 4):
        raise ValueError("bs must be 2 (4QAM) or 4 (16QAM)")
    Y = demod_symbol(y, n, beta, N_hat, Ng_hat, Fc_bar)
    sel = _default_mask(N_hat) if subcarrier_mask is None else subcarrier_mask
    pts = Y[sel]
    centroids, labels = kmeans_cluster(pts, 2 ** bs, restarts=restarts)
    return cluster_score(pts, centroids, labels)


def _default_mask(N: int) -> np.ndarray:
    mask = np.ones(N, dtype=bool)
    mask[gutter_indices(N)] = False
    return mask


def estimate_sync(y: SampleStream, space: SyncSearchSpace, N_hat: int,
                  Ng_hat: int, Fc_bar: Optional[float] = None, bs: int = 2,
                  subcarrier_mask: Optional[np.ndarray] = None,
                  restarts: int = 8) -> SyncEstimate:
    """Exhaustive argmax of the cluster score over the search grid.

    Ties break toward the smallest sample index, then the smallest beta;
    the scan order makes that the first strictly-greater comparison.
    """
    if Fc_bar is None:
        Fc_bar = y.center
    sel = _default_mask(N_hat) if subcarrier_mask is None else subcarrier_mask
    best = None
    failures = 0
    for n in np.sort(space.n_candidates):
        for beta in np.sort(space.beta_candidates):
            try:
                Y = demod_symbol(y, int(n), float(beta), N_hat, Ng_hat, Fc_bar)
                pts = Y[sel]
                centroids, labels = kmeans_cluster(pts, 2 ** bs,
                                                   restarts=restarts)
                s = cluster_score(pts, centroids, labels)
            except ClusteringError:
                failures += 1
                continue
            if best is None or s > best.score:
                best = SyncEstimate(n_hat=int(n), beta_hat=float(beta),
                                    score=s, constellation=pts,
                                    labels=labels, centroids=centroids)
    if best is None:
        raise ClusteringError(
            f"clustering failed at every one of the {failures} grid points")
    return best


# ---------------------------------------------------------------------------
# Energy-based frame detection


def detect_frame_start(y: SampleStream, window: int = 32,
                       theta_low_db: float = 3.0,
                       theta_high_db: float = 6.0,
                       validate_span: int = 8) -> np.ndarray:
    """Indices where windowed energy rises out of the noise floor.

    A rising edge is declared when the moving-average energy crosses
    theta_high above the noise floor after having been below theta_low.
    Candidate edges are kept only when the surrounding spans (quiet
    before, loud after, ``validate_span`` windows each) agree, which
    rejects fades inside a frame, and are then refined by a change-point
    fit.  Returns an empty array when no gaps exist in the capture.
    """
    power = np.abs(y.samples) ** 2
    if len(power) < 4 * window:
        return np.array([], dtype=np.int64)
    kernel = np.ones(window) / window
    energy = np.convolve(power, kernel, mode="valid")
    # the floor must sit inside the inter-frame gaps, which may occupy
    # well under 1% of a fully-loaded capture
    floor = max(np.percentile(energy, 0.2), np.finfo(float).tiny)
    low = floor * 10 ** (theta_low_db / 10)
    high = floor * 10 ** (theta_high_db / 10)

    armed = energy[0] < low
    edges = []
    for i in range(1, len(energy)):
        if not armed and energy[i] < low:
            armed = True
        elif armed and energy[i] > high:
            edges.append(i)
            armed = False

    span = validate_span * window
    mid = (low + high) / 2
    refined = []
    for e in edges:
        pre = energy[max(0, e - span - window):max(1, e - window)]
        post = energy[e:e + span]
        if pre.size and np.mean(pre) > low:
            continue
        if post.size < span // 2 or np.mean(post) < high:
            continue
        lo = max(0, e - 2 * window)
        hi = min(len(power), e + 2 * window)
        cum = np.cumsum(power[lo:hi] - mid)
        refined.append(lo + int(np.argmin(cum)) + 1)
    return np.array(refined, dtype=np.int64)


# ---------------------------------------------------------------------------
# Channel center frequency from frame timing


def estimate_fc(frame_times: Sequence[Tuple[int, float]], beta_sc: float,
                Fc_bar: float, Tf_hat, Fs_hat: float) -> float:
    """Center frequency (Hz, rounded to MHz) from frame-arrival regression.

    Frame arrivals t_r(m) are regressed on nominal times m * Tf with a
    second-order polynomial; the slope excess over unity is the
    modulation-derived CFO, which responds only to time dilation.  The
    constellation-derived ``beta_sc`` additionally absorbs any tune
    offset, so the two separate Fc from Doppler:

        Fc_hat = Fc_bar * (1 - beta_sc) / (1 - beta_bar)
    """
    pts = sorted(frame_times)
    if len(pts) < 3 or len({m for m, _ in pts}) < 3:
        raise ValueError("need at least 3 distinct frames for the fit")
    m = np.array([p[0] for p in pts], dtype=np.float64)
    n0 = np.array([p[1] for p in pts], dtype=np.float64)
    tf = float(Tf_hat)
    t = m * tf
    if t[-1] - t[0] > 1.0 + 1e-9:
        raise ValueError("frame set spans more than 1 s; clock model invalid")
    tr = n0 / Fs_hat
    x = t - t[0]
    coeffs = np.polynomial.polynomial.polyfit(x, tr, 2)
    beta_bar = coeffs[1] - 1.0
    fc = Fc_bar * (1.0 - beta_sc) / (1.0 - beta_bar)
    return round(fc / 1e6) * 1e6
