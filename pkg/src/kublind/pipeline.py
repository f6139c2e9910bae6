"""End-to-end orchestration: synthesis configs, the identification run,
sequence recovery, and report/CSV emission.

Each stage of the identification run is recorded with its estimate,
candidate sets, and score traces; failures carry the stage name and leave
partial diagnostics on disk for post-mortem plotting.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cyclo, seqest, starlink, sync
from .errors import IdentificationError
from .iqfile import write_capture, write_truth_sidecar
from .params import IndependentParams, format_rational
from .sampling import SampleStream, recenter_stream, resample_stream
from .synth import (
    ChannelConfig,
    SymbolGrid,
    apply_channel,
    build_frames,
    noise_density_for_snr,
    random_payload,
)


@dataclass
class RunConfig:
    """Pipeline knobs; defaults match the operational desk-scale setup."""

    # candidate-set construction
    p: float = 0.05
    nu_db: float = 10.0
    Np: int = 1
    Td: float = 108e-9
    Tm: float = 2e-3
    # sync search
    d: int = 64
    beta_m: float = 7.5e-5
    epsilon: float = 0.02
    bs: int = 2
    sync_frames: int = 6
    # priors
    fs_guess: Optional[float] = None
    beta_prior: float = 0.0
    # bookkeeping
    seed: int = 0
    out_dir: Optional[str] = None
    stages: str = "all"   # "cyclo" stops after frame layout

    @property
    def nu(self) -> float:
        return 10.0 ** (self.nu_db / 10.0)

    def corr_config(self, M: Optional[int] = None) -> cyclo.CyclicCorrConfig:
        return cyclo.CyclicCorrConfig(M=M, Np=self.Np, p=self.p, nu=self.nu)


# ---------------------------------------------------------------------------
# Synthesis driver


@dataclass
class SynthSpec:
    """Everything needed to render one reproducible capture."""

    params: IndependentParams
    n_frames: int = 8
    snr_db: Optional[float] = 5.5
    beta: float = 0.0
    tau0: float = 0.0
    Fr: float = 62.5e6
    Fh: Optional[float] = 60e6
    Fc_bar: Optional[float] = None     # None: tuned exactly to the channel
    occupancy: Optional[Sequence[bool]] = None
    payload_symbols: Optional[int] = None
    modulation: str = "4qam"
    n_16qam: int = 0                   # leading payload symbols sent as 16QAM
    pilot_subcarriers: Sequence[int] = ()
    pilot_power_fraction: float = 0.0
    seed: int = 0


def synth_capture(spec: SynthSpec) -> Tuple[SampleStream, dict]:
    """Render a capture and its ground-truth sidecar record."""
    ind = spec.params
    nsym = spec.payload_symbols
    if nsym is None:
        nsym = ind.Nsfd + 2   # fill every non-sync interval
    nsym = min(nsym, ind.Nsf - 2)
    schedule = ["16qam" if i < spec.n_16qam else spec.modulation
                for i in range(nsym)]
    grids = [
        random_payload(nsym, ind.N, schedule, seed=spec.seed + 1000 * m,
                       pilot_subcarriers=spec.pilot_subcarriers,
                       pilot_power_fraction=spec.pilot_power_fraction)
        for m in range(spec.n_frames)
    ]
    tx = build_frames(grids, ind, spec.n_frames, occupancy=spec.occupancy)

    fc = float(ind.Fc_i)
    fc_bar = spec.Fc_bar if spec.Fc_bar is not None else fc
    n0 = 0.0
    if spec.snr_db is not None:
        n0 = noise_density_for_snr(10 ** (spec.snr_db / 10.0), float(ind.Fs))
    cfg = ChannelConfig(beta=spec.beta, tau0=spec.tau0, Fc=fc, Fc_bar=fc_bar,
                        noise_density=n0, Fr=spec.Fr, Fh=spec.Fh)
    rx = apply_channel(tx, cfg, noise_seed=spec.seed + 77)

    occ = np.ones(spec.n_frames, dtype=bool)
    if spec.occupancy is not None:
        occ = np.resize(np.asarray(spec.occupancy, dtype=bool), spec.n_frames)
    tf = float(ind.Tf)
    frame_starts = [
        (m * tf / (1.0 - spec.beta) + spec.tau0) * spec.Fr
        for m in range(spec.n_frames)
    ]
    truth = {
        "params": {k: format_rational(getattr(ind, k)) if k in
                   ("Fs", "Tf", "Tfg", "Fc_i") else getattr(ind, k)
                   for k in ("Fs", "N", "Ng", "Tf", "Tfg", "Nsf", "Nsfd",
                             "Fc_i")},
        "beta": spec.beta,
        "tau0": spec.tau0,
        "Fc": fc,
        "Fc_bar": fc_bar,
        "Fr": spec.Fr,
        "Fh": spec.Fh,
        "snr_db": spec.snr_db,
        "noise_density": n0,
        "seed": spec.seed,
        "occupancy": [bool(o) for o in occ],
        "frame_starts": frame_starts,
        "payload_symbols": nsym,
    }
    return rx, truth


# ---------------------------------------------------------------------------
# Identification run


@dataclass
class StageResult:
    name: str
    ok: bool
    summary: Dict = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class IdentificationReport:
    stages: List[StageResult] = field(default_factory=list)
    estimates: Dict = field(default_factory=dict)
    csv_files: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.ok for s in self.stages)

    def failed_stage(self) -> Optional[str]:
        for s in self.stages:
            if not s.ok:
                return s.name
        return None

    def to_text(self) -> str:
        lines = []
        for s in self.stages:
            status = "ok" if s.ok else f"FAILED ({s.error})"
            lines.append(f"[stage {s.name}] {status}")
            for k in sorted(s.summary):
                lines.append(f"{s.name}.{k}={_fmt(s.summary[k])}")
        lines.append("")
        for k in sorted(self.estimates):
            lines.append(f"{k}={_fmt(self.estimates[k])}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, Fraction):
        return format_rational(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(_fmt(x) for x in np.asarray(v).tolist())
    return str(v)


def _write_csv(out_dir: Optional[Path], name: str, header: Sequence[str],
               rows, report: IdentificationReport) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    report.csv_files.append(str(path))


def run_identification(stream: SampleStream,
                       cfg: Optional[RunConfig] = None) -> IdentificationReport:
    """Run the blind stage sequence on one capture.

    Stages: subcarrier count, bandwidth, resampling, guard length, frame
    period, frame detection, symbol/CFO sync, frame layout, center
    frequency.  Execution stops at the first failing stage; the report
    records everything up to that point.
    """
    cfg = cfg or RunConfig()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    report = IdentificationReport()
    fs_bar = cfg.fs_guess
    if fs_bar is None:
        fs_bar = _spectrum_guess(stream)
        report.estimates["fs_guess_from_spectrum"] = fs_bar

    # --- subcarrier count -------------------------------------------------
    try:
        nest = cyclo.estimate_N(stream, fs_bar, cfg.corr_config())
        d = nest.diagnostics
        _write_csv(out_dir, "n_scan.csv", ["tau", "mag"],
                   zip(d["taus"].tolist(), d["mags"].tolist()), report)
        report.stages.append(StageResult(
            "estimate_N", True,
            {"N_hat": nest.N_hat, "Nr_hat": nest.Nr_hat,
             "rejected": list(d["rejected"]),
             "validation_ratio": d["ratios"][nest.N_hat]}))
    except (IdentificationError, ValueError) as e:
        report.stages.append(StageResult("estimate_N", False, {}, str(e)))
        return report
    N_hat, Nr_hat = nest.N_hat, nest.Nr_hat

    # --- bandwidth ---------------------------------------------------------
    fs_hat = cyclo.estimate_Fs(N_hat, Nr_hat, stream.rate)
    report.stages.append(StageResult("estimate_Fs", True, {"Fs_hat": fs_hat}))
    report.estimates.update(N_hat=N_hat, Nr_hat=Nr_hat, Fs_hat=fs_hat)

    # --- resample to the channel rate ---------------------------------------
    if fs_hat != stream.rate:
        y = cyclo.resample(stream, fs_hat)
    else:
        y = stream
    report.stages.append(StageResult(
        "resample", True, {"rate": y.rate, "n_samples": len(y)}))

    # --- guard length --------------------------------------------------------
    try:
        ngest = cyclo.estimate_Ng(y, N_hat, cfg.corr_config(), Td=cfg.Td)
        d = ngest.diagnostics
        _write_csv(out_dir, "ng_scan.csv", ["symbol_len", "guard_len", "score"],
                   zip(d["xis"].tolist(), d["ng_candidates"].tolist(),
                       d["scores"].tolist()), report)
        alphas, prof = cyclo.cyclic_alpha_profile(
            y, N_hat, alpha_max=4.5 / (N_hat + ngest.Ng_hat),
            M=min(len(y) - N_hat, 8 * 320000))
        _write_csv(out_dir, "ng_alpha_profile.csv", ["alpha_tilde", "mag"],
                   zip((alphas * (N_hat + ngest.Ng_hat)).tolist(),
                       prof.tolist()), report)
        report.stages.append(StageResult(
            "estimate_Ng", True,
            {"Ng_hat": ngest.Ng_hat, "margin": d["margin"]}))
    except (IdentificationError, ValueError) as e:
        report.stages.append(StageResult("estimate_Ng", False, {}, str(e)))
        return report
    Ng_hat = ngest.Ng_hat
    report.estimates["Ng_hat"] = Ng_hat

    # --- frame period ---------------------------------------------------------
    try:
        tfest = cyclo.estimate_Tf(y, N_hat, Ng_hat, cfg.Tm, cfg.corr_config())
        d = tfest.diagnostics
        mags = d["mags"]
        step = max(1, len(mags) // 20000)
        _write_csv(out_dir, "tf_scan.csv", ["tau", "mag"],
                   ((int(i), float(mags[i]))
                    for i in range(0, len(mags), step)), report)
        report.stages.append(StageResult(
            "estimate_Tf", True,
            {"Tf_hat": tfest.Tf_hat, "frame_rate_hz": tfest.frame_rate_hz,
             "tau_star": tfest.tau_star}))
    except (IdentificationError, ValueError) as e:
        report.stages.append(StageResult("estimate_Tf", False, {}, str(e)))
        return report
    Tf_hat = tfest.Tf_hat
    report.estimates["Tf_hat"] = Tf_hat
    report.estimates["frame_rate_hz"] = tfest.frame_rate_hz

    # --- frame layout -----------------------------------------------------------
    layout = seqest.frame_layout(Tf_hat, N_hat, Ng_hat, fs_hat)
    report.stages.append(StageResult(
        "frame_layout", True,
        {"Nsf_hat": layout.Nsf_hat, "Nsfd_hat": layout.Nsfd_hat,
         "Tfg_hat": layout.Tfg_hat}))
    report.estimates.update(Nsf_hat=layout.Nsf_hat, Nsfd_hat=layout.Nsfd_hat,
                            Tfg_hat=layout.Tfg_hat)
    if cfg.stages == "cyclo":
        return report

    # --- frame detection -----------------------------------------------------
    starts = sync.detect_frame_start(y, window=max(4, Ng_hat))
    ok = len(starts) > 0
    report.stages.append(StageResult(
        "detect_frame_start", ok,
        {"n_detected": len(starts), "first": starts[:8]},
        None if ok else "no energy rise found"))
    if not ok:
        return report

    # --- symbol and CFO sync ------------------------------------------------
    try:
        frame_syncs = sync_detected_frames(y, starts, N_hat, Ng_hat,
                                            Tf_hat, cfg)
        first = frame_syncs[0]
        _write_csv(out_dir, "constellation.csv", ["re", "im", "cluster"],
                   ((float(p.real), float(p.imag), int(l)) for p, l in
                    zip(first[3].constellation, first[3].labels)), report)
        report.stages.append(StageResult(
            "estimate_sync", True,
            {"n_frames_synced": len(frame_syncs),
             "beta_hat": first[2], "n00_hat": first[1],
             "score_db": 10 * np.log10(max(first[3].score, 1e-300))}))
    except (IdentificationError, ValueError) as e:
        report.stages.append(StageResult("estimate_sync", False, {}, str(e)))
        return report
    report.estimates["beta_hat"] = frame_syncs[0][2]

    # --- center frequency ------------------------------------------------------
    try:
        frame_times = [(m, n00) for m, n00, _, _ in frame_syncs]
        fc_hat = sync.estimate_fc(frame_times, frame_syncs[0][2],
                                  y.center, Tf_hat, fs_hat)
        report.stages.append(StageResult("estimate_fc", True,
                                         {"Fc_hat": fc_hat}))
        report.estimates["Fc_hat"] = fc_hat
    except (IdentificationError, ValueError) as e:
        report.stages.append(StageResult("estimate_fc", False, {}, str(e)))
    return report


def _spectrum_guess(stream: SampleStream) -> float:
    """Occupied bandwidth from the power spectrum; crude, wideband-only."""
    from scipy import signal as _sig

    nper = min(len(stream.samples), 4096)
    f, psd = _sig.welch(stream.samples, fs=stream.rate, nperseg=nper,
                        return_onesided=False)
    top = np.percentile(psd, 95)
    occupied = psd > top / 4
    return float(occupied.mean() * stream.rate)


def sync_detected_frames(y: SampleStream, starts: np.ndarray, N_hat: int,
                         Ng_hat: int, Tf_hat, cfg: RunConfig
                         ) -> List[Tuple[int, float, float, sync.SyncEstimate]]:
    """Estimate (frame index, n00, beta) for up to cfg.sync_frames frames.

    The first frame gets a staged coarse/fine exhaustive search over the
    second symbol interval (the first holds no constellation); later
    frames reuse its CFO with small refinement grids.  Frame indices come
    from the detected starts, so sparse occupancy is handled naturally.
    """
    L = N_hat + Ng_hat
    stride = sync.delta_beta_stride(cfg.epsilon, y.rate, N_hat, y.center)
    nf = float(Tf_hat) * y.rate
    mask = None
    if y.bandwidth is not None and y.bandwidth < 0.95 * y.rate:
        mask = band_mask_for_capture(0.0, y.bandwidth, N_hat, y.rate)
        mask[[0, 1, N_hat - 2, N_hat - 1]] = False

    results = []
    est0 = None
    n00_ref = None
    for edge in starts[:max(1, cfg.sync_frames)]:
        n_bar = int(edge) + L
        if n_bar + 2 * L >= len(y):
            continue
        if est0 is None:
            # coarse grid: n every 4 samples (prefix keeps the basin wide),
            # beta every 8 strides (ICI stays negligible within that)
            coarse = sync.SyncSearchSpace(
                np.arange(n_bar - cfg.d, n_bar + cfg.d + 1, 4),
                sync.SyncSearchSpace.build(
                    n_bar, 1, cfg.beta_prior, cfg.beta_m,
                    8 * stride).beta_candidates)
            c = sync.estimate_sync(y, coarse, N_hat, Ng_hat, bs=cfg.bs,
                                   subcarrier_mask=mask)
            fine = sync.SyncSearchSpace.build(
                c.n_hat, 4, c.beta_hat, 10 * stride, stride)
            est = sync.estimate_sync(y, fine, N_hat, Ng_hat, bs=cfg.bs,
                                     subcarrier_mask=mask)
            est0 = est
        else:
            space = sync.SyncSearchSpace.build(
                n_bar, 8, est0.beta_hat, 3 * stride, stride)
            est = sync.estimate_sync(y, space, N_hat, Ng_hat, bs=cfg.bs,
                                     subcarrier_mask=mask)
        n00 = float(est.n_hat - L)
        if n00_ref is None:
            n00_ref = n00
        m = int(round((n00 - n00_ref) / nf))
        results.append((m, n00, est.beta_hat, est))
    if not results:
        raise IdentificationError("no frame could be synchronized")
    return results


# ---------------------------------------------------------------------------
# Sequence recovery run


@dataclass
class SequenceRecovery:
    pss_hex: Optional[str] = None
    pss_matches: Optional[bool] = None
    sss_hex: Optional[str] = None
    sss_matches: Optional[bool] = None
    details: Dict = field(default_factory=dict)


def band_mask_for_capture(offset_hz: float, bandwidth: float, N: int,
                          Fs: float, margin: float = 0.9) -> np.ndarray:
    """Subcarriers of the channel grid that a sub-band capture observes."""
    k = np.arange(N)
    f = np.where(k < N // 2, k, k - N) * (Fs / N)
    return np.abs(f - offset_hz) <= margin * bandwidth / 2


def recover_pss(y: SampleStream, n00s, betas, N: int = 1024, Ng: int = 32,
                Fs_hat: float = 240e6) -> SequenceRecovery:
    """Wideband-capture PSS recovery; refuses narrowband input."""
    if y.rate < 0.98 * Fs_hat:
        raise ValueError(
            "first-symbol sequence recovery needs a capture spanning the "
            f"full channel bandwidth ({Fs_hat:.0f} Hz); this capture was "
            f"sampled at {y.rate:.0f} Hz")
    sub, diag = seqest.estimate_pss_subsequence(y, n00s, betas, N, Ng)
    hex_ = seqest.pss_subsequence_to_hex(sub)
    rec = SequenceRecovery(pss_hex=hex_,
                           pss_matches=(hex_ == starlink.Q_PSS_HEX))
    rec.details["coherence"] = diag["coherence"]
    rec.details["frames_used"] = diag["frames_used"]
    rec.details["subsequence"] = sub
    return rec


def recover_sss_from_bands(band_runs: Sequence[Dict],
                           N: int = 1024, Ng: int = 32,
                           Fs_hat: float = 240e6) -> SequenceRecovery:
    """Stitch per-band differentials and resolve the anchor symbols.

    Each entry of ``band_runs`` carries: ``Y_rows`` (demodulated
    second-symbol coefficients), ``mask`` (observed subcarriers),
    ``observations`` (corrected sync blocks), ``bandwidth``.
    """
    segments = [seqest.estimate_sss_differential(r["Y_rows"], r["mask"])
                for r in band_runs]
    merged, cover = seqest.stitch_bands(segments) if len(segments) > 1 \
        else (segments[0], {"unobserved": np.array([]), "conflicts": 0})
    obs_groups = [(r["observations"], r.get("bandwidth")) for r in band_runs]
    X, s, diag = seqest.resolve_sss_ambiguity(
        merged, starlink.pss_replica(), obs_groups, N=N, Ng=Ng, rate=Fs_hat)
    hex_ = seqest.sss_indices_to_hex(s, N)
    rec = SequenceRecovery(sss_hex=hex_,
                           sss_matches=(hex_ == starlink.Q_SSS_HEX))
    rec.details["margin_db"] = diag["margin_db"]
    rec.details["coverage"] = cover
    rec.details["coefficients"] = X
    return rec


# ---------------------------------------------------------------------------
# Matched-filter scan


def pss_scan(y: SampleStream, beta: float = 0.0,
             min_height: float = 0.25,
             floor_factor: float = 8.0) -> Tuple[np.ndarray, List[Dict]]:
    """PSS correlation series plus detected peak list with sub-sample times."""
    corr = starlink.correlate_pss(y, beta=beta)
    floor = float(np.median(corr))
    height = max(min_height, floor_factor * floor)
    rep_len = len(y) - len(corr) + 1
    peaks = []
    i = 1
    while i < len(corr) - 1:
        if corr[i] >= height and corr[i] >= corr[i - 1] and corr[i] >= corr[i + 1]:
            a, b, c = corr[i - 1], corr[i], corr[i + 1]
            denom = a - 2 * b + c
            frac = 0.5 * (a - c) / denom if denom < 0 else 0.0
            peaks.append({"index": i, "value": float(b),
                          "time": y.epoch + (i + frac) / y.rate})
            i += rep_len // 2
        else:
            i += 1
    return corr, peaks
