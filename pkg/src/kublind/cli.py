"""Batch command-line front end.

Subcommands: ``synth`` (render a capture), ``identify`` (blind parameter
estimation), ``seqest`` (synchronization sequence recovery), ``pss-scan``
(matched-filter frame timing).  Exit codes: 0 success, 2 pipeline stage
failure, 3 I/O or configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import pipeline, seqest, starlink, sync
from .cyclo import resample
from .errors import IdentificationError
from .iqfile import (
    read_capture,
    read_truth_sidecar,
    write_capture,
    write_truth_sidecar,
)
from .params import params_from_text
from .sampling import recenter_stream

EXIT_OK = 0
EXIT_STAGE = 2
EXIT_IO = 3


def _load_run_config(path) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig()
    if path:
        data = json.loads(Path(path).read_text())
        valid = {f.name for f in dc_fields(pipeline.RunConfig)}
        unknown = set(data) - valid
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for k, v in data.items():
            setattr(cfg, k, v)
    return cfg


def _parse_occupancy(text):
    if text is None or text == "all":
        return None
    if ":" in text:  # "1:30" = one occupied slot out of 30
        on, period = text.split(":")
        pattern = [False] * int(period)
        pattern[0] = True
        del on
        return pattern
    return [c == "1" for c in text]


def cmd_synth(args) -> int:
    params = starlink.table2()
    if args.config:
        params = params_from_text(Path(args.config).read_text())
    if args.center is not None:
        params = params.with_overrides(Fc_i=Fraction(int(args.center)))
    spec = pipeline.SynthSpec(
        params=params,
        n_frames=args.frames,
        snr_db=args.snr_db,
        beta=args.beta,
        tau0=args.tau0,
        Fr=args.rate,
        Fh=args.fh,
        Fc_bar=args.tune,
        occupancy=_parse_occupancy(args.occupancy),
        payload_symbols=args.payload_symbols,
        n_16qam=args.n_16qam,
        pilot_subcarriers=tuple(args.pilot_subcarriers or ()),
        pilot_power_fraction=args.pilot_power,
        seed=args.seed,
    )
    stream, truth = pipeline.synth_capture(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_capture(out, stream, fmt=args.format)
    write_truth_sidecar(out, truth)
    print(f"wrote {out} ({len(stream)} samples at {stream.rate:.6g} Hz)")
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg = _load_run_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.stage:
        cfg.stages = args.stage
    if args.fs_guess:
        cfg.fs_guess = args.fs_guess
    stream = read_capture(args.capture)
    report = pipeline.run_identification(stream, cfg)
    text = report.to_text()
    print(text, end="")
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "report.txt").write_text(text)
    if not report.ok:
        print(f"stage failed: {report.failed_stage()}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


def _prepare_band(path, channel_center, cfg, Fs_hat):
    """Load, upconvert, recenter, and frame-sync one capture for seqest."""
    y = read_capture(path)
    original_bw = y.bandwidth if y.bandwidth is not None else y.rate
    offset = y.center - channel_center
    if y.rate != Fs_hat:
        y = resample(y, Fs_hat)
    if offset != 0.0:
        y = recenter_stream(y, channel_center)
    N, Ng = 1024, 32
    starts = sync.detect_frame_start(y, window=Ng)
    if len(starts) == 0:
        raise IdentificationError(f"{path}: no frames detected")
    syncs = pipeline.sync_detected_frames(y, starts, N, Ng,
                                          Fraction(1, 750), cfg)
    return y, syncs, offset, original_bw


def _refine_fractional_start(y, n00, beta, window=12):
    """Sub-sample frame start from the PSS correlation peak."""
    L = 1056
    lo = max(0, int(n00) - window - 80)
    hi = min(len(y), int(n00) + L + window + 80)
    piece = y.copy_with(samples=y.samples[lo:hi])
    corr = starlink.correlate_pss(piece, beta=beta)
    base = int(n00) - lo
    seg_lo = max(1, base - window)
    seg_hi = min(len(corr) - 1, base + window + 1)
    rel = seg_lo + int(np.argmax(corr[seg_lo:seg_hi]))
    a, b, c = corr[rel - 1], corr[rel], corr[rel + 1]
    denom = a - 2 * b + c
    frac = 0.5 * (a - c) / denom if denom < 0 else 0.0
    return lo + rel + frac


def cmd_seqest(args) -> int:
    cfg = _load_run_config(args.config)
    if args.beta_m:
        cfg.beta_m = args.beta_m
    Fs_hat = 240e6
    N, Ng = 1024, 32
    captures = [Path(p) for p in args.capture]
    wideband = [p for p in captures
                if read_capture(p).rate >= 0.98 * Fs_hat]
    outdir = Path(args.out) if args.out else None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)

    want_pss = args.target in ("pss", "both")
    want_sss = args.target in ("sss", "both")
    results = {}

    if want_pss:
        if not wideband:
            print("first-symbol sequence recovery refused: it needs "
                  "full-channel-bandwidth content, and every supplied "
                  "capture is narrowband", file=sys.stderr)
            return EXIT_STAGE
        path = wideband[0]
        y = read_capture(path)
        if args.truth:
            truth = read_truth_sidecar(args.truth)
            n00s = [s for s, occ in zip(truth["frame_starts"],
                                        truth["occupancy"]) if occ]
            betas = [_apparent_beta(truth)] * len(n00s)
        else:
            starts = sync.detect_frame_start(y, window=Ng)
            syncs = pipeline.sync_detected_frames(y, starts, N, Ng,
                                                  Fraction(1, 750), cfg)
            n00s = [_refine_fractional_start(y, n00, b)
                    for _, n00, b, _ in syncs]
            betas = [b for _, _, b, _ in syncs]
        rec = pipeline.recover_pss(y, n00s, betas, N, Ng, Fs_hat)
        results["pss"] = rec
        print(f"recovered q_pss = {rec.pss_hex}")
        print(f"matches stored constant: {rec.pss_matches}")
        if outdir:
            (outdir / "recovered_pss.txt").write_text(
                f"q_pss={rec.pss_hex}\nmatches={rec.pss_matches}\n")

    if want_sss:
        center = args.center
        if center is None:
            center = float(np.median([read_capture(p).center
                                      for p in captures]))
        band_runs = []
        for path in captures:
            y, syncs, offset, bw = _prepare_band(path, center, cfg, Fs_hat)
            rows, obs = [], []
            for _, n00, beta, _ in syncs:
                rows.append(sync.demod_symbol(y, n00 + (N + Ng), beta, N, Ng))
                n00f = _refine_fractional_start(y, n00, beta)
                obs.append(seqest.extract_sync_block(y, n00f, beta, N, Ng))
            mask = pipeline.band_mask_for_capture(offset, bw, N, Fs_hat)
            band_runs.append({"Y_rows": np.array(rows), "mask": mask,
                              "observations": obs, "bandwidth": bw})
        rec = pipeline.recover_sss_from_bands(band_runs, N, Ng, Fs_hat)
        results["sss"] = rec
        print(f"recovered q_sss = {rec.sss_hex}")
        print(f"matches stored constant: {rec.sss_matches}")
        if outdir:
            (outdir / "recovered_sss.txt").write_text(
                f"q_sss={rec.sss_hex}\nmatches={rec.sss_matches}\n")

    bad = [k for k, r in results.items()
           if (r.pss_matches is False) or (r.sss_matches is False)]
    if bad:
        print(f"recovered constants differ from stored: {bad}",
              file=sys.stderr)
    return EXIT_OK


def _apparent_beta(truth: dict) -> float:
    """CFO the receiver sees: true beta plus any tune offset, via carrier."""
    fc, fcb, beta = truth["Fc"], truth["Fc_bar"], truth["beta"]
    return (fcb - fc * (1.0 - beta)) / fcb


def cmd_pss_scan(args) -> int:
    y = read_capture(args.capture)
    corr, peaks = pipeline.pss_scan(y, beta=args.beta)
    outdir = Path(args.out) if args.out else None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "pss_corr.csv", "w") as f:
            f.write("index,mag\n")
            step = max(1, len(corr) // 200000)
            for i in range(0, len(corr), step):
                f.write(f"{i},{corr[i]!r}\n")
        with open(outdir / "pss_peaks.csv", "w") as f:
            f.write("index,value,time\n")
            for p in peaks:
                f.write(f"{p['index']},{p['value']!r},{p['time']!r}\n")
    print(f"{len(peaks)} peaks")
    for p in peaks:
        print(f"  n={p['index']} value={p['value']:.3f} t={p['time']:.9f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="kublind",
        description="Synthesize and blindly identify Ku-band OFDM downlink "
                    "captures")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="render a synthetic capture")
    sp.add_argument("--out", required=True, help="output capture path")
    sp.add_argument("--config", help="parameter file (key=value rationals)")
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--rate", type=float, default=62.5e6,
                    help="receiver sample rate Fr (Hz)")
    sp.add_argument("--fh", type=float, default=60e6,
                    help="prefilter bandwidth (Hz); <=0 disables")
    sp.add_argument("--center", type=float, default=None,
                    help="true channel center override (Hz)")
    sp.add_argument("--tune", type=float, default=None,
                    help="receiver tune frequency (Hz); default = center")
    sp.add_argument("--snr-db", type=float, default=5.5)
    sp.add_argument("--beta", type=float, default=0.0)
    sp.add_argument("--tau0", type=float, default=0.0)
    sp.add_argument("--occupancy", default="all",
                    help='"all", bit string like "1101", or "1:30"')
    sp.add_argument("--payload-symbols", type=int, default=None)
    sp.add_argument("--n-16qam", type=int, default=0)
    sp.add_argument("--pilot-subcarriers", type=int, nargs="*", default=None)
    sp.add_argument("--pilot-power", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--format", choices=("float32", "int16"),
                    default="float32")
    sp.set_defaults(func=cmd_synth)

    ip = sub.add_parser("identify", help="blind parameter identification")
    ip.add_argument("--capture", required=True)
    ip.add_argument("--config", help="run config JSON")
    ip.add_argument("--out", help="directory for report + CSV diagnostics")
    ip.add_argument("--stage", choices=("all", "cyclo"), default=None)
    ip.add_argument("--fs-guess", type=float, default=None)
    ip.set_defaults(func=cmd_identify)

    qp = sub.add_parser("seqest", help="recover synchronization sequences")
    qp.add_argument("--capture", action="append", required=True,
                    help="capture path (repeat for sub-band sets)")
    qp.add_argument("--config", help="run config JSON")
    qp.add_argument("--out")
    qp.add_argument("--target", choices=("pss", "sss", "both"),
                    default="both")
    qp.add_argument("--center", type=float, default=None,
                    help="channel center the bands share (Hz)")
    qp.add_argument("--truth", help="truth sidecar for timing (closed loop)")
    qp.add_argument("--beta-m", type=float, default=None)
    qp.set_defaults(func=cmd_seqest)

    cp = sub.add_parser("pss-scan", help="matched-filter frame timing scan")
    cp.add_argument("--capture", required=True)
    cp.add_argument("--beta", type=float, default=0.0)
    cp.add_argument("--out")
    cp.set_defaults(func=cmd_pss_scan)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "fh", None) is not None and args.fh is not None \
            and args.fh <= 0:
        args.fh = None
    try:
        return args.func(args)
    except IdentificationError as e:
        print(f"pipeline failure: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
