"""Capture files: interleaved I/Q payload plus a text header sidecar.

Payload holds little-endian interleaved components, either float32 or
int16 (with a scale recorded in the header).  The sidecar lives next to
the payload with the extension ``.iqh`` and carries ``key=value`` lines.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .sampling import SampleStream

HEADER_SUFFIX = ".iqh"
FORMATS = ("float32", "int16")


def _header_path(payload_path: Path) -> Path:
    return payload_path.with_suffix(payload_path.suffix + HEADER_SUFFIX)


def write_capture(path, stream: SampleStream, fmt: str = "float32") -> Path:
    """Write payload + header; returns the payload path."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    path = Path(path)
    inter = np.empty(2 * len(stream.samples), dtype=np.float64)
    inter[0::2] = stream.samples.real
    inter[1::2] = stream.samples.imag
    scale = 1.0
    if fmt == "int16":
        peak = float(np.max(np.abs(inter))) if inter.size else 1.0
        scale = max(peak, np.finfo(float).tiny) / 32000.0
        np.clip(np.round(inter / scale), -32767, 32767) \
            .astype("<i2").tofile(path)
    else:
        inter.astype("<f4").tofile(path)

    lines = [
        f"format={fmt}",
        f"rate={stream.rate!r}",
        f"center={stream.center!r}",
        f"epoch={stream.epoch!r}",
        f"scale={scale!r}",
    ]
    if stream.bandwidth is not None:
        lines.append(f"bandwidth={stream.bandwidth!r}")
    if stream.snr_hint is not None:
        lines.append(f"snr_hint={stream.snr_hint!r}")
    _header_path(path).write_text("\n".join(lines) + "\n")
    return path


def read_capture(path) -> SampleStream:
    path = Path(path)
    hdr_path = _header_path(path)
    if not hdr_path.exists():
        raise FileNotFoundError(f"missing header sidecar {hdr_path}")
    kv = {}
    for raw in hdr_path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    fmt = kv.get("format", "float32")
    if fmt not in FORMATS:
        raise ValueError(f"unsupported capture format {fmt!r}")
    rate = float(kv["rate"])
    if rate <= 0:
        raise ValueError("declared rate must be positive")

    if fmt == "int16":
        raw = np.fromfile(path, dtype="<i2").astype(np.float64)
        raw *= float(kv.get("scale", 1.0))
    else:
        raw = np.fromfile(path, dtype="<f4").astype(np.float64)
    if raw.size % 2 != 0:
        raise ValueError("payload length must be even (interleaved I/Q)")
    samples = raw[0::2] + 1j * raw[1::2]
    return SampleStream(
        samples=samples,
        rate=rate,
        center=float(kv.get("center", 0.0)),
        epoch=float(kv.get("epoch", 0.0)),
        snr_hint=float(kv["snr_hint"]) if "snr_hint" in kv else None,
        bandwidth=float(kv["bandwidth"]) if "bandwidth" in kv else None,
    )


def write_truth_sidecar(path, truth: dict) -> Path:
    """Ground-truth record for closed-loop tests (JSON, next to the capture)."""
    p = Path(path).with_suffix(".truth.json")
    p.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return p


def read_truth_sidecar(path) -> dict:
    p = Path(path)
    if p.suffix != ".json":
        p = p.with_suffix(".truth.json")
    return json.loads(p.read_text())
