"""Core CSI sample types and the portable CSB on-disk format.

A capture is either a complex CFR tensor over (rx, tx, subcarrier, packet)
or an already-extracted real feature sequence over (packet, feature).
Samples are stored in CSB files (binary, little-endian, f32 payload) and
indexed by a plain CSV manifest, so fixtures are bit-exact and language
neutral.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

CSB_MAGIC = b"CSI1"
_HEADER = struct.Struct("<4sBBIIIII")  # magic, kind, scenario, subject, 4 dims

MANIFEST_COLUMNS = ("path", "subject_id", "scenario", "split")
SPLITS = ("train", "test")


class CsbFormatError(Exception):
    """Raised when a CSB file or manifest violates the format contract."""


class PayloadKind(IntEnum):
    COMPLEX = 1
    AMPLITUDE = 2
    PHASE = 3


class Scenario(IntEnum):
    TSHIRT = 0
    COAT = 1
    BACKPACK = 2
    SYNTHETIC = 3


def _require_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass
class ComplexCsiTensor:
    """Complex CFR samples, row-major over (rx, tx, subcarrier, packet)."""

    n_rx: int
    n_tx: int
    n_sub: int
    n_pkt: int
    data: np.ndarray

    def __post_init__(self) -> None:
        for name in ("n_rx", "n_tx", "n_sub", "n_pkt"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        self.data = np.asarray(self.data, dtype=np.complex128)
        shape = (self.n_rx, self.n_tx, self.n_sub, self.n_pkt)
        if self.data.shape != shape:
            if self.data.size != int(np.prod(shape)):
                raise ValueError(
                    f"data has {self.data.size} entries, expected {np.prod(shape)}"
                )
            self.data = self.data.reshape(shape)
        _require_finite(self.data, "CSI tensor")

    @property
    def n_feat(self) -> int:
        return self.n_rx * self.n_tx * self.n_sub


@dataclass
class FeatureSequence:
    """Real-valued (packet, feature) matrix fed to the encoders."""

    n_pkt: int
    n_feat: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.n_pkt < 1 or self.n_feat < 1:
            raise ValueError("n_pkt and n_feat must be >= 1")
        self.data = np.asarray(self.data, dtype=np.float64)
        shape = (self.n_pkt, self.n_feat)
        if self.data.shape != shape:
            if self.data.size != self.n_pkt * self.n_feat:
                raise ValueError(
                    f"data has {self.data.size} entries, expected {self.n_pkt * self.n_feat}"
                )
            self.data = self.data.reshape(shape)
        _require_finite(self.data, "feature sequence")


@dataclass
class SampleRecord:
    """One labeled capture: payload plus identity and scenario metadata.

    ``dims`` keeps the originating (rx, tx, subcarrier, packet) counts even
    for flattened feature payloads, so subcarrier grouping stays
    reconstructible after preprocessing. When omitted it is derived from the
    payload (feature payloads default to a single antenna pair).
    """

    subject_id: int
    scenario: Scenario
    payload: ComplexCsiTensor | FeatureSequence
    payload_kind: PayloadKind
    dims: tuple[int, int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.subject_id < 0:
            raise ValueError("subject_id must be >= 0")
        self.scenario = Scenario(self.scenario)
        self.payload_kind = PayloadKind(self.payload_kind)
        if self.payload_kind == PayloadKind.COMPLEX:
            if not isinstance(self.payload, ComplexCsiTensor):
                raise ValueError("complex payload_kind requires a ComplexCsiTensor")
            p = self.payload
            derived = (p.n_rx, p.n_tx, p.n_sub, p.n_pkt)
            if self.dims is None:
                self.dims = derived
            elif tuple(self.dims) != derived:
                raise ValueError("dims inconsistent with complex payload")
        else:
            if not isinstance(self.payload, FeatureSequence):
                raise ValueError("feature payload_kind requires a FeatureSequence")
            if self.dims is None:
                self.dims = (1, 1, self.payload.n_feat, self.payload.n_pkt)
            rx, tx, sub, pkt = self.dims
            if rx * tx * sub != self.payload.n_feat or pkt != self.payload.n_pkt:
                raise ValueError("dims inconsistent with feature payload")
        self.dims = tuple(int(d) for d in self.dims)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: int
    scenario: Scenario
    split: str


@dataclass
class Manifest:
    """Ordered index over sample files with train/test split labels."""

    entries: list[ManifestEntry] = field(default_factory=list)

    def paths(self, split: str | None = None) -> list[str]:
        return [e.path for e in self.entries if split is None or e.split == split]

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for e in self.entries:
            counts[e.split] += 1
        return counts


def write_sample(record: SampleRecord, path: str | Path) -> None:
    """Write one record as a CSB file.

    Payload values are stored as little-endian f32 (complex payloads store
    interleaved real/imag pairs). Values that do not survive the f32 cast
    finitely are rejected.
    """
    rx, tx, sub, pkt = record.dims
    with np.errstate(over="ignore"):
        if record.payload_kind == PayloadKind.COMPLEX:
            payload = np.ascontiguousarray(record.payload.data).astype("<c8")
        else:
            payload = np.ascontiguousarray(record.payload.data).astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise ValueError("payload not representable as finite f32")
    header = _HEADER.pack(
        CSB_MAGIC,
        int(record.payload_kind),
        int(record.scenario),
        record.subject_id,
        rx,
        tx,
        sub,
        pkt,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_sample(path: str | Path) -> SampleRecord:
    """Read a CSB file back into a SampleRecord, validating the header."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CsbFormatError(f"{path}: file shorter than header")
    magic, kind_b, scen_b, subject, rx, tx, sub, pkt = _HEADER.unpack_from(raw)
    if magic != CSB_MAGIC:
        raise CsbFormatError(f"{path}: bad magic {magic!r}")
    try:
        kind = PayloadKind(kind_b)
        scenario = Scenario(scen_b)
    except ValueError as exc:
        raise CsbFormatError(f"{path}: {exc}") from exc
    if min(rx, tx, sub, pkt) < 1:
        raise CsbFormatError(f"{path}: zero dimension in header")
    n_values = rx * tx * sub * pkt
    itemsize = 8 if kind == PayloadKind.COMPLEX else 4
    expected = n_values * itemsize
    body = raw[_HEADER.size :]
    if len(body) < expected:
        raise CsbFormatError(
            f"{path}: payload truncated ({len(body)} bytes, header promises {expected})"
        )
    if len(body) > expected:
        raise CsbFormatError(f"{path}: {len(body) - expected} trailing bytes")
    if kind == PayloadKind.COMPLEX:
        values = np.frombuffer(body, dtype="<c8").astype(np.complex128)
        payload: ComplexCsiTensor | FeatureSequence = ComplexCsiTensor(
            rx, tx, sub, pkt, values.reshape(rx, tx, sub, pkt)
        )
    else:
        values = np.frombuffer(body, dtype="<f4").astype(np.float64)
        payload = FeatureSequence(pkt, rx * tx * sub, values.reshape(pkt, rx * tx * sub))
    return SampleRecord(subject, scenario, payload, kind, dims=(rx, tx, sub, pkt))


def load_manifest(path: str | Path) -> Manifest:
    """Parse a manifest CSV, rejecting duplicates and unknown tokens."""
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise CsbFormatError(
                f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}"
            )
        for i, row in enumerate(reader, start=2):
            rel = row["path"]
            if rel in seen:
                raise CsbFormatError(f"{path}:{i}: duplicate path {rel!r}")
            seen.add(rel)
            try:
                subject = int(row["subject_id"])
            except (TypeError, ValueError) as exc:
                raise CsbFormatError(f"{path}:{i}: bad subject_id") from exc
            if subject < 0:
                raise CsbFormatError(f"{path}:{i}: negative subject_id")
            scen_name = (row["scenario"] or "").upper()
            if scen_name not in Scenario.__members__:
                raise CsbFormatError(f"{path}:{i}: unknown scenario {row['scenario']!r}")
            split = row["split"]
            if split not in SPLITS:
                raise CsbFormatError(f"{path}:{i}: unknown split {split!r}")
            entries.append(ManifestEntry(rel, subject, Scenario[scen_name], split))
    return Manifest(entries)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest CSV (UTF-8, LF line endings)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([e.path, e.subject_id, e.scenario.name.lower(), e.split])


def feature_index(rx: int, tx: int, sub: int, n_tx: int, n_sub: int) -> int:
    """Column of the (rx, tx, subcarrier) triple in a flattened sequence."""
    return (rx * n_tx + tx) * n_sub + sub


def flatten_features(values: np.ndarray) -> np.ndarray:
    """Flatten per-entry values (rx, tx, sub, pkt) to a (pkt, feature) matrix.

    Column order is antenna-pair major, subcarrier minor; see
    :func:`feature_index`.
    """
    values = np.asarray(values)
    if values.ndim != 4:
        raise ValueError(f"expected a 4-d array, got shape {values.shape}")
    rx, tx, sub, pkt = values.shape
    return np.moveaxis(values, -1, 0).reshape(pkt, rx * tx * sub)


def unflatten_features(seq: np.ndarray, dims: tuple[int, int, int, int]) -> np.ndarray:
    """Inverse of :func:`flatten_features` for a known (rx, tx, sub, pkt)."""
    rx, tx, sub, pkt = dims
    seq = np.asarray(seq)
    if seq.shape != (pkt, rx * tx * sub):
        raise ValueError(f"sequence shape {seq.shape} does not match dims {dims}")
    return np.moveaxis(seq.reshape(pkt, rx, tx, sub), 0, -1)
