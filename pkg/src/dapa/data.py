"""Corpus ingestion, sliding-window segmentation, and synthetic dyads.

On-disk formats:
  * DAPF tensor file: magic "DAPF", u32 LE version (1 = float32 payload,
    2 = float64), u64 LE rows, u64 LE cols, then rows*cols values LE
    row-major. Version 2 exists for checkpointing float64 models; corpus
    features are always version 1.
  * Manifest: JSON with version, domains, and a session list (id, domain,
    feature/label paths relative to the manifest, optional partner_labels
    and fps).
  * Label file: one decimal float per line, frame order, values in [0, 1].

Windowing follows a 32+32+32 scheme: each 96-frame window scores its middle
32 frames (the core) and sees 32 auxiliary context frames on each side.
Sessions are edge-padded by replicating the first/last frame so every real
frame lands in exactly one core slot.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, FormatError
from .rng import RngStream

DAPF_MAGIC = b"DAPF"
DAPF_HEADER = struct.Struct("<4sIQQ")

WINDOW_LEN = 96
CORE_LEN = 32
AUX_LEN = 32
STRIDE = 32


# -- DAPF binary matrices -----------------------------------------------------


def write_matrix(path, matrix: np.ndarray):
    """Write a 2-D matrix as a DAPF file (float32 -> v1, float64 -> v2)."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FormatError(f"DAPF stores 2-D matrices, got shape {matrix.shape}")
    if matrix.dtype == np.float64:
        version = 2
    else:
        matrix = matrix.astype(np.float32)
        version = 1
    rows, cols = matrix.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DAPF_HEADER.pack(DAPF_MAGIC, version, rows, cols))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def read_matrix(path) -> np.ndarray:
    """Read a DAPF file back, bit-exact, with offset-bearing errors."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < DAPF_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, rows, cols = DAPF_HEADER.unpack_from(raw, 0)
    if magic != DAPF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version not in (1, 2):
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    dtype = np.float32 if version == 1 else np.float64
    expected = DAPF_HEADER.size + rows * cols * dtype().itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw)} bytes, expected {expected} "
            f"(mismatch from byte {min(len(raw), expected)})"
        )
    data = np.frombuffer(raw, dtype=dtype, offset=DAPF_HEADER.size)
    return data.reshape(rows, cols).copy()


def _read_csv_matrix(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise FormatError(
                    f"{path}: ragged CSV row at line {lineno} "
                    f"({len(parts)} fields, expected {width})"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"{path}: bad number at line {lineno}") from exc
    if not rows:
        raise FormatError(f"{path}: empty matrix file")
    return np.asarray(rows, dtype=np.float32)


def read_feature_matrix(path) -> np.ndarray:
    """Feature matrix from DAPF (sniffed by magic) or CSV fallback."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file missing: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == DAPF_MAGIC:
        return read_matrix(path).astype(np.float32, copy=False)
    return _read_csv_matrix(path)


def peek_matrix_shape(path) -> tuple:
    """Rows/cols without loading the payload (DAPF) or by scan (CSV)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file missing: {path}")
    with open(path, "rb") as fh:
        head = fh.read(DAPF_HEADER.size)
    if head[:4] == DAPF_MAGIC:
        if len(head) < DAPF_HEADER.size:
            raise FormatError(f"{path}: truncated header ({len(head)} bytes)")
        _, version, rows, cols = DAPF_HEADER.unpack(head)
        if version not in (1, 2):
            raise FormatError(f"{path}: unsupported version {version} at byte 4")
        return int(rows), int(cols)
    m = _read_csv_matrix(path)
    return m.shape


def read_labels(path) -> np.ndarray:
    """One float per line; every value must lie in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"label file missing: {path}")
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                v = float(line)
            except ValueError as exc:
                raise FormatError(f"{path}: bad label at line {lineno}") from exc
            if not 0.0 <= v <= 1.0:
                raise DataError(
                    f"{path}: label {v} out of [0, 1] at line {lineno}"
                )
            values.append(v)
    if not values:
        raise DataError(f"{path}: empty label file")
    return np.asarray(values, dtype=np.float32)


def write_labels(path, values: np.ndarray):
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(values).reshape(-1):
            fh.write(f"{float(v):.8f}\n")


# -- manifests and sessions ----------------------------------------------------


@dataclass
class SessionRecord:
    session_id: str
    domain: str
    target_features: Path
    partner_features: Path
    target_labels: Path
    partner_labels: Optional[Path] = None
    fps: Optional[float] = None
    frame_count: int = 0


@dataclass
class Corpus:
    records: list
    domain_index: dict
    feature_dim: int
    root: Path

    @property
    def domains(self) -> list:
        return sorted(self.domain_index)

    def by_domain(self) -> dict:
        out = {name: [] for name in self.domain_index}
        for rec in self.records:
            out[rec.domain].append(rec)
        return out


_MANIFEST_KEYS = {"version", "domains", "sessions"}
_SESSION_KEYS = {"id", "domain", "target_features", "partner_features",
                 "target_labels", "partner_labels", "fps"}
_SESSION_REQUIRED = {"id", "domain", "target_features", "partner_features",
                     "target_labels"}


def load_manifest(path) -> Corpus:
    """Load and validate a corpus manifest.

    Checks existence of every referenced file, equal target/partner frame
    counts, label length and range, and a consistent feature width across
    the corpus. Domain indices are assigned in stable alphabetical order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest missing: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise FormatError(f"{path}: unknown manifest keys {sorted(unknown)}")
    if doc.get("version") != 1:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('version')!r}")

    root = path.parent
    records = []
    seen_ids = set()
    feature_dim = None
    for i, sess in enumerate(doc.get("sessions", [])):
        unknown = set(sess) - _SESSION_KEYS
        if unknown:
            raise FormatError(f"{path}: session {i} has unknown keys {sorted(unknown)}")
        missing = _SESSION_REQUIRED - set(sess)
        if missing:
            raise FormatError(f"{path}: session {i} missing keys {sorted(missing)}")
        sid = sess["id"]
        if sid in seen_ids:
            raise DataError(f"{path}: duplicate session id {sid!r}")
        seen_ids.add(sid)
        rec = SessionRecord(
            session_id=sid,
            domain=sess["domain"],
            target_features=root / sess["target_features"],
            partner_features=root / sess["partner_features"],
            target_labels=root / sess["target_labels"],
            partner_labels=root / sess["partner_labels"] if sess.get("partner_labels") else None,
            fps=sess.get("fps"),
        )
        try:
            t_shape = peek_matrix_shape(rec.target_features)
            p_shape = peek_matrix_shape(rec.partner_features)
            labels = read_labels(rec.target_labels)
        except DataError as exc:
            raise DataError(f"session {sid!r}: {exc}") from exc
        if t_shape[0] != p_shape[0]:
            raise DataError(
                f"session {sid!r}: target has {t_shape[0]} frames, "
                f"partner has {p_shape[0]}"
            )
        if t_shape[1] != p_shape[1]:
            raise DataError(
                f"session {sid!r}: feature widths differ "
                f"({t_shape[1]} vs {p_shape[1]})"
            )
        if len(labels) != t_shape[0]:
            raise DataError(
                f"session {sid!r}: {len(labels)} labels for {t_shape[0]} frames"
            )
        if feature_dim is None:
            feature_dim = t_shape[1]
        elif t_shape[1] != feature_dim:
            raise DataError(
                f"session {sid!r}: feature width {t_shape[1]} != corpus width {feature_dim}"
            )
        rec.frame_count = t_shape[0]
        records.append(rec)

    declared = doc.get("domains")
    found = sorted({r.domain for r in records})
    if declared is not None and sorted(declared) != found:
        raise DataError(
            f"{path}: declared domains {sorted(declared)} != session domains {found}"
        )
    domain_index = {name: i for i, name in enumerate(found)}
    return Corpus(records, domain_index, feature_dim or 0, root)


# -- windowing -------------------------------------------------------------------


@dataclass
class WindowSample:
    x_t: np.ndarray  # WINDOW_LEN x D
    x_p: np.ndarray
    y: np.ndarray  # WINDOW_LEN
    core_mask: np.ndarray  # WINDOW_LEN bools, true block centred
    domain: str
    session_id: str
    core_start: int

    @property
    def n_core(self) -> int:
        return int(self.core_mask.sum())


def segment_matrix(x_t: np.ndarray, x_p: np.ndarray, y: np.ndarray,
                   domain: str, session_id: str) -> list:
    """Split one session into overlapping windows.

    Edges are padded by replicating the first/last frame; the tail is padded
    so the final core block is full. Pure-padding core slots carry
    core_mask=False, so each real frame is scored exactly once.
    """
    n = len(y)
    if n < 1:
        raise DataError(f"session {session_id!r} has no frames")
    if len(x_t) != n or len(x_p) != n:
        raise DataError(f"session {session_id!r}: feature/label lengths differ")
    num_cores = (n + CORE_LEN - 1) // CORE_LEN
    windows = []
    for w in range(num_cores):
        core_start = w * STRIDE
        idx = np.clip(np.arange(core_start - AUX_LEN, core_start + CORE_LEN + AUX_LEN),
                      0, n - 1)
        mask = np.zeros(WINDOW_LEN, dtype=bool)
        real = np.arange(CORE_LEN) + core_start < n
        mask[AUX_LEN:AUX_LEN + CORE_LEN] = real
        windows.append(WindowSample(
            x_t=x_t[idx], x_p=x_p[idx], y=y[idx].astype(np.float32),
            core_mask=mask, domain=domain, session_id=session_id,
            core_start=core_start,
        ))
    return windows


def segment_windows(rec: SessionRecord) -> list:
    """Load a session's matrices and window them."""
    x_t = read_feature_matrix(rec.target_features)
    x_p = read_feature_matrix(rec.partner_features)
    y = read_labels(rec.target_labels)
    if not (len(x_t) == len(x_p) == len(y)):
        raise DataError(f"session {rec.session_id!r}: row counts diverged on load")
    return segment_matrix(x_t, x_p, y, rec.domain, rec.session_id)


def stitch_predictions(samples: Sequence[WindowSample],
                       predictions: Sequence[np.ndarray],
                       frame_counts: Optional[dict] = None) -> dict:
    """Reassemble per-window core predictions into full-session sequences.

    Order independent (windows are keyed by origin); raises on overlapping
    or missing core coverage. A missing tail block is only detectable when
    the caller supplies expected per-session ``frame_counts``.
    """
    if len(samples) != len(predictions):
        raise DataError("one prediction array per window sample required")
    per_session = {}
    for sample, pred in zip(samples, predictions):
        pred = np.asarray(pred).reshape(-1)
        if pred.size != WINDOW_LEN:
            raise DataError(
                f"prediction for {sample.session_id!r}@{sample.core_start} "
                f"has {pred.size} frames, expected {WINDOW_LEN}"
            )
        core_block = pred[AUX_LEN:AUX_LEN + CORE_LEN]
        core = core_block[sample.core_mask[AUX_LEN:AUX_LEN + CORE_LEN]]
        per_session.setdefault(sample.session_id, []).append((sample.core_start, core))

    out = {}
    for sid, chunks in per_session.items():
        chunks = sorted(chunks, key=lambda c: c[0])
        starts = [c[0] for c in chunks]
        if len(set(starts)) != len(starts):
            raise DataError(f"session {sid!r}: overlapping core coverage")
        expected = [i * STRIDE for i in range(len(starts))]
        if starts != expected:
            raise DataError(f"session {sid!r}: missing core blocks {sorted(set(expected) - set(starts))}")
        stitched = np.concatenate([c[1] for c in chunks])
        if frame_counts is not None and len(stitched) != frame_counts.get(sid):
            raise DataError(
                f"session {sid!r}: stitched {len(stitched)} frames, "
                f"expected {frame_counts.get(sid)}"
            )
        out[sid] = stitched
    return out


# -- synthetic corpus --------------------------------------------------------------


@dataclass
class WarpParams:
    """Monotone label map: lo + (hi - lo) * e**gamma on e in [0, 1]."""

    lo: float
    hi: float
    gamma: float

    def apply(self, e: np.ndarray) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * np.power(e, self.gamma)


def default_warps(num_domains: int) -> list:
    """Visibly distinct monotone warps: staggered bands and curvatures."""
    gammas = [1.0, 2.4, 0.45, 1.7, 0.7, 3.0]
    warps = []
    for d in range(num_domains):
        if num_domains == 1:
            lo, hi = 0.0, 1.0
        else:
            span = 0.55
            lo = 0.05 + (0.95 - span - 0.05) * d / max(num_domains - 1, 1)
            hi = lo + span
        warps.append(WarpParams(lo, hi, gammas[d % len(gammas)]))
    return warps


@dataclass
class SyntheticSpec:
    num_domains: int = 1
    sessions_per_domain: int = 4
    frames_per_session: int = 2000
    feature_dim: int = 16
    coupling: float = 0.9
    noise_sigma: float = 0.05
    annotation: str = "continuous"  # or "step" (quantized to 5 levels)
    warps: Optional[list] = None
    seed: int = 0
    sinusoids: int = 4
    min_cycles: float = 0.5
    max_cycles: float = 3.0

    def __post_init__(self):
        if self.num_domains < 1 or self.sessions_per_domain < 1:
            raise DataError("need at least one domain and one session per domain")
        if not 0.0 <= self.coupling <= 1.0:
            raise DataError("coupling must be in [0, 1]")
        if self.annotation not in ("continuous", "step"):
            raise DataError("annotation must be 'continuous' or 'step'")
        if self.warps is not None and len(self.warps) != self.num_domains:
            raise DataError("one warp per domain required")

    def domain_name(self, d: int) -> str:
        return f"dom{d}"


def _latent(rng: RngStream, spec: SyntheticSpec) -> np.ndarray:
    """Smooth engagement trace: random slow sinusoids, min-max normalized."""
    t = np.arange(spec.frames_per_session, dtype=np.float64)
    amps = rng.uniform(0.5, 1.0, (spec.sinusoids,))
    cycles = rng.uniform(spec.min_cycles, spec.max_cycles, (spec.sinusoids,))
    phases = rng.uniform(0.0, 2.0 * np.pi, (spec.sinusoids,))
    e = np.zeros_like(t)
    for a, c, ph in zip(amps, cycles, phases):
        e += a * np.sin(2.0 * np.pi * c * t / len(t) + ph)
    lo, hi = e.min(), e.max()
    if hi - lo < 1e-12:
        return np.full_like(e, 0.5)
    return (e - lo) / (hi - lo)


def synthesize_session(spec: SyntheticSpec, domain: int, session: int,
                       lift: np.ndarray):
    """Generate one dyad: (target latent, partner latent, x_t, x_p, labels)."""
    rng = RngStream(spec.seed).spawn("session", domain, session)
    e = _latent(rng.spawn("target"), spec)
    u = _latent(rng.spawn("partner"), spec)
    p = spec.coupling * e + (1.0 - spec.coupling) * u

    def lift_features(latent, noise_rng):
        diff = np.diff(latent, prepend=latent[:1])
        base = np.stack([latent, diff], axis=1) @ lift
        return (base + spec.noise_sigma * noise_rng.normal(base.shape)).astype(np.float32)

    x_t = lift_features(e, rng.spawn("noise_t"))
    x_p = lift_features(p, rng.spawn("noise_p"))

    warps = spec.warps if spec.warps is not None else default_warps(spec.num_domains)
    labels = warps[domain].apply(e)
    if spec.annotation == "step":
        labels = np.round(labels * 4.0) / 4.0
    labels = np.clip(labels, 0.0, 1.0)
    return e, p, x_t, x_p, labels


def corpus_lift(spec: SyntheticSpec) -> np.ndarray:
    """One global 2 x D lift so feature semantics are shared corpus-wide."""
    return RngStream(spec.seed).spawn("lift").normal((2, spec.feature_dim))


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> Path:
    """Write a full corpus (DAPF features, labels, manifest); returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lift = corpus_lift(spec)
    sessions = []
    for d in range(spec.num_domains):
        for s in range(spec.sessions_per_domain):
            _, _, x_t, x_p, labels = synthesize_session(spec, d, s, lift)
            sid = f"{spec.domain_name(d)}_s{s:02d}"
            t_path = f"{sid}_target.dapf"
            p_path = f"{sid}_partner.dapf"
            y_path = f"{sid}_labels.txt"
            write_matrix(out_dir / t_path, x_t)
            write_matrix(out_dir / p_path, x_p)
            write_labels(out_dir / y_path, labels)
            sessions.append({
                "id": sid,
                "domain": spec.domain_name(d),
                "target_features": t_path,
                "partner_features": p_path,
                "target_labels": y_path,
                "fps": 25.0,
            })
    manifest = {
        "version": 1,
        "domains": [spec.domain_name(d) for d in range(spec.num_domains)],
        "sessions": sessions,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest_path
