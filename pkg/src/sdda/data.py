"""Trial containers, the binary dataset format, synthetic domains and batching."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"SDDA"
FORMAT_VERSION = 1
NO_LABEL = -1


class DatasetFormatError(ValueError):
    """A dataset file is malformed; the message carries the byte offset."""


@dataclass
class Trial:
    matrix: np.ndarray
    label: int | None = None


@dataclass(eq=False)
class Session:
    """Trials recorded in one sitting, stored as a dense (n, C, T) array.

    ``labels`` holds one class index per trial, or ``NO_LABEL`` (-1) for
    unlabeled trials.
    """

    data: np.ndarray
    labels: np.ndarray
    channel_names: list[str]
    sampling_rate: int = 128

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"session data must be (n, C, T), got shape {self.data.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.data.shape[0]:
            raise ValueError(f"{self.data.shape[0]} trials but {self.labels.shape[0]} labels")
        self.channel_names = list(self.channel_names)
        if len(self.channel_names) != self.data.shape[1]:
            raise ValueError(f"{len(self.channel_names)} channel names for {self.data.shape[1]} channels")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ValueError("duplicate channel names")

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def labeled(self) -> bool:
        return bool(np.all(self.labels >= 0))

    @property
    def trials(self) -> list[Trial]:
        return [Trial(x, int(y) if y >= 0 else None) for x, y in zip(self.data, self.labels)]

    @classmethod
    def from_trials(cls, trials: Sequence[Trial], channel_names: Sequence[str], sampling_rate: int = 128) -> Session:
        shapes = {t.matrix.shape for t in trials}
        if len(shapes) > 1:
            raise ValueError(f"trials of one session must share (C, T); got {sorted(shapes)}")
        data = np.stack([t.matrix for t in trials]) if trials else np.zeros((0, len(channel_names), 0))
        labels = [NO_LABEL if t.label is None else t.label for t in trials]
        return cls(data, labels, channel_names, sampling_rate)

    def take(self, index) -> Session:
        return Session(self.data[index], self.labels[index], self.channel_names, self.sampling_rate)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Session):
            return NotImplemented
        return (
            self.channel_names == other.channel_names
            and self.sampling_rate == other.sampling_rate
            and self.data.shape == other.data.shape
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class Domain:
    sessions: list[Session]
    role: str = "source"
    n_classes: int = 2

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"domain role must be 'source' or 'target', got {self.role!r}")
        names = {tuple(s.channel_names) for s in self.sessions}
        if len(names) > 1:
            raise ValueError("all sessions of a domain must share channel names")

    @property
    def channel_names(self) -> list[str]:
        return list(self.sessions[0].channel_names) if self.sessions else []

    @property
    def n_trials(self) -> int:
        return sum(s.n_trials for s in self.sessions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Domain):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and len(self.sessions) == len(other.sessions)
            and all(a == b for a, b in zip(self.sessions, other.sessions))
        )


# ---------------------------------------------------------------------------
# synthetic two-domain generator


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic motor-imagery-like transfer pair.

    Each class owns a spatial pattern over the source montage through which
    a mu-band oscillation is projected on top of spatially coloured noise.
    Every session is multiplied by its own random SPD matrix; the target
    headset keeps only the first ``n_common_channels`` rows, is rotated by
    ``domain_shift`` radians in a random plane and carries its oscillation
    ``band_shift`` Hz higher than the source.
    """

    n_source_channels: int = 8
    n_common_channels: int = 3
    n_samples: int = 256
    n_classes: int = 2
    trials_per_class: int = 24
    target_trials_per_class: int | None = 48  # None: same as trials_per_class
    source_sessions: int = 2
    target_sessions: int = 1
    sampling_rate: int = 128
    snr: float = 0.5
    session_jitter: float = 0.3
    domain_shift: float = 0.3
    band: tuple[float, float] = (8.0, 13.0)
    band_shift: float = 5.0
    class_ratio: float = 1.0
    source_label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_common_channels <= self.n_source_channels:
            raise ValueError("need 1 <= n_common_channels <= n_source_channels")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.snr <= 0:
            raise ValueError("snr must be positive (use math.inf for the noiseless limit)")
        if self.target_trials_per_class is not None and self.target_trials_per_class < 1:
            raise ValueError("target_trials_per_class must be positive")
        if self.trials_per_class < 1 or self.source_sessions < 1 or self.target_sessions < 1:
            raise ValueError("trial and session counts must be positive")
        if self.class_ratio < 1:
            raise ValueError("class_ratio must be >= 1")
        if not 0 <= self.source_label_noise < 1:
            raise ValueError("source_label_noise must lie in [0, 1)")
        lo, hi = self.band
        if not 0 < lo < hi < self.sampling_rate / 2:
            raise ValueError(f"band {self.band} must lie inside (0, Nyquist)")
        if not 0 < lo + self.band_shift < hi + self.band_shift < self.sampling_rate / 2:
            raise ValueError(f"band_shift {self.band_shift} moves the target band outside (0, Nyquist)")

    @classmethod
    def from_dict(cls, raw: dict) -> SynthSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {unknown}")
        raw = dict(raw)
        if "band" in raw:
            raw["band"] = tuple(raw["band"])
        return cls(**raw)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["band"] = list(self.band)
        return out


def channel_names(n: int) -> list[str]:
    return [f"ch{i}" for i in range(n)]


def _random_spd(rng: np.random.Generator, dim: int, magnitude: float) -> np.ndarray:
    sym = rng.standard_normal((dim, dim))
    sym = 0.5 * (sym + sym.T) / np.sqrt(dim)
    evals, evecs = np.linalg.eigh(sym)
    return (evecs * np.exp(magnitude * evals)) @ evecs.T


def _random_rotation(rng: np.random.Generator, dim: int, angle: float) -> np.ndarray:
    """Rotation by ``angle`` radians within a random 2-plane (identity if dim < 2)."""
    if dim < 2:
        return np.eye(dim)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    return np.eye(dim) + (c - 1) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))


def _band_limited(rng: np.random.Generator, n: int, t: int, fs: float, band: tuple[float, float]) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal((n, t)), axis=-1)
    freqs = np.fft.rfftfreq(t, d=1.0 / fs)
    spectrum[:, (freqs < band[0]) | (freqs > band[1])] = 0
    sig = np.fft.irfft(spectrum, n=t, axis=-1)
    return sig / sig.std(axis=-1, keepdims=True)


def _class_counts(spec: SynthSpec, role: str) -> list[int]:
    # class_ratio > 1 makes class 0 the majority class (non-target:target)
    minority = spec.trials_per_class
    if role == "target" and spec.target_trials_per_class is not None:
        minority = spec.target_trials_per_class
    return [int(round(minority * spec.class_ratio))] + [minority] * (spec.n_classes - 1)


def synth_generate(spec: SynthSpec) -> tuple[Domain, Domain]:
    """Generate a (source, target) pair; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    cs, ct, t = spec.n_source_channels, spec.n_common_channels, spec.n_samples
    patterns = rng.standard_normal((spec.n_classes, cs))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    noise_mix = rng.standard_normal((cs, cs)) / np.sqrt(cs)
    noise_scale = 0.0 if np.isinf(spec.snr) else 1.0 / np.sqrt(spec.snr)
    shift = _random_rotation(rng, ct, spec.domain_shift)
    names = channel_names(cs)

    def make_session(role: str) -> Session:
        counts = _class_counts(spec, role)
        labels = np.repeat(np.arange(spec.n_classes), counts)
        n = labels.shape[0]
        band = spec.band
        if role == "target":
            band = (band[0] + spec.band_shift, band[1] + spec.band_shift)
        source = _band_limited(rng, n, t, spec.sampling_rate, band)
        amp = 1.0 + 0.25 * rng.standard_normal((n, 1))
        x = patterns[labels][:, :, None] * (amp * source)[:, None, :] * np.sqrt(cs)
        if noise_scale:
            x = x + noise_scale * np.einsum("cd,ndt->nct", noise_mix, rng.standard_normal((n, cs, t)))
        jitter = _random_spd(rng, cs, spec.session_jitter)
        x = np.einsum("cd,ndt->nct", jitter, x)
        if role == "target":
            x = np.einsum("cd,ndt->nct", shift, x[:, :ct])
        order = rng.permutation(n)
        x, labels = x[order], labels[order]
        if role == "source" and spec.source_label_noise > 0:
            flip = rng.random(n) < spec.source_label_noise
            labels = np.where(flip, (labels + rng.integers(1, spec.n_classes, n)) % spec.n_classes, labels)
        return Session(x.astype(np.float32), labels, names[:ct] if role == "target" else names, spec.sampling_rate)

    source = Domain([make_session("source") for _ in range(spec.source_sessions)], "source", spec.n_classes)
    target = Domain([make_session("target") for _ in range(spec.target_sessions)], "target", spec.n_classes)
    return source, target


# ---------------------------------------------------------------------------
# binary dataset format


def save_dataset(domain: Domain, path: str | Path) -> None:
    """Write ``domain`` in the little-endian SDDA binary format."""
    parts = [MAGIC, struct.pack("<HHI", FORMAT_VERSION, domain.n_classes, len(domain.sessions))]
    for s in domain.sessions:
        parts.append(struct.pack("<IHII", s.n_trials, s.n_channels, s.n_samples, s.sampling_rate))
        for name in s.channel_names:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
        data = np.ascontiguousarray(s.data, dtype="<f4")
        for i in range(s.n_trials):
            label = int(s.labels[i])
            parts.append(struct.pack("<BH", label >= 0, max(label, 0)))
            parts.append(data[i].tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"truncated file: need {n} bytes for {what} at byte offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_dataset(path: str | Path, role: str = "source") -> Domain:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at byte offset 0")
    version, n_classes, n_sessions = r.unpack("<HHI", "header")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version} at byte offset 4")
    sessions = []
    for _ in range(n_sessions):
        n, c, t, fs = r.unpack("<IHII", "session header")
        names = []
        for _ in range(c):
            (length,) = r.unpack("<H", "channel name length")
            names.append(r.take(length, "channel name").decode("utf-8"))
        data = np.empty((n, c, t), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            has_label, label = r.unpack("<BH", "trial label")
            labels[i] = label if has_label else NO_LABEL
            data[i] = np.frombuffer(r.take(4 * c * t, "trial samples"), dtype="<f4").reshape(c, t)
        sessions.append(Session(data, labels, names, fs))
    if r.pos != len(r.buf):
        raise DatasetFormatError(f"trailing bytes after byte offset {r.pos}")
    return Domain(sessions, role, n_classes)


# ---------------------------------------------------------------------------
# text import / export


def export_csv(domain: Domain, directory: str | Path) -> Path:
    """Write one CSV per trial (C rows x T columns) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for si, s in enumerate(domain.sessions):
        for ti in range(s.n_trials):
            fname = f"s{si:03d}_t{ti:05d}.csv"
            np.savetxt(directory / fname, s.data[ti], delimiter=",", fmt="%.9g")
            label = int(s.labels[ti])
            entries.append({"file": fname, "session": f"s{si:03d}", "label": label if label >= 0 else None})
    manifest = {
        "channel_names": domain.channel_names,
        "sampling_rate": domain.sessions[0].sampling_rate if domain.sessions else 128,
        "n_classes": domain.n_classes,
        "trials": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def import_csv(directory: str | Path, manifest: str | Path = "manifest.json", role: str = "source") -> Domain:
    """Build a Domain from per-trial CSV files listed in a JSON manifest.

    The manifest carries ``channel_names``, ``sampling_rate``, ``n_classes``
    and a ``trials`` list of ``{"file", "session", "label"}`` records. Trials
    are grouped into sessions in order of first appearance.
    """
    directory = Path(directory)
    meta = json.loads((directory / manifest).read_text())
    names = meta["channel_names"]
    fs = int(meta.get("sampling_rate", 128))
    grouped: dict[str, list[Trial]] = {}
    for entry in meta["trials"]:
        with open(directory / entry["file"], newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        widths = {len(row) for row in rows}
        if len(widths) != 1:
            raise ValueError(f"{entry['file']}: ragged rows")
        matrix = np.asarray(rows, dtype=np.float32)
        if matrix.shape[0] != len(names):
            raise ValueError(f"{entry['file']}: {matrix.shape[0]} channels, manifest declares {len(names)}")
        grouped.setdefault(str(entry["session"]), []).append(Trial(matrix, entry.get("label")))
    sessions = [Session.from_trials(trials, names, fs) for trials in grouped.values()]
    return Domain(sessions, role, int(meta.get("n_classes", 2)))


# ---------------------------------------------------------------------------
# batching


def batch_iterator(
    items: int | Sequence, batch_size: int, seed: int, drop_last: bool = False, epoch: int = 0
) -> list:
    """One epoch of shuffled mini-batches.

    ``items`` is either a count (batches are index arrays) or a sequence
    (batches are lists of its elements). The shuffle depends only on
    ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = items if isinstance(items, (int, np.integer)) else len(items)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    stop = n - n % batch_size if drop_last else n
    batches = [order[i : i + batch_size] for i in range(0, stop, batch_size)]
    if isinstance(items, (int, np.integer)):
        return batches
    return [[items[i] for i in b] for b in batches]


@dataclass
class CyclingSampler:
    """Endless stream of fixed-size index batches, reshuffled on every pass."""

    n: int
    batch_size: int
    seed: int
    _pass: int = field(default=0, init=False)
    _queue: list = field(default_factory=list, init=False)

    def __iter__(self) -> Iterator[np.ndarray]:
        return self

    def __next__(self) -> np.ndarray:
        size = min(self.batch_size, self.n)
        while len(self._queue) < size:
            self._queue.extend(np.random.default_rng([self.seed, self._pass]).permutation(self.n).tolist())
            self._pass += 1
        out, self._queue = self._queue[:size], self._queue[size:]
        return np.asarray(out)
