"""Sensor stream ingestion, windowing, per-subject standardization and splits."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

CACHE_VERSION = 1
UNLABELED = -1


class ParseError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------- config

PAMAP2_PROTOCOL_ACTIVITIES = (1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24)
PAMAP2_COLUMNS = 54
_PAMAP2_IMU_START = {"hand": 3, "chest": 20, "ankle": 37}
# offsets inside one 17-column IMU block: temperature, acc(±16g), acc(±6g), gyro, mag, orientation
_PAMAP2_OFFSETS = {"acc": 1, "gyro": 7, "mag": 10}

DSA_PARTS = ("torso", "right_arm", "left_arm", "right_leg", "left_leg")
DSA_COLUMNS = 45


def _imu_channels(parts: dict[str, int], offsets: dict[str, int]):
    channels: dict[str, int] = {}
    body_parts: dict[str, list[str]] = {}
    for part, start in parts.items():
        names = []
        for modality, off in offsets.items():
            for a, axis in enumerate("xyz"):
                name = f"{part}_{modality}_{axis}"
                channels[name] = start + off + a
                names.append(name)
        body_parts[part] = names
    return channels, body_parts


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: str = ""
    sampling_rate: float = 16.0
    window_seconds: float = 2.0
    overlap: float = 0.5
    channels: dict[str, int] = field(default_factory=dict)
    body_parts: dict[str, list[str]] = field(default_factory=dict)
    query_part: str = ""
    activity_map: dict[int, int] = field(default_factory=dict)
    n_columns: int | None = None
    train_fraction: float = 0.8
    label_fraction: float = 1.0
    seed: int = 0
    subject_order: list[int] | None = None
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        self.activity_map = {int(k): int(v) for k, v in self.activity_map.items()}
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        samples = self.window_seconds * self.sampling_rate
        if samples <= 0 or abs(samples - round(samples)) > 1e-9:
            raise ValueError(f"window_seconds * sampling_rate must be a positive integer, got {samples}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.body_parts:
            if self.query_part not in self.body_parts:
                raise ValueError(f"query_part {self.query_part!r} is not a configured body part")
            if self.channels:
                unknown = {c for names in self.body_parts.values() for c in names} - set(self.channels)
                if unknown:
                    raise ValueError(f"body parts reference unknown channels: {sorted(unknown)}")

    @property
    def window_len(self) -> int:
        return int(round(self.window_seconds * self.sampling_rate))

    @property
    def channel_names(self) -> list[str]:
        """Channel order used everywhere downstream: body part by body part."""
        if self.body_parts:
            return [c for names in self.body_parts.values() for c in names]
        return list(self.channels)

    @property
    def n_classes(self) -> int:
        if self.activity_map:
            return max(self.activity_map.values()) + 1
        return int(self.synthetic.get("n_classes", 3))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activity_map"] = {str(k): v for k, v in self.activity_map.items()}
        return d


def pamap2_config(root: str = "", **overrides) -> DatasetConfig:
    channels, body_parts = _imu_channels(_PAMAP2_IMU_START, _PAMAP2_OFFSETS)
    base = dict(
        kind="pamap2",
        root=root,
        sampling_rate=100.0,
        channels=channels,
        body_parts=body_parts,
        query_part="hand",
        activity_map={a: i for i, a in enumerate(PAMAP2_PROTOCOL_ACTIVITIES)},
        n_columns=PAMAP2_COLUMNS,
    )
    base.update(overrides)
    return DatasetConfig(**base)


def dsa_config(root: str = "", **overrides) -> DatasetConfig:
    parts = {p: 9 * i for i, p in enumerate(DSA_PARTS)}
    channels, body_parts = _imu_channels(parts, {"acc": 0, "gyro": 3, "mag": 6})
    base = dict(
        kind="dsa",
        root=root,
        sampling_rate=25.0,
        channels=channels,
        body_parts=body_parts,
        query_part="right_arm",
        activity_map={a: a - 1 for a in range(1, 20)},
        n_columns=DSA_COLUMNS,
    )
    base.update(overrides)
    return DatasetConfig(**base)


def synthetic_config(**overrides) -> DatasetConfig:
    synth = dict(
        n_subjects=4,
        n_classes=3,
        n_parts=2,
        channels_per_part=3,
        windows_per_subject=300,
        bout_windows=6,
        mixing=1.0,
        noise=0.3,
        freq_step=0.35,
        seed=0,
    )
    synth.update(overrides.pop("synthetic", {}))
    channels = {}
    body_parts = {}
    for p in range(synth["n_parts"]):
        names = [f"part{p}_ch{c}" for c in range(synth["channels_per_part"])]
        body_parts[f"part{p}"] = names
        for n in names:
            channels[n] = len(channels)
    base = dict(
        kind="synthetic",
        sampling_rate=16.0,
        channels=channels,
        body_parts=body_parts,
        query_part="part0",
        synthetic=synth,
    )
    base.update(overrides)
    return DatasetConfig(**base)


# ------------------------------------------------------------------- records


@dataclass
class SubjectStream:
    """Raw, time-ordered samples of one subject.

    ``labels`` holds class indices with ``-1`` where no activity label exists.
    """

    subject: int
    data: np.ndarray
    labels: np.ndarray
    channel_names: tuple[str, ...]
    dropped_rows: int = 0

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class SensorWindow:
    data: np.ndarray
    subject: int
    label: int | None
    channel_names: tuple[str, ...]


@dataclass
class WindowSet:
    """A batch of windows stored as arrays: ``X`` is ``[N, l, d]``."""

    X: np.ndarray
    y: np.ndarray
    subject: np.ndarray
    channel_names: tuple[str, ...]

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> SensorWindow:
        label = int(self.y[i])
        return SensorWindow(self.X[i], int(self.subject[i]), None if label < 0 else label, self.channel_names)

    def __iter__(self) -> Iterator[SensorWindow]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.X[idx], self.y[idx], self.subject[idx], self.channel_names)

    def for_subject(self, subject: int) -> "WindowSet":
        return self.subset(np.flatnonzero(self.subject == subject))

    def labeled(self) -> "WindowSet":
        return self.subset(np.flatnonzero(self.y >= 0))

    @property
    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject))

    @staticmethod
    def empty(window_len: int, channel_names: Sequence[str]) -> "WindowSet":
        d = len(channel_names)
        return WindowSet(
            np.zeros((0, window_len, d)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), tuple(channel_names)
        )

    @staticmethod
    def concat(parts: Sequence["WindowSet"]) -> "WindowSet":
        parts = list(parts)
        return WindowSet(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.subject for p in parts]),
            parts[0].channel_names,
        )


# -------------------------------------------------------------------- parsing


def _subject_id(name: str) -> int:
    digits = re.findall(r"\d+", name)
    if not digits:
        raise ValueError(f"cannot derive a subject id from {name!r}")
    return int(digits[-1])


def _load_table(path: Path, delimiter: str | None, n_columns: int | None) -> np.ndarray:
    text = path.read_text()
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(delimiter) if delimiter else line.split()
        if n_columns is not None and len(fields) != n_columns:
            raise ParseError(path, lineno, f"expected {n_columns} columns, found {len(fields)}")
        try:
            rows.append([float(v) for v in fields])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    if not rows:
        return np.zeros((0, n_columns or 0))
    width = len(rows[0])
    for lineno, r in enumerate(rows, start=1):
        if len(r) != width:
            raise ParseError(path, lineno, f"expected {width} columns, found {len(r)}")
    return np.asarray(rows, dtype=np.float64)


def parse_pamap2(root, cfg: DatasetConfig) -> list[SubjectStream]:
    """One stream per ``subject*.dat`` file; rows outside the protocol or with NaNs are dropped."""
    root = Path(root)
    files = sorted(root.glob("*.dat"))
    if not files:
        raise ParseError(root, None, "no PAMAP2 .dat files found")
    names = cfg.channel_names
    cols = [cfg.channels[n] for n in names]
    streams = []
    for path in files:
        table = _load_table(path, None, cfg.n_columns)
        subject = _subject_id(path.stem)
        if table.shape[0] == 0:
            log.warning("%s: no rows", path)
            streams.append(SubjectStream(subject, np.zeros((0, len(cols))), np.zeros(0, dtype=np.int64), tuple(names)))
            continue
        activity = table[:, 1].astype(np.int64)
        data = table[:, cols]
        keep = np.isin(activity, list(cfg.activity_map)) & np.isfinite(data).all(axis=1)
        dropped = int((~keep).sum())
        labels = np.array([cfg.activity_map[a] for a in activity[keep]], dtype=np.int64)
        if dropped:
            log.info("%s: dropped %d of %d rows", path.name, dropped, table.shape[0])
        if not keep.any():
            log.warning("%s: no valid rows", path)
        streams.append(SubjectStream(subject, data[keep], labels, tuple(names), dropped))
    return _order(streams, cfg)


def parse_dsa(root, cfg: DatasetConfig) -> list[SubjectStream]:
    """Read ``activity/subject/segment`` files and concatenate segments per subject."""
    root = Path(root)
    activity_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not activity_dirs:
        raise ParseError(root, None, "no DSA activity directories found")
    names = cfg.channel_names
    cols = [cfg.channels[n] for n in names]
    pieces: dict[int, list[tuple[int, str, np.ndarray]]] = {}
    width = cfg.n_columns
    for adir in activity_dirs:
        activity = _subject_id(adir.name)
        subject_dirs = sorted(p for p in adir.iterdir() if p.is_dir())
        if not subject_dirs or not any(any(s.glob("*.txt")) for s in subject_dirs):
            log.warning("%s: empty activity directory", adir)
            continue
        if activity not in cfg.activity_map:
            continue
        for sdir in subject_dirs:
            subject = _subject_id(sdir.name)
            for seg in sorted(sdir.glob("*.txt")):
                table = _load_table(seg, ",", None)
                if table.shape[0] == 0:
                    continue
                if width is None:
                    width = table.shape[1]
                if table.shape[1] != width:
                    raise ParseError(seg, None, f"inconsistent column count {table.shape[1]} (expected {width})")
                pieces.setdefault(subject, []).append((activity, seg.name, table[:, cols]))
    streams = []
    for subject in sorted(pieces):
        segs = sorted(pieces[subject], key=lambda p: (p[0], p[1]))
        data = np.concatenate([s[2] for s in segs])
        labels = np.concatenate([np.full(len(s[2]), cfg.activity_map[s[0]], dtype=np.int64) for s in segs])
        streams.append(SubjectStream(subject, data, labels, tuple(names)))
    return _order(streams, cfg)


def _order(streams: list[SubjectStream], cfg: DatasetConfig) -> list[SubjectStream]:
    by_id = {s.subject: s for s in streams}
    if cfg.subject_order:
        missing = [s for s in cfg.subject_order if s not in by_id]
        if missing:
            raise ValueError(f"subject_order names unknown subjects {missing}")
        return [by_id[s] for s in cfg.subject_order]
    return [by_id[s] for s in sorted(by_id)]


# ---------------------------------------------------------- synthetic streams


def _random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def make_synthetic_streams(cfg: DatasetConfig) -> list[SubjectStream]:
    """Generate subject streams whose windowing yields exactly ``windows_per_subject`` windows.

    Each class has its own frequency and per-channel amplitude pattern. Each
    subject applies its own affine map to the channels: a block-diagonal
    rotation per body part blended with the identity by ``mixing``, a gain,
    and an offset.
    """
    p = cfg.synthetic
    rng = np.random.default_rng(p.get("seed", 0))
    n_classes = int(p["n_classes"])
    d = len(cfg.channel_names)
    wl = cfg.window_len
    stride = window_stride(wl, cfg.overlap)
    n_windows = int(p["windows_per_subject"])
    n_samples = wl + (n_windows - 1) * stride
    t = np.arange(n_samples) / cfg.sampling_rate

    freqs = 1.0 + p.get("freq_step", 0.35) * np.arange(n_classes) + rng.uniform(0, 0.25, n_classes)
    amps = rng.uniform(0.3, 1.5, size=(n_classes, d))
    phases = rng.uniform(0, 2 * np.pi, size=(n_classes, d))
    part_sizes = [len(v) for v in cfg.body_parts.values()] or [d]

    streams = []
    for s in range(int(p["n_subjects"])):
        bout = int(p["bout_windows"]) * stride
        n_bouts = -(-n_samples // bout)
        order = np.resize(rng.permutation(n_classes), n_bouts)
        rng.shuffle(order)
        labels = np.repeat(order, bout)[:n_samples].astype(np.int64)
        clean = np.zeros((n_samples, d))
        for c in range(n_classes):
            mask = labels == c
            clean[mask] = amps[c] * np.sin(2 * np.pi * freqs[c] * t[mask, None] + phases[c])
        clean += rng.normal(scale=p["noise"], size=clean.shape)
        mix = np.zeros((d, d))
        start = 0
        for size in part_sizes:
            rot = _random_rotation(rng, size)
            block = (1.0 - p["mixing"]) * np.eye(size) + p["mixing"] * rot
            mix[start : start + size, start : start + size] = block
            start += size
        gain = rng.uniform(0.5, 2.0, size=d)
        offset = rng.normal(scale=2.0, size=d)
        data = (clean @ mix.T) * gain + offset
        streams.append(SubjectStream(s + 1, data, labels, tuple(cfg.channel_names)))
    return _order(streams, cfg)


def load_streams(cfg: DatasetConfig) -> list[SubjectStream]:
    if cfg.kind == "pamap2":
        return parse_pamap2(cfg.root, cfg)
    if cfg.kind == "dsa":
        return parse_dsa(cfg.root, cfg)
    if cfg.kind == "synthetic":
        return make_synthetic_streams(cfg)
    raise ValueError(f"unknown dataset kind {cfg.kind!r}")


# ------------------------------------------------------------------ windowing


def window_stride(window_len: int, overlap: float) -> int:
    stride = int(round(window_len * (1.0 - overlap)))
    if window_len < 1 or stride < 1:
        raise ValueError(f"window_len={window_len}, overlap={overlap} give stride {stride} < 1")
    return stride


def window_count(n: int, window_len: int, overlap: float) -> int:
    if n < window_len:
        return 0
    return (n - window_len) // window_stride(window_len, overlap) + 1


def _majority(labels: np.ndarray) -> int:
    valid = labels[labels >= 0]
    if valid.size == 0:
        return UNLABELED
    return int(np.bincount(valid).argmax())


def segment_windows(stream: SubjectStream, window_len: int, overlap: float) -> WindowSet:
    """Sliding windows; each window takes the majority label of its samples."""
    stride = window_stride(window_len, overlap)
    n = window_count(len(stream), window_len, overlap)
    d = stream.data.shape[1] if stream.data.ndim == 2 else len(stream.channel_names)
    if n == 0:
        return WindowSet.empty(window_len, stream.channel_names)
    starts = np.arange(n) * stride
    idx = starts[:, None] + np.arange(window_len)
    X = stream.data[idx].reshape(n, window_len, d)
    y = np.array([_majority(stream.labels[i]) for i in idx], dtype=np.int64)
    return WindowSet(X, y, np.full(n, stream.subject, dtype=np.int64), stream.channel_names)


# ------------------------------------------------------------ standardization


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def channel_stats(windows: WindowSet) -> ChannelStats:
    flat = windows.X.reshape(-1, windows.X.shape[-1])
    return ChannelStats(flat.mean(axis=0), flat.std(axis=0))


def apply_stats(windows: WindowSet, stats: ChannelStats, min_std: float = 1e-8) -> WindowSet:
    scale = np.where(stats.std > min_std, 1.0 / np.where(stats.std > min_std, stats.std, 1.0), 0.0)
    X = (windows.X - stats.mean) * scale
    return replace(windows, X=X)


def standardize_per_subject(train: WindowSet, test: WindowSet) -> tuple[WindowSet, WindowSet, dict[int, ChannelStats]]:
    """Standardize each subject's windows with statistics of its training windows only."""
    train_out, test_out = train.X.copy(), test.X.copy()
    stats: dict[int, ChannelStats] = {}
    for s in train.subjects:
        tr = np.flatnonzero(train.subject == s)
        te = np.flatnonzero(test.subject == s)
        st = channel_stats(train.subset(tr))
        stats[s] = st
        train_out[tr] = apply_stats(train.subset(tr), st).X
        if te.size:
            test_out[te] = apply_stats(test.subset(te), st).X
    return replace(train, X=train_out), replace(test, X=test_out), stats


# --------------------------------------------------------------------- splits


def split_train_test(windows: WindowSet, train_fraction: float, seed: int) -> tuple[WindowSet, WindowSet]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    train_idx, test_idx = [], []
    for s in windows.subjects:
        idx = np.flatnonzero(windows.subject == s)
        if idx.size < 2:
            raise ValueError(f"subject {s} has {idx.size} windows; at least 2 are needed to split")
        perm = np.random.default_rng([seed, s]).permutation(idx)
        n_train = min(max(int(np.floor(train_fraction * idx.size + 0.5)), 1), idx.size - 1)
        train_idx.append(np.sort(perm[:n_train]))
        test_idx.append(np.sort(perm[n_train:]))
    return windows.subset(np.concatenate(train_idx)), windows.subset(np.concatenate(test_idx))


def _labeled_quota(counts: dict[int, int], phi: float) -> dict[int, int]:
    total = sum(counts.values())
    target = int(np.floor(phi * total + 0.5))
    quota = {c: min(n, max(1, int(np.floor(phi * n)))) for c, n in counts.items()}
    spare = target - sum(quota.values())
    while spare < 0:
        # the one-per-class floor overshot the target: trim the largest quotas, keeping every floor
        c = max((c for c in quota if quota[c] > 1), key=lambda c: (quota[c], -c), default=None)
        if c is None:
            break
        quota[c] -= 1
        spare += 1
    if spare > 0:
        remainders = sorted(counts, key=lambda c: (-(phi * counts[c] - np.floor(phi * counts[c])), c))
        while spare > 0:
            moved = False
            for c in remainders:
                if spare and quota[c] < counts[c]:
                    quota[c] += 1
                    spare -= 1
                    moved = True
            if not moved:
                break
    return quota


def mask_labels(windows: WindowSet, phi: float, seed: int) -> WindowSet:
    """Keep labels on round(phi * n) windows per subject, at least one per present class."""
    if not 0.0 < phi <= 1.0:
        raise ValueError(f"phi must lie in (0, 1], got {phi}")
    if phi == 1.0:
        return windows
    y = windows.y.copy()
    for s in windows.subjects:
        rng = np.random.default_rng([seed, s, 7])
        idx = np.flatnonzero((windows.subject == s) & (windows.y >= 0))
        classes = np.unique(windows.y[idx])
        counts = {int(c): int((windows.y[idx] == c).sum()) for c in classes}
        quota = _labeled_quota(counts, phi)
        for c in classes:
            members = idx[windows.y[idx] == c]
            keep = rng.choice(members, size=quota[int(c)], replace=False)
            drop = np.setdiff1d(members, keep)
            y[drop] = UNLABELED
    return replace(windows, y=y)


# ------------------------------------------------------------------- pipeline


@dataclass
class PreparedData:
    train: WindowSet
    test: WindowSet
    subject_order: list[int]
    stats: dict[int, ChannelStats]
    report: dict

    def subject_train(self, subject: int) -> WindowSet:
        return self.train.for_subject(subject)

    def subject_test(self, subject: int) -> WindowSet:
        return self.test.for_subject(subject)


def prepare(cfg: DatasetConfig, streams: list[SubjectStream] | None = None) -> PreparedData:
    """Windowing, split, per-subject standardization and label masking."""
    streams = load_streams(cfg) if streams is None else streams
    windows = []
    report = {"subjects": {}, "dropped_rows": {}}
    for stream in streams:
        w = segment_windows(stream, cfg.window_len, cfg.overlap)
        labeled = w.y >= 0
        report["dropped_rows"][str(stream.subject)] = int(stream.dropped_rows)
        report["subjects"][str(stream.subject)] = {
            "windows": len(w),
            "per_class": {str(int(c)): int((w.y == c).sum()) for c in np.unique(w.y[labeled])},
            "unlabeled": int((~labeled).sum()),
        }
        if len(w):
            windows.append(w)
    if not windows:
        raise ValueError("no windows produced from the configured dataset")
    all_windows = WindowSet.concat(windows)
    train, test = split_train_test(all_windows, cfg.train_fraction, cfg.seed)
    test = test.labeled()
    train, test, stats = standardize_per_subject(train, test)
    train = mask_labels(train, cfg.label_fraction, cfg.seed)
    order = [s.subject for s in streams if s.subject in set(all_windows.subjects)]
    report["total_windows"] = len(all_windows)
    report["train_windows"] = len(train)
    report["test_windows"] = len(test)
    report["labeled_train_windows"] = int((train.y >= 0).sum())
    return PreparedData(train, test, order, stats, report)


# ---------------------------------------------------------------------- cache


_CACHE_ARRAYS = ("train_X", "train_y", "train_subject", "test_X", "test_y", "test_subject")


def save_cache(path, data: PreparedData, cfg: DatasetConfig) -> str:
    """Write ``.npy`` arrays plus ``meta.json``; returns the content checksum."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {
        "train_X": data.train.X,
        "train_y": data.train.y,
        "train_subject": data.train.subject,
        "test_X": data.test.X,
        "test_y": data.test.y,
        "test_subject": data.test.subject,
    }
    digest = hashlib.sha256()
    for name in _CACHE_ARRAYS:
        arr = np.ascontiguousarray(arrays[name])
        np.save(path / f"{name}.npy", arr, allow_pickle=False)
        digest.update(name.encode())
        digest.update(str(arr.dtype).encode() + str(arr.shape).encode())
        digest.update(arr.tobytes())
    checksum = digest.hexdigest()
    meta = {
        "cache_version": CACHE_VERSION,
        "checksum": checksum,
        "channel_names": list(data.train.channel_names),
        "subject_order": data.subject_order,
        "dataset": cfg.to_dict(),
        "stats": {str(s): {"mean": st.mean.tolist(), "std": st.std.tolist()} for s, st in data.stats.items()},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (path / "stats.json").write_text(json.dumps(data.report, indent=2, sort_keys=True) + "\n")
    return checksum


def load_cache(path) -> tuple[PreparedData, dict]:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no prepared cache at {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("cache_version") != CACHE_VERSION:
        raise ValueError(f"cache version {meta.get('cache_version')} is not supported (want {CACHE_VERSION})")
    arr = {name: np.load(path / f"{name}.npy", allow_pickle=False) for name in _CACHE_ARRAYS}
    names = tuple(meta["channel_names"])
    train = WindowSet(arr["train_X"], arr["train_y"], arr["train_subject"], names)
    test = WindowSet(arr["test_X"], arr["test_y"], arr["test_subject"], names)
    stats = {int(s): ChannelStats(np.array(v["mean"]), np.array(v["std"])) for s, v in meta["stats"].items()}
    report = json.loads((path / "stats.json").read_text()) if (path / "stats.json").exists() else {}
    return PreparedData(train, test, list(meta["subject_order"]), stats, report), meta
