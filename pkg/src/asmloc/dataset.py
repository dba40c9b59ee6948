"""Synthetic untrimmed videos, on-disk snippet features and label encoding.

Class ids are 1-based (1..C). In every length-(C+1) vector or T x (C+1)
matrix, class ``c`` lives in column ``c - 1`` and the background class in
the last column ``C``.

Feature files are a 16-byte little-endian header ``b"ASML", version, T, D``
(three uint32 after the magic) followed by ``T * D`` float32 values.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (BadMagicError, ConfigurationError, ContractError, DimMismatchError,
                     FeatureFormatError, GenerationError, TruncatedFileError)

log = logging.getLogger(__name__)

MAGIC = b"ASML"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

BUCKET_NAMES = ("XS", "S", "M", "L", "XL")
BUCKET_EDGES = (0.0, 1.0, 2.0, 4.0, 6.0, math.inf)


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray
    video_label: np.ndarray
    gt_segments: Optional[list] = None

    @property
    def T(self):
        return self.features.shape[0]

    @property
    def classes(self):
        C = len(self.video_label) - 1
        return sorted(int(c) + 1 for c in np.flatnonzero(self.video_label[:C] > 0))


@dataclass
class SyntheticConfig:
    num_classes: int = 5
    feature_dim: int = 16
    num_videos: int = 200
    T_range: tuple = (40, 120)
    segments_range: tuple = (1, 4)
    classes_per_video: tuple = (1, 2)
    bucket_probs: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    max_seconds: float = 12.0
    separation: float = 4.0
    noise: float = 1.0
    min_gap: int = 1
    snippet_duration: float = 0.64
    seed: int = 0
    class_seed: Optional[int] = None

    def validate(self, path="synthetic"):
        def chk(ok, name, msg):
            if not ok:
                raise ConfigurationError(f"{path}.{name}: {msg}")
        chk(self.num_classes >= 1, "num_classes", "must be >= 1")
        chk(self.feature_dim >= 1, "feature_dim", "must be >= 1")
        chk(self.num_videos >= 0, "num_videos", "must be >= 0")
        for name in ("T_range", "segments_range", "classes_per_video"):
            lo, hi = getattr(self, name)
            chk(1 <= lo <= hi, name, "must be a non-empty range of positive integers")
        chk(self.classes_per_video[1] <= self.num_classes, "classes_per_video", "exceeds num_classes")
        p = np.asarray(self.bucket_probs, dtype=float)
        chk(len(p) == 5 and np.all(p >= 0) and abs(p.sum() - 1) < 1e-9, "bucket_probs",
            "must be 5 non-negative weights summing to 1")
        chk(self.noise >= 0, "noise", "must be >= 0")
        chk(self.snippet_duration > 0, "snippet_duration", "must be > 0")
        chk(self.max_seconds > 6.0, "max_seconds", "must exceed the XL lower edge (6 s)")
        return self


def bucket_of(seconds):
    """Index of the duration bucket containing ``seconds`` (right-closed bins)."""
    for i in range(5):
        if BUCKET_EDGES[i] < seconds <= BUCKET_EDGES[i + 1]:
            return i
    raise ValueError(f"duration {seconds} is not positive")


def bucket_snippet_range(i, snippet_duration, max_seconds=math.inf):
    """Snippet counts d whose duration d * snippet_duration falls in bucket ``i``."""
    lo, hi = BUCKET_EDGES[i], min(BUCKET_EDGES[i + 1], max_seconds)
    dmin = int(math.floor(lo / snippet_duration + 1e-9)) + 1
    dmax = int(math.floor(hi / snippet_duration + 1e-9))
    return dmin, dmax


def class_means(C, D, separation, rng):
    """C mean vectors of norm ``separation``, mutually orthogonal when C <= D."""
    g = rng.standard_normal((D, C))
    if C <= D:
        dirs, _ = np.linalg.qr(g)
    else:
        dirs = g / np.linalg.norm(g, axis=0)
    return separation * dirs.T


def generate_synthetic(cfg: SyntheticConfig, id_prefix="vid"):
    """Draw ``cfg.num_videos`` videos with planted, non-overlapping action segments."""
    cfg.validate()
    C, D = cfg.num_classes, cfg.feature_dim
    class_seed = cfg.seed if cfg.class_seed is None else cfg.class_seed
    means = class_means(C, D, cfg.separation, np.random.default_rng([class_seed, 1]))
    rng = np.random.default_rng([cfg.seed, 2])
    ranges = [bucket_snippet_range(i, cfg.snippet_duration, cfg.max_seconds) for i in range(5)]
    probs = np.asarray(cfg.bucket_probs, dtype=float)
    for i, (lo, hi) in enumerate(ranges):
        if probs[i] > 0 and lo > hi:
            raise GenerationError(f"bucket {BUCKET_NAMES[i]} holds no whole snippet count")

    videos = []
    for v in range(cfg.num_videos):
        T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
        n_cls = int(rng.integers(cfg.classes_per_video[0], cfg.classes_per_video[1] + 1))
        vid_classes = sorted(int(c) for c in rng.choice(np.arange(1, C + 1), size=n_cls, replace=False))
        for _attempt in range(100):
            n = int(rng.integers(cfg.segments_range[0], cfg.segments_range[1] + 1))
            n = max(n, n_cls)
            buckets = rng.choice(5, size=n, p=probs)
            durs = [int(rng.integers(ranges[b][0], ranges[b][1] + 1)) for b in buckets]
            free = T - sum(durs) - (n - 1) * cfg.min_gap
            if free >= 0:
                break
        else:
            raise GenerationError(f"video {v}: cannot pack segments into T={T}")
        # split the free snippets into n + 1 gaps
        cuts = np.sort(rng.integers(0, free + 1, size=n))
        gaps = np.diff(np.concatenate([[0], cuts, [free]]))
        seg_classes = list(vid_classes) + [int(c) for c in rng.choice(vid_classes, size=n - n_cls)]
        rng.shuffle(seg_classes)

        feats = cfg.noise * rng.standard_normal((T, D))
        segments = []
        t = int(gaps[0])
        for k in range(n):
            s, e, c = t, t + durs[k], seg_classes[k]
            feats[s:e] = means[c - 1] + cfg.noise * rng.standard_normal((e - s, D))
            segments.append((s, e, c))
            t = e + cfg.min_gap + int(gaps[k + 1])
        y_fg, _ = encode_labels(vid_classes, C)
        videos.append(VideoRecord(f"{id_prefix}_{v:05d}", feats, y_fg, segments))
    _bucket_sanity(videos, probs, cfg.snippet_duration)
    return videos


def make_splits(cfg: SyntheticConfig, num_test):
    """Train and test videos drawn around the same class means."""
    class_seed = cfg.seed if cfg.class_seed is None else cfg.class_seed
    train = generate_synthetic(replace(cfg, class_seed=class_seed), "train")
    test_cfg = replace(cfg, num_videos=num_test, seed=cfg.seed + 100_003, class_seed=class_seed)
    return train, generate_synthetic(test_cfg, "test")


def bucket_counts(videos, snippet_duration):
    counts = np.zeros(5, dtype=int)
    for v in videos:
        for s, e, _ in v.gt_segments or ():
            counts[bucket_of((e - s) * snippet_duration)] += 1
    return counts


def _bucket_sanity(videos, probs, snippet_duration):
    from scipy.stats import chisquare

    counts = bucket_counts(videos, snippet_duration)
    keep = probs > 0
    if counts.sum() < 5 * keep.sum():
        return None
    expected = probs[keep] * counts.sum()
    res = chisquare(counts[keep], expected)
    # packing retries redraw durations, so a mild skew towards short buckets is expected
    if res.pvalue < 1e-4:
        log.warning("duration buckets deviate from configured mix: counts=%s p=%.2g",
                    counts.tolist(), res.pvalue)
    return res


# ---------------------------------------------------------------- labels

def encode_labels(classes, C):
    """Return ``(y_fg, y_bg)``: l1-normalised multi-hot and the background one-hot."""
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise ContractError("encode_labels needs at least one class")
    if classes[0] < 1 or classes[-1] > C:
        raise ContractError(f"class ids must lie in [1, {C}], got {classes}")
    y_fg = np.zeros(C + 1)
    y_fg[[c - 1 for c in classes]] = 1.0 / len(classes)
    y_bg = np.zeros(C + 1)
    y_bg[C] = 1.0
    return y_fg, y_bg


# ---------------------------------------------------------------- feature files

def write_features(path, features):
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ContractError(f"features must be T x D, got shape {arr.shape}")
    T, D = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, T, D))
        fh.write(arr.tobytes())


def read_header(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, version, T, D = _HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    return T, D


def read_features(path, expected_dim=None):
    T, D = read_header(path)
    if expected_dim is not None and D != expected_dim:
        raise DimMismatchError(f"{path}: feature dim {D}, expected {expected_dim}")
    raw = Path(path).read_bytes()[_HEADER.size:]
    if len(raw) < 4 * T * D:
        raise TruncatedFileError(f"{path}: expected {T * D} values, found {len(raw) // 4}")
    return np.frombuffer(raw, dtype="<f4", count=T * D).astype(np.float64).reshape(T, D)


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    id: str
    path: Path
    classes: list
    segments: Optional[list] = None  # (start_s, end_s, class) in seconds


@dataclass
class DatasetManifest:
    num_classes: int
    feature_dim: int
    snippet_duration: float
    videos: list = field(default_factory=list)


def load_manifest(path):
    path = Path(path)
    data = json.loads(path.read_text())
    try:
        C, D = int(data["num_classes"]), int(data["feature_dim"])
        dur = float(data.get("snippet_duration", 0.64))
        raw_videos = data["videos"]
    except KeyError as exc:
        raise FeatureFormatError(f"{path}: manifest missing key {exc}") from exc
    entries = []
    for v in raw_videos:
        fpath = (path.parent / v["features"]).resolve()
        if not fpath.exists():
            raise FileNotFoundError(f"feature file {fpath} for video {v['id']!r} does not exist")
        _, d = read_header(fpath)
        if d != D:
            raise DimMismatchError(f"{fpath}: feature dim {d}, manifest says {D}")
        classes = [int(c) for c in v["labels"]]
        if any(c < 1 or c > C for c in classes):
            raise ContractError(f"video {v['id']!r}: class ids must lie in [1, {C}]")
        segs = v.get("segments")
        if segs is not None:
            segs = [(float(s), float(e), int(c)) for s, e, c in segs]
        entries.append(ManifestEntry(str(v["id"]), fpath, classes, segs))
    return DatasetManifest(C, D, dur, entries)


def load_features(entry: ManifestEntry, feature_dim=None):
    return read_features(entry.path, feature_dim)


def seconds_to_snippets(start, end, snippet_duration, T):
    s = int(round(start / snippet_duration))
    e = int(round(end / snippet_duration))
    s = min(max(s, 0), T - 1)
    e = min(max(e, s + 1), T)
    return s, e


def load_dataset(path):
    """Manifest plus every feature file as a list of ``VideoRecord``."""
    man = load_manifest(path)
    videos = []
    for entry in man.videos:
        feats = load_features(entry, man.feature_dim)
        y_fg, _ = encode_labels(entry.classes, man.num_classes)
        gt = None
        if entry.segments is not None:
            gt = [(*seconds_to_snippets(s, e, man.snippet_duration, feats.shape[0]), c)
                  for s, e, c in entry.segments]
        videos.append(VideoRecord(entry.id, feats, y_fg, gt))
    return man, videos


def write_dataset(path, videos, num_classes, snippet_duration=0.64, feature_subdir="features"):
    """Write feature files and a manifest; GT segments go out in seconds."""
    path = Path(path)
    fdir = path.parent / feature_subdir
    fdir.mkdir(parents=True, exist_ok=True)
    D = videos[0].features.shape[1] if videos else 0
    out = {"num_classes": num_classes, "feature_dim": D, "snippet_duration": snippet_duration,
           "videos": []}
    for v in videos:
        fname = fdir / f"{v.id}.asml"
        write_features(fname, v.features)
        item = {"id": v.id, "features": str(fname.relative_to(path.parent)), "labels": v.classes}
        if v.gt_segments is not None:
            item["segments"] = [[s * snippet_duration, e * snippet_duration, c]
                                for s, e, c in v.gt_segments]
        out["videos"].append(item)
    path.write_text(json.dumps(out, indent=1))
    return path


def resample_video(video: VideoRecord, T):
    """Linearly interpolate ``video`` onto ``T`` evenly spaced snippets.

    GT segments are rescaled to the new length (rounded, at least one snippet).
    """
    T0 = video.T
    if T < 1:
        raise ContractError(f"target length must be >= 1, got {T}")
    pos = np.clip((np.arange(T) + 0.5) * T0 / T - 0.5, 0, T0 - 1)
    feats = np.stack([np.interp(pos, np.arange(T0), col) for col in video.features.T], axis=1)
    gt = None
    if video.gt_segments is not None:
        gt = []
        for s, e, c in video.gt_segments:
            ns = min(int(round(s * T / T0)), T - 1)
            gt.append((ns, max(int(round(e * T / T0)), ns + 1), c))
    return VideoRecord(video.id, feats, video.video_label.copy(), gt)
