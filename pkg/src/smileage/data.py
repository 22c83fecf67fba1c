"""Video samples, the planted-salience synthetic dataset, on-disk format and folds."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .smoothing import smooth_4253h_twice

AGE_RANGE = (8.0, 76.0)
VID_MAGIC = 0x44495653  # b"SVID" little-endian
VID_VERSION = 1
MANIFEST_FORMAT = "smileage-dataset"

# (top, left, bottom, right) as fractions of the frame side. Edges sit on multiples of 1/4
# so every region covers whole cells of a 4x4 attention grid (the toy model's conv2 map).
DEFAULT_REGIONS: dict[str, tuple[float, float, float, float]] = {
    "under_eye_left": (0.25, 0.25, 0.5, 0.5),
    "under_eye_right": (0.25, 0.5, 0.5, 0.75),
    "nasolabial_left": (0.5, 0.25, 0.75, 0.5),
    "nasolabial_right": (0.5, 0.5, 0.75, 0.75),
    "mouth": (0.75, 0.25, 1.0, 0.75),
}


class DatasetError(ValueError):
    """Malformed or corrupt dataset on disk."""


@dataclass
class VideoSample:
    subject_id: int
    frames: np.ndarray  # [T, H, W, C] in [0, 1]
    age: float
    smile_kind: str = "synthetic"
    video_id: int = 0
    apex: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 3:
            self.frames = self.frames[..., None]
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [T>=1, H, W, C], got {self.frames.shape}")
        if not 0.0 <= self.age <= 120.0:
            raise ValueError(f"age {self.age} outside [0, 120]")
        if self.smile_kind not in ("spontaneous", "posed", "synthetic"):
            raise ValueError(f"unknown smile kind {self.smile_kind!r}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class Dataset:
    videos: list[VideoSample]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self) -> Iterator[VideoSample]:
        return iter(self.videos)

    def __getitem__(self, i):
        return self.videos[i]

    @property
    def ages(self) -> np.ndarray:
        return np.array([v.age for v in self.videos])

    @property
    def subjects(self) -> list[int]:
        return sorted({v.subject_id for v in self.videos})

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.videos[i] for i in indices], dict(self.meta))

    def select_subjects(self, subjects) -> "Dataset":
        keep = set(subjects)
        return Dataset([v for v in self.videos if v.subject_id in keep], dict(self.meta))

    def region_mask(self) -> np.ndarray | None:
        """Boolean pixel mask of the planted regions, if this is a synthetic set."""
        regions = self.meta.get("spec", {}).get("regions")
        if not regions:
            return None
        size = self.videos[0].frames.shape[1]
        return region_mask(size, regions)


# synthetic data --------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_subjects: int = 100
    videos_per_subject: int = 2
    frames: tuple[int, int] = (6, 10)
    age_range: tuple[float, float] = AGE_RANGE
    size: int = 16
    regions: dict[str, tuple[float, float, float, float]] = field(default_factory=lambda: dict(DEFAULT_REGIONS))
    apex_fraction: float = 0.5
    apex_jitter: float = 0.15
    noise_sigma: float = 0.02
    wrinkle_amplitude: float = 0.4
    distractor_amplitude: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.frames = tuple(self.frames)
        self.age_range = tuple(self.age_range)
        if self.frames[0] < 1 or self.frames[1] < self.frames[0]:
            raise ValueError(f"invalid frame range {self.frames}")
        for name, rect in self.regions.items():
            top, left, bottom, right = rect
            if not (0.0 <= top < bottom <= 1.0 and 0.0 <= left < right <= 1.0):
                raise ValueError(f"region {name} {rect} lies outside the frame")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames"], d["age_range"] = list(self.frames), list(self.age_range)
        d["regions"] = {k: list(v) for k, v in self.regions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "regions" in d:
            d["regions"] = {k: tuple(v) for k, v in d["regions"].items()}
        return cls(**d)


def region_pixels(size: int, rect) -> tuple[slice, slice]:
    top, left, bottom, right = rect
    return (slice(int(round(top * size)), int(round(bottom * size))),
            slice(int(round(left * size)), int(round(right * size))))


def region_mask(size: int, regions: dict) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for rect in regions.values():
        rows, cols = region_pixels(size, rect)
        mask[rows, cols] = True
    return mask


def wrinkle_depth(age, age_range=AGE_RANGE) -> np.ndarray:
    """Monotone map from age to wrinkle contrast in [0.15, 1]."""
    lo, hi = age_range
    return 0.15 + 0.85 * np.clip((np.asarray(age, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def smile_profile(T: int, apex: int, age: float, age_range=AGE_RANGE) -> np.ndarray:
    """Expression intensity per frame: 0 at onset, 1 at the apex, partial relaxation after.

    Older subjects have a slower (more convex) onset, so the dynamics also carry age.
    """
    t = np.arange(T, dtype=np.float64)
    lo, hi = age_range
    onset_power = 1.0 + (age - lo) / (hi - lo)
    rise = (t / apex) ** onset_power if apex > 0 else np.ones(T)
    decay_len = max(T - 1 - apex, 1)
    fall = 1.0 - 0.6 * ((t - apex) / decay_len)
    profile = np.where(t <= apex, rise, fall)
    profile[apex] = 1.0
    return np.clip(profile, 0.0, 1.0)


def _face_template(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Neutral schematic face (ellipse, eyes, brows) and a mouth-curve helper grid."""
    yy, xx = np.mgrid[0:size, 0:size]
    y = (yy + 0.5) / size
    x = (xx + 0.5) / size
    face = np.full((size, size), 0.12)
    inside = ((x - 0.5) / 0.46) ** 2 + ((y - 0.52) / 0.5) ** 2 <= 1.0
    face[inside] = 0.7
    for cx in (0.3, 0.7):
        eye = ((x - cx) / 0.09) ** 2 + ((y - 0.17) / 0.05) ** 2 <= 1.0
        face[eye] = 0.25
    return face, inside


def _mouth(size: int, intensity: float) -> np.ndarray:
    """Darkening mask of a mouth curve whose upturn grows with intensity."""
    yy, xx = np.mgrid[0:size, 0:size]
    y = (yy + 0.5) / size
    x = (xx + 0.5) / size
    curve = 0.8 - 0.12 * intensity * (1.0 - ((x - 0.5) / 0.2) ** 2)
    on = (np.abs(y - curve) < 0.5 / size + 0.02) & (np.abs(x - 0.5) <= 0.2)
    return on.astype(np.float64)


def render_video(
    age: float,
    T: int,
    apex: int,
    spec: SyntheticSpec,
    rng: np.random.Generator,
    skin: float = 0.0,
) -> np.ndarray:
    size = spec.size
    face, inside = _face_template(size)
    profile = smile_profile(T, apex, age, spec.age_range)
    depth = wrinkle_depth(age, spec.age_range)
    stripes = np.zeros((size, size))
    for rect in spec.regions.values():
        rows, cols = region_pixels(size, rect)
        r = np.arange(rows.start, rows.stop)[:, None]
        stripes[rows, cols] = (r % 2 == 0).astype(np.float64)
    planted = region_mask(size, spec.regions)
    # age-independent distractors: random patches outside the planted regions
    free = inside & ~planted
    frames = np.empty((T, size, size))
    for t in range(T):
        img = face + skin * inside
        img = img - 0.3 * _mouth(size, profile[t])
        img = img - spec.wrinkle_amplitude * profile[t] * depth * stripes
        if spec.distractor_amplitude > 0:
            blotch = rng.uniform(-1.0, 1.0, size=(size // 4 or 1, size // 4 or 1))
            blotch = np.kron(blotch, np.ones((4, 4)))[:size, :size]
            if blotch.shape != (size, size):
                blotch = np.resize(blotch, (size, size))
            img = img + spec.distractor_amplitude * blotch * free
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        frames[t] = img
    frames = np.clip(frames, 0.0, 1.0)
    # stored as float32 on disk: quantize now so save/load round-trips exactly
    return frames.astype(np.float32).astype(np.float64)[..., None]


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Schematic smile videos whose planted wrinkle contrast (peaking at the apex) encodes age."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.age_range
    videos = []
    vid = 0
    for subject in range(spec.n_subjects):
        age = float(np.round(rng.uniform(lo, hi), 2))
        skin = rng.uniform(-0.01, 0.01)
        for j in range(spec.videos_per_subject):
            T = int(rng.integers(spec.frames[0], spec.frames[1] + 1))
            centre = spec.apex_fraction + rng.uniform(-spec.apex_jitter, spec.apex_jitter)
            apex = int(np.clip(round(centre * (T - 1)), 1 if T > 1 else 0, T - 1))
            frames = render_video(age, T, apex, spec, rng, skin)
            kind = "synthetic"
            videos.append(VideoSample(subject, frames, age, kind, video_id=vid, apex=apex))
            vid += 1
    return Dataset(videos, {"spec": spec.to_dict()})


def smooth_intensity_profile(video: VideoSample, mask: np.ndarray | None = None) -> np.ndarray:
    """4253H-twice smoothed per-frame mean darkening inside ``mask`` (whole frame if None)."""
    frames = video.frames[..., 0]
    series = frames[:, mask].mean(axis=1) if mask is not None else frames.mean(axis=(1, 2))
    return smooth_4253h_twice(-series)


# Table I layout: video counts per decade bin 0-9 ... 70-79
REPLICA_BIN_COUNTS = (158, 333, 215, 171, 250, 66, 30, 17)
REPLICA_SUBJECTS = 400


def replica_dataset(seed: int = 0, frames: int = 1, size: int = 8) -> Dataset:
    """1240 tiny placeholder videos from 400 subjects with the decade-bin counts of the real corpus."""
    rng = np.random.default_rng(seed)
    counts = np.array(REPLICA_BIN_COUNTS)
    share = REPLICA_SUBJECTS * counts / counts.sum()
    subjects = np.floor(share).astype(int)
    for i in np.argsort(-(share - subjects))[: REPLICA_SUBJECTS - subjects.sum()]:
        subjects[i] += 1
    videos = []
    subject_id = 0
    for b, (n_videos, n_subj) in enumerate(zip(counts, subjects)):
        per = np.full(n_subj, n_videos // n_subj)
        per[: n_videos - per.sum()] += 1
        for k in per:
            age = float(np.round(rng.uniform(max(8.0, 10 * b), 10 * b + 9.99), 2))
            for _ in range(k):
                img = rng.random((frames, size, size, 1)).astype(np.float32).astype(np.float64)
                kind = "spontaneous" if rng.random() < 0.5 else "posed"
                videos.append(VideoSample(subject_id, img, age, kind, video_id=len(videos)))
            subject_id += 1
    return Dataset(videos, {"replica": True})


# persistence -----------------------------------------------------------------------


def _video_bytes(v: VideoSample) -> bytes:
    T, H, W, C = v.frames.shape
    body = np.ascontiguousarray(v.frames, dtype="<f4").tobytes()
    header = struct.pack("<6I", VID_MAGIC, VID_VERSION, T, H, W, C)
    return header + body + struct.pack("<I", zlib.crc32(body))


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Write ``manifest.json`` plus one ``videos/<id>.vid`` file per video."""
    root = Path(path)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, v in enumerate(dataset.videos):
        name = f"videos/{i:05d}.vid"
        (root / name).write_bytes(_video_bytes(v))
        entries.append({
            "index": i,
            "video_id": v.video_id,
            "subject_id": v.subject_id,
            "age": v.age,
            "smile_kind": v.smile_kind,
            "apex": v.apex,
            "file": name,
        })
    manifest = {"format": MANIFEST_FORMAT, "version": 1, "meta": dataset.meta, "videos": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def _read_video(raw: bytes, index: int, name: str) -> np.ndarray:
    if len(raw) < 24:
        raise DatasetError(f"video {index} ({name}): truncated header ({len(raw)} bytes)")
    magic, version, T, H, W, C = struct.unpack_from("<6I", raw, 0)
    if magic != VID_MAGIC:
        raise DatasetError(f"video {index} ({name}): bad magic {magic:#x}")
    if version != VID_VERSION:
        raise DatasetError(f"video {index} ({name}): unsupported version {version}")
    n = T * H * W * C * 4
    if len(raw) < 24 + n:
        done = (len(raw) - 24) // (H * W * C * 4) if H * W * C else 0
        raise DatasetError(f"video {index} ({name}): truncated frame data after {done} of {T} frames")
    if len(raw) < 24 + n + 4:
        raise DatasetError(f"video {index} ({name}): truncated, missing checksum")
    body = raw[24 : 24 + n]
    (crc,) = struct.unpack_from("<I", raw, 24 + n)
    if zlib.crc32(body) != crc:
        raise DatasetError(f"video {index} ({name}): checksum mismatch")
    return np.frombuffer(body, dtype="<f4").reshape(T, H, W, C).astype(np.float64)


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root}/manifest.json: corrupt manifest ({exc})") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{root}/manifest.json: not a {MANIFEST_FORMAT} manifest")
    videos = []
    for i, e in enumerate(manifest["videos"]):
        try:
            raw = (root / e["file"]).read_bytes()
        except FileNotFoundError:
            raise DatasetError(f"video {i} ({e['file']}): file missing") from None
        frames = _read_video(raw, i, e["file"])
        videos.append(VideoSample(e["subject_id"], frames, e["age"], e["smile_kind"],
                                  video_id=e.get("video_id", i), apex=e.get("apex")))
    return Dataset(videos, manifest.get("meta", {}))


# folds -----------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    assignment: dict[int, int]  # subject id -> fold index

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least two folds")

    def subjects_in(self, fold: int) -> list[int]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def fold_sizes(self) -> list[int]:
        return [len(self.subjects_in(f)) for f in range(self.k)]

    def roles(self, test_fold: int) -> dict[str, list[int]]:
        """Test fold, the next fold (mod k) for validation, the rest for training."""
        val = (test_fold + 1) % self.k
        train = [f for f in range(self.k) if f not in (test_fold, val)]
        return {"test": [test_fold], "val": [val], "train": train}

    def split(self, dataset: Dataset, test_fold: int, use_validation: bool = True) -> tuple[Dataset, Dataset, Dataset]:
        roles = self.roles(test_fold)
        pick = lambda folds: {s for f in folds for s in self.subjects_in(f)}  # noqa: E731
        train_folds = roles["train"] + ([] if use_validation else roles["val"])
        val = pick(roles["val"]) if use_validation else set()
        return (dataset.select_subjects(pick(train_folds)), dataset.select_subjects(val),
                dataset.select_subjects(pick(roles["test"])))


def make_folds(dataset: Dataset | Sequence[int], k: int = 10, seed: int = 0) -> FoldPlan:
    """Subject-level round-robin over shuffled subjects."""
    subjects = dataset.subjects if isinstance(dataset, Dataset) else sorted(set(dataset))
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return FoldPlan(k, {int(subjects[j]): int(i % k) for i, j in enumerate(order)})


def holdout_split(dataset: Dataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Subject-disjoint train/validation split; ``val_fraction`` 0 gives an empty validation set."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    subjects = dataset.subjects
    n_val = int(round(val_fraction * len(subjects)))
    if val_fraction > 0 and not 1 <= n_val < len(subjects):
        raise ValueError(f"cannot hold out {val_fraction:.0%} of {len(subjects)} subjects")
    order = np.random.default_rng(seed).permutation(len(subjects))
    val = {subjects[i] for i in order[:n_val]}
    return dataset.select_subjects(set(subjects) - val), dataset.select_subjects(val)
