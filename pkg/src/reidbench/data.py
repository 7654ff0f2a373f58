"""Synthetic identity clusters, dataset manifests, and image augmentations.

The synthetic generator places each identity on a mean direction of the
unit sphere and spreads its samples angularly (``direction_noise``) and
radially (``norm_confound``). With a large radial spread, samples of one
identity share a direction but differ strongly in vector norm, which makes
cosine and Euclidean geometry disagree about which samples are hard; that
disagreement is the whole point of the benchmark.

On-disk formats:

* manifest CSV with header ``path,pid,camid,split`` (paths relative to the
  manifest's directory, split one of train/query/gallery),
* vector payloads: ``.vec`` files holding an 8-byte little-endian uint64
  length followed by that many little-endian float64 values,
* image payloads: standard 8-bit image files (PNG), loaded as H x W x C
  float arrays in [0, 255].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, ParameterError
from .numerics import Rng

SPLITS = ("train", "query", "gallery")
MANIFEST_HEADER = ["path", "pid", "camid", "split"]

# radial scales are drawn uniformly from [RADIAL_MIDPOINT - c, RADIAL_MIDPOINT + c]
# where c = norm_confound; the default c = 1.25 gives the [0.5, 3.0] spread
RADIAL_MIDPOINT = 1.75
_MIN_RADIUS = 0.05


@dataclass
class Item:
    payload: np.ndarray  # (1, d) feature vector or (H, W[, C]) image
    pid: int
    camid: int
    split: str


@dataclass
class Dataset:
    items: list[Item]
    pid_map: dict[int, int] = field(default_factory=dict)  # original -> dense train pid

    def indices(self, split: str) -> list[int]:
        return [i for i, it in enumerate(self.items) if it.split == split]

    def features(self, split: str) -> np.ndarray:
        """Row-stacked flattened payloads of one split."""
        idx = self.indices(split)
        if not idx:
            return np.zeros((0, 0))
        return np.stack([self.items[i].payload.ravel().astype(np.float64) for i in idx])

    def pids(self, split: str) -> np.ndarray:
        return np.array([self.items[i].pid for i in self.indices(split)], dtype=np.int64)

    def camids(self, split: str) -> np.ndarray:
        return np.array([self.items[i].camid for i in self.indices(split)], dtype=np.int64)

    def train_labels(self) -> np.ndarray:
        """Dense [0, C) class labels for the train split."""
        return np.array(
            [self.pid_map[self.items[i].pid] for i in self.indices("train")], dtype=np.int64
        )

    @property
    def num_train_ids(self) -> int:
        return len(self.pid_map)


def _dense_pid_map(train_pids) -> dict[int, int]:
    return {pid: i for i, pid in enumerate(sorted(set(int(p) for p in train_pids)))}


@dataclass
class SynthConfig:
    num_ids: int = 64
    samples_per_id: int = 16
    dim: int = 32
    direction_noise: float = 0.9
    norm_confound: float = 1.25
    inter_id_separation: float = 2.0
    cameras: int = 4
    seed: int = 0
    holdout_fraction: float = 0.25  # identities reserved for the query/gallery splits

    def __post_init__(self):
        if self.dim < 2:
            raise ParameterError(f"dim must be >= 2, got {self.dim}")
        if self.num_ids < 2 or self.samples_per_id < 2:
            raise ParameterError("need num_ids >= 2 and samples_per_id >= 2")
        if self.cameras < 1:
            raise ParameterError("need at least one camera")
        if self.direction_noise < 0 or self.inter_id_separation <= 0:
            raise ParameterError("direction_noise must be >= 0 and inter_id_separation > 0")
        if not 0.0 <= self.norm_confound <= RADIAL_MIDPOINT - _MIN_RADIUS:
            raise ParameterError(
                f"norm_confound must lie in [0, {RADIAL_MIDPOINT - _MIN_RADIUS}] so radii stay positive"
            )
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ParameterError("holdout_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "num_ids": self.num_ids,
            "samples_per_id": self.samples_per_id,
            "dim": self.dim,
            "direction_noise": self.direction_noise,
            "norm_confound": self.norm_confound,
            "inter_id_separation": self.inter_id_separation,
            "cameras": self.cameras,
            "seed": self.seed,
            "holdout_fraction": self.holdout_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ParameterError(f"bad synthetic config: {exc}") from exc


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic identity clusters with a radial confound.

    Per identity: a mean direction on the unit sphere; per sample a
    direction (mean + angular noise, re-normalized), a radial scale drawn
    from the confound interval, and a uniform camera id. The last
    round(holdout_fraction * num_ids) identities form the evaluation
    splits: the first sample of every (identity, camera) pair is a query,
    the rest are gallery.
    """
    rng = Rng(cfg.seed)
    n_id, n_smp, d = cfg.num_ids, cfg.samples_per_id, cfg.dim

    means = rng.standard_normal((n_id, d))
    means /= np.maximum(np.sqrt((means * means).sum(axis=1, keepdims=True)), 1e-12)
    cams = rng.integers(cfg.cameras, size=(n_id, n_smp))
    noise = rng.standard_normal((n_id, n_smp, d))
    lo = RADIAL_MIDPOINT - cfg.norm_confound
    hi = RADIAL_MIDPOINT + cfg.norm_confound
    scales = rng.uniform(lo, hi, (n_id, n_smp))

    dirs = cfg.inter_id_separation * means[:, None, :] + cfg.direction_noise * noise
    dirs /= np.maximum(np.sqrt((dirs * dirs).sum(axis=2, keepdims=True)), 1e-12)
    payloads = scales[..., None] * dirs

    num_holdout = int(round(cfg.holdout_fraction * n_id))
    if n_id - num_holdout < 2:
        raise ParameterError("holdout_fraction leaves fewer than 2 training identities")
    first_train_ids = n_id - num_holdout

    items: list[Item] = []
    for pid in range(n_id):
        held_out = pid >= first_train_ids
        seen_cams: set[int] = set()
        for s in range(n_smp):
            cam = int(cams[pid, s])
            if held_out:
                split = "query" if cam not in seen_cams else "gallery"
                seen_cams.add(cam)
            else:
                split = "train"
            items.append(Item(payload=payloads[pid, s][None, :].copy(), pid=pid, camid=cam, split=split))
    ds = Dataset(items=items)
    ds.pid_map = _dense_pid_map(ds.pids("train"))
    return ds


# ---------------------------------------------------------------------------
# payload containers


def write_vector(path, vec: np.ndarray) -> None:
    flat = np.ascontiguousarray(np.asarray(vec, dtype="<f8").ravel())
    header = np.uint64(flat.size).astype("<u8").tobytes()
    Path(path).write_bytes(header + flat.tobytes())


def read_vector(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated vector file")
    n = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    if len(raw) != 8 + 8 * n:
        raise DatasetError(f"{path}: expected {n} float64 values, file has {(len(raw) - 8) // 8}")
    return np.frombuffer(raw[8:], dtype="<f8").copy()[None, :]


def write_image(path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


# ---------------------------------------------------------------------------
# manifests


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Persist payloads + manifest.csv (+ pid_map.json); returns manifest path."""
    out = Path(out_dir)
    (out / "payloads").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, item in enumerate(dataset.items):
        if item.payload.ndim == 3:
            rel = f"payloads/{i:05d}.png"
            write_image(out / rel, item.payload)
        else:
            rel = f"payloads/{i:05d}.vec"
            write_vector(out / rel, item.payload)
        rows.append([rel, item.pid, item.camid, item.split])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    with open(out / "pid_map.json", "w") as fh:
        json.dump({str(k): v for k, v in sorted(dataset.pid_map.items())}, fh, sort_keys=True)
    return manifest


def load_manifest(path) -> Dataset:
    """Load a manifest CSV and its payload files.

    Parse failures report the offending 1-based line number. Items keep the
    pids found in the file; the dense train-pid map is rebuilt on load and
    carried on the Dataset (run manifests persist it for provenance).
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    base = path.parent
    items: list[Item] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}:1: empty manifest, expected header {','.join(MANIFEST_HEADER)}")
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise DatasetError(f"{path}:1: bad header {header!r}, expected {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            rel, pid_s, cam_s, split = (c.strip() for c in row)
            if split not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split {split!r}, expected one of {SPLITS}")
            try:
                pid, cam = int(pid_s), int(cam_s)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: pid and camid must be integers, got {pid_s!r}, {cam_s!r}")
            payload_path = base / rel
            if not payload_path.exists():
                raise DatasetError(f"{path}:{lineno}: payload file missing: {payload_path}")
            suffix = payload_path.suffix.lower()
            if suffix == ".vec":
                payload = read_vector(payload_path)
            elif suffix in (".png", ".bmp", ".jpg", ".jpeg"):
                payload = read_image(payload_path)
            else:
                raise DatasetError(f"{path}:{lineno}: unsupported payload type {suffix!r}")
            items.append(Item(payload=payload, pid=pid, camid=cam, split=split))
    ds = Dataset(items=items)
    ds.pid_map = _dense_pid_map(ds.pids("train"))
    return ds


# ---------------------------------------------------------------------------
# augmentations


def horizontal_flip(img: np.ndarray, p: float, rng: Rng) -> np.ndarray:
    """Reverse the column axis with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"flip probability must be in [0, 1], got {p}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ParameterError(f"expected H x W or H x W x C image, got shape {img.shape}")
    if rng.random() < p:
        return img[:, ::-1].copy()
    return img


def _resolve_fill(fill, img: np.ndarray, region_shape, rng: Rng):
    if isinstance(fill, str):
        if fill == "mean":
            axis = (0, 1)
            return img.mean(axis=axis) if img.ndim == 3 else img.mean()
        if fill == "noise":
            return rng.uniform(float(img.min()), float(img.max()), region_shape)
        raise ParameterError(f"unknown fill mode {fill!r}, want 'mean', 'noise' or a value")
    return np.asarray(fill, dtype=np.float64)


def random_erasing(
    img: np.ndarray,
    p: float,
    area_range: tuple[float, float] = (0.02, 0.4),
    aspect_range: tuple[float, float] = (0.3, 3.33),
    fill="mean",
    rng: Rng | None = None,
    max_attempts: int = 100,
) -> np.ndarray:
    """With probability p, overwrite one random rectangle of the image.

    The rectangle's area fraction and aspect ratio (height/width) are
    rejection-sampled from the given ranges for at most max_attempts tries;
    if none fits the image, the input is returned unchanged. Fill is the
    per-channel image mean ("mean"), uniform noise over the image's value
    range ("noise"), or an explicit value.
    """
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"erase probability must be in [0, 1], got {p}")
    lo, hi = area_range
    alo, ahi = aspect_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ParameterError(f"area_range must satisfy 0 < lo <= hi <= 1, got {area_range}")
    if not (0.0 < alo <= ahi):
        raise ParameterError(f"aspect_range must satisfy 0 < lo <= hi, got {aspect_range}")
    if rng is None:
        raise ParameterError("random_erasing needs an Rng")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ParameterError(f"expected H x W or H x W x C image, got shape {img.shape}")
    if rng.random() >= p:
        return img
    h_img, w_img = img.shape[:2]
    area = h_img * w_img
    for _ in range(max_attempts):
        frac = rng.uniform(lo, hi)
        aspect = rng.uniform(alo, ahi)
        h = int(round(math.sqrt(frac * area * aspect)))
        w = int(round(math.sqrt(frac * area / aspect)))
        if 1 <= h <= h_img and 1 <= w <= w_img:
            top = rng.integers(h_img - h + 1)
            left = rng.integers(w_img - w + 1)
            out = img.copy()
            region = out[top : top + h, left : left + w]
            region[...] = _resolve_fill(fill, img, region.shape, rng)
            return out
    return img
