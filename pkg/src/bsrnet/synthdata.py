"""Seeded synthetic multi-organ images with strong class imbalance, and their file format.

Scene recipe (class ids):

    1  large ellipse   30-40 % of pixels
    2  ring             6-10 %
    3+ small disks     0.5-1.5 % each

Later classes are painted over earlier ones, so small organs are never
hidden by large ones.  Images are class intensities plus Gaussian pixel
noise plus a random linear background ramp, clipped to [0, 1].
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
IMG_MAGIC = b"BSRI"
LAB_MAGIC = b"BSRL"


class DatasetFormatError(ValueError):
    """A dataset file is malformed; the message names the file."""


class DatasetVersionError(DatasetFormatError):
    pass


class InfeasibleRecipeError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    K: int = 4
    # background first, then classes 1..K (disk classes beyond the list reuse the last value)
    class_means: tuple[float, ...] = (0.1, 0.3, 0.5, 0.9, 0.7)
    noise_sigma: float = 0.05
    ramp_amplitude: float = 0.15
    ellipse_fraction: tuple[float, float] = (0.30, 0.40)
    ring_fraction: tuple[float, float] = (0.06, 0.10)
    disk_fraction: tuple[float, float] = (0.005, 0.015)
    max_attempts: int = 100

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ValueError("height and width must be divisible by 4")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def mean_of(self, cls: int) -> float:
        return self.class_means[min(cls, len(self.class_means) - 1)]

    def fraction_bounds(self, cls: int) -> tuple[float, float]:
        if cls == 1:
            return self.ellipse_fraction
        if cls == 2:
            return self.ring_fraction
        return self.disk_fraction


def _draw_layout(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    area = h * w
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    lab = np.zeros((h, w), dtype=np.int64)

    # ellipse around the centre
    frac = rng.uniform(*spec.ellipse_fraction)
    ratio = rng.uniform(0.7, 1.0)
    a = np.sqrt(frac * area / (np.pi * ratio))
    b = a * ratio
    cy, cx = h / 2 + rng.uniform(-0.1, 0.1) * h, w / 2 + rng.uniform(-0.1, 0.1) * w
    th = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
    v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
    lab[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = 1

    if spec.K >= 2:
        frac = rng.uniform(*spec.ring_fraction)
        thick = rng.uniform(0.06, 0.09) * min(h, w)
        # pi*(R^2 - (R-t)^2) = frac*area  ->  R = (frac*area/pi + t^2) / (2t)
        r_out = (frac * area / np.pi + thick ** 2) / (2 * thick)
        ry = rng.uniform(r_out, h - r_out)
        rx = rng.uniform(r_out, w - r_out)
        d = np.hypot(yy - ry, xx - rx)
        lab[(d <= r_out) & (d > r_out - thick)] = 2

    centres = []
    for cls in range(3, spec.K + 1):
        frac = rng.uniform(*spec.disk_fraction)
        r = np.sqrt(frac * area / np.pi)
        for _ in range(50):
            dy, dx = rng.uniform(r + 1, h - r - 1), rng.uniform(r + 1, w - r - 1)
            if all(np.hypot(dy - py, dx - px) > r + pr + 1.5 for py, px, pr in centres):
                break
        centres.append((dy, dx, r))
        lab[np.hypot(yy - dy, xx - dx) <= r] = cls
    return lab


def _layout_ok(spec: SceneSpec, lab: np.ndarray) -> bool:
    frac = np.bincount(lab.ravel(), minlength=spec.K + 1) / lab.size
    return all(lo <= frac[c] <= hi for c in range(1, spec.K + 1)
               for lo, hi in [spec.fraction_bounds(c)])


def generate_sample(spec: SceneSpec, sample_seed) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image H x W float64 in [0,1], labels H x W int in 0..K)``."""
    rng = np.random.default_rng(sample_seed)
    for _ in range(spec.max_attempts):
        lab = _draw_layout(spec, rng)
        if _layout_ok(spec, lab):
            break
    else:
        raise InfeasibleRecipeError(
            f"could not place shapes within the fraction bounds at {spec.height}x{spec.width} "
            f"after {spec.max_attempts} attempts")
    means = np.array([spec.mean_of(c) for c in range(spec.K + 1)])
    img = means[lab]
    h, w = lab.shape
    ang = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = ((yy / (h - 1) - 0.5) * np.sin(ang) + (xx / (w - 1) - 0.5) * np.cos(ang))
    img = img + spec.ramp_amplitude * ramp + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    return np.clip(img, 0.0, 1.0), lab


# ---------------------------------------------------------------------------
# splits


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: np.ndarray


@dataclass
class UnlabeledSample:
    id: str
    image: np.ndarray


@dataclass
class DatasetSplit:
    spec: SceneSpec
    labeled: list[Sample]
    unlabeled: list[UnlabeledSample]
    test: list[Sample]
    # ground truth of unlabeled images; only written to the oracle sidecar
    _hidden: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @property
    def ids(self) -> dict[str, list[str]]:
        return {"labeled": [s.id for s in self.labeled],
                "unlabeled": [s.id for s in self.unlabeled],
                "test": [s.id for s in self.test]}


def build_split(spec: SceneSpec, n: int, m: int, n_test: int, seed: int) -> DatasetSplit:
    if min(n, m, n_test) < 1:
        raise ValueError("n, m and n_test must all be >= 1")
    total = n + m + n_test
    ids = [f"{i:05d}" for i in range(total)]
    samples = {sid: generate_sample(spec, [seed, i]) for i, sid in enumerate(ids)}
    order = np.random.default_rng([seed, total]).permutation(total)
    pick = [ids[i] for i in order]
    lab_ids, unl_ids, test_ids = pick[:n], pick[n:n + m], pick[n + m:]
    return DatasetSplit(
        spec,
        [Sample(i, *samples[i]) for i in lab_ids],
        [UnlabeledSample(i, samples[i][0]) for i in unl_ids],
        [Sample(i, *samples[i]) for i in test_ids],
        {i: samples[i][1] for i in unl_ids},
    )


# ---------------------------------------------------------------------------
# file format


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path}: file missing") from exc


def write_raster(path, arr: np.ndarray, kind: str) -> None:
    magic, dtype = (IMG_MAGIC, "<f8") if kind == "img" else (LAB_MAGIC, "<u2")
    arr = np.asarray(arr)
    if kind == "lab" and arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
        raise ValueError("label values must fit in u16")
    h, w = arr.shape
    header = magic + struct.pack("<III", FORMAT_VERSION, h, w)
    _atomic_write(Path(path), header + arr.astype(dtype).tobytes())


def read_raster(path, kind: str) -> np.ndarray:
    path = Path(path)
    magic, dtype, itemsize = (IMG_MAGIC, "<f8", 8) if kind == "img" else (LAB_MAGIC, "<u2", 2)
    buf = _read(path)
    if len(buf) < 16:
        raise DatasetFormatError(f"{path}: truncated header")
    if buf[:4] != magic:
        raise DatasetFormatError(f"{path}: bad magic bytes {buf[:4]!r}, expected {magic!r}")
    version, h, w = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    if len(buf) != 16 + h * w * itemsize:
        raise DatasetFormatError(f"{path}: expected {h * w * itemsize} payload bytes, found {len(buf) - 16}")
    arr = np.frombuffer(buf, dtype=dtype, offset=16).reshape(h, w)
    return arr.astype(np.float64) if kind == "img" else arr.astype(np.int64)


def _spec_to_json(spec: SceneSpec) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items()}


def save_split(split: DatasetSplit, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for s in split.labeled + split.test:
        write_raster(path / f"{s.id}.img", s.image, "img")
        write_raster(path / f"{s.id}.lab", s.label, "lab")
    for s in split.unlabeled:
        write_raster(path / f"{s.id}.img", s.image, "img")
        if s.id in split._hidden:
            write_raster(path / f"{s.id}.lab.oracle", split._hidden[s.id], "lab")
    manifest = {"version": FORMAT_VERSION, "h": split.spec.height, "w": split.spec.width,
                "k": split.spec.K, "ids": split.ids, "scene": _spec_to_json(split.spec)}
    _atomic_write(path / "manifest.json", json.dumps(manifest, indent=1).encode())


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    try:
        manifest = json.loads(_read(mpath))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or "version" not in manifest:
        raise DatasetFormatError(f"{mpath}: missing version field")
    if manifest["version"] != FORMAT_VERSION:
        raise DatasetVersionError(f"{mpath}: manifest version {manifest['version']} is not supported")
    for key in ("h", "w", "k", "ids"):
        if key not in manifest:
            raise DatasetFormatError(f"{mpath}: missing {key!r}")
    return manifest


def load_split(path) -> DatasetSplit:
    """Load a split.  Unlabeled ground truth is never read."""
    path = Path(path)
    manifest = read_manifest(path)
    scene = manifest.get("scene")
    if scene:
        spec = SceneSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in scene.items()})
    else:
        spec = SceneSpec(height=manifest["h"], width=manifest["w"], K=manifest["k"])
    ids = manifest["ids"]

    def labeled(sid):
        return Sample(sid, read_raster(path / f"{sid}.img", "img"), read_raster(path / f"{sid}.lab", "lab"))

    return DatasetSplit(
        spec,
        [labeled(i) for i in ids["labeled"]],
        [UnlabeledSample(i, read_raster(path / f"{i}.img", "img")) for i in ids["unlabeled"]],
        [labeled(i) for i in ids["test"]],
    )


def load_oracle_labels(path) -> dict[str, np.ndarray]:
    """Hidden labels of the unlabeled images; for evaluation tooling only."""
    path = Path(path)
    return {i: read_raster(path / f"{i}.lab.oracle", "lab") for i in read_manifest(path)["ids"]["unlabeled"]}
