"""Dataset manifests, reproducible splits, class weights and synthetic data.

The synthetic generator stands in for the real endoscopy datasets at desk
scale. Every sample is rendered procedurally from a per-sample seed so a
dataset is a pure function of ``(spec, seed)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import TASK_KINDS

MANIFEST_VERSION = 1


class DataError(ValueError):
    """Raised for invalid dataset inputs."""


@dataclass
class ImageSample:
    id: str
    image: str
    target: dict[str, Any]
    split: str | None = None
    # in-memory payload for generated data; not serialized
    arrays: dict[str, np.ndarray] | None = field(default=None, repr=False, compare=False)


@dataclass
class DatasetManifest:
    task_kind: str
    records: list[ImageSample]
    class_names: list[str] | None = None
    root: Path | None = None

    def __post_init__(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise DataError(f"unsupported task kind {self.task_kind!r}")

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"version": MANIFEST_VERSION, "task_kind": self.task_kind}
        if self.class_names is not None:
            out["class_names"] = list(self.class_names)
        recs = []
        for r in self.records:
            d = {"id": r.id, "image": r.image, "target": r.target}
            if r.split is not None:
                d["split"] = r.split
            recs.append(d)
        out["records"] = recs
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def validate(self) -> None:
        """Check the manifest invariants; raise ``DataError`` on violation."""
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
            if self.task_kind == "classification":
                label = r.target.get("label")
                if self.class_names is None:
                    raise DataError("classification manifest needs class_names")
                if not isinstance(label, int) or not 0 <= label < len(self.class_names):
                    raise DataError(f"record {r.id}: class index {label!r} out of range")
            if r.arrays is None and self.root is not None:
                for key in ("mask", "depth", "lens"):
                    if key in r.target and not (self.root / r.target[key]).exists():
                        raise DataError(f"record {r.id}: missing {key} file {r.target[key]}")
                if not (self.root / r.image).exists():
                    raise DataError(f"record {r.id}: missing image {r.image}")


@dataclass
class SplitManifest:
    train: list[ImageSample]
    val: list[ImageSample]
    test: list[ImageSample]
    seed: int
    ratios: tuple[float, float, float]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


@dataclass
class ClassWeights:
    weights: np.ndarray
    class_names: list[str] | None = None

    def __getitem__(self, i: int) -> float:
        return float(self.weights[i])


# --------------------------------------------------------------------------
# manifest io


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    data = json.loads(path.read_text())
    if data.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {data.get('version')!r}")
    records = [
        ImageSample(id=str(r["id"]), image=r["image"], target=r["target"], split=r.get("split"))
        for r in data["records"]
    ]
    m = DatasetManifest(
        task_kind=data["task_kind"],
        records=records,
        class_names=data.get("class_names"),
        root=path.parent,
    )
    m.validate()
    return m


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    # Pillow infers I;16 from a uint16 array
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            return np.asarray(im, dtype=np.uint16)
        return np.asarray(im)


def write_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    """Write manifest plus any in-memory assets below ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for r in manifest.records:
        if r.arrays is None:
            continue
        for rel, key in [(r.image, "image")] + [
            (r.target[k], k) for k in ("mask", "depth", "lens") if k in r.target
        ]:
            dest = root / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(_png_bytes(r.arrays[key]))
    path = root / "manifest.json"
    path.write_text(manifest.dumps())
    manifest.root = root
    return path


def dataset_hash(manifest: DatasetManifest) -> str:
    """Content hash over the manifest and every referenced asset."""
    h = hashlib.sha256(manifest.dumps().encode())
    for r in manifest.records:
        if r.arrays is not None:
            for key in sorted(r.arrays):
                h.update(key.encode())
                h.update(np.ascontiguousarray(r.arrays[key]).tobytes())
        elif manifest.root is not None:
            h.update((manifest.root / r.image).read_bytes())
            for k in ("mask", "depth", "lens"):
                if k in r.target:
                    h.update((manifest.root / r.target[k]).read_bytes())
    return h.hexdigest()[:16]


def load_image(manifest: DatasetManifest, rec: ImageSample) -> np.ndarray:
    """Return the sample image as ``uint8`` HxWx3."""
    if rec.arrays is not None:
        return rec.arrays["image"]
    if manifest.root is None:
        raise DataError(f"record {rec.id}: no root directory to resolve {rec.image}")
    img = _read_png(manifest.root / rec.image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., :3]


def load_target(manifest: DatasetManifest, rec: ImageSample) -> dict[str, Any]:
    """Decode the target: label, boxes array, mask in {0,1}, depth in [0,1], lens bool."""

    def arr(key: str) -> np.ndarray:
        if rec.arrays is not None:
            return rec.arrays[key]
        return _read_png(manifest.root / rec.target[key])

    t = rec.target
    out: dict[str, Any] = {}
    if "label" in t:
        out["label"] = int(t["label"])
    if "boxes" in t:
        out["boxes"] = np.asarray(t["boxes"], dtype=np.float64).reshape(-1, 4)
    if "mask" in t:
        out["mask"] = (arr("mask") > 127).astype(np.uint8)
    if "depth" in t:
        out["depth"] = arr("depth").astype(np.float64) / 65535.0
    if "lens" in t:
        out["lens"] = arr("lens") > 127
    return out


# --------------------------------------------------------------------------
# splits and weights


def _split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_dataset(
    manifest: DatasetManifest, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> SplitManifest:
    """Shuffle under ``seed`` and cut into train/val/test.

    Val and test sizes are floored; the remainder goes to train.
    """
    if len(manifest.records) == 0:
        raise DataError("empty dataset")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError("invalid ratios")
    n = len(manifest.records)
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = _split_counts(n, ratios)
    recs = [manifest.records[i] for i in order]
    return SplitManifest(
        train=recs[:n_train],
        val=recs[n_train : n_train + n_val],
        test=recs[n_train + n_val :],
        seed=seed,
        ratios=ratios,  # type: ignore[arg-type]
    )


def weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise DataError("empty class")
    n_d = counts.sum()
    return n_d / (counts * len(counts))


def class_weights(manifest: DatasetManifest) -> ClassWeights:
    """Inverse-frequency weights ``N_D / (N_i * N_c)`` over the whole dataset."""
    if manifest.task_kind != "classification" or manifest.class_names is None:
        raise DataError("class weights need a classification manifest")
    counts = np.zeros(len(manifest.class_names), dtype=np.int64)
    for r in manifest.records:
        counts[r.target["label"]] += 1
    return ClassWeights(weights_from_counts(counts), list(manifest.class_names))


# --------------------------------------------------------------------------
# synthetic generator

# (lesion colour, stripe frequency in cycles/pixel, stripe angle)
_CLASS_TEXTURES = [
    ((0.95, 0.85, 0.30), 0.00, 0.0),
    ((0.30, 0.55, 0.95), 0.18, 0.0),
    ((0.25, 0.85, 0.35), 0.12, 1.2),
    ((0.80, 0.30, 0.85), 0.25, 0.6),
    ((0.95, 0.95, 0.95), 0.08, 2.0),
    ((0.15, 0.15, 0.15), 0.30, 2.6),
]


@dataclass(frozen=True)
class SynthSpec:
    n: int
    task: str
    height: int = 64
    width: int = 64
    n_classes: int = 3
    style: str = "endo"  # "endo" mimics the target domain, "general" is a shifted domain

    def validate(self) -> None:
        if self.task not in TASK_KINDS:
            raise DataError(f"unsupported task kind {self.task!r}")
        if self.n < 1 or self.height < 1 or self.width < 1:
            raise DataError("synthetic spec sizes must be >= 1")
        if self.task == "classification" and not 2 <= self.n_classes <= len(_CLASS_TEXTURES):
            raise DataError(f"n_classes must be in [2, {len(_CLASS_TEXTURES)}]")
        if self.style not in ("endo", "general"):
            raise DataError(f"unknown style {self.style!r}")


def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _background(rng: np.random.Generator, h: int, w: int, style: str) -> np.ndarray:
    if style == "endo":
        base = np.array([0.78, 0.42, 0.38]) + rng.uniform(-0.05, 0.05, 3)
        tex = 0.06 * _smooth_noise(rng, h, w, max(h, w) / 12)
        img = base[None, None, :] * (1.0 + tex[..., None])
        # vessel-like dark streaks
        streak = _smooth_noise(rng, h, w, max(h, w) / 24)
        img *= 1.0 - 0.15 * (np.abs(streak) < 0.15)[..., None]
    else:
        c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        ang = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(ang) * xx / max(w, 1) + np.sin(ang) * yy / max(h, 1)) % 1.0
        img = c0[None, None] * (1 - ramp[..., None]) + c1[None, None] * ramp[..., None]
        img += 0.08 * _smooth_noise(rng, h, w, max(h, w) / 8)[..., None]
    return img


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ay: float, ax: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _random_ellipse(rng: np.random.Generator, h: int, w: int, scale: float) -> np.ndarray:
    side = min(h, w)
    ax = rng.uniform(0.10, 0.22) * side * scale
    ay = rng.uniform(0.10, 0.22) * side * scale
    r = max(ax, ay)
    cy = rng.uniform(min(r + 1, h / 2), max(h - r - 1, h / 2))
    cx = rng.uniform(min(r + 1, w / 2), max(w - r - 1, w / 2))
    m = _ellipse_mask(h, w, cy, cx, max(ay, 0.75), max(ax, 0.75), rng.uniform(0, np.pi))
    if not m.any():
        m[int(min(cy, h - 1)), int(min(cx, w - 1))] = True
    return m


def _paint(img: np.ndarray, mask: np.ndarray, texture_id: int, rng: np.random.Generator,
           colour: Sequence[float] | None = None) -> None:
    own, freq, ang = _CLASS_TEXTURES[texture_id]
    colour = own if colour is None else colour
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    pattern = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)) + rng.uniform(0, 2 * np.pi))
    shade = 0.75 + 0.25 * pattern if freq > 0 else np.ones_like(pattern)
    col = np.asarray(colour) * (1.0 + rng.uniform(-0.05, 0.05))
    img[mask] = (col[None, :] * shade[mask][:, None])


def _non_touching_lesions(rng: np.random.Generator, h: int, w: int, count: int) -> list[np.ndarray]:
    masks: list[np.ndarray] = []
    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(50 * count):
        if len(masks) == count:
            break
        m = _random_ellipse(rng, h, w, scale=0.8)
        if (ndimage.binary_dilation(m, iterations=2) & occupied).any():
            continue
        masks.append(m)
        occupied |= m
    return masks


def _lens_mask(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    r = np.hypot(yy - h / 2, xx - w / 2)
    return r <= 0.9 * 0.5 * math.hypot(h, w)


def _depth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    cy = h / 2 + rng.uniform(-0.15, 0.15) * h
    cx = w / 2 + rng.uniform(-0.15, 0.15) * w
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    r = np.hypot(yy - cy, xx - cx) / max(h, w)
    width = rng.uniform(0.25, 0.45)
    d = 0.05 + 0.9 * np.exp(-((r / width) ** 2))
    d += 0.03 * _smooth_noise(rng, h, w, max(h, w) / 6)
    return np.clip(d, 0.0, 1.0)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _render_sample(spec: SynthSpec, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    h, w = spec.height, spec.width
    img = _background(rng, h, w, spec.style)
    arrays: dict[str, np.ndarray] = {}
    target: dict[str, Any] = {}
    if spec.task == "classification":
        label = int(rng.integers(spec.n_classes))
        # colour matches the label only part of the time so the stripe pattern is needed to separate classes
        decoy = int(rng.integers(spec.n_classes))
        colour = _CLASS_TEXTURES[label if rng.random() < 0.8 else decoy][0]
        _paint(img, _random_ellipse(rng, h, w, scale=1.3), label, rng, colour)
        target["label"] = label
    elif spec.task in ("segmentation", "detection"):
        count = int(rng.integers(1, 3 if spec.task == "segmentation" else 4))
        masks = _non_touching_lesions(rng, h, w, count)
        union = np.zeros((h, w), dtype=bool)
        for m in masks:
            _paint(img, m, 0, rng)
            union |= m
        arrays["mask"] = (union * 255).astype(np.uint8)
        if spec.task == "detection":
            target["boxes"] = [_tight_box(m) for m in masks]
    else:
        depth = _depth_field(rng, h, w)
        lens = _lens_mask(h, w)
        # light falls off with distance from the tip
        illum = 1.0 / (1.0 + 6.0 * depth**2)
        img = img * illum[..., None] * 1.4
        img[~lens] = 0.0
        arrays["depth"] = np.round(depth * 65535).astype(np.uint16)
        arrays["lens"] = (lens * 255).astype(np.uint8)
    arrays["image"] = _to_u8(img)
    return arrays, target


def _tight_box(mask: np.ndarray) -> list[float]:
    ys, xs = np.nonzero(mask)
    return [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)]


_ASSET_DIRS = {"mask": "masks", "depth": "depth", "lens": "lens"}


def generate_synthetic_dataset(spec: SynthSpec, seed: int) -> DatasetManifest:
    """Render ``spec.n`` procedural samples for one task family.

    Each sample draws from its own child seed, so records are independent of
    ``n``: the first k samples of a size-n set equal a size-k set.
    """
    spec.validate()
    records = []
    children = np.random.SeedSequence(seed).spawn(spec.n)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        arrays, target = _render_sample(spec, rng)
        sid = f"{spec.task[:3]}{i:05d}"
        for key in ("mask", "depth", "lens"):
            if key in arrays:
                target[key] = f"{_ASSET_DIRS[key]}/{sid}.png"
        records.append(ImageSample(id=sid, image=f"images/{sid}.png", target=target, arrays=arrays))
    class_names = [f"texture{k}" for k in range(spec.n_classes)] if spec.task == "classification" else None
    m = DatasetManifest(task_kind=spec.task, records=records, class_names=class_names)
    m.validate()
    return m


def attach_splits(manifest: DatasetManifest, splits: SplitManifest) -> None:
    """Write split tags onto the manifest records."""
    for name in ("train", "val", "test"):
        for r in getattr(splits, name):
            r.split = name


def splits_from_tags(manifest: DatasetManifest) -> SplitManifest | None:
    if not manifest.records or any(r.split is None for r in manifest.records):
        return None
    by = {k: [r for r in manifest.records if r.split == k] for k in ("train", "val", "test")}
    return SplitManifest(by["train"], by["val"], by["test"], seed=-1, ratios=(0.8, 0.1, 0.1))
