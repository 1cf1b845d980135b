"""Training-time pre-processing with replayable transform records.

Each task column of the pre-processing table maps to a fixed sequence of ops.
Sampling and application are split: :func:`sample_record` draws every random
parameter up front and :func:`replay` applies a record deterministically, so
the same record can be mirrored onto boxes, masks and depth maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from matplotlib import colors as mcolors
from PIL import Image
from scipy import ndimage

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# ops enabled per task, in application order
TASK_OPS = {
    "classification": ("resize", "jitter", "blur", "hflip", "vflip", "rotate", "normalize"),
    "detection": ("jitter", "blur", "rot90", "hflip", "vflip", "normalize"),
    "segmentation": ("resize", "jitter", "blur", "hflip", "vflip", "rotate", "affine", "normalize"),
    "depth": ("pad", "resize", "jitter", "hflip", "vflip", "normalize"),
}
GEOMETRIC = {"pad", "resize", "rot90", "hflip", "vflip", "rotate", "affine"}


@dataclass
class AugmentConfig:
    size: int = 64
    brightness: tuple[float, float] = (0.4, 0.6)
    contrast: tuple[float, float] = (0.5, 1.5)
    saturation: tuple[float, float] = (0.75, 1.25)
    hue: tuple[float, float] = (0.99, 1.01)
    blur_kernel: int = 25
    blur_sigma: tuple[float, float] = (0.001, 2.0)
    flip_p: float = 0.5
    rot90_p: float = 0.5
    rotate_deg: tuple[float, float] = (-180.0, 180.0)
    # translation as a fraction of the side: 28 px at 224
    translate_frac: float = 28 / 224
    scale: tuple[float, float] = (0.5, 1.5)
    shear_deg: tuple[float, float] = (-22.5, 22.5)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AugmentConfig":
        kw = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise KeyError(f"unknown augment key {k!r}")
            kw[k] = tuple(v) if isinstance(v, (list, tuple)) else v
        return cls(**kw)


@dataclass
class TransformRecord:
    """Ordered ops with their sampled parameters."""

    ops: list[dict[str, Any]] = field(default_factory=list)
    in_shape: tuple[int, int] = (0, 0)

    def geometric(self) -> list[dict[str, Any]]:
        return [op for op in self.ops if op["op"] in GEOMETRIC]


@dataclass
class ViewPair:
    x1: np.ndarray
    x2: np.ndarray
    rec1: TransformRecord
    rec2: TransformRecord


# --------------------------------------------------------------------------
# sampling


def sample_record(
    shape: tuple[int, int], task: str, rng: np.random.Generator, cfg: AugmentConfig | None = None
) -> TransformRecord:
    cfg = cfg or AugmentConfig()
    if task not in TASK_OPS:
        raise ValueError(f"unsupported task kind {task!r}")
    h, w = shape
    ops: list[dict[str, Any]] = []
    for name in TASK_OPS[task]:
        if name == "pad":
            side = max(h, w)
            ops.append({"op": "pad", "to": (side, side)})
            h = w = side
        elif name == "resize":
            ops.append({"op": "resize", "to": (cfg.size, cfg.size)})
            h = w = cfg.size
        elif name == "jitter":
            lo_b, hi_b = sorted(cfg.brightness)
            ops.append(
                {
                    "op": "jitter",
                    "brightness": float(rng.uniform(lo_b, hi_b)),
                    "contrast": float(rng.uniform(*cfg.contrast)),
                    "saturation": float(rng.uniform(*cfg.saturation)),
                    "hue": float(rng.uniform(*cfg.hue)),
                }
            )
        elif name == "blur":
            ops.append({"op": "blur", "sigma": float(rng.uniform(*cfg.blur_sigma)), "kernel": cfg.blur_kernel})
        elif name == "rot90":
            ops.append({"op": "rot90", "apply": bool(rng.random() < cfg.rot90_p)})
            if ops[-1]["apply"]:
                h, w = w, h
        elif name in ("hflip", "vflip"):
            ops.append({"op": name, "apply": bool(rng.random() < cfg.flip_p)})
        elif name == "rotate":
            ops.append({"op": "rotate", "angle": float(rng.uniform(*cfg.rotate_deg))})
        elif name == "affine":
            side = max(h, w)
            ops.append(
                {
                    "op": "affine",
                    "tx": float(rng.uniform(-1, 1) * cfg.translate_frac * side),
                    "ty": float(rng.uniform(-1, 1) * cfg.translate_frac * side),
                    "scale": float(rng.uniform(*cfg.scale)),
                    "shear": float(rng.uniform(*cfg.shear_deg)),
                }
            )
        elif name == "normalize":
            ops.append({"op": "normalize", "mean": tuple(cfg.mean), "std": tuple(cfg.std)})
    return TransformRecord(ops=ops, in_shape=tuple(shape))


def identity_record(shape: tuple[int, int], task: str, cfg: AugmentConfig | None = None) -> TransformRecord:
    """Record where every random op takes its no-op value."""
    rec = sample_record(shape, task, np.random.default_rng(0), cfg)
    for op in rec.ops:
        if op["op"] == "jitter":
            op.update(brightness=1.0, contrast=1.0, saturation=1.0, hue=1.0)
        elif op["op"] == "blur":
            op["sigma"] = 0.0
        elif op["op"] in ("rot90", "hflip", "vflip"):
            op["apply"] = False
        elif op["op"] == "rotate":
            op["angle"] = 0.0
        elif op["op"] == "affine":
            op.update(tx=0.0, ty=0.0, scale=1.0, shear=0.0)
    return rec


def eval_record(shape: tuple[int, int], task: str, cfg: AugmentConfig | None = None) -> TransformRecord:
    """Deterministic validation/test pipeline: pad (depth), resize, normalise."""
    cfg = cfg or AugmentConfig()
    h, w = shape
    ops: list[dict[str, Any]] = []
    if task == "depth":
        ops.append({"op": "pad", "to": (max(h, w), max(h, w))})
    if task != "detection":
        ops.append({"op": "resize", "to": (cfg.size, cfg.size)})
    ops.append({"op": "normalize", "mean": tuple(cfg.mean), "std": tuple(cfg.std)})
    return TransformRecord(ops=ops, in_shape=tuple(shape))


# --------------------------------------------------------------------------
# geometry


def _op_matrix(op: dict[str, Any], shape: tuple[int, int]) -> tuple[np.ndarray, tuple[int, int]]:
    """Forward map of continuous (x, y) pixel coordinates and the output shape."""
    h, w = shape
    name = op["op"]
    eye = np.eye(3)
    if name == "pad":
        return eye, tuple(op["to"])
    if name == "resize":
        oh, ow = op["to"]
        return np.diag([ow / w, oh / h, 1.0]), (oh, ow)
    if name == "rot90":
        if not op["apply"]:
            return eye, shape
        return np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, w], [0.0, 0.0, 1.0]]), (w, h)
    if name == "hflip":
        return (np.array([[-1.0, 0, w], [0, 1, 0], [0, 0, 1]]) if op["apply"] else eye), shape
    if name == "vflip":
        return (np.array([[1.0, 0, 0], [0, -1, h], [0, 0, 1]]) if op["apply"] else eye), shape
    cx, cy = w / 2.0, h / 2.0
    centre = np.array([[1.0, 0, cx], [0, 1, cy], [0, 0, 1]])
    uncentre = np.array([[1.0, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    if name == "rotate":
        a = math.radians(op["angle"])
        c, s = math.cos(a), math.sin(a)
        # counter-clockwise on screen (y axis points down)
        rot = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1.0]])
        return centre @ rot @ uncentre, shape
    if name == "affine":
        sh = math.tan(math.radians(op["shear"]))
        lin = np.array([[op["scale"], op["scale"] * sh, 0], [0, op["scale"], 0], [0, 0, 1.0]])
        trans = np.array([[1.0, 0, op["tx"]], [0, 1, op["ty"]], [0, 0, 1]])
        return trans @ centre @ lin @ uncentre, shape
    raise ValueError(f"not a geometric op: {name}")


_XY_TO_RC = np.array([[0.0, 1.0, -0.5], [1.0, 0.0, -0.5], [0.0, 0.0, 1.0]])
_RC_TO_XY = np.array([[0.0, 1.0, 0.5], [1.0, 0.0, 0.5], [0.0, 0.0, 1.0]])


def _warp(arr: np.ndarray, forward: np.ndarray, order: int) -> np.ndarray:
    if np.allclose(forward, np.eye(3), atol=0, rtol=0):
        return arr.copy()
    inv = _XY_TO_RC @ np.linalg.inv(forward) @ _RC_TO_XY
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, inv, order=order, mode="constant", cval=0.0)
    return np.stack(
        [ndimage.affine_transform(arr[..., c], inv, order=order, mode="constant", cval=0.0) for c in range(arr.shape[-1])],
        axis=-1,
    )


def _resize(arr: np.ndarray, to: tuple[int, int], kind: str) -> np.ndarray:
    oh, ow = to
    if arr.shape[:2] == (oh, ow):
        return arr.copy()
    resample = {"image": Image.BICUBIC, "depth": Image.BILINEAR, "mask": Image.NEAREST}[kind]
    chans = [arr] if arr.ndim == 2 else [arr[..., c] for c in range(arr.shape[-1])]
    out = [np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((ow, oh), resample)) for c in chans]
    res = out[0] if arr.ndim == 2 else np.stack(out, axis=-1)
    return res.astype(arr.dtype)


def _apply_geometric(arr: np.ndarray, op: dict[str, Any], kind: str) -> np.ndarray:
    name = op["op"]
    if name == "pad":
        th, tw = op["to"]
        h, w = arr.shape[:2]
        pad = [(0, th - h), (0, tw - w)] + [(0, 0)] * (arr.ndim - 2)
        return np.pad(arr, pad, mode="constant")
    if name == "resize":
        out = _resize(arr, op["to"], kind)
        return np.clip(out, 0.0, 1.0) if kind == "image" else out
    if name == "rot90":
        return np.rot90(arr, 1, axes=(0, 1)).copy() if op["apply"] else arr
    if name == "hflip":
        return arr[:, ::-1].copy() if op["apply"] else arr
    if name == "vflip":
        return arr[::-1].copy() if op["apply"] else arr
    forward, _ = _op_matrix(op, arr.shape[:2])
    return _warp(arr, forward, order=0 if kind == "mask" else 1)


# --------------------------------------------------------------------------
# photometric


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def colour_jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float) -> np.ndarray:
    out = np.clip(img * brightness, 0.0, 1.0)
    if contrast != 1.0:
        m = _gray(out).mean()
        out = np.clip(contrast * out + (1 - contrast) * m, 0.0, 1.0)
    if saturation != 1.0:
        g = _gray(out)[..., None]
        out = np.clip(saturation * out + (1 - saturation) * g, 0.0, 1.0)
    if hue != 1.0:
        hsv = mcolors.rgb_to_hsv(out)
        hsv[..., 0] = np.mod(hsv[..., 0] * hue, 1.0)
        out = mcolors.hsv_to_rgb(hsv)
    return out


def gaussian_blur(img: np.ndarray, sigma: float, kernel: int = 25) -> np.ndarray:
    if sigma <= 0:
        return img
    half = (kernel - 1) / 2.0
    x = np.arange(kernel) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def normalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    return (img - np.asarray(mean)) / np.asarray(std)


def denormalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    return img * np.asarray(std) + np.asarray(mean)


# --------------------------------------------------------------------------
# public api


def to_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def replay(image: np.ndarray, rec: TransformRecord) -> np.ndarray:
    """Apply every op of ``rec`` to an RGB image; returns float32 HxWx3."""
    img = to_float(image)
    if img.shape[:2] != tuple(rec.in_shape):
        raise ValueError(f"record expects input {rec.in_shape}, got {img.shape[:2]}")
    for op in rec.ops:
        name = op["op"]
        if name in GEOMETRIC:
            img = _apply_geometric(img, op, "image")
        elif name == "jitter":
            img = colour_jitter(img, op["brightness"], op["contrast"], op["saturation"], op["hue"])
        elif name == "blur":
            img = gaussian_blur(img, op["sigma"], op["kernel"])
        elif name == "normalize":
            img = normalize(img, op["mean"], op["std"])
    return img.astype(np.float32)


def preprocess_train(
    image: np.ndarray, task: str, rng_seed: int | np.random.SeedSequence, cfg: AugmentConfig | None = None
) -> tuple[np.ndarray, TransformRecord]:
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image must have positive dimensions")
    rec = sample_record(image.shape[:2], task, np.random.default_rng(rng_seed), cfg)
    return replay(image, rec), rec


def preprocess_eval(image: np.ndarray, task: str, cfg: AugmentConfig | None = None) -> tuple[np.ndarray, TransformRecord]:
    rec = eval_record(image.shape[:2], task, cfg)
    return replay(image, rec), rec


def make_view_pair(
    image: np.ndarray, rng_seed: int | np.random.SeedSequence, cfg: AugmentConfig | None = None
) -> ViewPair:
    """Two independent draws of the classification pipeline on one source image."""
    s1, s2 = np.random.SeedSequence(rng_seed).spawn(2) if isinstance(rng_seed, int) else rng_seed.spawn(2)
    x1, r1 = preprocess_train(image, "classification", s1, cfg)
    x2, r2 = preprocess_train(image, "classification", s2, cfg)
    return ViewPair(x1, x2, r1, r2)


def transform_boxes(rec: TransformRecord, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror the geometric ops onto ``[x_min, y_min, x_max, y_max]`` boxes.

    Returns the transformed boxes and a keep flag per input box; boxes that end
    up fully outside the image are dropped.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    shape = tuple(rec.in_shape)
    total = np.eye(3)
    for op in rec.geometric():
        m, shape = _op_matrix(op, shape)
        total = m @ total
    h, w = shape
    out = np.zeros_like(boxes)
    keep = np.ones(len(boxes), dtype=bool)
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        corners = np.array([[x0, y0, 1], [x1, y0, 1], [x0, y1, 1], [x1, y1, 1]]).T
        p = total @ corners
        bx0, by0 = np.clip(p[0].min(), 0, w), np.clip(p[1].min(), 0, h)
        bx1, by1 = np.clip(p[0].max(), 0, w), np.clip(p[1].max(), 0, h)
        out[i] = (bx0, by0, bx1, by1)
        keep[i] = bx1 > bx0 and by1 > by0
    return out[keep], keep


def apply_to_targets(rec: TransformRecord, target: np.ndarray, kind: str, max_depth: float = 1.0):
    """Replay geometric ops of ``rec`` on a target.

    ``kind`` is ``"boxes"``, ``"mask"`` or ``"depth"``. Photometric ops are
    skipped. Masks use nearest-neighbour sampling, depth maps bilinear with
    values rescaled to [0, 1] by ``max_depth``.
    """
    if kind == "boxes":
        return transform_boxes(rec, target)
    if kind not in ("mask", "depth"):
        raise ValueError(f"unknown target kind {kind!r}")
    arr = np.asarray(target)
    if arr.shape[:2] != tuple(rec.in_shape):
        raise ValueError(f"target shape {arr.shape[:2]} does not match record input {rec.in_shape}")
    dtype = arr.dtype
    out = arr.astype(np.float64)
    if kind == "depth":
        out = out / max_depth
    for op in rec.geometric():
        out = _apply_geometric(out, op, kind)
    if kind == "depth":
        return np.clip(out, 0.0, 1.0)
    return np.round(out).astype(dtype)
