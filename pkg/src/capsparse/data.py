"""MNIST IDX ingestion, translated/affine canvases, and batching."""
from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DIGIT = 28


class DataError(Exception):
    """Malformed or inconsistent dataset files."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [N, canvas, canvas] float32 in [0,1]
    labels: np.ndarray  # [N] int64
    provenance: dict = field(default_factory=dict)
    ids: np.ndarray | None = None  # identifier of the source digit, for disjointness checks

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    @property
    def canvas(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx)
        return LabeledImageSet(self.images[idx], self.labels[idx], dict(self.provenance), self.ids[idx])


@dataclass
class AffineParams:
    rotation_deg: float = 0.0
    shear: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0
    translate_x: int = 0
    translate_y: int = 0


@dataclass(frozen=True)
class AffineRanges:
    rotation_deg: float = 20.0
    shear: float = 0.2
    scale_min: float = 0.8
    scale_max: float = 1.2

    def to_dict(self):
        return asdict(self)


# IDX ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expect_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise OSError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise OSError(f"{path}: truncated payload ({len(raw) - header} of {n} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledImageSet:
    imgs = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path)
    if len(imgs) != len(labels):
        raise DataError(f"{len(imgs)} images in {images_path} but {len(labels)} labels in {labels_path}")
    return LabeledImageSet(
        imgs.astype(np.float32) / 255.0,
        labels.astype(np.int64),
        {"kind": "mnist-raw", "images": str(images_path)},
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, compress: bool = False):
    px = np.clip(np.round(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
    n, h, w = px.shape
    img_bytes = struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + px.tobytes()
    lab_bytes = struct.pack(">II", LABEL_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    opener = gzip.compress if compress else (lambda b: b)
    Path(images_path).write_bytes(opener(img_bytes))
    Path(labels_path).write_bytes(opener(lab_bytes))


def find_mnist(root=None, split: str = "train") -> LabeledImageSet:
    """Locate ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` under ``root``.

    ``root`` defaults to ``$CAPSPARSE_MNIST`` then ``~/data/mnist``.
    """
    root = Path(root or os.environ.get("CAPSPARSE_MNIST") or Path.home() / "data" / "mnist")
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}[split]

    def pick(stem):
        for name in (stem, stem + ".gz"):
            if (root / name).exists():
                return root / name
        raise FileNotFoundError(f"no {stem}[.gz] under {root}")

    out = load_idx(pick(f"{prefix}-images-idx3-ubyte"), pick(f"{prefix}-labels-idx1-ubyte"))
    out.provenance["split"] = prefix
    out.ids = np.array([f"{prefix}:{i}" for i in range(len(out))])
    return out


# placement -----------------------------------------------------------------------

def place_translated(image: np.ndarray, canvas: int, rng: np.random.Generator) -> np.ndarray:
    """Paste a 28x28 digit at a uniform random offset inside a zero canvas."""
    h, w = image.shape
    if canvas < max(h, w):
        raise ValueError(f"canvas {canvas} smaller than the {h}x{w} digit")
    oy = int(rng.integers(0, canvas - h + 1))
    ox = int(rng.integers(0, canvas - w + 1))
    out = np.zeros((canvas, canvas), dtype=np.float32)
    out[oy:oy + h, ox:ox + w] = image
    return out


def _linear_part(p: AffineParams) -> np.ndarray:
    """rotation @ shear @ scale, acting on (row, col) coordinates."""
    th = np.deg2rad(p.rotation_deg)
    c, s = np.cos(th), np.sin(th)
    # counter-clockwise on screen; rows grow downward, hence the sign layout
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, 0.0], [p.shear, 1.0]])  # col += shear * row
    scale = np.diag([p.scale_y, p.scale_x])
    return rot @ shear @ scale


def _centroid(image: np.ndarray) -> np.ndarray:
    total = image.sum()
    if total <= 0:
        return (np.array(image.shape, dtype=np.float64) - 1) / 2
    rows, cols = np.indices(image.shape)
    return np.array([(rows * image).sum() / total, (cols * image).sum() / total])


def _render_centered(image: np.ndarray, p: AffineParams, size: int) -> np.ndarray:
    """Linear transform about the centroid; the centroid lands within half a pixel of the centre.

    The shift that centres the digit is integral, so an identity transform
    reproduces the input pixels exactly.
    """
    a = _linear_part(p)
    cen = _centroid(image)
    shift = np.round((size - 1) / 2 - cen)
    ainv = np.linalg.inv(a)
    # input = ainv @ (out - cen - shift) + cen
    offset = cen - ainv @ (cen + shift)
    out = ndimage.affine_transform(image.astype(np.float64), ainv, offset=offset,
                                   output_shape=(size, size), order=1, mode="grid-constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def apply_affine(image: np.ndarray, p: AffineParams, canvas: int) -> np.ndarray:
    """Deterministic affine placement; raises ``ValueError`` when the digit does not fit."""
    pad = DIGIT + canvas
    big = _render_centered(image, p, canvas + 2 * pad)
    oy, ox = pad - p.translate_y, pad - p.translate_x
    inside = big[oy:oy + canvas, ox:ox + canvas]
    if oy < 0 or ox < 0 or not np.isclose(inside.sum(), big.sum(), rtol=0, atol=1e-6):
        raise ValueError(f"transformed digit does not fit the {canvas}px canvas at {p}")
    return inside.astype(np.float32)


def random_affine(image: np.ndarray, canvas: int, ranges: AffineRanges, rng: np.random.Generator,
                  retries: int = 20) -> tuple[np.ndarray, AffineParams]:
    """Sample transform parameters uniformly and place the result with a fitting translation.

    When the linear part alone is wider than the canvas the parameters are
    redrawn, at most ``retries`` times.
    """
    pad = DIGIT + canvas
    for _ in range(retries):
        p = AffineParams(
            rotation_deg=float(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)),
            shear=float(rng.uniform(-ranges.shear, ranges.shear)),
            scale_x=float(rng.uniform(ranges.scale_min, ranges.scale_max)),
            scale_y=float(rng.uniform(ranges.scale_min, ranges.scale_max)),
        )
        big = _render_centered(image, p, canvas + 2 * pad)
        rows = np.flatnonzero(big.any(axis=1))
        cols = np.flatnonzero(big.any(axis=0))
        if rows.size == 0:
            return np.zeros((canvas, canvas), np.float32), p
        # top-left corner o of the crop must satisfy o <= first and o + canvas - 1 >= last
        lo_y, hi_y = rows[-1] - canvas + 1, rows[0]
        lo_x, hi_x = cols[-1] - canvas + 1, cols[0]
        if lo_y > hi_y or lo_x > hi_x:
            continue
        oy = int(rng.integers(lo_y, hi_y + 1))
        ox = int(rng.integers(lo_x, hi_x + 1))
        p.translate_y, p.translate_x = pad - oy, pad - ox
        return big[oy:oy + canvas, ox:ox + canvas].astype(np.float32), p
    raise ValueError(f"could not fit an affine-transformed digit into {canvas}px after {retries} draws")


def make_translated_set(src: LabeledImageSet, canvas: int, seed: int) -> LabeledImageSet:
    rng = np.random.default_rng(seed)
    imgs = np.stack([place_translated(im, canvas, rng) for im in src.images]) if len(src) else \
        np.zeros((0, canvas, canvas), np.float32)
    prov = {"kind": "translated", "seed": seed, "canvas": canvas, "count": len(src), "source": src.provenance}
    return LabeledImageSet(imgs, src.labels.copy(), prov, src.ids.copy())


def make_affine_set(src: LabeledImageSet, canvas: int, ranges: AffineRanges, seed: int) -> LabeledImageSet:
    rng = np.random.default_rng(seed)
    imgs, params = [], []
    for im in src.images:
        out, p = random_affine(im, canvas, ranges, rng)
        imgs.append(out)
        params.append(asdict(p))
    prov = {"kind": "affine", "seed": seed, "canvas": canvas, "count": len(src),
            "ranges": ranges.to_dict(), "params": params, "source": src.provenance}
    imgs = np.stack(imgs) if imgs else np.zeros((0, canvas, canvas), np.float32)
    return LabeledImageSet(imgs, src.labels.copy(), prov, src.ids.copy())


def save_set(ds: LabeledImageSet, out_dir, stem: str) -> tuple[Path, Path, Path]:
    """IDX pair plus a JSON provenance sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ip = out_dir / f"{stem}-images-idx3-ubyte"
    lp = out_dir / f"{stem}-labels-idx1-ubyte"
    write_idx(ds.images, ds.labels, ip, lp)
    sidecar = out_dir / f"{stem}.json"
    sidecar.write_text(json.dumps({**ds.provenance, "ids": [str(i) for i in ds.ids]}, indent=1))
    return ip, lp, sidecar


# batching ------------------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: LabeledImageSet, k: int, shuffle_seed: int | None = 0, training: bool = True,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images[K,1,C,C], labels[K])``; training drops the last partial batch."""
    n = len(ds)
    if k > n and training:
        raise ValueError(f"batch size {k} exceeds dataset size {n}")
    if k < 1:
        raise ValueError("batch size must be positive")
    order = epoch_order(n, shuffle_seed, epoch) if shuffle_seed is not None else np.arange(n)
    stop = (n // k) * k if training else n
    for i in range(0, stop, k):
        idx = order[i:i + k]
        yield ds.images[idx][:, None], ds.labels[idx]


def training_batch(ds: LabeledImageSet, k: int, seed: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch number ``step`` of an endless seeded stream; a pure function of its arguments."""
    per_epoch = len(ds) // k
    if per_epoch == 0:
        raise ValueError(f"batch size {k} exceeds dataset size {len(ds)}")
    epoch, i = divmod(step, per_epoch)
    idx = epoch_order(len(ds), seed, epoch)[i * k:(i + 1) * k]
    return ds.images[idx][:, None], ds.labels[idx]
