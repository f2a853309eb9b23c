"""Diagnostics: condition accuracies, routing-support curves, rank frequencies,
equivariance sweeps, reconstruction panels, PNG grids."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import svm as svm_mod
from .capsnet import decode
from .data import LabeledImageSet
from .train import FrozenModel, batch_mse

SWEEP_VALUES = np.round(np.linspace(-1.0, 1.0, 11), 10)


@dataclass
class EvalReport:
    condition: str
    accuracy: float
    batch_mse: float
    n_images: int
    fingerprint: str
    confusion: list[list[int]]
    n_train: int = 0
    sanity: bool = False
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def text(self) -> str:
        flag = " [train==test sanity mode]" if self.sanity else ""
        return (f"condition {self.condition}: accuracy {self.accuracy:.4f} on {self.n_images} images, "
                f"batch MSE {self.batch_mse:.3f} (svm trained on {self.n_train}; config {self.fingerprint}){flag}")


def featurize(v_prime: np.ndarray) -> np.ndarray:
    """Flatten [K,L,D] capsule outputs into [K, L*D] classifier features."""
    v_prime = np.asarray(v_prime)
    return v_prime.reshape(len(v_prime), -1).astype(np.float64)


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, n_classes: int = 10) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def evaluate_condition(frozen: FrozenModel, train_set: LabeledImageSet, test_set: LabeledImageSet,
                       condition: str = "a", allow_overlap: bool = False) -> EvalReport:
    """Fit the SVM head on frozen features of ``train_set``; score it on ``test_set``.

    ``allow_overlap`` enables the train==test sanity mode, which is flagged in the report.
    """
    same = train_set is test_set
    overlap = same or bool(np.intersect1d(train_set.ids.astype(str), test_set.ids.astype(str)).size)
    if overlap and not allow_overlap:
        raise ValueError("SVM train and test sets share image identifiers")
    s = frozen.cfg.svm
    cap = min(len(train_set), s.train_cap)
    tr = train_set if cap == len(train_set) else train_set.subset(np.arange(cap))
    ftr = frozen.forward(tr.images)
    fte = ftr if same else frozen.forward(test_set.images)
    model = svm_mod.fit(featurize(ftr["v_prime"]), tr.labels, C=s.C, gamma=s.gamma, tol=s.tol)
    pred, _ = model.predict(featurize(fte["v_prime"]))
    truth = test_set.labels if not same else tr.labels
    cm = confusion_matrix(truth, pred, max(10, int(max(truth.max(), pred.max())) + 1))
    return EvalReport(
        condition=condition,
        accuracy=float((pred == truth).mean()),
        batch_mse=batch_mse(fte["recon"], test_set.images if not same else tr.images),
        n_images=len(truth),
        fingerprint=frozen.fingerprint,
        confusion=cm.tolist(),
        n_train=len(tr),
        sanity=overlap,
        meta={"svm_gamma": model.gamma, "svm_C": model.C, "svm_train_cap": s.train_cap,
              "mode": frozen.cfg.mode, "canvas": frozen.geometry.canvas,
              "train_kind": train_set.provenance.get("kind"), "test_kind": test_set.provenance.get("kind")},
    )


def ranked_curve_from_support(psi: np.ndarray) -> np.ndarray:
    """Mean of per-image descending-sorted support, scaled so rank 0 is 1."""
    psi = np.atleast_2d(np.asarray(psi, np.float64))
    srt = -np.sort(-psi, axis=1)
    mean = srt.mean(0)
    return mean / mean[0]


def ranked_coefficient_curve(frozen: FrozenModel, images: np.ndarray, n_images: int | None = None) -> np.ndarray:
    n = len(images) if n_images is None else min(n_images, len(images))
    if n < 1:
        raise ValueError("need at least one image")
    return ranked_curve_from_support(frozen.forward(images[:n])["psi"])


def rank_frequency_from_ranks(r: np.ndarray) -> np.ndarray:
    """F[j, rho] = fraction of samples in which capsule j holds rank rho."""
    r = np.atleast_2d(np.asarray(r))
    n, l = r.shape
    f = np.zeros((l, l))
    np.add.at(f, (np.tile(np.arange(l), n), r.ravel()), 1.0)
    return f / n


def rank_frequency(frozen: FrozenModel, images: np.ndarray, n_images: int | None = None) -> np.ndarray:
    n = len(images) if n_images is None else min(n_images, len(images))
    return rank_frequency_from_ranks(frozen.forward(images[:n])["r"])


def _decode(frozen: FrozenModel, vp: np.ndarray) -> np.ndarray:
    c = frozen.geometry.canvas
    return decode(vp.astype(np.float32), frozen.model).data.reshape(len(vp), c, c)


def equivariance_sweep(frozen: FrozenModel, image: np.ndarray, capsule: int | None = None, dim: int = 0,
                       values=SWEEP_VALUES) -> tuple[np.ndarray, dict]:
    """Overwrite one post-mask pose coordinate with each of ``values`` and decode.

    The default capsule is the one ranked first for this image.
    """
    g = frozen.geometry
    out = frozen.forward(np.asarray(image)[None])
    if capsule is None:
        capsule = int(np.argmin(out["r"][0]))
    if not 0 <= capsule < g.n_latent:
        raise IndexError(f"capsule {capsule} out of range 0..{g.n_latent - 1}")
    if not 0 <= dim < g.latent_dim:
        raise IndexError(f"pose dimension {dim} out of range 0..{g.latent_dim - 1}")
    base = out["v_prime"][0]
    batch = np.repeat(base[None], len(values), axis=0)
    batch[:, capsule, dim] = values
    meta = {"capsule": capsule, "dim": dim, "values": [float(v) for v in values], "perturbed": "post-mask",
            "original_value": float(base[capsule, dim])}
    return _decode(frozen, batch), meta


@dataclass
class Panels:
    full: np.ndarray  # [C,C]
    single: np.ndarray  # [L,C,C] reconstruction from capsule j alone
    leave_one_out: np.ndarray  # [L,C,C] reconstruction without capsule j
    diff: np.ndarray  # [L,C,C] |full - leave_one_out|
    mask: np.ndarray  # [L]

    def images(self) -> np.ndarray:
        return np.concatenate([self.full[None], self.single, self.leave_one_out, self.diff])

    def diff_mse(self) -> np.ndarray:
        return (self.diff ** 2).reshape(len(self.diff), -1).mean(1)

    def dominance_ratio(self) -> float:
        """max/min of per-capsule exclusion effect; infinite when some capsule has none."""
        d = self.diff_mse()
        return float(d.max() / d.min()) if d.min() > 0 else float("inf")


def reconstruction_panels(frozen: FrozenModel, image: np.ndarray) -> Panels:
    g = frozen.geometry
    out = frozen.forward(np.asarray(image)[None])
    vp = out["v_prime"][0]
    l = g.n_latent
    eye = np.eye(l)[:, :, None]
    single = vp[None] * eye
    loo = vp[None] * (1.0 - eye)
    recs = _decode(frozen, np.concatenate([vp[None], single, loo]))
    full = recs[0]
    single_r, loo_r = recs[1:1 + l], recs[1 + l:]
    return Panels(full, single_r, loo_r, np.abs(full[None] - loo_r), out["m"][0])


def median_dominance_ratio(frozen: FrozenModel, images: np.ndarray) -> float:
    return float(np.median([reconstruction_panels(frozen, im).dominance_ratio() for im in images]))


# PNG ---------------------------------------------------------------------------------

def _png_chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)


def grid(images, cols: int, sep_value: float = 1.0) -> np.ndarray:
    images = [np.asarray(im, np.float64) for im in images]
    if not images:
        raise ValueError("no images to lay out")
    h, w = images[0].shape
    if any(im.shape != (h, w) for im in images):
        raise ValueError("grid images must share one size")
    cols = max(1, min(cols, len(images)))
    rows = -(-len(images) // cols)
    out = np.full((rows * h + rows - 1, cols * w + cols - 1), sep_value)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        out[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = im
    return out


def write_png_grid(images, cols: int, path) -> Path:
    """Grayscale 8-bit PNG of ``images`` laid out row-major with 1px separators."""
    arr = grid(images, cols)
    px = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    raw = b"".join(b"\x00" + px[i].tobytes() for i in range(h))
    png = (b"\x89PNG\r\n\x1a\n"
           + _png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
           + _png_chunk(b"IDAT", zlib.compress(raw, 9))
           + _png_chunk(b"IEND", b""))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(png)
    except OSError as e:
        raise OSError(f"could not write PNG to {path}: {e}") from e
    return path


def write_csv(path, rows, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)] if header else []
    lines += [",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path
