"""Training loop, frozen inference and the generalization experiments."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .capsnet import CapsNetModel, decode, encode, reconstruction_loss
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import (DIGIT, LabeledImageSet, find_mnist, make_affine_set, make_translated_set,
                   place_translated, training_batch)
from .optim import Adam
from .sparsity import (MaskResult, SparseController, SparsityState, aggregate_support, apply_mask,
                       rank_capsules)

log = logging.getLogger(__name__)


def mnist_training_subset(cfg: ExperimentConfig, mnist: LabeledImageSet | None = None) -> LabeledImageSet:
    mnist = mnist if mnist is not None else find_mnist(cfg.mnist_dir, "train")
    idx = np.random.default_rng(cfg.seed_data).permutation(len(mnist))[: cfg.train_subset]
    return mnist.subset(np.sort(idx))


class Trainer:
    """Owns the model, optimizer and sparsity controller for one run.

    Batches are a pure function of ``(seed_data, step)`` so a run resumed from
    a checkpoint sees exactly the batches the uninterrupted run would have.
    """

    def __init__(self, cfg: ExperimentConfig, train_set: LabeledImageSet | None = None,
                 checkpoint: Checkpoint | None = None):
        self.cfg = cfg
        self.train_set = train_set if train_set is not None else mnist_training_subset(cfg)
        self.model = CapsNetModel(cfg.geometry, seed=cfg.seed_weights)
        self.opt = Adam(self.model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        self.controller = SparseController(cfg.sparsity)
        self.step_count = 0
        self.history: list[dict] = []
        self._window: list[float] = []
        if checkpoint is not None:
            self.restore(checkpoint)

    @property
    def sparse(self) -> bool:
        return self.cfg.mode == "sparse"

    def batch(self, step: int) -> np.ndarray:
        x, _ = training_batch(self.train_set, self.cfg.batch_size, self.cfg.seed_data, step)
        canvas = self.cfg.geometry.canvas
        if x.shape[-1] != canvas:
            rng = np.random.default_rng([self.cfg.seed_data, step, 7])
            x = np.stack([place_translated(im[0], canvas, rng) for im in x])[:, None]
        return x.astype(np.float32)

    def step(self) -> float:
        x = self.batch(self.step_count)
        k = x.shape[0]
        with T.Tape() as tape:
            out = encode(x, self.model)
            if self.sparse:
                mres = self.controller.mask(out.c)
                vp = apply_mask(out.v, mres.m)
                ranks = mres.r
            else:
                vp = out.v
                ranks = rank_capsules(aggregate_support(out.c))
            recon = decode(vp, self.model)
            loss = reconstruction_loss(recon, x.reshape(k, -1))
        value = float(loss.data)
        if not np.isfinite(value):
            path = self.cfg.resolved_out_dir() / "last_finite.ckpt"
            save_checkpoint(self.checkpoint(), path)
            raise T.NumericalError(f"loss became {value} at step {self.step_count}; last finite state saved to {path}")
        self.opt.zero_grad()
        tape.backward(loss)
        self.opt.step()
        self.controller.after_batch(ranks, update_boosts=self.sparse)
        self.step_count += 1
        self._window.append(value)
        return value

    def log_record(self) -> dict:
        rec = {
            "step": self.step_count,
            "loss": self._window[-1] if self._window else None,
            "mean_loss": float(np.mean(self._window)) if self._window else None,
            "g": self.controller.state.g.tolist(),
            "mu": self.controller.state.mu.tolist(),
        }
        self._window = []
        return rec

    def run(self, steps: int | None = None, log_path=None, checkpoint_path=None) -> list[dict]:
        target = steps if steps is not None else self.cfg.steps
        fh = open(log_path, "a") if log_path else None
        try:
            while self.step_count < target:
                self.step()
                if self.step_count % self.cfg.log_every == 0 or self.step_count == target:
                    rec = self.log_record()
                    self.history.append(rec)
                    log.info("step %d loss %.4f", rec["step"], rec["mean_loss"])
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                        fh.flush()
                if checkpoint_path and self.cfg.checkpoint_every and self.step_count % self.cfg.checkpoint_every == 0:
                    save_checkpoint(self.checkpoint(), checkpoint_path)
        finally:
            if fh:
                fh.close()
        return self.history

    def checkpoint(self) -> Checkpoint:
        names = list(self.model.tensors)
        st = self.opt.state
        return Checkpoint(
            config=self.cfg.to_dict(),
            step=self.step_count,
            params={n: self.model[n].data.copy() for n in names},
            adam={"t": st.t, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps},
            adam_m={n: m.copy() for n, m in zip(names, st.m)},
            adam_v={n: v.copy() for n, v in zip(names, st.v)},
            sparsity=self.controller.state.to_dict(),
            rng={"weights_init": self.model.rng.bit_generator.state, "seed_data": self.cfg.seed_data,
                 "seed_weights": self.cfg.seed_weights, "seed_affine": self.cfg.seed_affine},
            fingerprint=self.cfg.fingerprint(),
        )

    def restore(self, ck: Checkpoint):
        for name, arr in ck.params.items():
            t = self.model[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {t.data.shape}")
            t.data[...] = arr
        names = list(self.model.tensors)
        st = self.opt.state
        st.t = ck.adam["t"]
        st.m = [ck.adam_m[n].copy() for n in names] if ck.adam_m else []
        st.v = [ck.adam_v[n].copy() for n in names] if ck.adam_v else []
        self.controller.state = SparsityState.from_dict(ck.sparsity)
        self.model.rng.bit_generator.state = ck.rng["weights_init"]
        self.step_count = ck.step


def train(cfg: ExperimentConfig, resume=None, train_set=None) -> tuple[Checkpoint, list[dict]]:
    """Train to ``cfg.steps``; writes ``model.ckpt`` and ``metrics.jsonl`` under the output dir."""
    out = cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(resume) if resume else None
    if ck is not None and ck.fingerprint != cfg.fingerprint():
        log.warning("resuming a checkpoint made with a different config (%s vs %s)", ck.fingerprint, cfg.fingerprint())
    trainer = Trainer(cfg, train_set=train_set, checkpoint=ck)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    history = trainer.run(log_path=out / "metrics.jsonl", checkpoint_path=out / "model.ckpt")
    final = trainer.checkpoint()
    save_checkpoint(final, out / "model.ckpt")
    return final, history


# frozen inference -------------------------------------------------------------------

@dataclass
class FrozenModel:
    """A trained capsule model plus its (no longer updated) sparsity state."""

    cfg: ExperimentConfig
    model: CapsNetModel
    controller: SparseController | None  # None in dense mode
    fingerprint: str

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "FrozenModel":
        cfg = ExperimentConfig.from_dict(ck.config)
        model = CapsNetModel(cfg.geometry, seed=cfg.seed_weights)
        for name, arr in ck.params.items():
            model[name].data[...] = arr
        ctrl = None
        if cfg.mode == "sparse":
            ctrl = SparseController(cfg.sparsity, SparsityState.from_dict(ck.sparsity))
        return cls(cfg, model, ctrl, ck.fingerprint)

    @property
    def geometry(self):
        return self.model.geometry

    def forward(self, images: np.ndarray, batch: int = 200) -> dict[str, np.ndarray]:
        """Features and diagnostics for ``images`` [N,C,C] or [N,1,C,C]; no tape is recorded."""
        images = np.asarray(images, np.float32)
        if images.ndim == 3:
            images = images[:, None]
        outs: dict[str, list] = {k: [] for k in ("v", "v_prime", "psi", "z", "r", "m", "recon")}
        for s in range(0, len(images), batch):
            x = images[s:s + batch]
            r = encode(x, self.model)
            if self.controller is not None:
                mres = self.controller.mask(r.c)
            else:
                psi = aggregate_support(r.c)
                mres = MaskResult(psi, psi, rank_capsules(psi), np.ones_like(psi))
            vp = apply_mask(r.v, mres.m)
            recon = decode(vp, self.model)
            for key, val in (("v", r.v.data), ("v_prime", vp.data), ("psi", mres.psi), ("z", mres.z),
                             ("r", mres.r), ("m", mres.m), ("recon", recon.data)):
                outs[key].append(val)
        return {k: np.concatenate(v) for k, v in outs.items()}

    def mask_for(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images)["m"]


def batch_mse(recon: np.ndarray, images: np.ndarray) -> float:
    """Sum of squared pixel errors per image, averaged over images (the training-loss reduction)."""
    d = recon.reshape(len(recon), -1) - images.reshape(len(images), -1)
    return float((d * d).sum(1).mean())


# experiment sets ---------------------------------------------------------------------

@dataclass
class ExperimentSets:
    mnist_svm_train: LabeledImageSet
    mnist_test: LabeledImageSet
    affine_train: LabeledImageSet
    affine_test: LabeledImageSet


def build_experiment_sets(cfg: ExperimentConfig, mnist_train: LabeledImageSet | None = None,
                          mnist_test: LabeledImageSet | None = None) -> ExperimentSets:
    """Seed-pinned evaluation sets.

    MNIST sets are drawn from the capsule training subset (SVM train) and the
    t10k split (test). Affine train digits come from MNIST-train images outside
    the capsule training subset; affine test digits come from t10k images not
    used in the MNIST test set.
    """
    mnist_train = mnist_train if mnist_train is not None else find_mnist(cfg.mnist_dir, "train")
    mnist_test = mnist_test if mnist_test is not None else find_mnist(cfg.mnist_dir, "test")
    canvas = cfg.geometry.canvas
    ev = cfg.eval
    rng = np.random.default_rng(cfg.seed_data)
    perm = rng.permutation(len(mnist_train))
    in_subset = perm[: cfg.train_subset]
    held_out = perm[cfg.train_subset:]
    svm_n = min(ev.svm_train, cfg.svm.train_cap, len(in_subset))
    svm_src = mnist_train.subset(np.sort(in_subset[:svm_n]))
    aff_tr_n = min(ev.affine_train, cfg.svm.train_cap, len(held_out))
    aff_tr_src = mnist_train.subset(np.sort(held_out[:aff_tr_n]))
    tperm = np.random.default_rng([cfg.seed_data, 1]).permutation(len(mnist_test))
    mt_src = mnist_test.subset(np.sort(tperm[: ev.mnist_test]))
    at_src = mnist_test.subset(np.sort(tperm[ev.mnist_test: ev.mnist_test + ev.affine_test]))
    if len(at_src) < ev.affine_test:
        # not enough unused test digits: reuse from the start (the affine test set is a separate condition)
        at_src = mnist_test.subset(np.sort(tperm[: ev.affine_test]))

    def placed(src, seed):
        return src if canvas == DIGIT else make_translated_set(src, canvas, seed)

    return ExperimentSets(
        mnist_svm_train=placed(svm_src, cfg.seed_affine + 11),
        mnist_test=placed(mt_src, cfg.seed_affine + 12),
        affine_train=make_affine_set(aff_tr_src, canvas, cfg.affine, cfg.seed_affine),
        affine_test=make_affine_set(at_src, canvas, cfg.affine, cfg.seed_affine + 1),
    )


def condition_sets(sets: ExperimentSets, condition: str) -> tuple[LabeledImageSet, LabeledImageSet]:
    if condition == "a":
        return sets.affine_train, sets.affine_test
    if condition == "b":
        return sets.mnist_svm_train, sets.affine_test
    if condition == "mnist":
        return sets.mnist_svm_train, sets.mnist_test
    raise ValueError(f"unknown condition {condition!r}; expected a, b or mnist")


def run_experiment(ckpt, condition: str, sets: ExperimentSets | None = None, mnist_dir=None):
    """Evaluate a trained checkpoint (path or object) under condition a, b or mnist."""
    from .analysis import evaluate_condition

    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    frozen = FrozenModel.from_checkpoint(ckpt)
    if mnist_dir is not None:
        frozen.cfg.mnist_dir = str(mnist_dir)
    sets = sets or build_experiment_sets(frozen.cfg)
    train_set, test_set = condition_sets(sets, condition)
    report = evaluate_condition(frozen, train_set, test_set, condition=condition)
    return report
