"""Two-phase training: coarse painter + discriminator, then the frozen-coarse fine painter."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adversary import DiscSpec, build_discriminator
from .checkpoint import digest, load_archive, load_network, save_archive, save_network
from .coarse import CpnSpec, build_cpn
from .data import InpaintingSet, channel_mean
from .evaluation import TrainingCurve, mean_psnr, paste_patch, predict
from .fine import FpnSpec, build_fpn
from .nets import load_parameter_set, parameter_set
from .objectives import (
    FeatureExtractor,
    LossWeights,
    discriminator_loss_from_logits,
    euclidean_loss,
    feature_loss,
    fixed_random_cnn,
    fpn_loss,
    generator_loss_from_logits,
    joint_cpn_loss,
    l2_penalty,
)
from .optim import Adam, NumericError, check_finite

log = logging.getLogger(__name__)

LATEST = "LATEST"


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = "cpn"
    epochs: int = 200
    batch_size: int = 64
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    elementwise: bool = False
    mask_size: int = 64
    fill: str = "mean"
    seed: int = 0
    eval_every: int = 100
    plateau_patience: int | None = 10
    plateau_min_delta: float = 0.0
    checkpoint_dir: str = "runs"
    checkpoint_every: int = 1
    keep_checkpoints: int | None = None
    deterministic: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.phase not in ("cpn", "fpn"):
            raise ValueError(f"phase must be 'cpn' or 'fpn', got {self.phase!r}")
        for name in ("epochs", "batch_size", "eval_every", "checkpoint_every", "mask_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be non-negative")
        if self.fill not in ("mean", "zero"):
            raise ValueError(f"fill must be 'mean' or 'zero', got {self.fill!r}")

    def to_dict(self) -> dict:
        """Hyper-parameters only; the output directory is left out so that
        identical runs in different places write identical archives."""
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        del d["checkpoint_dir"]
        return d


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    curve: TrainingCurve
    net: torch.nn.Module
    steps: int
    epochs_run: int
    stopped_early: bool
    extra: dict = field(default_factory=dict)


def set_deterministic(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def resolve_fill(policy: str, train_set: InpaintingSet) -> list[float]:
    if policy == "zero":
        return [0.0, 0.0, 0.0]
    return [float(v) for v in channel_mean(train_set.images)]


def _tensors(sample, dtype=torch.float32):
    masked = torch.from_numpy(sample.masked_image.data.transpose(0, 3, 1, 2).copy()).to(dtype)
    truth = torch.from_numpy(sample.ground_truth_patch.data.transpose(0, 3, 1, 2).copy()).to(dtype)
    full = paste_patch(masked, truth, sample.geometry)
    return masked, truth, full


class _Plateau:
    def __init__(self, patience, min_delta):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an end-of-epoch score; True once patience is exhausted."""
        if value > self.best + self.min_delta:
            self.best, self.best_epoch, self.bad = value, epoch, 0
        else:
            self.bad += 1
        return self.patience is not None and self.bad >= self.patience

    def state(self) -> dict:
        return {"best": float(self.best), "best_epoch": self.best_epoch, "bad": self.bad}

    def load(self, d: dict) -> None:
        self.best, self.best_epoch, self.bad = d["best"], d["best_epoch"], d["bad"]


class _Checkpoints:
    """Per-epoch files ``<kind>-eNNNN.ckpt`` plus a LATEST pointer."""

    def __init__(self, root, keep):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.keep = keep
        self.tags: list[str] = sorted(
            p.name[len("state-"):-len(".ckpt")] for p in self.root.glob("state-e*.ckpt")
        )

    def path(self, kind: str, tag: str) -> Path:
        return self.root / f"{kind}-{tag}.ckpt"

    def latest(self) -> str | None:
        p = self.root / LATEST
        return p.read_text().strip() if p.is_file() else None

    def commit(self, tag: str, protect: str | None) -> None:
        (self.root / LATEST).write_text(tag + "\n")
        if tag not in self.tags:
            self.tags.append(tag)
        if self.keep is None:
            return
        stale = [t for t in self.tags[: -self.keep] if t != protect]
        for t in stale:
            for p in self.root.glob(f"*-{t}.ckpt"):
                p.unlink()
            self.tags.remove(t)


def _loss_log(curve, step, epoch, values: dict) -> None:
    for name, v in values.items():
        curve.append(step, epoch, "train", name, v)


# --------------------------------------------------------------------------- phase 1


def train_cpn(
    config: TrainConfig,
    train_set: InpaintingSet,
    val_set: InpaintingSet | None = None,
    cpn_spec: CpnSpec | None = None,
    disc_spec: DiscSpec | None = None,
    extractor: FeatureExtractor | None = None,
    resume: bool = False,
) -> TrainResult:
    """Adversarial training of the coarse painter under the weighted joint loss.

    Per batch: one discriminator step on real vs generated patches, then one
    generator step on the joint loss, whose feature term compares the
    assembled full image with the source. Validation PSNR (the training set
    when no validation split is given) drives plateau stopping.
    """
    if config.phase != "cpn":
        raise ValueError("train_cpn needs phase='cpn'")
    set_deterministic(config.seed, config.deterministic)
    size = train_set.images.shape[1]
    cpn_spec = cpn_spec or CpnSpec(input_size=size, patch_size=config.mask_size)
    disc_spec = disc_spec or DiscSpec(patch_size=config.mask_size)
    extractor = extractor or fixed_random_cnn(config.seed)
    val_set = val_set if val_set is not None and len(val_set) else train_set
    val_split = "val" if val_set is not train_set else "train"

    cpn = build_cpn(cpn_spec, config.seed)
    disc = build_discriminator(disc_spec, config.seed + 1)
    g_opt = Adam(cpn, config.lr_g, config.beta1, config.beta2, config.adam_eps)
    d_opt = Adam(disc, config.lr_d, config.beta1, config.beta2, config.adam_eps)
    fill = resolve_fill(config.fill, train_set)
    extra = {"fill": fill, "mask_size": config.mask_size, "image_size": size}
    ckpts = _Checkpoints(config.checkpoint_dir, config.keep_checkpoints)
    curve = TrainingCurve()
    plateau = _Plateau(config.plateau_patience, config.plateau_min_delta)
    step = start_epoch = 0
    extractor_sum = extractor.checksum()

    if resume and ckpts.latest():
        tag = ckpts.latest()
        manifest, arrays = load_archive(ckpts.path("state", tag))
        net, _ = load_network(ckpts.path("cpn", tag), "cpn")
        load_parameter_set(cpn, parameter_set(net))
        dnet, _ = load_network(ckpts.path("disc", tag), "disc")
        load_parameter_set(disc, parameter_set(dnet))
        step, start_epoch = manifest["step"], manifest["epoch"] + 1
        g_opt.load_state_arrays("g", arrays, manifest["g_step"])
        d_opt.load_state_arrays("d", arrays, manifest["d_step"])
        plateau.load(manifest["plateau"])
        curve = TrainingCurve.from_csv(ckpts.root / "curve.csv")
        curve.truncate(step)
        log.info("resumed coarse training at epoch %d, step %d", start_epoch, step)

    evaluated = {}

    def evaluate(epoch):
        if step not in evaluated:
            pred = predict(cpn, None, val_set, config.mask_size, fill, config.eval_batch_size)
            evaluated[step] = mean_psnr(pred.coarse, pred.truth)
            curve.append(step, epoch, val_split, "psnr_cpn", evaluated[step])
        return evaluated[step]

    def save(epoch, tag):
        save_network(ckpts.path("cpn", tag), cpn, config.seed, step, extra)
        save_network(ckpts.path("disc", tag), disc, config.seed + 1, step)
        arrays = g_opt.state_arrays("g") | d_opt.state_arrays("d")
        manifest = {
            "kind": "train_state",
            "phase": "cpn",
            "step": step,
            "epoch": epoch,
            "g_step": g_opt.state.step,
            "d_step": d_opt.state.step,
            "plateau": plateau.state(),
            "config": config.to_dict(),
        }
        save_archive(ckpts.path("state", tag), manifest, arrays)
        curve.to_csv(ckpts.root / "curve.csv")
        best = f"e{plateau.best_epoch:04d}" if plateau.best_epoch >= 0 else None
        ckpts.commit(tag, best)

    stopped = False
    epoch = start_epoch - 1
    for epoch in range(start_epoch, config.epochs):
        cpn.train()
        disc.train()
        for sample in train_set.batches(config.batch_size, config.seed, epoch, config.mask_size, fill):
            masked, truth, full = _tensors(sample)
            fake = cpn(masked)

            d_loss = discriminator_loss_from_logits(disc.logits(truth), disc.logits(fake.detach()))
            check_finite(d_loss.item(), f"discriminator loss at step {step + 1}")
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

            adv = generator_loss_from_logits(disc.logits(fake))
            ed = euclidean_loss(fake, truth, config.elementwise)
            feat = feature_loss(extractor, paste_patch(masked, fake, sample.geometry), full,
                                config.elementwise)
            try:
                parts = joint_cpn_loss(ed, adv, feat, l2_penalty(cpn), config.weights)
            except ValueError as e:
                raise NumericError(f"step {step + 1}: {e}") from e
            g_opt.zero_grad()
            parts.total.backward()
            g_opt.step()
            disc.zero_grad(set_to_none=True)
            step += 1

            values = parts.as_floats()
            check_finite(values["total"], f"generator loss at step {step}")
            values["disc"] = d_loss.item()
            _loss_log(curve, step, epoch, values)
            if step % config.eval_every == 0:
                evaluate(epoch)
                cpn.train()

        score = evaluate(epoch)
        stopped = plateau.update(score, epoch)
        if extractor.checksum() != extractor_sum:
            raise FreezeViolation("feature extractor parameters changed during training")
        last = epoch + 1 == config.epochs
        if stopped or last or (epoch + 1) % config.checkpoint_every == 0:
            save(epoch, f"e{epoch:04d}")
        if stopped:
            log.info("validation PSNR plateaued at epoch %d (best %.3f dB at epoch %d)",
                     epoch, plateau.best, plateau.best_epoch)
            break

    tag = ckpts.latest()
    best_tag = f"e{plateau.best_epoch:04d}"
    best = ckpts.path("cpn", best_tag)
    return TrainResult(
        checkpoint=ckpts.path("cpn", tag),
        best_checkpoint=best if best.exists() else ckpts.path("cpn", tag),
        curve=curve,
        net=cpn,
        steps=step,
        epochs_run=epoch + 1,
        stopped_early=stopped,
        extra={"disc": disc, "fill": fill, "extractor": extractor},
    )


# --------------------------------------------------------------------------- phase 2


def train_fpn(
    config: TrainConfig,
    train_set: InpaintingSet,
    val_set: InpaintingSet | None,
    cpn_checkpoint,
    fpn_spec: FpnSpec | None = None,
    resume: bool = False,
) -> TrainResult:
    """Train the fine painter on patches from a frozen coarse painter.

    The coarse painter runs in eval mode and is never updated; its checkpoint
    file and in-memory parameters are checksummed every epoch. Curves log the
    coarse and polished PSNR side by side.
    """
    if config.phase != "fpn":
        raise ValueError("train_fpn needs phase='fpn'")
    set_deterministic(config.seed, config.deterministic)
    cpn_checkpoint = Path(cpn_checkpoint)
    cpn_file_sum = digest(cpn_checkpoint)
    cpn, manifest = load_network(cpn_checkpoint, "cpn")
    recorded = manifest.get("extra", {})
    fill = recorded.get("fill", [0.0, 0.0, 0.0])
    mask_size = recorded.get("mask_size", cpn.spec.patch_size)
    cpn.eval()
    for p in cpn.parameters():
        p.requires_grad_(False)
    cpn_sum = _state_sum(cpn)

    fpn_spec = fpn_spec or FpnSpec(patch_size=mask_size)
    if fpn_spec.patch_size != mask_size:
        raise ValueError(f"fine painter patch {fpn_spec.patch_size} != mask size {mask_size}")
    fpn = build_fpn(fpn_spec, config.seed)
    opt = Adam(fpn, config.lr_g, config.beta1, config.beta2, config.adam_eps)
    ckpts = _Checkpoints(config.checkpoint_dir, config.keep_checkpoints)
    curve = TrainingCurve()
    plateau = _Plateau(config.plateau_patience, config.plateau_min_delta)
    splits = {"train": train_set}
    if val_set is not None and len(val_set):
        splits["val"] = val_set
    score_split = "val" if "val" in splits else "train"
    extra = {"fill": fill, "mask_size": mask_size, "cpn_checkpoint": cpn_file_sum}
    step = start_epoch = 0

    if resume and ckpts.latest():
        tag = ckpts.latest()
        state, arrays = load_archive(ckpts.path("state", tag))
        net, _ = load_network(ckpts.path("fpn", tag), "fpn")
        load_parameter_set(fpn, parameter_set(net))
        step, start_epoch = state["step"], state["epoch"] + 1
        opt.load_state_arrays("f", arrays, state["f_step"])
        plateau.load(state["plateau"])
        curve = TrainingCurve.from_csv(ckpts.root / "curve.csv")
        curve.truncate(step)

    evaluated = {}

    def evaluate(epoch) -> dict:
        if step in evaluated:
            return evaluated[step]
        scores = {}
        for split, data in splits.items():
            pred = predict(cpn, fpn, data, mask_size, fill, config.eval_batch_size)
            c, f = mean_psnr(pred.coarse, pred.truth), mean_psnr(pred.polished, pred.truth)
            curve.append(step, epoch, split, "psnr_cpn", c)
            curve.append(step, epoch, split, "psnr_fpn", f)
            scores[split] = f
        evaluated[step] = scores
        return scores

    def save(epoch, tag):
        save_network(ckpts.path("fpn", tag), fpn, config.seed, step, extra)
        manifest = {
            "kind": "train_state",
            "phase": "fpn",
            "step": step,
            "epoch": epoch,
            "f_step": opt.state.step,
            "plateau": plateau.state(),
            "config": config.to_dict(),
        }
        save_archive(ckpts.path("state", tag), manifest, opt.state_arrays("f"))
        curve.to_csv(ckpts.root / "curve.csv")
        best = f"e{plateau.best_epoch:04d}" if plateau.best_epoch >= 0 else None
        ckpts.commit(tag, best)

    if step == 0:
        evaluate(0)

    stopped = False
    epoch = start_epoch - 1
    for epoch in range(start_epoch, config.epochs):
        fpn.train()
        for sample in train_set.batches(config.batch_size, config.seed, epoch, mask_size, fill):
            masked, truth, _ = _tensors(sample)
            with torch.no_grad():
                coarse = cpn(masked)
            _, polished = fpn(coarse)
            loss = fpn_loss(polished, truth, config.elementwise)
            check_finite(loss.item(), f"fine painter loss at step {step + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            curve.append(step, epoch, "train", "fpn_loss", loss.item())
            if step % config.eval_every == 0:
                evaluate(epoch)
                fpn.train()

        if _state_sum(cpn) != cpn_sum or digest(cpn_checkpoint) != cpn_file_sum:
            raise FreezeViolation(f"coarse painter changed during fine training (epoch {epoch})")
        stopped = plateau.update(evaluate(epoch)[score_split], epoch)
        last = epoch + 1 == config.epochs
        if stopped or last or (epoch + 1) % config.checkpoint_every == 0:
            save(epoch, f"e{epoch:04d}")
        if stopped:
            break

    tag = ckpts.latest()
    best = ckpts.path("fpn", f"e{plateau.best_epoch:04d}")
    return TrainResult(
        checkpoint=ckpts.path("fpn", tag),
        best_checkpoint=best if best.exists() else ckpts.path("fpn", tag),
        curve=curve,
        net=fpn,
        steps=step,
        epochs_run=epoch + 1,
        stopped_early=stopped,
        extra={"cpn": cpn, "fill": fill, "cpn_digest": cpn_file_sum},
    )


def _state_sum(net: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for v in net.state_dict().values():
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()

