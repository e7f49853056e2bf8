"""Compound loss, exact gradients, AdamW with cosine decay, and the training loop."""
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint, imgproc, sdt, vit

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Loss, gradient or update became non-finite."""


@dataclass
class LossConfig:
    lam: float = 0.01
    boundary_mode: str = sdt.SIGNED
    ce_epsilon: float = 1e-7
    # 0 keeps lambda constant; otherwise ramp linearly from 0 over this many epochs
    lambda_ramp_epochs: int = 0

    def validate(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.boundary_mode not in sdt.BOUNDARY_MODES:
            raise ValueError(f"boundary_mode must be one of {sdt.BOUNDARY_MODES}")
        if not 0 < self.ce_epsilon < 0.5:
            raise ValueError("ce_epsilon must lie in (0, 0.5)")
        if self.lambda_ramp_epochs < 0:
            raise ValueError("lambda_ramp_epochs must be nonnegative")
        return self

    def weight_at(self, epoch):
        """Boundary weight for a 0-based epoch index."""
        if self.lambda_ramp_epochs <= 0:
            return self.lam
        return self.lam * min(1.0, (epoch + 1) / self.lambda_ramp_epochs)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr_max: float = 1.5e-4
    lr_min: float = 0.0
    weight_decay: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    checkpoint_dir: str | None = None
    # zero the wall-clock column so history files are byte-reproducible
    deterministic: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_max >= self.lr_min >= 0:
            raise ValueError("need lr_max >= lr_min >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        return self


# ----------------------------------------------------------------------- losses


def ce_loss(pred, gt, eps=1e-7):
    """Mean binary cross-entropy with the prediction clamped to [eps, 1 - eps]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and mask {gt.shape} differ in shape")
    p = np.clip(pred, eps, 1.0 - eps)
    return float(-np.mean(gt * np.log(p) + (1.0 - gt) * np.log(1.0 - p)))


def total_loss(pred, gt, sdm, loss_config, lam=None):
    lam = loss_config.lam if lam is None else lam
    ce = ce_loss(pred, gt, loss_config.ce_epsilon)
    if lam == 0:
        return ce
    return ce + lam * sdt.boundary_loss(pred, sdm, loss_config.boundary_mode)


def loss_terms(pred, gt, sdm, loss_config, lam=None):
    lam = loss_config.lam if lam is None else lam
    ce = ce_loss(pred, gt, loss_config.ce_epsilon)
    bd = sdt.boundary_loss(pred, sdm, loss_config.boundary_mode) if lam != 0 else 0.0
    return {"ce": ce, "boundary": bd, "total": ce + lam * bd if lam != 0 else ce}


def dloss_dlogits(probs, gt, sdm, loss_config, lam=None):
    """d total_loss / d logits for ``probs = sigmoid(logits)``."""
    lam = loss_config.lam if lam is None else lam
    eps = loss_config.ce_epsilon
    n = probs.size
    inside = (probs > eps) & (probs < 1.0 - eps)
    grad = np.where(inside, (probs - gt) / n, 0.0)
    if lam != 0:
        dpred = sdt.boundary_loss_grad(probs, sdm, loss_config.boundary_mode)
        grad = grad + lam * dpred * probs * (1.0 - probs)
    return grad


def compute_gradients(images, gts, sdms, params, vit_config, loss_config, lam=None):
    """Forward + reverse pass on a batch; returns ``(loss_terms, grads, probs)``."""
    gts = np.asarray(gts, dtype=np.float64)
    if gts.ndim == 2:
        gts = gts[None]
    if sdms is not None:
        sdms = np.asarray(sdms, dtype=np.float64).reshape(gts.shape)
    probs, cache = vit.forward(images, params, vit_config, keep_cache=True)
    terms = loss_terms(probs, gts, sdms, loss_config, lam)
    if not math.isfinite(terms["total"]):
        raise DivergenceError(f"non-finite loss {terms['total']}")
    grads = vit.backward(dloss_dlogits(probs, gts, sdms, loss_config, lam), cache, params, vit_config)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    return terms, grads, probs


# -------------------------------------------------------------------- optimizer


def cosine_lr(t, total_steps, lr_max, lr_min=0.0):
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


def adam_init(params):
    return {"step": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, state, lr, config):
    """One decoupled-weight-decay Adam update, in place.

    ``param <- param * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``

    ``lr`` is supplied by the caller (``cosine_lr`` of the 0-based step).
    """
    t = state["step"] + 1
    b1, b2, eps, wd = config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state["m"][name] + (1.0 - b1) * g
        v = b2 * state["v"][name] + (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new = p * (1.0 - lr * wd) - step
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"non-finite update in {name}")
        state["m"][name] = m
        state["v"][name] = v
        updated[name] = new
    params.update(updated)
    state["step"] = t
    return params, state


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")


def write_history(path, history):
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.train_loss!r},{rec.val_loss!r},{rec.lr!r},{rec.seconds!r}\n")


def read_history(path):
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            e, tl, vl, lr, sec = line.strip().split(",")
            rows.append(EpochRecord(int(e), float(tl), float(vl), float(lr), float(sec)))
    return rows


@dataclass
class FitResult:
    params: dict
    optimizer: dict
    history: list
    best_val: float
    best_epoch: int
    status: str = "ok"


def config_meta(vit_config, train_config, loss_config, aug_config):
    """Flat ``section.key -> value`` snapshot used in checkpoint headers and manifests."""
    meta = {}
    for prefix, cfg in (("vit", vit_config), ("train", train_config),
                        ("loss", loss_config), ("aug", aug_config)):
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            # output location is not part of the experiment identity
            if value is None or f.name == "checkpoint_dir":
                continue
            meta[f"{prefix}.{f.name}"] = value
    return meta


def _sample_seed(seed, epoch, index):
    return [int(seed), int(epoch), int(index)]


def _safe_sdm(mask):
    try:
        return sdt.signed_distance_map(mask)
    except sdt.DegenerateMaskError:
        log.warning("augmented mask lost a class; boundary term zeroed for this sample")
        return np.zeros(mask.shape)


def evaluate_loss(samples, params, vit_config, loss_config, aug_config, sdms, lam, batch_size):
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([imgproc.preprocess(im, aug_config) for im, _ in chunk])
        masks = np.stack([m for _, m in chunk]).astype(np.float64)
        probs = vit.forward(images, params, vit_config)
        if probs.ndim == 2:
            probs = probs[None]
        sd = np.stack(sdms[start:start + batch_size])
        total += total_loss(probs, masks, sd, loss_config, lam) * len(chunk)
    return total / len(samples)


def predict(images, params, vit_config, aug_config, batch_size=8):
    """Soft masks for raw [0, 1] images (CLAHE + normalization applied here)."""
    out = []
    for start in range(0, len(images), batch_size):
        batch = np.stack([imgproc.preprocess(im, aug_config) for im in images[start:start + batch_size]])
        probs = vit.forward(batch, params, vit_config)
        out.extend(probs if probs.ndim == 3 else [probs])
    return out


def fit(train, val, vit_config, train_config, loss_config, aug_config, resume=None, on_epoch=None):
    """Train on ``train`` (list of (image, mask)), select on ``val`` loss.

    Per epoch: seeded shuffle, then per mini-batch augment each sample,
    forward, CE, signed distance map of the augmented mask, boundary term,
    gradients and an Adam step.  Validation loss after each epoch; a new
    minimum writes ``best.ckpt``.  ``last.ckpt`` is written every epoch and
    can be passed back as ``resume``.

    Randomness is a pure function of (seed, epoch, sample index), so resuming
    from an epoch-boundary checkpoint reproduces an uninterrupted run.
    """
    vit_config.validate()
    train_config.validate()
    loss_config.validate()
    aug_config.validate()
    if not train or not val:
        raise ValueError("train and validation sets must be non-empty")

    if aug_config.norm_mean is None or aug_config.norm_std is None:
        mean, std = imgproc.dataset_stats([im for im, _ in train], aug_config)
        aug_config.norm_mean = mean if aug_config.norm_mean is None else aug_config.norm_mean
        aug_config.norm_std = std if aug_config.norm_std is None else aug_config.norm_std

    raw_sdms = [sdt.signed_distance_map(m) for _, m in train]
    val_sdms = [sdt.signed_distance_map(m) for _, m in val]

    n = len(train)
    bs = train_config.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = train_config.epochs * steps_per_epoch

    ckpt_dir = Path(train_config.checkpoint_dir) if train_config.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history = []
    best_val, best_epoch = math.inf, -1
    if resume is not None:
        params, meta, opt = checkpoint.load(resume)
        vit.check_params(params, vit_config)
        if opt is None:
            raise checkpoint.CheckpointError(f"{resume}: no optimizer state to resume from")
        start_epoch = int(meta["state.epoch"]) + 1
        best_val = float(meta["state.best_val"])
        best_epoch = int(meta["state.best_epoch"])
        history_path = ckpt_dir / "history.csv" if ckpt_dir else None
        if history_path is not None and history_path.exists():
            history = read_history(history_path)[:start_epoch]
    else:
        params = vit.init_params(vit_config, train_config.seed)
        opt = adam_init(params)
        start_epoch = 0

    def save_ckpt(path, epoch):
        meta = config_meta(vit_config, train_config, loss_config, aug_config)
        meta.update({"state.epoch": epoch, "state.best_val": float(best_val), "state.best_epoch": best_epoch})
        checkpoint.save(path, params, meta, opt)

    for epoch in range(start_epoch, train_config.epochs):
        t0 = time.perf_counter()
        lam = loss_config.weight_at(epoch)
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        running = 0.0
        lr = train_config.lr_max
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            images, masks, sdms = [], [], []
            for i in idx:
                image, mask = train[i]
                if train_config.augment:
                    aug_img, aug_mask = imgproc.apply_augmentations(
                        image, mask, aug_config, _sample_seed(train_config.seed, epoch, i))
                else:
                    aug_img, aug_mask = imgproc.preprocess(image, aug_config), np.asarray(mask, dtype=np.uint8)
                if np.array_equal(aug_mask, mask):
                    sd = raw_sdms[i]
                else:
                    sd = _safe_sdm(aug_mask) if lam != 0 else np.zeros(aug_mask.shape)
                images.append(aug_img)
                masks.append(aug_mask)
                sdms.append(sd)
            terms, grads, _ = compute_gradients(np.stack(images), np.stack(masks), np.stack(sdms),
                                                params, vit_config, loss_config, lam)
            lr = cosine_lr(opt["step"], total_steps, train_config.lr_max, train_config.lr_min)
            adam_step(params, grads, opt, lr, train_config)
            running += terms["total"] * len(idx)

        train_loss = running / n
        val_loss = evaluate_loss(val, params, vit_config, loss_config, aug_config, val_sdms, lam, bs)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        seconds = 0.0 if train_config.deterministic else time.perf_counter() - t0
        rec = EpochRecord(epoch, train_loss, val_loss, lr, seconds)
        history.append(rec)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            if ckpt_dir is not None:
                save_ckpt(ckpt_dir / "best.ckpt", epoch)
        if ckpt_dir is not None:
            save_ckpt(ckpt_dir / "last.ckpt", epoch)
            write_history(ckpt_dir / "history.csv", history)
        log.info("epoch %d train %.6f val %.6f lr %.3g", epoch, train_loss, val_loss, lr)
        if on_epoch is not None:
            on_epoch(rec, params)

    return FitResult(params, opt, history, best_val, best_epoch)
