"""Dehazing objective and training loop.

The loss is plain L1 on pixels plus an L1 over frozen tiny-encoder feature
maps standing in for a perceptual term (no external pretrained weights at
this scale; swap in any callable with the same feature-list signature to use
a different backbone). Training runs Adam under a cosine schedule, logs a
CSV of ``step,lr,loss,psnr_val,ssim_val``, and can stop early once a target
validation PSNR is reached.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .guidance import PromptPair, encoder_outputs
from .encoder import TinyEncoder
from .errors import ConfigError, NumericError
from .metrics import psnr, ssim
from .network import DehazeNet, pad_to_multiple
from .optim import Adam, cosine_lr
from .tensor import Tensor, no_grad


@dataclass
class LossConfig:
    w1: float = 1.0                       # pixel L1 weight
    w2: float = 0.1                       # frozen-feature L1 weight
    feature_levels: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError(f"loss weights must be >= 0, got w1={self.w1} w2={self.w2}")
        if self.w2 > 0 and not self.feature_levels:
            raise ConfigError("w2 > 0 needs at least one feature level")


def dehaze_loss(pred: Tensor, target, cfg: LossConfig | None = None,
                encoder: TinyEncoder | None = None) -> Tensor:
    """w1 * mean|pred - target| + w2 * mean feature-map L1 (frozen encoder)."""
    cfg = cfg or LossConfig()
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, pred.dtype)
    if tgt.shape != pred.shape:
        raise ConfigError(f"prediction {pred.shape} vs target {tgt.shape}")
    loss = T.mul(T.mean_(T.absolute(T.sub(pred, Tensor(tgt)))), cfg.w1)
    if cfg.w2 == 0:
        return loss
    if encoder is None:
        raise ConfigError("feature loss (w2 > 0) needs the frozen encoder")
    pred_feats = encoder.tower_features(pred)
    with no_grad():
        tgt_feats = encoder.tower_features(tgt)
    terms = []
    for lvl in cfg.feature_levels:
        ref = Tensor(tgt_feats[lvl].data.astype(pred.dtype))
        terms.append(T.mean_(T.absolute(T.sub(pred_feats[lvl], ref))))
    feat = terms[0]
    for t in terms[1:]:
        feat = T.add(feat, t)
    return T.add(loss, T.mul(feat, cfg.w2 / len(cfg.feature_levels)))


@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 4
    lr_max: float = 2e-4
    lr_min: float = 2e-6
    cycles: int = 1
    seed: int = 0
    val_every: int = 50
    val_count: int = 4
    target_psnr: float | None = None
    log_path: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ConfigError(f"bad steps/batch: {self.steps}/{self.batch}")
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")


def _guidance_inputs(net: DehazeNet, images: np.ndarray, encoder, prompts):
    if net.cfg.fusion != "guided":
        return None
    if encoder is None:
        raise ConfigError("guided fusion needs the frozen encoder during training")
    padded, _ = pad_to_multiple(images, net.cfg.pad_multiple)
    return encoder_outputs(encoder, padded.data, prompts)


def restore(net: DehazeNet, images: np.ndarray, encoder=None,
            prompts: PromptPair | None = None, batch: int = 4) -> np.ndarray:
    """Run inference in small batches; returns clipped float32 images."""
    images = np.asarray(images, np.float32)
    outs = []
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        with no_grad():
            out = net.forward(chunk, _guidance_inputs(net, chunk, encoder, prompts))
        outs.append(out.data)
    return np.concatenate(outs) if outs else np.zeros_like(images)


def validate(net: DehazeNet, hazy: np.ndarray, clear: np.ndarray, encoder=None,
             prompts=None, batch: int = 4) -> tuple[float, float]:
    pred = restore(net, hazy, encoder, prompts, batch)
    scores = [(psnr(p, c), ssim(p, c)) for p, c in zip(pred, np.asarray(clear))]
    return (float(np.mean([s[0] for s in scores])),
            float(np.mean([s[1] for s in scores])))


def train_dehaze(net: DehazeNet, hazy: np.ndarray, clear: np.ndarray,
                 cfg: TrainConfig | None = None, loss_cfg: LossConfig | None = None,
                 encoder: TinyEncoder | None = None,
                 prompts: PromptPair | None = None) -> dict:
    """Optimize the network on aligned hazy/clear pairs; returns a report."""
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    hazy = np.asarray(hazy, np.float32)
    clear = np.asarray(clear, np.float32)
    if hazy.shape != clear.shape or hazy.ndim != 4:
        raise ConfigError(f"need matching (N,H,W,3) stacks, got {hazy.shape} "
                          f"vs {clear.shape}")
    if len(hazy) == 0:
        raise ConfigError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    n_val = min(cfg.val_count, len(hazy))
    val_idx = rng.permutation(len(hazy))[:n_val]

    opt = Adam(net.named_params(), lr=cfg.lr_max)
    rows = []
    last_val: tuple[float, float] | None = None
    best_psnr = -np.inf
    stopped_early = False
    last_loss = float("nan")

    for step in range(cfg.steps):
        opt.lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min, cfg.cycles)
        idx = rng.choice(len(hazy), size=min(cfg.batch, len(hazy)), replace=False)
        pred = net.forward(hazy[idx], _guidance_inputs(net, hazy[idx], encoder, prompts),
                           train=True)
        loss = dehaze_loss(pred, clear[idx], loss_cfg, encoder)
        last_loss = loss.item()
        if not np.isfinite(last_loss):
            raise NumericError(f"training loss non-finite at step {step} "
                               f"(seed={cfg.seed}, lr={opt.lr:.3g})")
        opt.zero_grad()
        loss.backward()
        opt.step()

        is_last = step == cfg.steps - 1
        if cfg.val_every and ((step + 1) % cfg.val_every == 0 or is_last):
            last_val = validate(net, hazy[val_idx], clear[val_idx], encoder, prompts,
                                cfg.batch)
            best_psnr = max(best_psnr, last_val[0])
        rows.append((step, opt.lr, last_loss,
                     "" if last_val is None else f"{last_val[0]:.4f}",
                     "" if last_val is None else f"{last_val[1]:.6f}"))
        if (cfg.target_psnr is not None and last_val is not None
                and last_val[0] >= cfg.target_psnr):
            stopped_early = True
            break

    if cfg.log_path:
        with open(cfg.log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "loss", "psnr_val", "ssim_val"])
            writer.writerows(rows)
    if cfg.checkpoint_path:
        net.save(cfg.checkpoint_path)

    if last_val is None:
        last_val = validate(net, hazy[val_idx], clear[val_idx], encoder, prompts,
                            cfg.batch) if cfg.steps else (float("nan"), float("nan"))
        best_psnr = max(best_psnr, last_val[0])
    return {"steps_run": len(rows), "final_loss": last_loss,
            "val_psnr": last_val[0], "val_ssim": last_val[1],
            "best_val_psnr": float(best_psnr), "stopped_early": stopped_early,
            "seed": cfg.seed}


def evaluate(net: DehazeNet, hazy: np.ndarray, clear: np.ndarray, encoder=None,
             prompts=None, batch: int = 4) -> dict:
    """Restoration quality report plus the no-op (hazy input) baseline."""
    from .metrics import entropy
    hazy = np.asarray(hazy, np.float32)
    clear = np.asarray(clear, np.float32)
    pred = restore(net, hazy, encoder, prompts, batch)
    per_image = [{"psnr": psnr(p, c), "ssim": ssim(p, c), "entropy": entropy(p)}
                 for p, c in zip(pred, clear)]
    baseline = [psnr(h, c) for h, c in zip(hazy, clear)]
    return {
        "count": len(per_image),
        "psnr": float(np.mean([r["psnr"] for r in per_image])),
        "ssim": float(np.mean([r["ssim"] for r in per_image])),
        "entropy": float(np.mean([r["entropy"] for r in per_image])),
        "psnr_hazy_baseline": float(np.mean(baseline)),
        "per_image": per_image,
    }
