"""Prompt-guided aggregation: haze-density and semantic maps to per-pixel weights.

A pair of learnable prompts (haze / clear) is trained in two stages against a
frozen encoder: first a plain binary cross-entropy on pooled image embeddings,
then a joint objective that also regresses the patch-wise haze-probability map
onto the known synthetic density. The resulting density map, together with a
semantic map produced by bidirectional cross-attention between encoder features
and network features, drives a tiny projection that emits per-pixel convex
weights for blending the two restoration paths.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import LOGIT_SCALE, TinyEncoder, l2_normalize, pool, tokenize
from .errors import ConfigError, NumericError
from .optim import Adam
from .tensor import ShapeError, Tensor, no_grad


# -- learnable prompts ------------------------------------------------------------------


@dataclass
class PromptPair:
    """Learnable haze/clear prompt token rows in the text-encoder input space."""

    t_haze: Tensor   # (k, d_t)
    t_clear: Tensor  # (k, d_t)

    @classmethod
    def init(cls, enc: TinyEncoder, k: int = 8, seed: int = 0,
             noise: float = 0.02) -> "PromptPair":
        """Start each prompt as k jittered copies of the matching word's row."""
        if k < 1:
            raise ConfigError(f"prompt length must be >= 1, got {k}")
        rng = np.random.default_rng(seed)
        table = enc.params["text.table"].data

        def rows(word: str) -> Tensor:
            base = table[tokenize(word)[0]]
            jitter = rng.normal(scale=noise, size=(k, enc.d_t)).astype(np.float32)
            return Tensor(base[None] + jitter, requires_grad=True)

        return cls(t_haze=rows("hazy"), t_clear=rows("clear"))

    def named(self) -> dict[str, Tensor]:
        return {"prompt.haze": self.t_haze, "prompt.clear": self.t_clear}

    def copy(self) -> "PromptPair":
        """Independent trainable clone; the trainers work on one of these."""
        return PromptPair(t_haze=Tensor(self.t_haze.data.copy(), requires_grad=True),
                          t_clear=Tensor(self.t_clear.data.copy(), requires_grad=True))

    def embeds(self, enc: TinyEncoder) -> Tensor:
        """(2, d_c) unit rows: haze first, clear second; differentiable."""
        d_c = enc.d_c
        return T.concat([T.reshape(enc.encode_text(self.t_haze), (1, d_c)),
                         T.reshape(enc.encode_text(self.t_clear), (1, d_c))], axis=0)

    def freeze(self) -> None:
        self.t_haze.requires_grad = False
        self.t_clear.requires_grad = False

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.data for k, v in self.named().items()})

    @classmethod
    def load(cls, path) -> "PromptPair":
        # trainable like init(), so a loaded pair can warm-start either stage
        bundle = load_checkpoint(path)
        return cls(t_haze=Tensor(bundle["prompt.haze"], requires_grad=True),
                   t_clear=Tensor(bundle["prompt.clear"], requires_grad=True))


# -- density map and prompt objectives ---------------------------------------------------


def _text_matrix(enc: TinyEncoder, prompts: PromptPair | None) -> Tensor:
    if prompts is None:
        return Tensor(enc.caption_matrix())
    return prompts.embeds(enc)


def patch_similarity_logits(grid: Tensor, text: Tensor, scale: float) -> Tensor:
    """Per-patch 2-way logits: scale * cosine(grid vector, text rows)."""
    normed = l2_normalize(grid)
    return T.mul(T.matmul(normed, T.transpose(text, (1, 0))), scale)


def density_map(enc: TinyEncoder, images, prompts: PromptPair | None = None) -> Tensor:
    """(B, Hp, Wp) haze probabilities from patch-wise prompt similarity.

    The image tower runs detached (it is frozen); gradients flow only through
    the prompt embeddings, which is exactly the stage-2 training contract.
    """
    with no_grad():
        grid = enc.encode_image(np.asarray(images, np.float32)).data
    logits = patch_similarity_logits(Tensor(grid), _text_matrix(enc, prompts),
                                     LOGIT_SCALE)
    probs = T.softmax(logits, axis=-1)
    hp, wp = probs.shape[1], probs.shape[2]
    return T.reshape(T.narrow(probs, 3, 0, 1), (probs.shape[0], hp, wp))


def encoder_outputs(enc: TinyEncoder, images, prompts: PromptPair | None = None):
    """Frozen-encoder products for aggregation, using trained prompts if given."""
    from .encoder import EncoderOutputs
    with no_grad():
        grid = enc.encode_image(np.asarray(images, np.float32)).data
        text = enc.caption_matrix() if prompts is None else prompts.embeds(enc).data
    return EncoderOutputs(image_embed=grid, text_embed=text, logit_scale=LOGIT_SCALE)


def density_from_outputs(outputs) -> np.ndarray:
    """Density grid straight from exported embeddings (no toy encoder needed)."""
    grid = np.asarray(outputs.image_embed, np.float64)
    text = np.asarray(outputs.text_embed, np.float64)
    grid = grid / np.maximum(np.linalg.norm(grid, axis=-1, keepdims=True), 1e-12)
    text = text / np.maximum(np.linalg.norm(text, axis=-1, keepdims=True), 1e-12)
    logits = outputs.logit_scale * (grid @ text.T)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True))[..., 0].astype(np.float32)


def pair_logits(enc: TinyEncoder, pooled: Tensor,
                prompts: PromptPair | None = None) -> Tensor:
    """Scaled (haze, clear) similarity logits for pooled unit embeddings: (B, 2)."""
    text = _text_matrix(enc, prompts)
    return T.mul(T.matmul(pooled, T.transpose(text, (1, 0))), LOGIT_SCALE)


def clear_probability(enc: TinyEncoder, pooled: Tensor,
                      prompts: PromptPair | None = None) -> Tensor:
    """P(clear) per image from pooled unit embeddings: (B, d_c) -> (B,)."""
    logits = pair_logits(enc, pooled, prompts)
    return T.reshape(T.narrow(T.softmax(logits, axis=-1), 1, 1, 1), (logits.shape[0],))


def binary_ce(y_hat: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -(y log yhat + (1-y) log(1-yhat)); labels 1 = clear."""
    y = np.asarray(labels, y_hat.dtype)
    if y.shape != y_hat.shape:
        raise ShapeError(f"labels {y.shape} vs predictions {y_hat.shape}")
    picked = T.add(T.mul(T.log(y_hat), Tensor(y)),
                   T.mul(T.log(T.add(T.neg(y_hat), 1.0)), Tensor(1.0 - y)))
    return T.neg(T.mean_(picked))


def binary_ce_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """binary_ce of softmax(logits)[:, 1], evaluated stably from the logits.

    Same value and gradient, but safe where the float32 softmax complement
    rounds to exactly 0 or 1 (confident predictions would otherwise hit
    log(0)). Detaching the max shift keeps the gradient exactly softmax - y.
    """
    y = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"need (B, 2) logits with B labels, got {logits.shape} "
                         f"and {y.shape}")
    z = T.sub(logits, Tensor(logits.data.max(axis=1, keepdims=True)))
    lse = T.log(T.sum_(T.exp(z), axis=1))
    onehot = np.eye(2, dtype=logits.dtype)[y.astype(np.int64)]
    picked = T.sum_(T.mul(z, Tensor(onehot)), axis=1)
    return T.mean_(T.sub(lse, picked))


def area_downsample(density: np.ndarray, hp: int, wp: int) -> np.ndarray:
    """Block-average a (..., H, W) density map down to (..., hp, wp)."""
    d = np.asarray(density)
    h, w = d.shape[-2], d.shape[-1]
    if hp < 1 or wp < 1 or h % hp or w % wp:
        raise ConfigError(f"cannot area-average {h}x{w} density onto {hp}x{wp} grid")
    shaped = d.reshape(*d.shape[:-2], hp, h // hp, wp, w // wp)
    return shaped.mean(axis=(-3, -1))


# -- two-stage prompt training -------------------------------------------------------------


@dataclass
class PromptTrainConfig:
    alpha1: float = 1.0
    alpha2: float = 0.5
    stage1_steps: int = 200
    stage2_steps: int = 200
    lr: float = 5e-3
    seed: int = 0
    k: int = 8
    batch: int = 16
    holdout_fraction: float = 0.2
    regression: str = "mse"  # or "mae"

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self.alpha1}, {self.alpha2}")
        if self.regression not in ("mse", "mae"):
            raise ConfigError(f"regression must be 'mse' or 'mae', got {self.regression!r}")


def _pooled_constants(enc: TinyEncoder, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return pool(enc.encode_image(images)).data


def _check_finite(loss: float, stage: str, step: int, cfg: PromptTrainConfig) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"{stage} loss non-finite at step {step} "
                           f"(seed={cfg.seed}, lr={cfg.lr}, batch={cfg.batch})")


def _split(n: int, rng: np.random.Generator, holdout_fraction: float):
    order = rng.permutation(n)
    n_hold = int(round(n * holdout_fraction))
    return order[n_hold:], order[:n_hold]


def prompt_stage1(enc: TinyEncoder, images: np.ndarray, labels: np.ndarray,
                  cfg: PromptTrainConfig | None = None,
                  prompts: PromptPair | None = None) -> tuple[PromptPair, dict]:
    """Train prompts with binary cross-entropy on pooled embeddings (labels 1 = clear).

    A given ``prompts`` pair warm-starts training and is left untouched; the
    returned pair is always a separate object.
    """
    cfg = cfg or PromptTrainConfig()
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise ConfigError(f"{len(images)} images vs {len(labels)} labels")
    rng = np.random.default_rng(cfg.seed)
    prompts = prompts.copy() if prompts else PromptPair.init(enc, k=cfg.k, seed=cfg.seed)
    train, hold = _split(len(images), rng, cfg.holdout_fraction)

    pooled = _pooled_constants(enc, images)
    opt = Adam(prompts.named(), lr=cfg.lr, betas=(0.9, 0.99))
    last = float("nan")
    for step in range(cfg.stage1_steps):
        idx = rng.choice(train, size=min(cfg.batch, len(train)), replace=False)
        loss = binary_ce_logits(pair_logits(enc, Tensor(pooled[idx]), prompts),
                                labels[idx])
        last = loss.item()
        _check_finite(last, "stage-1", step, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()

    eval_idx = hold if len(hold) else train
    with no_grad():
        y = clear_probability(enc, Tensor(pooled[eval_idx]), prompts).data
    acc = float(((y > 0.5).astype(int) == labels[eval_idx]).mean())
    return prompts, {"final_loss": last, "holdout_accuracy": acc,
                     "holdout_size": int(len(eval_idx)), "steps": cfg.stage1_steps}


def density_mse(enc: TinyEncoder, prompts: PromptPair | None, hazy: np.ndarray,
                densities: np.ndarray) -> float:
    """Mean squared error of the density map against area-averaged ground truth."""
    with no_grad():
        m_d = density_map(enc, hazy, prompts).data
    target = area_downsample(densities, m_d.shape[1], m_d.shape[2])
    if target.shape != m_d.shape:
        raise ConfigError(f"density target {target.shape} vs map {m_d.shape}")
    return float(np.mean((m_d - target) ** 2))


def stage2_batch_loss(enc: TinyEncoder, prompts: PromptPair, hazy_grids: np.ndarray,
                      targets: np.ndarray, pooled: np.ndarray, labels: np.ndarray,
                      cfg: PromptTrainConfig) -> Tensor:
    """alpha1 * regression(M_d, target) on hazy grids + alpha2 * CE on all samples.

    With alpha1=0 and alpha2=1 this is exactly the stage-1 objective.
    """
    n, hp, wp = hazy_grids.shape[:3]
    text = prompts.embeds(enc)
    logits = patch_similarity_logits(Tensor(hazy_grids), text, LOGIT_SCALE)
    m_d = T.reshape(T.narrow(T.softmax(logits, axis=-1), 3, 0, 1), (n, hp, wp))
    err = T.sub(m_d, Tensor(np.asarray(targets, hazy_grids.dtype)))
    reg = T.mean_(T.mul(err, err)) if cfg.regression == "mse" else T.mean_(T.absolute(err))
    ce = binary_ce_logits(pair_logits(enc, Tensor(pooled), prompts), labels)
    return T.add(T.mul(reg, cfg.alpha1), T.mul(ce, cfg.alpha2))


def prompt_stage2(enc: TinyEncoder, hazy: np.ndarray, densities: np.ndarray,
                  clear: np.ndarray, prompts: PromptPair,
                  cfg: PromptTrainConfig | None = None) -> tuple[PromptPair, dict]:
    """Joint prompt refinement: density regression on hazy + cross-entropy on all.

    Per sample: hazy contributes alpha1 * regression(M_d, density) + alpha2 * CE,
    clear contributes alpha2 * CE only. The incoming pair is left untouched;
    refinement happens on a copy so it stays comparable against the result.
    """
    cfg = cfg or PromptTrainConfig()
    prompts = prompts.copy()
    hazy = np.asarray(hazy, np.float32)
    clear = np.asarray(clear, np.float32)
    densities = np.asarray(densities, np.float32)
    if len(hazy) != len(densities):
        raise ConfigError(f"{len(hazy)} hazy images vs {len(densities)} density maps")
    rng = np.random.default_rng(cfg.seed + 1)

    # frozen tower outputs are constants; precompute once
    with no_grad():
        hazy_grids = enc.encode_image(hazy).data
        pooled = np.concatenate([_pooled_constants(enc, hazy),
                                 _pooled_constants(enc, clear)])
    labels = np.concatenate([np.zeros(len(hazy), int), np.ones(len(clear), int)])
    hp, wp = hazy_grids.shape[1], hazy_grids.shape[2]
    targets = area_downsample(densities, hp, wp).astype(np.float32)
    if targets.shape != (len(hazy), hp, wp):
        raise ConfigError(f"density target {targets.shape} vs grid {(len(hazy), hp, wp)}")

    train_h, hold_h = _split(len(hazy), rng, cfg.holdout_fraction)
    opt = Adam(prompts.named(), lr=cfg.lr, betas=(0.9, 0.99))
    last = float("nan")
    half = max(1, cfg.batch // 2)
    for step in range(cfg.stage2_steps):
        idx_h = rng.choice(train_h, size=min(half, len(train_h)), replace=False)
        idx_c = rng.choice(len(clear), size=min(half, len(clear)), replace=False)
        both = np.concatenate([idx_h, len(hazy) + idx_c])
        loss = stage2_batch_loss(enc, prompts, hazy_grids[idx_h], targets[idx_h],
                                 pooled[both], labels[both], cfg)
        last = loss.item()
        _check_finite(last, "stage-2", step, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()

    eval_h = hold_h if len(hold_h) else train_h
    report = {"final_loss": last, "steps": cfg.stage2_steps,
              "holdout_density_mse": density_mse(enc, prompts, hazy[eval_h],
                                                 densities[eval_h])}
    return prompts, report


# -- refined semantic map (bidirectional cross-attention) -----------------------------------------


@dataclass
class SemanticParams:
    """Projections for the two cross-attention directions and the output head."""

    reduce_img_w: Tensor
    reduce_img_b: Tensor
    reduce_inp_w: Tensor
    reduce_inp_b: Tensor
    wq_img: Tensor
    wk_inp: Tensor
    wv_inp: Tensor
    wq_inp: Tensor
    wk_img: Tensor
    wv_img: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_image: int, d_input: int,
             d_s: int = 64) -> "SemanticParams":
        def p(n_in, n_out):
            return Tensor((rng.normal(size=(n_in, n_out)) / np.sqrt(n_in)).astype(np.float32),
                          requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

        return cls(reduce_img_w=p(d_image, d_s), reduce_img_b=zeros(d_s),
                   reduce_inp_w=p(d_input, d_s), reduce_inp_b=zeros(d_s),
                   wq_img=p(d_s, d_s), wk_inp=p(d_s, d_s), wv_inp=p(d_s, d_s),
                   wq_inp=p(d_s, d_s), wk_img=p(d_s, d_s), wv_img=p(d_s, d_s),
                   out_w=p(2 * d_s, d_s), out_b=zeros(d_s))

    @property
    def d_s(self) -> int:
        return self.out_w.shape[1]


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Mean-pool (B, H, W, C) onto an evenly dividing (out_h, out_w) grid."""
    b, h, w, c = x.shape
    if h == out_h and w == out_w:
        return x
    if out_h < 1 or out_w < 1 or h % out_h or w % out_w:
        raise ConfigError(f"adaptive pool needs evenly dividing grid: {h}x{w} -> {out_h}x{out_w}")
    blocks = T.reshape(x, (b, out_h, h // out_h, out_w, w // out_w, c))
    return T.mean_(blocks, axis=(2, 4))


def _attend_tokens(q: Tensor, k: Tensor, v: Tensor, capture=None) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    attn = T.softmax(T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), scale), axis=-1)
    if capture is not None:
        capture.append(attn.data.copy())
    return T.matmul(attn, v)


def refined_semantic_map(f_image: Tensor, f_input: Tensor, p: SemanticParams,
                         capture=None) -> Tensor:
    """Bidirectional cross-attention between encoder grid and network features.

    f_image: (B, Hp, Wp, d_image) frozen-encoder patch grid (the working grid).
    f_input: (B, H, W, d_input) stage-entry features; pooled onto the grid.
    Returns (B, Hp, Wp, d_s).
    """
    if f_image.ndim != 4 or f_input.ndim != 4:
        raise ShapeError(f"need (B,H,W,C) maps, got {f_image.shape} and {f_input.shape}")
    if f_image.shape[0] != f_input.shape[0]:
        raise ShapeError(f"batch mismatch: {f_image.shape[0]} vs {f_input.shape[0]}")
    b, hp, wp, _ = f_image.shape
    d_s = p.d_s

    img = T.linear(f_image, p.reduce_img_w, p.reduce_img_b)
    inp = T.linear(adaptive_avg_pool(f_input, hp, wp), p.reduce_inp_w, p.reduce_inp_b)
    img_tok = T.reshape(img, (b, hp * wp, d_s))
    inp_tok = T.reshape(inp, (b, hp * wp, d_s))

    to_image = _attend_tokens(T.matmul(img_tok, p.wq_img), T.matmul(inp_tok, p.wk_inp),
                              T.matmul(inp_tok, p.wv_inp), capture)
    to_input = _attend_tokens(T.matmul(inp_tok, p.wq_inp), T.matmul(img_tok, p.wk_img),
                              T.matmul(img_tok, p.wv_img), capture)
    merged = T.linear(T.concat([to_image, to_input], axis=-1), p.out_w, p.out_b)
    return T.reshape(merged, (b, hp, wp, d_s))


# -- per-pixel aggregation weights ---------------------------------------------------------------


@dataclass
class WeightParams:
    """Zero-initialized head: equal logits give an unbiased 0.5/0.5 start."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_s: int) -> "WeightParams":
        return cls(w=Tensor(np.zeros((1 + d_s, 2), np.float32), requires_grad=True),
                   b=Tensor(np.zeros(2, np.float32), requires_grad=True))


@dataclass
class AggregationWeights:
    w_short: Tensor  # (B, H, W)
    w_long: Tensor


def aggregation_weights(m_d: Tensor, m_s: Tensor, p: WeightParams, target_h: int,
                        target_w: int, normalized: bool = True) -> AggregationWeights:
    """Concat density+semantic maps, resize, project to two per-pixel weights."""
    if m_d.ndim != 3 or m_s.ndim != 4 or m_d.shape != m_s.shape[:3]:
        raise ShapeError(f"density {m_d.shape} vs semantic {m_s.shape}")
    stacked = T.concat([T.reshape(m_d, m_d.shape + (1,)), m_s], axis=-1)
    resized = T.bilinear_resize(stacked, target_h, target_w)
    logits = T.linear(resized, p.w, p.b)
    split_from = T.softmax(logits, axis=-1) if normalized else logits
    b = m_d.shape[0]
    return AggregationWeights(
        w_short=T.reshape(T.narrow(split_from, 3, 0, 1), (b, target_h, target_w)),
        w_long=T.reshape(T.narrow(split_from, 3, 1, 1), (b, target_h, target_w)))


def aggregate(f_short: Tensor, f_long: Tensor, w: AggregationWeights) -> Tensor:
    """Per-pixel scalar-weighted sum of the two paths, broadcast over channels."""
    if f_short.shape != f_long.shape:
        raise ShapeError(f"path shapes differ: {f_short.shape} vs {f_long.shape}")
    if w.w_short.shape != f_short.shape[:3]:
        raise ShapeError(f"weights {w.w_short.shape} vs features {f_short.shape}")
    ws = T.reshape(w.w_short, w.w_short.shape + (1,))
    wl = T.reshape(w.w_long, w.w_long.shape + (1,))
    return T.add(T.mul(f_short, ws), T.mul(f_long, wl))


def named_tensors(obj, prefix: str) -> dict[str, Tensor]:
    """Flatten a dataclass of Tensors into checkpoint-style names."""
    out: dict[str, Tensor] = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, Tensor):
            out[f"{prefix}.{f.name}"] = v
    return out
