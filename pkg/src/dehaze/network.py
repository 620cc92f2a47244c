"""U-shaped dehazing network built from dual-path aggregation blocks.

Each block runs windowed self-attention (short-range) and a four-direction
selective scan (long-range) over the same pre-normalized features, then blends
the two with per-pixel weights produced once per stage from the frozen
encoder's density and semantic maps. Three encoder stages, a symmetric
decoder with concatenation skips, a zero-initialized output head, and a
global residual make the untrained network exactly the identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, WindowConfig, window_attention
from .guidance import (AggregationWeights, SemanticParams, WeightParams, aggregate,
                       aggregation_weights, density_from_outputs, named_tensors,
                       refined_semantic_map)
from .checkpoint import FormatError, load_checkpoint, save_checkpoint
from .encoder import EncoderOutputs
from .errors import ConfigError
from .s6 import ScanPathParams, scan_path
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (2, 2, 2)
    window_size: int = 8
    state_dim: int = 8
    patch: int = 8
    d_s: int = 64
    prompt_len: int = 8
    fusion: str = "guided"  # "guided" = learned per-pixel weights, "add" = plain sum
    normalized_weights: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if not self.widths or len(self.widths) != len(self.blocks):
            raise ConfigError(f"widths {self.widths} and blocks {self.blocks} must be "
                              "non-empty and equal length")
        if min(self.widths) < 1 or min(self.blocks) < 1:
            raise ConfigError("widths and block counts must be positive")
        if self.fusion not in ("guided", "add"):
            raise ConfigError(f"fusion must be 'guided' or 'add', got {self.fusion!r}")
        for name in ("window_size", "state_dim", "patch", "d_s", "prompt_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def stages(self) -> int:
        return len(self.widths)

    @property
    def pad_multiple(self) -> int:
        return self.window_size * 2 ** (self.stages - 1)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown model config fields: {sorted(extra)}")
        return cls(**raw)


def pad_to_multiple(images, multiple: int):
    """Zero-pad (B, H, W, C) on the bottom/right; returns (tensor, (h, w))."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, np.float32))
    if x.ndim != 4:
        raise ShapeError(f"expected (B, H, W, C), got {x.shape}")
    h, w = x.shape[1], x.shape[2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = T.pad2d(x, (0, ph), (0, pw))
    return x, (h, w)


# -- dual-path block ---------------------------------------------------------------


@dataclass
class BlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    attn: AttentionParams
    mamba: ScanPathParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, state_dim: int) -> "BlockParams":
        def ones(n):
            return Tensor(np.ones(n, np.float32), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n, np.float32), requires_grad=True)

        def w(n_in, n_out):
            return Tensor((rng.normal(size=(n_in, n_out)) / np.sqrt(n_in)).astype(np.float32),
                          requires_grad=True)

        return cls(norm1_gamma=ones(channels), norm1_beta=zeros(channels),
                   attn=AttentionParams.init(rng, channels, channels),
                   mamba=ScanPathParams.init(rng, channels, state_dim),
                   norm2_gamma=ones(channels), norm2_beta=zeros(channels),
                   ffn_w1=w(channels, 2 * channels), ffn_b1=zeros(2 * channels),
                   ffn_w2=w(2 * channels, channels), ffn_b2=zeros(channels))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.norm1.gamma": self.norm1_gamma,
               f"{prefix}.norm1.beta": self.norm1_beta,
               f"{prefix}.norm2.gamma": self.norm2_gamma,
               f"{prefix}.norm2.beta": self.norm2_beta,
               f"{prefix}.ffn.w1": self.ffn_w1, f"{prefix}.ffn.b1": self.ffn_b1,
               f"{prefix}.ffn.w2": self.ffn_w2, f"{prefix}.ffn.b2": self.ffn_b2}
        out.update(named_tensors(self.attn, f"{prefix}.attn"))
        out.update(named_tensors(self.mamba, f"{prefix}.mamba"))
        out.update(named_tensors(self.mamba.s6, f"{prefix}.mamba.s6"))
        return out


def dual_path_block(x: Tensor, p: BlockParams, w: AggregationWeights | None,
                    cfg: ModelConfig) -> Tensor:
    """Residual dual-path update: aggregation of both paths, then feed-forward."""
    if cfg.fusion == "guided" and w is None:
        raise ConfigError("guided fusion needs aggregation weights")
    normed = T.layer_norm(x, p.norm1_gamma, p.norm1_beta)
    f_short = window_attention(normed, WindowConfig(cfg.window_size, x.shape[3]), p.attn)
    f_long = scan_path(normed, p.mamba)
    mixed = aggregate(f_short, f_long, w) if cfg.fusion == "guided" else T.add(f_short, f_long)
    y = T.add(x, mixed)
    normed2 = T.layer_norm(y, p.norm2_gamma, p.norm2_beta)
    ffn = T.linear(T.silu(T.linear(normed2, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2)
    return T.add(y, ffn)


# -- full network -------------------------------------------------------------------------


def _conv_w(rng, kh, kw, ci, co):
    fan_in = kh * kw * ci
    return Tensor((rng.normal(size=(kh, kw, ci, co)) / np.sqrt(fan_in)).astype(np.float32),
                  requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


class DehazeNet:
    """Encoder-decoder restorer; ``forward`` maps hazy [0,1] images to dehazed."""

    def __init__(self, cfg: ModelConfig | None = None, rng: np.random.Generator | None = None,
                 d_image: int = 64):
        self.cfg = cfg or ModelConfig()
        self.d_image = d_image  # channel width of the frozen encoder's patch grid
        rng = rng or np.random.default_rng(0)
        c = self.cfg
        widths = c.widths

        self.stem_w = _conv_w(rng, 3, 3, 3, widths[0])
        self.stem_b = _zeros(widths[0])
        self.enc_blocks = [[BlockParams.init(rng, widths[s], c.state_dim)
                            for _ in range(c.blocks[s])] for s in range(c.stages)]
        self.down_w = [_conv_w(rng, 3, 3, widths[s], widths[s + 1])
                       for s in range(c.stages - 1)]
        self.down_b = [_zeros(widths[s + 1]) for s in range(c.stages - 1)]
        # transposed kernels are (kh, kw, out, in)
        self.up_w = [_conv_w(rng, 3, 3, widths[s], widths[s + 1])
                     for s in range(c.stages - 1)]
        self.up_b = [_zeros(widths[s]) for s in range(c.stages - 1)]
        self.skip_w = [Tensor((rng.normal(size=(2 * widths[s], widths[s]))
                               / np.sqrt(2 * widths[s])).astype(np.float32),
                              requires_grad=True) for s in range(c.stages - 1)]
        self.skip_b = [_zeros(widths[s]) for s in range(c.stages - 1)]
        self.dec_blocks = [[BlockParams.init(rng, widths[s], c.state_dim)
                            for _ in range(c.blocks[s])] for s in range(c.stages - 1)]
        self.out_w = Tensor(np.zeros((3, 3, widths[0], 3), np.float32), requires_grad=True)
        self.out_b = _zeros(3)

        self.guide_sem: dict[str, SemanticParams] = {}
        self.guide_head: dict[str, WeightParams] = {}
        if c.fusion == "guided":
            for key, width in self._stage_keys():
                self.guide_sem[key] = SemanticParams.init(rng, d_image, width, c.d_s)
                self.guide_head[key] = WeightParams.init(c.d_s)

    def _stage_keys(self):
        widths = self.cfg.widths
        keys = [(f"enc{s}", widths[s]) for s in range(self.cfg.stages)]
        keys += [(f"dec{s}", widths[s]) for s in reversed(range(self.cfg.stages - 1))]
        return keys

    def named_params(self) -> dict[str, Tensor]:
        out = {"stem.w": self.stem_w, "stem.b": self.stem_b,
               "out.w": self.out_w, "out.b": self.out_b}
        for s, blocks in enumerate(self.enc_blocks):
            for b, bp in enumerate(blocks):
                out.update(bp.named(f"enc.{s}.{b}"))
        for s in range(self.cfg.stages - 1):
            out[f"down.{s}.w"] = self.down_w[s]
            out[f"down.{s}.b"] = self.down_b[s]
            out[f"up.{s}.w"] = self.up_w[s]
            out[f"up.{s}.b"] = self.up_b[s]
            out[f"skip.{s}.w"] = self.skip_w[s]
            out[f"skip.{s}.b"] = self.skip_b[s]
        for s, blocks in enumerate(self.dec_blocks):
            for b, bp in enumerate(blocks):
                out.update(bp.named(f"dec.{s}.{b}"))
        for key in self.guide_sem:
            out.update(named_tensors(self.guide_sem[key], f"guide.{key}.sem"))
            out.update(named_tensors(self.guide_head[key], f"guide.{key}.head"))
        return out

    # -- forward ------------------------------------------------------------------

    def _stage_weights(self, x: Tensor, key: str, m_d: Tensor,
                       f_image: Tensor) -> AggregationWeights | None:
        if self.cfg.fusion != "guided":
            return None
        m_s = refined_semantic_map(f_image, x, self.guide_sem[key])
        return aggregation_weights(m_d, m_s, self.guide_head[key], x.shape[1], x.shape[2],
                                   self.cfg.normalized_weights)

    def _run_stage(self, x: Tensor, key: str, blocks: list[BlockParams], ctx) -> Tensor:
        w = self._stage_weights(x, key, *ctx) if ctx is not None else None
        for bp in blocks:
            x = dual_path_block(x, bp, w, self.cfg)
        return x

    def forward(self, images, guidance: EncoderOutputs | None = None,
                train: bool = False) -> Tensor:
        """Restore (B, H, W, 3) images; clamps to [0,1] unless training."""
        cfg = self.cfg
        x, (h, w) = pad_to_multiple(images, cfg.pad_multiple)
        inp = x

        ctx = None
        if cfg.fusion == "guided":
            if guidance is None:
                raise ConfigError("guided fusion needs encoder outputs (or fusion='add')")
            grid = np.asarray(guidance.image_embed, np.float32)
            want = (x.shape[0], x.shape[1] // cfg.patch, x.shape[2] // cfg.patch,
                    self.d_image)
            if grid.shape != want:
                raise ConfigError(f"encoder grid {grid.shape} does not match padded "
                                  f"input; expected {want} (encode the padded image)")
            m_d = Tensor(density_from_outputs(guidance))
            ctx = (m_d, Tensor(grid))

        x = T.conv2d(x, self.stem_w, self.stem_b, stride=1)
        skips = []
        for s in range(cfg.stages):
            x = self._run_stage(x, f"enc{s}", self.enc_blocks[s], ctx)
            if s < cfg.stages - 1:
                skips.append(x)
                x = T.conv2d(x, self.down_w[s], self.down_b[s], stride=2)
        for s in reversed(range(cfg.stages - 1)):
            x = T.conv2d_transpose(x, self.up_w[s], self.up_b[s], stride=2)
            x = T.linear(T.concat([x, skips[s]], axis=-1), self.skip_w[s], self.skip_b[s])
            x = self._run_stage(x, f"dec{s}", self.dec_blocks[s], ctx)
        residual = T.conv2d(x, self.out_w, self.out_b, stride=1)

        out = T.add(inp, residual)
        if out.shape[1] != h or out.shape[2] != w:
            out = T.narrow(T.narrow(out, 1, 0, h), 2, 0, w)
        if not train:
            out = Tensor(np.clip(out.data, 0.0, 1.0))
        return out

    def stem_features(self, images) -> Tensor:
        """Features after the input convolution; hook for attention diagnostics."""
        x, _ = pad_to_multiple(images, self.cfg.pad_multiple)
        return T.conv2d(x, self.stem_w, self.stem_b, stride=1)

    # -- persistence ---------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.data for k, v in self.named_params().items()})

    def load_state(self, path) -> None:
        bundle = load_checkpoint(path)
        params = self.named_params()
        missing = sorted(set(params) - set(bundle))
        extra = sorted(set(bundle) - set(params))
        if missing or extra:
            raise FormatError(f"{path}: checkpoint mismatch "
                              f"(missing {missing[:4]}, extra {extra[:4]})")
        for name, t in params.items():
            if bundle[name].shape != t.data.shape:
                raise FormatError(f"{path}: {name} has shape {bundle[name].shape}, "
                                  f"model wants {t.data.shape}")
            t.data = bundle[name].astype(np.float32)

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None, d_image: int = 64) -> "DehazeNet":
        net = cls(cfg, d_image=d_image)
        net.load_state(path)
        return net
