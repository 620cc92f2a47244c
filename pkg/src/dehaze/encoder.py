"""Tiny frozen vision-language encoder plus an import path for real embeddings.

The image side is a three-stage stride-2 conv tower (patch 8), ending in a
1x1 projection to a d_c-channel grid -- an un-pooled patch embedding. The
text side is an embedding table over a small fixed vocabulary, mean-pooled
and projected to the same space. Both sides are trained jointly with a
symmetric contrastive loss on labeled hazy/clear images, then frozen; a
sha256 checksum over the parameters pins the frozen contract.

Real pretrained encoders enter through the "TMEB" embedding file: grids and
prompt vectors exported elsewhere are served by :class:`EmbeddingProvider`
behind the same (image_embed, text_embed, logit_scale) surface.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import FormatError, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .optim import Adam
from .tensor import Tensor, no_grad

VOCAB = ("<pad>", "<unk>", "a", "an", "photo", "image", "of", "hazy", "foggy",
         "dense", "thick", "clear", "clean", "crisp", "scene", "outdoor")
LOGIT_SCALE = 1.0 / 0.07

CAPTION_HAZY = "hazy photo"
CAPTION_CLEAR = "clear photo"

TMEB_MAGIC = b"TMEB"
TMEB_VERSION = 1


def tokenize(text: str) -> np.ndarray:
    """Whitespace split over the toy vocabulary; unknown words map to <unk>."""
    words = text.lower().split()
    if not words:
        raise ConfigError("cannot tokenize empty text")
    lookup = {w: i for i, w in enumerate(VOCAB)}
    return np.array([lookup.get(w, 1) for w in words], dtype=np.int64)


def l2_normalize(t: Tensor, axis: int = -1) -> Tensor:
    norm_sq = T.sum_(T.mul(t, t), axis=axis, keepdims=True)
    return T.mul(t, T.power(T.add(norm_sq, 1e-12), -0.5))


def pool(grid: Tensor) -> Tensor:
    """Global mean over grid positions, then L2-normalize: (B,Hp,Wp,d) -> (B,d)."""
    return l2_normalize(T.mean_(grid, axis=(1, 2)))


@dataclass
class EncoderOutputs:
    """Frozen-encoder products consumed by the aggregator."""

    image_embed: np.ndarray  # (B, Hp, Wp, d_c)
    text_embed: np.ndarray   # (2, d_c): haze row first, clear row second
    logit_scale: float


class TinyEncoder:
    """Desk-scale stand-in for a pretrained vision-language encoder."""

    def __init__(self, rng: np.random.Generator | None = None, d_c: int = 64,
                 patch: int = 8, d_t: int = 64, widths: tuple[int, int, int] = (16, 32, 64)):
        if patch != 8:
            raise ConfigError(f"tower is three stride-2 stages, so patch must be 8, got {patch}")
        rng = rng or np.random.default_rng(0)
        self.d_c = d_c
        self.patch = patch
        self.d_t = d_t
        self.widths = tuple(widths)

        def p(*shape, fan_in):
            return Tensor((rng.normal(size=shape) / np.sqrt(fan_in)).astype(np.float32),
                          requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

        w0, w1, w2 = self.widths
        self.params: dict[str, Tensor] = {
            "image.conv1.w": p(3, 3, 3, w0, fan_in=3 * 9),
            "image.conv1.b": zeros(w0),
            "image.conv2.w": p(3, 3, w0, w1, fan_in=w0 * 9),
            "image.conv2.b": zeros(w1),
            "image.conv3.w": p(3, 3, w1, w2, fan_in=w1 * 9),
            "image.conv3.b": zeros(w2),
            "image.proj.w": p(1, 1, w2, d_c, fan_in=w2),
            "image.proj.b": zeros(d_c),
            "text.table": p(len(VOCAB), d_t, fan_in=d_t),
            "text.proj.w": p(d_t, d_c, fan_in=d_t),
            "text.proj.b": zeros(d_c),
        }

    # -- image side -------------------------------------------------------------

    def tower_features(self, images) -> list[Tensor]:
        """Per-stage activations; the last entry is the d_c patch grid."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, np.float32))
        if x.ndim != 4 or x.shape[3] != 3:
            raise ConfigError(f"expected (B, H, W, 3) images, got {x.shape}")
        ph = (-x.shape[1]) % self.patch
        pw = (-x.shape[2]) % self.patch
        if ph or pw:
            x = T.pad2d(x, (0, ph), (0, pw))
        prm = self.params
        f1 = T.silu(T.conv2d(x, prm["image.conv1.w"], prm["image.conv1.b"], stride=2))
        f2 = T.silu(T.conv2d(f1, prm["image.conv2.w"], prm["image.conv2.b"], stride=2))
        f3 = T.silu(T.conv2d(f2, prm["image.conv3.w"], prm["image.conv3.b"], stride=2))
        grid = T.conv2d(f3, prm["image.proj.w"], prm["image.proj.b"], stride=1)
        return [f1, f2, f3, grid]

    def encode_image(self, images) -> Tensor:
        """(B, H, W, 3) -> (B, H/patch, W/patch, d_c) patch-embedding grid."""
        return self.tower_features(images)[-1]

    # -- text side --------------------------------------------------------------

    def encode_text(self, tokens) -> Tensor:
        """Token indices (L,) or embedding rows (k, d_t) -> unit vector (d_c,).

        Passing rows keeps them in the graph, which is how learned prompts
        receive gradients while the table and projection stay frozen.
        """
        if isinstance(tokens, Tensor):
            rows = tokens
            if rows.ndim != 2 or rows.shape[1] != self.d_t:
                raise ConfigError(f"prompt rows must be (k, {self.d_t}), got {rows.shape}")
        else:
            idx = np.asarray(tokens)
            if idx.size == 0:
                raise ConfigError("empty token sequence")
            rows = T.take_rows(self.params["text.table"], idx)
        pooled = T.mean_(rows, axis=0, keepdims=True)               # (1, d_t)
        projected = T.linear(pooled, self.params["text.proj.w"], self.params["text.proj.b"])
        return T.reshape(l2_normalize(projected), (self.d_c,))

    def caption_matrix(self) -> np.ndarray:
        """Frozen (2, d_c): embeddings of the built-in haze/clear captions."""
        with no_grad():
            rows = [self.encode_text(tokenize(CAPTION_HAZY)).data,
                    self.encode_text(tokenize(CAPTION_CLEAR)).data]
        return np.stack(rows)

    def outputs_for(self, images) -> EncoderOutputs:
        with no_grad():
            grid = self.encode_image(images).data
        return EncoderOutputs(image_embed=grid, text_embed=self.caption_matrix(),
                              logit_scale=LOGIT_SCALE)

    # -- freezing and persistence --------------------------------------------------

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].data, "<f4").tobytes())
        return digest.hexdigest()

    def save(self, path) -> None:
        bundle = {name: t.data for name, t in self.params.items()}
        bundle["meta.d_c"] = np.float32(self.d_c)
        bundle["meta.patch"] = np.float32(self.patch)
        bundle["meta.d_t"] = np.float32(self.d_t)
        bundle["meta.vocab"] = np.float32(len(VOCAB))
        bundle["meta.widths"] = np.asarray(self.widths, np.float32)
        save_checkpoint(path, bundle)

    @classmethod
    def load(cls, path) -> "TinyEncoder":
        bundle = load_checkpoint(path)
        try:
            if int(bundle["meta.vocab"]) != len(VOCAB):
                raise FormatError(f"{path}: built for vocabulary size {int(bundle['meta.vocab'])}, "
                                  f"this build has {len(VOCAB)}")
            enc = cls(d_c=int(bundle["meta.d_c"]), patch=int(bundle["meta.patch"]),
                      d_t=int(bundle["meta.d_t"]),
                      widths=tuple(int(v) for v in bundle["meta.widths"]))
            for name in enc.params:
                enc.params[name] = Tensor(bundle[name], requires_grad=False)
        except KeyError as exc:
            raise FormatError(f"{path}: missing encoder record {exc}") from exc
        return enc


# -- contrastive pretraining ------------------------------------------------------------


def _contrastive_loss(img_emb: Tensor, txt_emb: Tensor, labels: np.ndarray,
                      scale: float) -> Tensor:
    """Symmetric contrastive loss between image rows and the two caption rows.

    The text->image side targets a uniform distribution over that caption's
    positives, measured as a KL divergence (cross-entropy minus the target's
    entropy) so a perfect separator drives the whole loss to zero.
    """
    logits = T.mul(T.matmul(img_emb, T.transpose(txt_emb, (1, 0))), scale)  # (B, 2)
    onehot = np.eye(2, dtype=img_emb.dtype)[labels]
    logp = T.log(T.softmax(logits, axis=-1))
    i2t = T.neg(T.mean_(T.sum_(T.mul(logp, Tensor(onehot)), axis=1)))
    counts = onehot.sum(axis=0)
    target = (onehot / np.maximum(counts, 1.0)).T          # (2, B)
    logp_t = T.log(T.softmax(T.transpose(logits, (1, 0)), axis=-1))
    t2i = T.neg(T.mean_(T.sum_(T.mul(logp_t, Tensor(target)), axis=1)))
    target_entropy = float(np.log(np.maximum(counts, 1.0)).mean())
    return T.sub(T.mul(T.add(i2t, t2i), 0.5), 0.5 * target_entropy)


def retrieval_accuracy(enc: TinyEncoder, images: np.ndarray, labels: np.ndarray) -> float:
    with no_grad():
        emb = pool(enc.encode_image(images)).data
    pred = (emb @ enc.caption_matrix().T).argmax(axis=1)
    return float((pred == labels).mean())


def pretrain_tiny_encoder(images: np.ndarray, labels: np.ndarray, steps: int = 300,
                          seed: int = 0, batch: int = 16, lr: float = 3e-3,
                          holdout_fraction: float = 0.2,
                          d_c: int = 64, patch: int = 8) -> tuple[TinyEncoder, dict]:
    """Train the tiny encoder contrastively on labeled images, then freeze it.

    labels: 0 = hazy, 1 = clear. Returns the frozen encoder and a report with
    the held-out caption-retrieval accuracy.
    """
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels)
    if images.ndim != 4 or len(images) != len(labels):
        raise ConfigError(f"need (N, H, W, 3) images with N labels, got {images.shape}")
    rng = np.random.default_rng(seed)
    enc = TinyEncoder(rng=rng, d_c=d_c, patch=patch)

    order = rng.permutation(len(images))
    n_hold = int(round(len(images) * holdout_fraction))
    hold, train = order[:n_hold], order[n_hold:]
    train_hazy = train[labels[train] == 0]
    train_clear = train[labels[train] == 1]
    if steps > 0 and (len(train_hazy) == 0 or len(train_clear) == 0):
        raise ConfigError("training split needs both hazy and clear images")

    captions = [tokenize(CAPTION_HAZY), tokenize(CAPTION_CLEAR)]
    opt = Adam(enc.params, lr=lr, betas=(0.9, 0.99))
    last_loss = float("nan")
    for step in range(steps):
        half = max(1, batch // 2)
        idx = np.concatenate([rng.choice(train_hazy, size=half),
                              rng.choice(train_clear, size=half)])
        img_emb = pool(enc.encode_image(images[idx]))
        txt_emb = T.concat([T.reshape(enc.encode_text(c), (1, d_c)) for c in captions], axis=0)
        loss = _contrastive_loss(img_emb, txt_emb, labels[idx], LOGIT_SCALE)
        last_loss = loss.item()
        if not np.isfinite(last_loss):
            raise NumericError(f"contrastive loss non-finite at step {step} "
                               f"(seed={seed}, lr={lr}, batch={batch})")
        opt.zero_grad()
        loss.backward()
        opt.step()

    enc.freeze()
    eval_idx = hold if len(hold) else train
    report = {
        "steps": steps,
        "seed": seed,
        "final_loss": last_loss,
        "holdout_accuracy": retrieval_accuracy(enc, images[eval_idx], labels[eval_idx]),
        "holdout_size": int(len(eval_idx)),
        "checksum": enc.checksum(),
    }
    return enc, report


# -- embedding files (TMEB) ---------------------------------------------------------------


@dataclass
class EmbeddingFile:
    d_c: int
    patch: int
    grids: dict[str, np.ndarray]    # stem -> (Hp, Wp, d_c) float32
    prompts: dict[str, np.ndarray]  # name -> (d_c,) float32


def write_embedding_file(path, d_c: int, patch: int, grids: dict[str, np.ndarray],
                         prompts: dict[str, np.ndarray]) -> None:
    blobs = [TMEB_MAGIC, struct.pack("<IIII", TMEB_VERSION, d_c, patch, len(grids))]
    for stem, grid in grids.items():
        grid = np.asarray(grid, "<f4")
        if grid.ndim != 3 or grid.shape[2] != d_c:
            raise ConfigError(f"grid {stem!r} must be (Hp, Wp, {d_c}), got {grid.shape}")
        raw = stem.encode("utf-8")
        blobs += [struct.pack("<I", len(raw)), raw,
                  struct.pack("<II", grid.shape[0], grid.shape[1]), grid.tobytes()]
    blobs.append(struct.pack("<I", len(prompts)))
    for name, vec in prompts.items():
        vec = np.asarray(vec, "<f4")
        if vec.shape != (d_c,):
            raise ConfigError(f"prompt {name!r} must be ({d_c},), got {vec.shape}")
        raw = name.encode("utf-8")
        blobs += [struct.pack("<I", len(raw)), raw, vec.tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


class _Reader:
    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            self.buf = fh.read()
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated reading {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def name(self, what: str) -> str:
        n = self.u32(f"{what} length")
        at = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: {what} not UTF-8 at offset {at}") from exc


def read_embedding_file(path) -> EmbeddingFile:
    r = _Reader(path)
    if r.take(4, "magic") != TMEB_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0, expected {TMEB_MAGIC!r}")
    version = r.u32("version")
    if version != TMEB_VERSION:
        raise FormatError(f"{path}: version {version} at offset 4, expected {TMEB_VERSION}")
    d_c = r.u32("d_c")
    patch = r.u32("patch")
    count = r.u32("entry count")
    if d_c < 1 or d_c > 1 << 16 or patch < 1 or patch > 1 << 10:
        raise FormatError(f"{path}: implausible header d_c={d_c} patch={patch} at offset 8")

    grids: dict[str, np.ndarray] = {}
    for _ in range(count):
        stem = r.name("stem")
        hp = r.u32(f"H_p of {stem!r}")
        wp = r.u32(f"W_p of {stem!r}")
        at = r.pos
        if hp * wp * d_c > len(r.buf):
            raise FormatError(f"{path}: grid {stem!r} dims {hp}x{wp} overrun at offset {at}")
        raw = r.take(hp * wp * d_c * 4, f"grid of {stem!r}")
        if stem in grids:
            raise FormatError(f"{path}: duplicate stem {stem!r} at offset {at}")
        grids[stem] = np.frombuffer(raw, "<f4").reshape(hp, wp, d_c).copy()

    prompts: dict[str, np.ndarray] = {}
    for _ in range(r.u32("prompt count")):
        pname = r.name("prompt name")
        prompts[pname] = np.frombuffer(r.take(d_c * 4, f"prompt {pname!r}"), "<f4").copy()
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes at offset {r.pos}")
    return EmbeddingFile(d_c=d_c, patch=patch, grids=grids, prompts=prompts)


class EmbeddingProvider:
    """Serves exported grids/prompts behind the frozen-encoder surface."""

    def __init__(self, file: EmbeddingFile, haze_prompt: str = "hazy",
                 clear_prompt: str = "clear", logit_scale: float = LOGIT_SCALE):
        self.file = file
        self.logit_scale = logit_scale
        for need in (haze_prompt, clear_prompt):
            if need not in file.prompts:
                raise FormatError(f"embedding file lacks prompt {need!r}; "
                                  f"has {sorted(file.prompts)}")
        self.text_embed = np.stack([file.prompts[haze_prompt], file.prompts[clear_prompt]])

    def image_grid(self, stem: str) -> np.ndarray:
        if stem not in self.file.grids:
            raise KeyError(f"no embedding for stem {stem!r} "
                           f"({len(self.file.grids)} entries present)")
        return self.file.grids[stem]

    def outputs_for(self, stem: str) -> EncoderOutputs:
        return EncoderOutputs(image_embed=self.image_grid(stem)[None],
                              text_embed=self.text_embed, logit_scale=self.logit_scale)


def import_embeddings(path) -> EmbeddingProvider:
    return EmbeddingProvider(read_embedding_file(path))
