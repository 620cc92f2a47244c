"""Pull patch-grid and prompt embeddings out of a pretrained CLIP-family model.

The exported image representation is the pre-pooling patch-token grid of the
vision tower's final block: ``last_hidden_state`` minus the class token, run
through the tower's closing layer norm (which the pooled path applies but the
raw hidden states do not), then the image->shared-space projection, then L2
normalization per patch.  Prompts go through the text tower and projection and
are L2-normalized the same way, so patch-vs-prompt cosine similarity is a dot
product.  The layer choice and model identity are recorded in a JSON sidecar
next to the output file, because the binary container rejects trailing
metadata bytes.

Everything runs on CPU in eval mode under ``no_grad``; for a fixed model
version the export is deterministic byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tmeb

IMAGE_SUFFIXES = {".bmp", ".jpeg", ".jpg", ".png", ".webp"}
LAYER_NOTE = ("vision_model final-block patch tokens (class token dropped) -> "
              "post_layernorm -> visual_projection -> L2 normalize")


class ConfigError(ValueError):
    """Bad arguments or inputs the caller can fix (exit code 2)."""


class ExportError(RuntimeError):
    """Model or image could not be loaded/processed (exit code 3)."""


@dataclass
class ExportJob:
    model_id: str
    images_dir: Path
    prompts_path: Path
    out_path: Path


def load_model(model_id: str):
    """Model + processor in eval mode; any load failure becomes ExportError."""
    from transformers import CLIPModel, CLIPProcessor
    try:
        model = CLIPModel.from_pretrained(model_id)
        try:
            processor = CLIPProcessor.from_pretrained(model_id)
        except Exception:
            processor = CLIPProcessor.from_pretrained(model_id, use_fast=False)
    except Exception as exc:
        raise ExportError(f"cannot load model {model_id!r}: {exc}") from exc
    return model.eval(), processor


def patch_grid(model, processor, image) -> np.ndarray:
    """(H_p, W_p, d_c) float32, rows unit-norm; the processor resizes and
    center-crops the image to the model's native resolution first."""
    import torch
    batch = processor(images=image, return_tensors="pt")
    with torch.no_grad():
        hidden = model.vision_model(pixel_values=batch["pixel_values"]).last_hidden_state
        tokens = model.vision_model.post_layernorm(hidden[:, 1:, :])
        proj = model.visual_projection(tokens)
        proj = proj / proj.norm(dim=-1, keepdim=True)
    side = model.config.vision_config.image_size // model.config.vision_config.patch_size
    return proj[0].reshape(side, side, -1).cpu().numpy().astype("<f4")


def text_embedding(model, processor, text: str) -> np.ndarray:
    """(d_c,) float32 unit-norm embedding of one prompt string."""
    import torch
    tokens = processor(text=[text], padding=True, truncation=True, return_tensors="pt")
    with torch.no_grad():
        out = model.get_text_features(input_ids=tokens["input_ids"],
                                      attention_mask=tokens.get("attention_mask"))
    feats = out if isinstance(out, torch.Tensor) else out.pooler_output
    feats = feats / feats.norm(dim=-1, keepdim=True)
    return feats[0].cpu().numpy().astype("<f4")


def list_images(images_dir: Path) -> list[Path]:
    if not images_dir.is_dir():
        raise ConfigError(f"image directory {images_dir} does not exist")
    paths = sorted(p for p in images_dir.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ConfigError(f"no images under {images_dir} "
                          f"(looked for {sorted(IMAGE_SUFFIXES)})")
    stems = [p.stem for p in paths]
    dupes = sorted({s for s in stems if stems.count(s) > 1})
    if dupes:
        raise ConfigError(f"duplicate image stems {dupes}; grid names must be unique")
    return paths


def load_image(path: Path):
    from PIL import Image
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except OSError as exc:
        raise ExportError(f"cannot read image {path}: {exc}") from exc


def load_prompts(path: Path) -> dict[str, str]:
    """JSON object mapping prompt name -> prompt text."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read prompts file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"prompts file {path} is not valid JSON: {exc}") from exc
    if (not isinstance(data, dict) or not data
            or not all(isinstance(k, str) and isinstance(v, str) for k, v in data.items())):
        raise ConfigError(f"prompts file {path} must be a non-empty JSON object "
                          "of name -> text")
    return data


def run_export(job: ExportJob) -> dict:
    """Embed every image and prompt, write the container + JSON sidecar."""
    paths = list_images(Path(job.images_dir))
    prompt_texts = load_prompts(Path(job.prompts_path))
    model, processor = load_model(job.model_id)
    d_c = int(model.config.projection_dim)
    patch = int(model.config.vision_config.patch_size)
    side = int(model.config.vision_config.image_size) // patch

    grids = {p.stem: patch_grid(model, processor, load_image(p)) for p in paths}
    prompts = {name: text_embedding(model, processor, text)
               for name, text in prompt_texts.items()}

    out = Path(job.out_path)
    tmeb.write_embeddings(out, d_c, patch, grids, prompts)
    import transformers
    sidecar = out.with_name(out.name + ".json")
    sidecar.write_text(json.dumps({
        "model": job.model_id,
        "layer": LAYER_NOTE,
        "d_c": d_c,
        "patch": patch,
        "image_size": int(model.config.vision_config.image_size),
        "grid": [side, side],
        "images": [p.name for p in paths],
        "prompts": prompt_texts,
        "transformers_version": transformers.__version__,
    }, indent=2, sort_keys=True) + "\n")
    return {"out": str(out), "sidecar": str(sidecar), "images": len(grids),
            "prompts": len(prompts), "d_c": d_c, "patch": patch, "grid": [side, side]}
