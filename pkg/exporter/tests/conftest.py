import json
import os

import numpy as np
import pytest
from PIL import Image

os.environ.setdefault("TRANSFORMERS_VERBOSITY", "error")
os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")

from transformers import (CLIPConfig, CLIPImageProcessor, CLIPModel,  # noqa: E402
                          CLIPProcessor, CLIPTokenizer)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A complete CLIP checkpoint small enough for tests: random weights, a
    char-level tokenizer, 32px images in 8px patches, 16-dim shared space."""
    d = tmp_path_factory.mktemp("tiny-clip")
    vocab: dict[str, int] = {}
    for token in ("<|startoftext|>", "<|endoftext|>"):
        vocab[token] = len(vocab)
    for ch in "abcdefghijklmnopqrstuvwxyz0123456789":
        vocab[ch] = len(vocab)
        vocab[ch + "</w>"] = len(vocab)
    (d / "vocab.json").write_text(json.dumps(vocab))
    (d / "merges.txt").write_text("#version: 0.2\n")
    tokenizer = CLIPTokenizer(str(d / "vocab.json"), str(d / "merges.txt"),
                              model_max_length=16)
    cfg = CLIPConfig(
        projection_dim=16,
        text_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                         num_attention_heads=2, max_position_embeddings=16,
                         vocab_size=len(vocab), projection_dim=16,
                         bos_token_id=0, eos_token_id=1, pad_token_id=1),
        vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                           num_attention_heads=2, image_size=32, patch_size=8,
                           projection_dim=16),
    )
    import torch
    torch.manual_seed(0)
    CLIPModel(cfg).eval().save_pretrained(d)
    image_processor = CLIPImageProcessor(size={"shortest_edge": 32},
                                         crop_size={"height": 32, "width": 32})
    CLIPProcessor(image_processor=image_processor, tokenizer=tokenizer).save_pretrained(d)
    return d


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(7)
    for stem, size in (("harbor", (32, 32)), ("plaza", (48, 40)), ("ridge", (64, 80))):
        arr = rng.uniform(0, 255, size + (3,)).astype("uint8")
        Image.fromarray(arr).save(d / f"{stem}.png")
    return d


@pytest.fixture(scope="session")
def prompts_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("prompts") / "prompts.json"
    path.write_text(json.dumps({"hazy": "hazy photo", "clear": "clear photo"}))
    return path
