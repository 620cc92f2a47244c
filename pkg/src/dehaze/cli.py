"""Command-line pipeline: synthesize haze, train the guidance stack, dehaze.

One JSON config file may hold a section per subcommand; command-line flags
override config keys one to one (flag ``--beta-min`` <-> key ``beta_min``).
Every subcommand writes its artifacts under ``--out`` plus a ``manifest.json``
naming them, never touches its inputs, and reruns byte-identically for the
same seed and inputs.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure,
5 artifact format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import hazesynth, imageio
from . import tensor as T
from .attention import attention_distance_profile, full_image_attention, profile_to_csv
from .guidance import PromptPair, PromptTrainConfig, density_map, prompt_stage1, prompt_stage2
from .checkpoint import FormatError
from .encoder import TinyEncoder, pretrain_tiny_encoder
from .errors import ConfigError, NumericError
from .network import DehazeNet, ModelConfig
from .tensor import ShapeError, Tensor, no_grad
from .training import LossConfig, TrainConfig, evaluate, restore, train_dehaze

DEFAULTS: dict[str, dict] = {
    "synth": dict(out=None, n=16, size=64, seed=0, beta_min=0.4, beta_max=2.0,
                  atmo_min=0.7, atmo_max=1.0, depth="mix", clear_dir=None),
    "pretrain-encoder": dict(data=None, out=None, steps=300, seed=0, batch=16,
                             lr=3e-3, holdout=0.2, d_c=64, patch=8),
    "train-prompts": dict(data=None, encoder=None, out=None, stage=1, steps=200,
                          seed=0, lr=5e-3, k=8, batch=16, alpha1=1.0, alpha2=0.5,
                          regression="mse", holdout=0.2, prompts=None),
    "train": dict(data=None, out=None, encoder=None, prompts=None, steps=500,
                  batch=4, lr_max=2e-4, lr_min=2e-6, cycles=1, seed=0,
                  val_every=50, val_count=4, target_psnr=None, w1=1.0, w2=0.1,
                  widths="16,32,64", blocks="2,2,2", window=8, state_dim=8,
                  patch=8, d_s=64, fusion="guided", normalized_weights=True),
    "infer": dict(checkpoint=None, model_json=None, input=None, out=None,
                  encoder=None, prompts=None),
    "eval": dict(checkpoint=None, model_json=None, data=None, out=None,
                 encoder=None, prompts=None, batch=4),
    "density": dict(encoder=None, prompts=None, image=None, out=None),
    "analyze-attention": dict(checkpoint=None, model_json=None, data=None, out=None,
                              encoder=None, limit=8, tokens=12),
    "pipeline": dict(out=None, seed=0, n_train=24, n_val=6, size=64,
                     beta_min=0.4, beta_max=2.0, depth="mix",
                     encoder_steps=240, encoder_d_c=64, prompt1_steps=150,
                     prompt2_steps=120, train_steps=300, batch=4, lr_max=1e-3,
                     lr_min=2e-6, w2=0.1, widths="16,32,64", blocks="2,2,2",
                     window=8, state_dim=8, d_s=64, fusion="guided",
                     target_psnr=None),
}


# -- option plumbing ----------------------------------------------------------------


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_tuple(value) -> tuple[int, ...]:
    if isinstance(value, str):
        value = value.split(",")
    return tuple(int(v) for v in value)


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return raw


def _options(args: argparse.Namespace) -> dict:
    """defaults <- config-file section <- explicitly passed flags."""
    merged = dict(DEFAULTS[args.command])
    config = getattr(args, "config", None)
    if config:
        section = _load_config(config).get(args.command, {})
        unknown = sorted(set(section) - set(merged))
        if unknown:
            raise ConfigError(f"unknown keys in config section {args.command!r}: {unknown}")
        merged.update(section)
    merged.update({k: v for k, v in vars(args).items()
                   if k not in ("command", "func", "config")})
    return merged


def _require(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ConfigError(f"missing required options: {flags}")


def _out_dir(opts: dict) -> Path:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out: Path, command: str, artifacts: list[str], report: dict) -> None:
    _write_json(out / "manifest.json",
                {"command": command, "artifacts": sorted(artifacts), "report": report})


# -- shared loading -----------------------------------------------------------------


def _load_triplets(data_dir) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    stems = hazesynth.list_triplet_stems(data_dir)
    if not stems:
        raise ConfigError(f"no triplets (*.hazy/clear/density.png) under {data_dir}")
    trips = [hazesynth.read_triplet(data_dir, s) for s in stems]
    shapes = {t.hazy.shape for t in trips}
    if len(shapes) > 1:
        raise ConfigError(f"triplets must share one shape, found {sorted(shapes)}")
    return (stems, np.stack([t.hazy for t in trips]),
            np.stack([t.clear for t in trips]),
            np.stack([t.density for t in trips]))


def _list_images(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    hazy = sorted(path.glob("*.hazy.png"))
    found = hazy or sorted(path.glob("*.png"))
    if not found:
        raise ConfigError(f"no .png images under {path}")
    return found


def _load_encoder_prompts(opts: dict) -> tuple[TinyEncoder | None, PromptPair | None]:
    enc = TinyEncoder.load(opts["encoder"]) if opts.get("encoder") else None
    prompts = PromptPair.load(opts["prompts"]) if opts.get("prompts") else None
    return enc, prompts


def _load_net(opts: dict) -> tuple[DehazeNet, TinyEncoder | None, PromptPair | None]:
    _require(opts, "checkpoint")
    ckpt = Path(opts["checkpoint"])
    model_json = Path(opts["model_json"]) if opts.get("model_json") else ckpt.with_name("model.json")
    if not model_json.exists():
        raise ConfigError(f"model config {model_json} not found; pass --model-json")
    cfg = ModelConfig.from_json(model_json)
    enc, prompts = _load_encoder_prompts(opts)
    if cfg.fusion == "guided" and enc is None:
        raise ConfigError("checkpoint uses learned aggregation; pass --encoder")
    net = DehazeNet.load(ckpt, cfg, d_image=enc.d_c if enc else 64)
    return net, enc, prompts


# -- subcommands --------------------------------------------------------------------


def cmd_synth(opts: dict) -> dict:
    _require(opts, "out")
    out = _out_dir(opts)
    n, size, seed = int(opts["n"]), int(opts["size"]), int(opts["seed"])
    artifacts: list[str] = []
    if n:
        if opts["clear_dir"]:
            sources = [imageio.read_image(p) for p in _list_images(opts["clear_dir"])]
        else:
            # procedural scenes; spawn keys above any per-sample index
            sources = [hazesynth.procedural_clear(hazesynth.sample_rng(seed, 10 ** 6 + i),
                                                  2 * size, 2 * size) for i in range(4)]
        builder = hazesynth.dataset_builder(
            sources, beta_range=(float(opts["beta_min"]), float(opts["beta_max"])),
            depth_source=opts["depth"], seed=seed, count=n, crop=size,
            atmo_range=(float(opts["atmo_min"]), float(opts["atmo_max"])))
        for i, trip in enumerate(builder):
            stem = f"t{i:05d}"
            hazesynth.write_triplet(out, stem, trip)
            artifacts += [f"{stem}.{kind}.png" for kind in ("hazy", "clear", "density")]
    report = {"count": n, "size": size, "seed": seed}
    _write_manifest(out, "synth", artifacts, report)
    print(f"synth: {n} triplets -> {out}")
    return report


def cmd_pretrain_encoder(opts: dict) -> dict:
    _require(opts, "data", "out")
    out = _out_dir(opts)
    _, hazy, clear, _ = _load_triplets(opts["data"])
    images = np.concatenate([hazy, clear])
    labels = np.concatenate([np.zeros(len(hazy), np.int64), np.ones(len(clear), np.int64)])
    enc, report = pretrain_tiny_encoder(
        images, labels, steps=int(opts["steps"]), seed=int(opts["seed"]),
        batch=int(opts["batch"]), lr=float(opts["lr"]),
        holdout_fraction=float(opts["holdout"]), d_c=int(opts["d_c"]),
        patch=int(opts["patch"]))
    enc.save(out / "encoder.tmda")
    _write_json(out / "report.json", report)
    _write_manifest(out, "pretrain-encoder", ["encoder.tmda", "report.json"], report)
    print(f"pretrain-encoder: holdout accuracy {report['holdout_accuracy']:.3f} -> {out}")
    return report


def cmd_train_prompts(opts: dict) -> dict:
    _require(opts, "data", "encoder", "out")
    out = _out_dir(opts)
    stage = int(opts["stage"])
    enc = TinyEncoder.load(opts["encoder"])
    _, hazy, clear, dens = _load_triplets(opts["data"])
    steps = int(opts["steps"])
    cfg = PromptTrainConfig(alpha1=float(opts["alpha1"]), alpha2=float(opts["alpha2"]),
                            stage1_steps=steps, stage2_steps=steps,
                            lr=float(opts["lr"]), seed=int(opts["seed"]),
                            k=int(opts["k"]), batch=int(opts["batch"]),
                            holdout_fraction=float(opts["holdout"]),
                            regression=opts["regression"])
    start = PromptPair.load(opts["prompts"]) if opts["prompts"] else None
    if stage == 1:
        images = np.concatenate([hazy, clear])
        labels = np.concatenate([np.zeros(len(hazy), np.int64),
                                 np.ones(len(clear), np.int64)])
        prompts, report = prompt_stage1(enc, images, labels, cfg, start)
    elif stage == 2:
        if start is None:
            raise ConfigError("stage 2 refines existing prompts; pass --prompts "
                              "(the stage-1 artifact)")
        prompts, report = prompt_stage2(enc, hazy, dens, clear, start, cfg)
    else:
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    prompts.save(out / "prompts.tmda")
    report = dict(report, stage=stage)
    _write_json(out / "report.json", report)
    _write_manifest(out, "train-prompts", ["prompts.tmda", "report.json"], report)
    print(f"train-prompts stage {stage}: {report} -> {out}")
    return report


def _model_config(opts: dict) -> ModelConfig:
    return ModelConfig(widths=_int_tuple(opts["widths"]), blocks=_int_tuple(opts["blocks"]),
                       window_size=int(opts["window"]), state_dim=int(opts["state_dim"]),
                       patch=int(opts.get("patch", 8)), d_s=int(opts["d_s"]),
                       fusion=opts["fusion"],
                       normalized_weights=_bool(opts.get("normalized_weights", True)))


def cmd_train(opts: dict) -> dict:
    _require(opts, "data", "out")
    out = _out_dir(opts)
    model_cfg = _model_config(opts)
    enc, prompts = _load_encoder_prompts(opts)
    if (model_cfg.fusion == "guided" or float(opts["w2"]) > 0) and enc is None:
        raise ConfigError("learned aggregation or feature loss needs --encoder")
    if enc is not None and enc.patch != model_cfg.patch:
        raise ConfigError(f"encoder patch {enc.patch} != model patch {model_cfg.patch}")
    _, hazy, clear, _ = _load_triplets(opts["data"])
    target = opts["target_psnr"]
    cfg = TrainConfig(steps=int(opts["steps"]), batch=int(opts["batch"]),
                      lr_max=float(opts["lr_max"]), lr_min=float(opts["lr_min"]),
                      cycles=int(opts["cycles"]), seed=int(opts["seed"]),
                      val_every=int(opts["val_every"]), val_count=int(opts["val_count"]),
                      target_psnr=None if target is None else float(target),
                      log_path=out / "train_log.csv",
                      checkpoint_path=out / "model.tmda")
    loss_cfg = LossConfig(w1=float(opts["w1"]), w2=float(opts["w2"]))
    net = DehazeNet(model_cfg, np.random.default_rng(cfg.seed),
                    d_image=enc.d_c if enc else 64)
    report = train_dehaze(net, hazy, clear, cfg, loss_cfg, enc, prompts)
    model_cfg.to_json(out / "model.json")
    _write_json(out / "report.json", report)
    _write_manifest(out, "train",
                    ["model.tmda", "model.json", "train_log.csv", "report.json"], report)
    print(f"train: {report['steps_run']} steps, val psnr {report['val_psnr']:.2f} dB -> {out}")
    return report


def cmd_infer(opts: dict) -> dict:
    _require(opts, "checkpoint", "input", "out")
    out = _out_dir(opts)
    net, enc, prompts = _load_net(opts)
    artifacts = []
    for path in _list_images(opts["input"]):
        img = imageio.read_image(path)
        pred = restore(net, img[None], enc, prompts, batch=1)[0]
        name = f"{path.stem}.dehazed.png"
        imageio.write_image(out / name, pred)
        artifacts.append(name)
    report = {"count": len(artifacts)}
    _write_manifest(out, "infer", artifacts, report)
    print(f"infer: {len(artifacts)} images -> {out}")
    return report


def cmd_eval(opts: dict) -> dict:
    _require(opts, "checkpoint", "data", "out")
    out = _out_dir(opts)
    net, enc, prompts = _load_net(opts)
    stems, hazy, clear, _ = _load_triplets(opts["data"])
    report = evaluate(net, hazy, clear, enc, prompts, batch=int(opts["batch"]))
    report["per_image"] = {s: r for s, r in zip(stems, report["per_image"])}
    _write_json(out / "eval.json", report)
    _write_manifest(out, "eval", ["eval.json"],
                    {k: v for k, v in report.items() if k != "per_image"})
    print(f"eval: psnr {report['psnr']:.2f} dB (hazy baseline "
          f"{report['psnr_hazy_baseline']:.2f} dB) over {report['count']} images -> {out}")
    return report


def cmd_density(opts: dict) -> dict:
    _require(opts, "encoder", "image", "out")
    out = _out_dir(opts)
    enc, prompts = _load_encoder_prompts(opts)
    image = Path(opts["image"])
    img = imageio.read_image(image)
    with no_grad():
        m_d = density_map(enc, img[None], prompts).data[0]
    stem = image.stem
    imageio.write_density(out / f"{stem}.density.png", m_d)
    imageio.write_f32(out / f"{stem}.density.f32", m_d)
    report = {"shape": list(m_d.shape), "mean": float(m_d.mean()),
              "min": float(m_d.min()), "max": float(m_d.max())}
    _write_manifest(out, "density",
                    [f"{stem}.density.png", f"{stem}.density.f32"], report)
    print(f"density: {stem} mean {report['mean']:.3f} -> {out}")
    return report


def cmd_analyze_attention(opts: dict) -> dict:
    _require(opts, "checkpoint", "data", "out")
    out = _out_dir(opts)
    net, _, _ = _load_net(opts)
    paths = _list_images(opts["data"])[:int(opts["limit"])]
    block = net.enc_blocks[0][0]
    edge = int(opts["tokens"])
    maps: list[np.ndarray] = []
    grid: tuple[int, int] | None = None
    for path in paths:
        feats = net.stem_features(imageio.read_image(path)[None])
        th, tw = min(edge, feats.shape[1]), min(edge, feats.shape[2])
        if grid is None:
            grid = (th, tw)
        elif grid != (th, tw):
            raise ConfigError(f"images must share a size: {grid} vs {(th, tw)}")
        normed = T.layer_norm(Tensor(feats.data[:, :th, :tw, :]),
                              block.norm1_gamma, block.norm1_beta)
        capture: list = []
        with no_grad():
            full_image_attention(normed, block.attn, capture)
        maps.extend(np.asarray(c) for c in capture)
    distances, weights = attention_distance_profile(maps, *grid)
    profile_to_csv(out / "attention_profile.csv", distances, weights)
    report = {"images": len(paths), "tokens": list(grid)}
    _write_manifest(out, "analyze-attention", ["attention_profile.csv"], report)
    print(f"analyze-attention: {len(paths)} images at {grid} tokens -> {out}")
    return report


def cmd_pipeline(opts: dict) -> dict:
    """synth -> pretrain-encoder -> prompts 1 -> prompts 2 -> train -> eval."""
    _require(opts, "out")
    out = _out_dir(opts)
    seed = int(opts["seed"])
    common = dict(size=opts["size"], beta_min=opts["beta_min"],
                  beta_max=opts["beta_max"], depth=opts["depth"])
    reports = {}
    reports["synth_train"] = cmd_synth({**DEFAULTS["synth"], **common,
                                        "out": out / "data" / "train",
                                        "n": opts["n_train"], "seed": seed})
    reports["synth_val"] = cmd_synth({**DEFAULTS["synth"], **common,
                                      "out": out / "data" / "val",
                                      "n": opts["n_val"], "seed": seed + 1})
    reports["pretrain"] = cmd_pretrain_encoder(
        {**DEFAULTS["pretrain-encoder"], "data": out / "data" / "train",
         "out": out / "encoder", "steps": opts["encoder_steps"],
         "d_c": opts["encoder_d_c"], "seed": seed})
    encoder = out / "encoder" / "encoder.tmda"
    reports["prompts1"] = cmd_train_prompts(
        {**DEFAULTS["train-prompts"], "data": out / "data" / "train",
         "encoder": encoder, "out": out / "prompts1", "stage": 1,
         "steps": opts["prompt1_steps"], "seed": seed})
    reports["prompts2"] = cmd_train_prompts(
        {**DEFAULTS["train-prompts"], "data": out / "data" / "train",
         "encoder": encoder, "out": out / "prompts2", "stage": 2,
         "steps": opts["prompt2_steps"], "seed": seed,
         "prompts": out / "prompts1" / "prompts.tmda"})
    reports["train"] = cmd_train(
        {**DEFAULTS["train"], "data": out / "data" / "train",
         "encoder": encoder, "prompts": out / "prompts2" / "prompts.tmda",
         "out": out / "model", "steps": opts["train_steps"],
         "batch": opts["batch"], "lr_max": opts["lr_max"], "lr_min": opts["lr_min"],
         "w2": opts["w2"], "widths": opts["widths"], "blocks": opts["blocks"],
         "window": opts["window"], "state_dim": opts["state_dim"],
         "d_s": opts["d_s"], "fusion": opts["fusion"],
         "target_psnr": opts["target_psnr"], "seed": seed})
    reports["eval"] = cmd_eval(
        {**DEFAULTS["eval"], "checkpoint": out / "model" / "model.tmda",
         "data": out / "data" / "val", "out": out / "eval",
         "encoder": encoder if opts["fusion"] == "guided" else None,
         "prompts": out / "prompts2" / "prompts.tmda"
         if opts["fusion"] == "guided" else None})
    final = reports["eval"]
    report = {"seed": seed,
              "psnr": final["psnr"], "ssim": final["ssim"],
              "psnr_hazy_baseline": final["psnr_hazy_baseline"],
              "psnr_gain": final["psnr"] - final["psnr_hazy_baseline"],
              "stages": {k: {kk: vv for kk, vv in v.items() if kk != "per_image"}
                         for k, v in reports.items()}}
    _write_json(out / "pipeline_report.json", report)
    stage_dirs = ["data/train", "data/val", "encoder", "prompts1", "prompts2",
                  "model", "eval"]
    _write_manifest(out, "pipeline",
                    [f"{d}/manifest.json" for d in stage_dirs] + ["pipeline_report.json"],
                    {k: v for k, v in report.items() if k != "stages"})
    print(f"pipeline: psnr gain {report['psnr_gain']:+.2f} dB over hazy baseline -> {out}")
    return report


# -- parser / entry -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dehaze",
                                     description="haze synthesis, guided training, "
                                                 "and restoration pipeline")
    subs = parser.add_subparsers(dest="command", required=True)
    sup = argparse.SUPPRESS

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None,
                       help="JSON config file with per-subcommand sections")
        for key, default in DEFAULTS[name].items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                p.add_argument(flag, type=_bool, default=sup)
            elif isinstance(default, int):
                p.add_argument(flag, type=int, default=sup)
            elif isinstance(default, float):
                p.add_argument(flag, type=float, default=sup)
            else:
                p.add_argument(flag, default=sup)
        return p

    sub("synth", cmd_synth, "emit hazy/clear/density triplets")
    sub("pretrain-encoder", cmd_pretrain_encoder, "contrastively pretrain + freeze the tiny encoder")
    sub("train-prompts", cmd_train_prompts, "optimize the learnable prompt pair (stage 1 or 2)")
    sub("train", cmd_train, "train the dehazing network")
    sub("infer", cmd_infer, "dehaze an image or directory")
    sub("eval", cmd_eval, "PSNR/SSIM/entropy report against clear references")
    sub("density", cmd_density, "export a haze-density map (PNG + raw f32)")
    sub("analyze-attention", cmd_analyze_attention, "attention weight vs distance CSV")
    sub("pipeline", cmd_pipeline, "chain synth -> pretrain -> prompts -> train -> eval")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse already printed its message
        return int(exc.code or 0)
    try:
        args.func(_options(args))
    except FormatError as exc:
        return _fail(5, exc)
    except NumericError as exc:
        return _fail(4, exc)
    except (ConfigError, ShapeError) as exc:
        return _fail(2, exc)
    except OSError as exc:
        return _fail(3, exc)
    return 0


def _fail(code: int, exc: Exception) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
