"""Command-line interface: synth, annotate, train, sample, eval.

Every flag can also come from a JSON config file (``--config``); explicit
command-line values win over config values, which win over built-in
defaults.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .crdm.dialogue import (VlmEndpoint, annotate_corpus, read_prompt_pairs,
                            write_prompt_pairs)
from .crdm.outline import annotate_outline
from .diffusion import SamplerConfig
from .errors import CamodiffError, ConfigurationError
from .metrics import embed_images, embed_texts, make_report
from .pipeline import Pipeline, PipelineConfig
from .synth import SynthConfig, generate, ingest_folder, save_samples
from .training import TrainConfig, train

_DEFAULTS = {
    "synth": {"n": 64, "size": 64, "texture": "value_noise",
              "object": "ellipse", "contrast_delta": 0.08, "seed": 0},
    "annotate": {"policy": "silent", "mode": "camouflage", "width": 2,
                 "alpha": 0.5, "seed": 0, "model": "mock-vlm",
                 "temperature": 0.2, "max_in_flight": 4, "mock": False,
                 "endpoint": None},
    "train": {"data": None, "n": 64, "size": 32, "codec": "identity",
              "steps": None, "epochs": 1, "batch_size": 4, "seed": 0,
              "base_channels": 64, "lr_controller_firm": 1e-4,
              "lr_projectors": 5e-6, "lambda_lpips": 1e-3,
              "control_scale": 1.2, "texture": "value_noise",
              "object": "ellipse", "log_every": 1,
              "warmup_steps": 0, "warmup_lr": 1e-3},
    "sample": {"prompt": "A camouflaged animal blends into its surroundings.",
               "mask": None, "steps": 20, "eta": 0.0, "seed": 0,
               "timing_out": None},
    "eval": {"metrics": "fid,kid", "prompts": None, "provider": "tiny",
             "endpoint": None, "out": None},
}


class _Resolver:
    """CLI value > config-file value > built-in default; errors name the key."""

    def __init__(self, ns: argparse.Namespace, command: str):
        self.ns = ns
        self.defaults = _DEFAULTS[command]
        self.config = {}
        if getattr(ns, "config", None):
            path = Path(ns.config)
            if not path.is_file():
                raise ConfigurationError(f"config file not found: {path}")
            self.config = json.loads(path.read_text())

    def get(self, key: str, required: bool = False):
        value = getattr(self.ns, key, None)
        if value is None:
            value = self.config.get(key, self.defaults.get(key))
        if value is None and required:
            raise ConfigurationError(f"missing config key: {key}")
        return value


def _add_config_flag(parser):
    parser.add_argument("--config", help="JSON config file supplying flag defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camodiff",
        description="Desk-scale controllable camouflage image diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic camouflage dataset")
    _add_config_flag(p)
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--texture", choices=("value_noise", "stripes", "blotch"))
    p.add_argument("--object", choices=("ellipse", "metaball"))
    p.add_argument("--contrast-delta", dest="contrast_delta", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("annotate", help="outline images and run the prompt dialogue")
    _add_config_flag(p)
    p.add_argument("--images")
    p.add_argument("--masks")
    p.add_argument("--out")
    p.add_argument("--endpoint", help="chat-completions base URL")
    p.add_argument("--mock", action="store_true", default=None,
                   help="use the bundled deterministic mock endpoint")
    p.add_argument("--policy", choices=("silent", "mentioned", "none"))
    p.add_argument("--mode", choices=("camouflage", "non_camouflage"))
    p.add_argument("--width", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--model")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-in-flight", dest="max_in_flight", type=int)

    p = sub.add_parser("train", help="train on a folder or synthetic data")
    _add_config_flag(p)
    p.add_argument("--out")
    p.add_argument("--data", help="dataset folder (images/, masks/, prompts.jsonl)")
    p.add_argument("--n", type=int, help="synthetic sample count when --data absent")
    p.add_argument("--size", type=int)
    p.add_argument("--codec", choices=("identity", "patchify4"))
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--lr-controller-firm", dest="lr_controller_firm", type=float)
    p.add_argument("--lr-projectors", dest="lr_projectors", type=float)
    p.add_argument("--lambda-lpips", dest="lambda_lpips", type=float)
    p.add_argument("--control-scale", dest="control_scale", type=float)
    p.add_argument("--texture", choices=("value_noise", "stripes", "blotch"))
    p.add_argument("--object", choices=("ellipse", "metaball"))
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int,
                   help="unconditional backbone warm-up steps before finetuning")
    p.add_argument("--warmup-lr", dest="warmup_lr", type=float)

    p = sub.add_parser("sample", help="generate an image from a checkpoint")
    _add_config_flag(p)
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--prompt")
    p.add_argument("--mask", help="single-channel PNG mask")
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--timing-out", dest="timing_out")

    p = sub.add_parser("eval", help="FID/KID/CLIP metrics over image folders")
    _add_config_flag(p)
    p.add_argument("--real")
    p.add_argument("--fake")
    p.add_argument("--metrics", help="comma list from fid,kid,clip")
    p.add_argument("--prompts", help="JSONL prompt pairs (needed for clip)")
    p.add_argument("--provider", choices=("tiny", "external"))
    p.add_argument("--endpoint")
    p.add_argument("--out", help="write the metric report JSON here")
    return parser


def cmd_synth(res: _Resolver) -> int:
    out = Path(res.get("out", required=True))
    cfg = SynthConfig(size=res.get("size"), texture_kind=res.get("texture"),
                      object_kind=res.get("object"),
                      contrast_delta=res.get("contrast_delta"),
                      seed=res.get("seed"))
    n = res.get("n")
    save_samples(generate(cfg, n), out)
    print(f"wrote {n} samples to {out}")
    return 0


def cmd_annotate(res: _Resolver) -> int:
    from .crdm.mock_server import MockVlmServer

    images_dir = Path(res.get("images", required=True))
    masks_dir = Path(res.get("masks", required=True))
    out = Path(res.get("out", required=True))
    policy = res.get("policy")
    mode = res.get("mode")
    seed = res.get("seed")

    ingest = ingest_folder(images_dir, masks_dir)
    if ingest.skipped:
        print(f"skipped unmatched stems: {ingest.skipped}", file=sys.stderr)

    items = []
    for i, sample in enumerate(ingest.samples):
        image = sample.image
        if policy != "none":
            image = annotate_outline(image, sample.mask, width=res.get("width"),
                                     alpha=res.get("alpha"), color_seed=seed + i)
        items.append((image, sample.prompts.source_image))

    server = None
    try:
        endpoint_url = res.get("endpoint")
        if res.get("mock") or endpoint_url is None:
            server = MockVlmServer().start()
            endpoint_url = server.url
        endpoint = VlmEndpoint(base_url=endpoint_url, model_name=res.get("model"),
                               temperature=res.get("temperature"))
        pairs = annotate_corpus(items, mode, endpoint, policy=policy,
                                max_in_flight=res.get("max_in_flight"))
    finally:
        if server is not None:
            server.stop()
    write_prompt_pairs(pairs, out)
    print(f"wrote {len(pairs)} prompt pairs to {out}")
    return 0


def cmd_train(res: _Resolver) -> int:
    out = Path(res.get("out", required=True))
    data = res.get("data")
    size = res.get("size")
    if data:
        result = ingest_folder(Path(data) / "images", Path(data) / "masks",
                               Path(data) / "prompts.jsonl")
        samples = result.samples
        if not samples:
            raise ConfigurationError(f"no samples found under {data}")
        size = samples[0].image.shape[0]
    else:
        cfg = SynthConfig(size=size, texture_kind=res.get("texture"),
                          object_kind=res.get("object"), seed=res.get("seed"))
        samples = list(generate(cfg, res.get("n")))

    pipe_cfg = PipelineConfig(image_size=size, codec=res.get("codec"),
                              base_channels=res.get("base_channels"),
                              control_scale=res.get("control_scale"),
                              seed=res.get("seed"))
    train_cfg = TrainConfig(lr_controller_firm=res.get("lr_controller_firm"),
                            lr_projectors=res.get("lr_projectors"),
                            lambda_lpips=res.get("lambda_lpips"),
                            batch_size=res.get("batch_size"),
                            control_scale=res.get("control_scale"),
                            epochs=res.get("epochs"), seed=res.get("seed"),
                            codec=res.get("codec"), max_steps=res.get("steps"),
                            backbone_warmup_steps=res.get("warmup_steps"),
                            backbone_warmup_lr=res.get("warmup_lr"))
    pipeline = Pipeline(pipe_cfg)
    result = train(pipeline, samples, train_cfg, out,
                   log_every=res.get("log_every"))
    last = result["losses"][-1]
    print(f"trained {result['steps']} steps; final l_sd={last['l_sd']:.4f} "
          f"total={last['total']:.4f}")
    print(f"checkpoint: {result['checkpoint']}")
    print(f"loss log:   {result['log']}")
    return 0


def cmd_sample(res: _Resolver) -> int:
    ckpt = res.get("ckpt", required=True)
    out = Path(res.get("out", required=True))
    pipeline = Pipeline.load(ckpt)

    masks = None
    mask_path = res.get("mask")
    if mask_path:
        with Image.open(mask_path) as m:
            masks = (np.asarray(m.convert("L")) >= 128)[None].astype(np.float32)

    sampler = SamplerConfig(num_steps=res.get("steps"), eta=res.get("eta"),
                            seed=res.get("seed"))
    images, report = pipeline.sample([res.get("prompt")], masks, sampler)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(images[0]).save(out)

    timing_out = res.get("timing_out")
    timing_path = Path(timing_out) if timing_out else out.with_suffix(".timing.json")
    timing_path.write_text(report.to_json())
    print(f"wrote {out}")
    print(f"timing: latency={report.latency_s:.3f}s fps={report.fps:.2f} "
          f"sps={report.sps:.2f} ({timing_path})")
    return 0


def cmd_eval(res: _Resolver) -> int:
    real_dir = res.get("real", required=True)
    fake_dir = res.get("fake", required=True)
    metrics = [m.strip() for m in res.get("metrics").split(",") if m.strip()]
    provider = {"tiny": "tiny_fixed", "external": "external"}[res.get("provider")]
    endpoint = res.get("endpoint")

    real = embed_images(real_dir, provider=provider, endpoint=endpoint)
    fake = embed_images(fake_dir, provider=provider, endpoint=endpoint)

    text_embs = None
    if "clip" in metrics:
        prompts_file = res.get("prompts")
        if prompts_file is None:
            raise ConfigurationError("missing config key: prompts (needed for clip)")
        pairs = {Path(p.source_image).stem: p for p in read_prompt_pairs(prompts_file)}
        texts, ids = [], []
        for item_id in fake.item_ids:
            if item_id in pairs:
                texts.append(pairs[item_id].t_simple)
                ids.append(item_id)
        if len(ids) != len(fake.item_ids):
            missing = sorted(set(fake.item_ids) - set(ids))
            raise ConfigurationError(f"prompts missing for images: {missing[:5]}")
        text_embs = embed_texts(texts, item_ids=ids, provider=provider,
                                endpoint=endpoint)

    report = make_report(real, fake, metrics, text_embs=text_embs)
    print(report.to_json())
    out = res.get("out")
    if out:
        Path(out).write_text(report.to_json())
    return 0


_COMMANDS = {"synth": cmd_synth, "annotate": cmd_annotate, "train": cmd_train,
             "sample": cmd_sample, "eval": cmd_eval}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        res = _Resolver(ns, ns.command)
        return _COMMANDS[ns.command](res)
    except CamodiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
