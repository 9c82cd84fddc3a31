"""Command-line entry point: caption | train | sample | evaluate | report.

Each command takes an optional YAML config plus repeatable `--set a.b=v`
overrides (flags win over the file). Run directories get a resolved config
snapshot and a version stamp so a run can be reproduced exactly.
"""

import argparse
import json
import platform
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .bundle import init_bundle
from .checkpoint import (load_adapters, load_denoiser, save_adapters,
                         save_denoiser)
from .config import RunConfig, build_config, save_yaml
from .data import (BatchServer, DatasetManifest, load_image, scan_and_split)
from .dit import DitConfig
from .hldf import HldfConfig, HldfTrainer, NonFiniteLossError
from .lora import attach, default_targets
from .metrics import (ChannelStatsExtractor, TinyCnnExtractor, compute_report,
                      extract_features, load_features, plot_series,
                      save_features)
from .sampler import SamplerConfig, sample
from .schedule import build_schedule
from .seeding import SeedStreams
from .vsg import (CaptionPipeline, DatasetMeta, HttpVlmClient, MockVlmClient,
                  assert_budget, load_caption_map, prompt_hash)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 3  # caption pipeline finished but some records failed

IMAGE_GLOBS = ("*.png", "*.jpg", "*.jpeg", "*.bmp", "*.webp")


def _git_commit() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or None
    except Exception:
        return None


def prepare_run_dir(cfg: RunConfig, command: str) -> Path:
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_yaml(cfg, run_dir / "config.yaml")
    stamp = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "git": _git_commit(),
        "seed": cfg.seed,
    }
    with open(run_dir / "stamp.json", "w") as f:
        json.dump(stamp, f, indent=2)
    return run_dir


def _data_paths(cfg: RunConfig):
    root = Path(cfg.data.root)
    manifest = Path(cfg.data.manifest) if cfg.data.manifest else root / "manifest.jsonl"
    captions = Path(cfg.data.captions) if cfg.data.captions else root / "captions.jsonl"
    meta = Path(cfg.vsg.metadata) if cfg.vsg.metadata else root / "dataset_meta.json"
    return root, manifest, captions, meta


def ensure_manifest(cfg: RunConfig) -> DatasetManifest:
    root, manifest_path, _, _ = _data_paths(cfg)
    if manifest_path.exists():
        return DatasetManifest.load(manifest_path)
    manifest = scan_and_split(root, cfg.data.split_ratio, cfg.data.split_seed)
    manifest.save(manifest_path)
    print(f"wrote manifest with {len(manifest.records)} records to {manifest_path}")
    return manifest


def _build_client(cfg: RunConfig):
    if cfg.vsg.mock:
        return MockVlmClient(caption_tokens=cfg.vsg.mock_caption_tokens,
                             simplify_tokens=cfg.vsg.mock_simplify_tokens)
    if not cfg.vsg.endpoint:
        raise ValueError("vsg.endpoint is required unless vsg.mock is set")
    return HttpVlmClient(cfg.vsg.endpoint, model=cfg.vsg.model,
                         auth_env=cfg.vsg.auth_env or None,
                         auth_header=cfg.vsg.auth_header,
                         retries=cfg.vsg.retries, timeout=cfg.vsg.timeout)


def cmd_caption(cfg: RunConfig) -> int:
    manifest = ensure_manifest(cfg)
    _, _, captions_path, meta_path = _data_paths(cfg)
    meta = DatasetMeta.load(meta_path)
    pipeline = CaptionPipeline(
        _build_client(cfg), meta, parallelism=cfg.vsg.parallelism,
        retries=cfg.vsg.retries, simple_only=cfg.vsg.simple_caption,
    )
    result = pipeline.run(manifest, captions_path)
    print(f"captions: {result.n_done} already present, {result.n_fetched} fetched, "
          f"{result.n_failed} failed -> {captions_path}")
    if not result.complete:
        for path in result.failures[:5]:
            print(f"  failed: {path}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _attach_captions(manifest: DatasetManifest, captions_path) -> None:
    caption_map = load_caption_map(captions_path)
    records = []
    for rec in manifest.records:
        if rec.image_path in caption_map:
            rec.caption = caption_map[rec.image_path].caption
            records.append(caption_map[rec.image_path])
    assert_budget(records)


def _dit_config(cfg: RunConfig) -> DitConfig:
    m = cfg.model
    return DitConfig(
        latent_channels=m.latent_channels, latent_size=m.latent_size,
        patch_size=m.patch_size, hidden_dim=m.hidden_dim, depth=m.depth,
        heads=m.heads, cond_dim=m.cond_dim, cond_max_tokens=m.cond_max_tokens,
    )


def _check_codec(cfg: RunConfig):
    if cfg.data.image_size != cfg.model.latent_size:
        raise ValueError(
            f"identity codec requires data.image_size == model.latent_size "
            f"({cfg.data.image_size} != {cfg.model.latent_size})"
        )


def cmd_train(cfg: RunConfig) -> int:
    _check_codec(cfg)
    run_dir = prepare_run_dir(cfg, "train")
    streams = SeedStreams(cfg.seed)
    sched = build_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                           cfg.schedule.beta_end, cfg.schedule.kind)

    manifest = ensure_manifest(cfg)
    _, _, captions_path, _ = _data_paths(cfg)
    if not Path(captions_path).exists():
        raise FileNotFoundError(
            f"caption manifest {captions_path} not found; run the caption "
            f"command first"
        )
    _attach_captions(manifest, captions_path)
    train_set = manifest.subset("train")
    train_set.require_captions()
    if not train_set.records:
        raise ValueError("no train records in the manifest")

    if cfg.train.base_checkpoint:
        bundle = load_denoiser(cfg.train.base_checkpoint)
    else:
        bundle = init_bundle(_dit_config(cfg), sched.T, cfg.model.vocab_size,
                             streams.generator("init"))

    adapters = None
    if not cfg.train.pretrain and not cfg.train.base_checkpoint:
        # adapters alone cannot be sampled from later without the frozen base
        save_denoiser(run_dir / "denoiser_base.pt", bundle)
    if not cfg.train.pretrain:
        targets = default_targets(bundle, include_text=cfg.lora.include_text)
        adapters = attach(bundle, targets, rank=cfg.lora.rank,
                          scale=cfg.lora.scale,
                          generator=streams.generator("lora"))
        n_params = adapters.param_count()
        print(f"adapters on {len(targets)} layers, {n_params} trainable parameters")
    else:
        for p in bundle.parameters():
            p.requires_grad_(True)

    hldf_cfg = HldfConfig(
        interval=cfg.train.interval if cfg.train.interval > 0 else None,
        sampler_steps=cfg.train.sampler_steps, guidance=cfg.train.guidance,
        lr=cfg.train.lr, epochs=cfg.train.epochs, batch=cfg.train.batch,
        rank=cfg.lora.rank, caption_dropout=cfg.train.caption_dropout,
        clip_norm=cfg.train.clip_norm, weight_decay=cfg.train.weight_decay,
        truncate_sampler_grad=cfg.train.truncate_sampler_grad,
    )
    trainer = HldfTrainer(bundle, sched, hldf_cfg, streams, adapters=adapters)
    server = BatchServer(train_set, cfg.train.batch, cfg.data.image_size,
                         streams.numpy_rng("batches"), prefetch=cfg.train.prefetch)

    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def save_state(path):
        if adapters is not None:
            save_adapters(path, adapters)
        else:
            save_denoiser(path, bundle)

    max_steps = cfg.train.max_steps or None
    step = 1
    try:
        with open(run_dir / "steps.jsonl", "w") as log_file:
            for epoch in range(1, cfg.train.epochs + 1):
                remaining = None if max_steps is None else max_steps - (step - 1)
                if remaining is not None and remaining <= 0:
                    break
                records = trainer.run(server.epoch(), log_file=log_file,
                                      start_step=step, max_steps=remaining)
                step += len(records)
                if records:
                    print(f"epoch {epoch}: {len(records)} steps, "
                          f"last diffusion loss {records[-1].loss_diffusion:.4f}")
                if epoch % cfg.train.checkpoint_every == 0:
                    save_state(ckpt_dir / f"epoch_{epoch:03d}.pt")
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR

    final = run_dir / ("denoiser_final.pt" if adapters is None else "adapters_final.pt")
    save_state(final)
    print(f"trained {step - 1} steps ({trainer.color_evals} color evaluations), "
          f"final state in {final}")
    return EXIT_OK


def _load_model(cfg: RunConfig, checkpoint: str, adapters_path: str | None):
    if not checkpoint:
        raise ValueError("--checkpoint is required")
    bundle = load_denoiser(checkpoint)
    if adapters_path:
        load_adapters(adapters_path, bundle)
    bundle.eval()
    return bundle


def _gather_prompts(args, cfg: RunConfig) -> list[str]:
    if args.prompt:
        return list(args.prompt)
    if args.prompt_file:
        lines = Path(args.prompt_file).read_text().splitlines()
        prompts = [ln.strip() for ln in lines if ln.strip()]
        if not prompts:
            raise ValueError(f"no prompts in {args.prompt_file}")
        return prompts
    if args.from_manifest:
        manifest = ensure_manifest(cfg)
        _, _, captions_path, _ = _data_paths(cfg)
        _attach_captions(manifest, captions_path)
        subset = manifest.subset(args.split)
        subset.require_captions()
        return [rec.caption for rec in subset.records]
    raise ValueError("provide --prompt, --prompt-file, or --from-manifest")


def cmd_sample(cfg: RunConfig, args) -> int:
    _check_codec(cfg)
    run_dir = prepare_run_dir(cfg, "sample")
    out_dir = Path(args.out) if args.out else run_dir / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)

    bundle = _load_model(cfg, args.checkpoint, args.adapters)
    sched = build_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                           cfg.schedule.beta_end, cfg.schedule.kind)
    if bundle.T != sched.T:
        raise ValueError(f"checkpoint was trained with T={bundle.T}, "
                         f"config says {sched.T}")
    prompts = _gather_prompts(args, cfg)
    sampler_cfg = SamplerConfig(steps=cfg.sample.steps, guidance=cfg.sample.guidance)
    streams = SeedStreams(cfg.seed)
    shape = (1, bundle.cfg.latent_channels, bundle.cfg.latent_size,
             bundle.cfg.latent_size)

    seen: dict[str, int] = {}
    uncond = bundle.encode_uncond(1)
    for i, prompt in enumerate(prompts):
        phash = prompt_hash(prompt)
        occ = seen.get(phash, 0)
        seen[phash] = occ + 1
        gen = streams.fresh_generator(f"sample/{phash}/{occ}")
        z_T = torch.randn(shape, generator=gen)
        cond = bundle.encode_text([prompt])

        def eps_fn(z, t, emb):
            tt = torch.full((1,), t, dtype=torch.long)
            return bundle.predict_eps(z, tt, emb)

        with torch.no_grad():
            z = sample(eps_fn, cond, uncond, sampler_cfg, sched, z_T,
                       spacing=cfg.sample.spacing)
            x = bundle.decode_latent(z)
        arr = (x[0].permute(1, 2, 0).numpy() * 255).round().astype("uint8")
        name = f"{phash}_s{cfg.seed}_{i:04d}.png"
        Image.fromarray(arr).save(out_dir / name)
    print(f"wrote {len(prompts)} images to {out_dir}")
    return EXIT_OK


def _make_extractor(cfg: RunConfig):
    if cfg.metrics.extractor == "channel-stats":
        return ChannelStatsExtractor()
    if cfg.metrics.extractor == "tiny-cnn":
        return TinyCnnExtractor(seed=cfg.metrics.cnn_seed)
    raise ValueError(f"unknown extractor {cfg.metrics.extractor!r}")


def _load_side(path_str: str, cfg: RunConfig, extractor):
    path = Path(path_str)
    if path.is_file():
        return load_features(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is neither a directory nor a feature file")
    files = sorted(p for pat in IMAGE_GLOBS for p in path.rglob(pat))
    if not files:
        raise ValueError(f"no images under {path}")
    images = torch.stack([load_image(p, cfg.data.image_size) for p in files])
    return extract_features(images, extractor)


def cmd_evaluate(cfg: RunConfig, args) -> int:
    run_dir = prepare_run_dir(cfg, "evaluate")
    extractor = _make_extractor(cfg)
    real = _load_side(args.real, cfg, extractor)
    gen = _load_side(args.gen, cfg, extractor)
    report = compute_report(
        real, gen, subsets=cfg.metrics.subsets,
        subset_size=cfg.metrics.subset_size or None, seed=cfg.metrics.seed,
    )
    out = Path(args.out) if args.out else run_dir / "report.json"
    report.save(out)
    if args.save_features:
        save_features(real, out.with_suffix(".real.feat"))
        save_features(gen, out.with_suffix(".gen.feat"))
    print(f"fd={report.fd:.6f} kid_mean={report.kid_mean:.6f} "
          f"kid_std={report.kid_std:.6f} ({report.extractor_id}, "
          f"n_real={report.n_real}, n_gen={report.n_gen})")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    out_dir = Path(args.out) if args.out else Path(cfg.run_dir) / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.steps_log:
        steps, diff, color_steps, color = [], [], [], []
        for line in Path(args.steps_log).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            steps.append(d["step"])
            diff.append(d["loss_diffusion"])
            if d.get("loss_color") is not None:
                color_steps.append(d["step"])
                color.append(d["loss_color"])
        plot_series(steps, diff, "diffusion loss", out_dir / "loss_diffusion.png")
        wrote.append("loss_diffusion.png")
        if color:
            plot_series(color_steps, color, "color loss", out_dir / "loss_color.png")
            wrote.append("loss_color.png")
    if args.metrics_log:
        rows = [json.loads(ln) for ln in
                Path(args.metrics_log).read_text().splitlines() if ln.strip()]
        steps = [r["step"] for r in rows]
        for key in ("fd", "kid_mean"):
            if all(key in r for r in rows):
                plot_series(steps, [r[key] for r in rows], key,
                            out_dir / f"{key}.png")
                wrote.append(f"{key}.png")
    if not wrote:
        raise ValueError("nothing to plot: pass --steps-log and/or --metrics-log")
    print(f"wrote {', '.join(wrote)} to {out_dir}")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (repeatable, wins over the file)")
    p.add_argument("--seed", type=int, help="master seed (wins over config)")
    p.add_argument("--run-dir", help="run directory (wins over config)")
    p.add_argument("--data-root", help="dataset root (wins over config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hldiff",
        description="diffusion fine-tuning with gated color consistency",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("caption", help="fill the caption manifest")
    _add_common(p)
    p.add_argument("--mock", action="store_true", help="use the offline mock client")
    p.add_argument("--simple-caption", action="store_true",
                   help="template captions only, no endpoint calls")

    p = sub.add_parser("train", help="run the fine-tuning loop")
    _add_common(p)
    p.add_argument("--no-hldf", action="store_true",
                   help="disable the color-loss gate (plain fine-tune)")
    p.add_argument("--no-text-lora", action="store_true",
                   help="adapters on the denoiser only")
    p.add_argument("--pretrain", action="store_true",
                   help="train all bundle weights instead of adapters")

    p = sub.add_parser("sample", help="generate images from prompts")
    _add_common(p)
    p.add_argument("--checkpoint", help="denoiser checkpoint")
    p.add_argument("--adapters", help="adapter checkpoint to apply")
    p.add_argument("--prompt", action="append", help="prompt text (repeatable)")
    p.add_argument("--prompt-file", help="file with one prompt per line")
    p.add_argument("--from-manifest", action="store_true",
                   help="use captions from the dataset manifest")
    p.add_argument("--split", default="test", choices=["train", "test"],
                   help="manifest split for --from-manifest")
    p.add_argument("--out", help="output image directory")

    p = sub.add_parser("evaluate", help="compare generated and real sets")
    _add_common(p)
    p.add_argument("--real", required=True, help="image directory or .feat file")
    p.add_argument("--gen", required=True, help="image directory or .feat file")
    p.add_argument("--out", help="report path")
    p.add_argument("--save-features", action="store_true",
                   help="write extracted features next to the report")

    p = sub.add_parser("report", help="plot losses and metric series")
    _add_common(p)
    p.add_argument("--steps-log", help="steps.jsonl from a training run")
    p.add_argument("--metrics-log", help="JSONL with step/fd/kid_mean rows")
    p.add_argument("--out", help="plot output directory")

    return parser


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.run_dir:
        overrides.append(f"run_dir={args.run_dir}")
    if args.data_root:
        overrides.append(f"data.root={args.data_root}")
    if args.command == "caption":
        if args.mock:
            overrides.append("vsg.mock=true")
        if args.simple_caption:
            overrides.append("vsg.simple_caption=true")
    if args.command == "train":
        if args.no_hldf:
            overrides.append("train.interval=0")
        if args.no_text_lora:
            overrides.append("lora.include_text=false")
        if args.pretrain:
            overrides.append("train.pretrain=true")
    return build_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "caption":
            return cmd_caption(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sample":
            return cmd_sample(cfg, args)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args)
        if args.command == "report":
            return cmd_report(cfg, args)
        raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
