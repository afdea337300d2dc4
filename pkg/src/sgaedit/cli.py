"""Command-line surface for the full pipeline.

Subcommands: train-guide, train-sga, edit, bench, ablate, rollout,
leakcheck. Every command takes --config (JSON), optional --seed/--out
overrides, and writes its resolved configuration beside its outputs.
Exit codes: 0 success, 2 config error, 3 numerical/divergence error,
4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import compositing, config as cfgmod, evalbench, images, model as mdl, sampler
from .errors import ConfigError, NumericalError, SgaError
from .numerics import read_sgat, write_sgat
from .quantizer import (
    Codebook,
    apply_mask,
    encode_patches,
    fit_codebook,
    leakage_report,
    quantize,
    random_projection,
)
from .rng import substream


def _task_for(cfg: dict, dims: tuple) -> evalbench.SyntheticTask:
    mconf = cfgmod.model_config(cfg)
    return evalbench.SyntheticTask(cfg["task"]["kind"], dims[0], dims[1], mconf.vocab, classes=mconf.vocab_map)


def _derived_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31 - 1))


# ---------------------------------------------------------------------------
# quantizer assets (patch projections + codebooks) stored with the guide
# checkpoint so editing runs are self-contained
# ---------------------------------------------------------------------------


def _fit_assets(cfg: dict, directory: Path) -> None:
    mconf = cfgmod.model_config(cfg)
    q = cfg["quantizer"]
    seed = cfg["seed"]
    patch, channels = q["patch"], q["channels"]
    proj = random_projection(patch, channels, mconf.d, seed, "projection-image")
    sem_proj = random_projection(patch, mconf.vocab_map, mconf.d, seed, "projection-semantic")
    h_px = mconf.grid_high[0] * patch
    w_px = mconf.grid_high[1] * patch
    feats, sem_feats = [], []
    for i in range(q["corpus_images"]):
        rng = substream(seed, f"corpus-{i}")
        img = images.synthetic_image(h_px, w_px, channels, rng)
        feats.append(encode_patches(img, patch, proj).reshape(-1, mconf.d))
        cmap = images.synthetic_class_map(h_px, w_px, mconf.vocab_map, rng)
        sem_feats.append(encode_patches(images.one_hot_map(cmap, mconf.vocab_map), patch, sem_proj).reshape(-1, mconf.d))
    codebook = fit_codebook(np.concatenate(feats), mconf.vocab, q["iterations"], _derived_seed(seed, "codebook-image"))
    sem_codebook = fit_codebook(
        np.concatenate(sem_feats), mconf.vocab_map, q["iterations"], _derived_seed(seed, "codebook-semantic")
    )
    write_sgat(directory / "projection.sgat", proj)
    write_sgat(directory / "codebook.sgat", codebook.entries)
    write_sgat(directory / "sem_projection.sgat", sem_proj)
    write_sgat(directory / "sem_codebook.sgat", sem_codebook.entries)
    (directory / "assets.json").write_text(json.dumps({"patch": patch, "channels": channels}, sort_keys=True))


def _load_assets(directory: Path):
    meta = json.loads((directory / "assets.json").read_text())
    return {
        "patch": int(meta["patch"]),
        "channels": int(meta["channels"]),
        "projection": read_sgat(directory / "projection.sgat"),
        "codebook": Codebook(read_sgat(directory / "codebook.sgat")),
        "sem_projection": read_sgat(directory / "sem_projection.sgat"),
        "sem_codebook": Codebook(read_sgat(directory / "sem_codebook.sgat")),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train_guide(cfg: dict, args) -> int:
    out = Path(cfg["out"]) / "guide"
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out)
    mconf = cfgmod.model_config(cfg)
    task = _task_for(cfg, mconf.grid_low)
    init = mdl.init_weights(mconf, mconf.grid_low, substream(cfg["seed"], "init-guide"))
    result = evalbench.train(
        init,
        task,
        steps=cfg["train"]["steps"],
        lr=cfg["train"]["lr"],
        seed=cfg["seed"],
        plans=None,
        optimizer=cfg["train"]["optimizer"],
        clip=cfg["train"]["clip"],
    )
    mdl.save_checkpoint(out, result.weights)
    evalbench.write_loss_csv(out / "loss.csv", result.losses)
    _fit_assets(cfg, out)
    print(f"guide checkpoint written to {out} (final loss {result.losses[-1]:.4f})")
    return 0


def _plans_from_guiding(forced: mdl.GuidingResult, mconf: mdl.ModelConfig) -> mdl.PlanBundle:
    return sampler.plans_from_maps(forced, mconf)


def cmd_train_sga(cfg: dict, args) -> int:
    out = Path(cfg["out"]) / "sga"
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out)
    guide_dir = Path(args.guide)
    guide_weights = mdl.load_checkpoint(guide_dir)
    mconf = cfgmod.model_config(cfg)
    if guide_weights.config != mconf:
        raise ConfigError("guide checkpoint config differs from run config")
    if guide_weights.grid != mconf.grid_low:
        raise ConfigError(f"guide checkpoint grid {guide_weights.grid} != grid_low {mconf.grid_low}")

    task_low = _task_for(cfg, mconf.grid_low)
    region_low = task_low.mask_region()
    seed = cfg["seed"]
    log_lines = []
    weights = guide_weights
    for si, stage in enumerate(cfgmod.stage_ladder(cfg)):
        source_grid = weights.grid
        weights = mdl.init_from_guiding(weights, mconf, grid=stage)
        log_lines.append(
            f"stage {si}: grid {stage[0]}x{stage[1]}, positional tables interpolated "
            f"from {source_grid[0]}x{source_grid[1]}"
        )
        task = _task_for(cfg, stage)

        def plan_provider(step: int, _si=si) -> mdl.PlanBundle:
            rng = substream(seed, f"sga-plans-{_si}-{step}")
            x_low, p_low = task_low.sample(rng)
            mask_low = evalbench.free_form_mask(task_low.dims, rng, region=region_low)
            forced = mdl.guiding_forward(apply_mask(x_low, mask_low), p_low, guide_weights, decoder_tokens=x_low.flat())
            return _plans_from_guiding(forced, mconf)

        result = evalbench.train(
            weights,
            task,
            steps=cfg["train"]["stage_steps"],
            lr=cfg["train"]["lr"],
            seed=_derived_seed(seed, f"sga-stage-{si}"),
            plan_provider=plan_provider,
            optimizer=cfg["train"]["optimizer"],
            clip=cfg["train"]["clip"],
        )
        weights = result.weights
        evalbench.write_loss_csv(out / f"loss_stage{si}.csv", result.losses)

    mdl.save_checkpoint(out, weights)
    (out / "stages.log").write_text("\n".join(log_lines) + "\n")
    print(f"sga checkpoint written to {out}")
    return 0


def _build_request(cfg: dict, assets: dict, image_path, semantic_path, mask_path) -> tuple:
    mconf = cfgmod.model_config(cfg)
    patch = assets["patch"]
    channels = assets["channels"]
    image = images.read_pnm(image_path)
    got_channels = 1 if image.ndim == 2 else 3
    if got_channels != channels:
        raise ConfigError(f"image has {got_channels} channel(s), assets expect {channels}")
    h_px = mconf.grid_high[0] * patch
    w_px = mconf.grid_high[1] * patch
    if image.shape[:2] != (h_px, w_px):
        raise ConfigError(f"image dims {image.shape[:2]} != expected {(h_px, w_px)}")
    cmap = images.read_class_map(semantic_path)
    if cmap.shape != (h_px, w_px):
        raise ConfigError("semantic map dims differ from image")
    if cmap.max() >= mconf.vocab_map:
        raise ConfigError(f"semantic class {cmap.max()} >= vocab_map {mconf.vocab_map}")
    pixel_mask = images.read_pnm(mask_path)
    if pixel_mask.ndim != 2 or pixel_mask.shape != (h_px, w_px):
        raise ConfigError("mask must be a PGM with image dims")
    pixel_mask = pixel_mask >= 0.5

    fy = mconf.grid_high[0] // mconf.grid_low[0]
    fx = mconf.grid_high[1] // mconf.grid_low[1]
    if fy != fx or mconf.grid_low[0] * fy != mconf.grid_high[0]:
        raise ConfigError("grid_high must be an integer multiple of grid_low")
    image_low = images.downsample_box(image, fy)
    cmap_low = images.downsample_nearest(cmap, fy)

    def tokens_of(img, cm):
        toks = quantize(encode_patches(img, patch, assets["projection"]), assets["codebook"])
        sem = quantize(
            encode_patches(images.one_hot_map(cm, mconf.vocab_map), patch, assets["sem_projection"]),
            assets["sem_codebook"],
        )
        return toks, sem

    tokens, semantic = tokens_of(image, cmap)
    tokens_low, semantic_low = tokens_of(image_low, cmap_low)
    request = sampler.EditRequest(
        tokens=tokens,
        semantic=semantic,
        mask=images.downsample_mask_any(pixel_mask, patch),
        tokens_low=tokens_low,
        semantic_low=semantic_low,
        mask_low=images.downsample_mask_any(pixel_mask, patch * fy),
    )
    return request, image, pixel_mask


def cmd_edit(cfg: dict, args) -> int:
    out = Path(cfg["out"]) / "edit"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _run_edit(cfg, args, out)
    except Exception:
        shutil.rmtree(out, ignore_errors=True)
        raise


def _run_edit(cfg: dict, args, out: Path) -> int:
    cfgmod.write_resolved(cfg, out)
    mconf = cfgmod.model_config(cfg)
    guide_weights = mdl.load_checkpoint(Path(args.guide))
    sga_weights = mdl.load_checkpoint(Path(args.sga))
    if guide_weights.config != mconf or sga_weights.config != mconf:
        raise ConfigError("checkpoint configs differ from run config")
    assets = _load_assets(Path(args.guide))
    request, image, pixel_mask = _build_request(cfg, assets, args.image, args.semantic, args.mask)

    workers = 1 if os.environ.get("SGA_DETERMINISTIC") == "1" else max(1, args.workers)
    t0 = time.perf_counter()
    guided = sampler.guide_and_plan(request, guide_weights, mconf, seed=cfg["seed"])
    t_guide = time.perf_counter() - t0
    t0 = time.perf_counter()
    cands = sampler.autoregressive_edit(
        request,
        sga_weights,
        guided.plans,
        top_k=cfg["sampling"]["top_k"],
        n_samples=cfg["sampling"]["n_samples"],
        n_keep=cfg["sampling"]["n_keep"],
        seed=cfg["seed"],
        workers=workers,
    )
    t_sga = time.perf_counter() - t0

    patch = assets["patch"]
    levels = 1
    while levels < 4 and image.shape[0] % (2 ** (levels + 1)) == 0 and image.shape[1] % (2 ** (levels + 1)) == 0:
        levels += 1
    rows = []
    seen = set()
    for cand in cands.candidates:
        key = cand.tokens.tokens.tobytes()
        if key in seen:
            continue
        seen.add(key)
        rank = len(rows)
        tok_file = f"candidate_{rank:02d}.json"
        img_file = f"candidate_{rank:02d}" + (".pgm" if image.ndim == 2 else ".ppm")
        (out / tok_file).write_text(cand.tokens.to_json())
        recon = compositing.tokens_to_image(cand.tokens, assets["codebook"], assets["projection"], patch)
        comp = compositing.composite(image, recon, pixel_mask)
        blended = compositing.laplacian_blend(comp, image, pixel_mask.astype(np.float64), levels=levels)
        images.write_pnm(out / img_file, blended)
        rows.append({"rank": rank, "logprob": cand.logprob, "tokens": tok_file, "image": img_file})

    report = {
        "candidates": rows,
        "n_samples": cfg["sampling"]["n_samples"],
        "n_keep": cfg["sampling"]["n_keep"],
        "top_k": cfg["sampling"]["top_k"],
        "seed": cfg["seed"],
        "sparsity": guided.plans.mean_sparsity(),
        "guide_logprob": guided.logprob_low,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    total = t_guide + t_sga
    (out / "timings.json").write_text(
        json.dumps(
            {"guide_s": t_guide, "sga_s": t_sga, "guide_share": t_guide / total if total else 0.0},
            indent=2,
            sort_keys=True,
        )
    )
    print(f"wrote {len(rows)} candidate(s) to {out} (guide share {t_guide / total:.1%})")
    return 0


def cmd_bench(cfg: dict, args) -> int:
    out = Path(cfg["out"]) / "bench"
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out)
    b = cfg["bench"]
    variants = b["variants"]
    if "dense" not in variants:
        variants = ["dense"] + list(variants)
    report = evalbench.benchmark(
        b["lengths"],
        b["d"],
        variants,
        repeats=b["repeats"],
        n_blocks=b["blocks"],
        radius=b["radius"],
        k=b["top_k"],
        seed=cfg["seed"],
    )
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return 0


def cmd_ablate(cfg: dict, args) -> int:
    out = Path(cfg["out"]) / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out)
    mconf = cfgmod.model_config(cfg)
    a = cfg["ablation"]
    task = _task_for(cfg, mconf.grid_high)
    report = evalbench.run_ablation(
        a["variants"],
        task,
        mconf,
        steps=a["steps"],
        seeds=a["seeds"],
        lr=a["lr"],
        optimizer=a["optimizer"],
        eval_instances=a["eval_instances"],
        window=a["window"],
    )
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return 0


def cmd_rollout(cfg: dict, args) -> int:
    out = Path(cfg["out"]) / "rollout"
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out)
    mconf = cfgmod.model_config(cfg)
    if args.guide:
        weights = mdl.load_checkpoint(Path(args.guide))
    else:
        weights = mdl.init_weights(mconf, mconf.grid_low, substream(cfg["seed"], "init-guide"))
    task = _task_for(cfg, weights.grid)
    rng = substream(cfg["seed"], "rollout-instance")
    x, p = task.sample(rng)
    mask = evalbench.free_form_mask(task.dims, rng, region=task.mask_region())
    forced = mdl.guiding_forward(apply_mask(x, mask), p, weights)
    rollout = evalbench.attention_rollout(evalbench.head_averaged_maps(forced.encoder))
    write_sgat(out / "rollout.sgat", rollout)
    row_err = float(np.abs(rollout.sum(axis=1) - 1.0).max())
    (out / "report.json").write_text(
        json.dumps({"size": rollout.shape[0], "max_row_sum_error": row_err}, indent=2, sort_keys=True)
    )
    print(f"rollout {rollout.shape[0]}x{rollout.shape[0]} written, max row-sum error {row_err:.2e}")
    return 0


def cmd_leakcheck(cfg: dict, args) -> int:
    out = Path(cfg["out"]) / "leakcheck"
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out)
    mconf = cfgmod.model_config(cfg)
    q = cfg["quantizer"]
    seed = cfg["seed"]
    patch, channels = q["patch"], q["channels"]
    size = cfg["leakcheck"]["image_size"]
    if size % patch:
        raise ConfigError(f"leakcheck.image_size {size} not divisible by patch {patch}")
    if args.image:
        image = images.read_pnm(args.image)
        if image.shape[0] % patch or image.shape[1] % patch:
            raise ConfigError("image dims not divisible by patch")
    else:
        image = images.synthetic_image(size, size, channels, substream(seed, "leakcheck-image"))
    proj = random_projection(patch, 1 if image.ndim == 2 else 3, mconf.d, seed, "projection-image")
    feats = encode_patches(image, patch, proj).reshape(-1, mconf.d)
    size_cb = min(mconf.vocab, np.unique(feats, axis=0).shape[0])
    codebook = fit_codebook(feats, size_cb, q["iterations"], _derived_seed(seed, "codebook-leak"))
    grid_dims = (image.shape[0] // patch, image.shape[1] // patch)
    mask = evalbench.free_form_mask(grid_dims, substream(seed, "leakcheck-mask"))
    report = leakage_report(image, mask, codebook, proj, trials=cfg["leakcheck"]["trials"], seed=seed, patch=patch)
    payload = {
        "trials": report.trials,
        "leaked_tokens": len(report.changed_positions),
        "positions": [list(p) for p in report.changed_positions],
        "clean": report.is_clean,
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"{len(report.changed_positions)} leaked tokens over {report.trials} trials")
    return 0 if report.is_clean else 4


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgaedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--workers", type=int, default=1, help="candidate sampling workers")

    p = sub.add_parser("train-guide", help="train the dense low-resolution guiding model")
    common(p)
    p = sub.add_parser("train-sga", help="fine-tune the block-sparse model from a guide checkpoint")
    common(p)
    p.add_argument("--guide", required=True, help="guide checkpoint directory")
    p = sub.add_parser("edit", help="run a masked edit end to end")
    common(p)
    p.add_argument("--guide", required=True)
    p.add_argument("--sga", required=True)
    p.add_argument("--image", required=True, help="PGM/PPM input image")
    p.add_argument("--semantic", required=True, help="PGM class map")
    p.add_argument("--mask", required=True, help="PGM pixel mask (>=128 = edit)")
    p = sub.add_parser("bench", help="attention cost benchmark")
    common(p)
    p = sub.add_parser("ablate", help="attention-variant ablation on a synthetic task")
    common(p)
    p = sub.add_parser("rollout", help="encoder attention rollout")
    common(p)
    p.add_argument("--guide", default=None, help="optional guide checkpoint")
    p = sub.add_parser("leakcheck", help="verify masked regions cannot change unmasked tokens")
    common(p)
    p.add_argument("--image", default=None, help="optional PGM/PPM input")
    return parser


COMMANDS = {
    "train-guide": cmd_train_guide,
    "train-sga": cmd_train_sga,
    "edit": cmd_edit,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "rollout": cmd_rollout,
    "leakcheck": cmd_leakcheck,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config, seed_override=args.seed, out_override=args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except SgaError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
