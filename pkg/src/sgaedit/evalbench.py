"""Synthetic long-range tasks, training, ablations, rollout, SSIM, benchmarks.

The mirror task is the canonical long-range probe: the bottom half of each
grid is a vertical reflection of the top half, so the ground truth for a
masked bottom token lives at least half the grid away, outside any small
block neighborhood. Masks for that task are drawn inside the reflection
half so the source content stays visible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import attention, sga
from . import model as mdl
from . import tape as T
from .errors import DivergenceError, ParameterError, ShapeError, ValidationError
from .images import to_gray
from .quantizer import TokenGrid, apply_mask
from .rng import substream

TASK_KINDS = ("mirror", "constant-region", "copy-corner")


@dataclass(frozen=True)
class SyntheticTask:
    """Procedural token-grid family whose samples satisfy an exact constraint."""

    kind: str
    height: int
    width: int
    vocab: int
    classes: int = 4

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValidationError(f"unknown task kind {self.kind!r}")
        if self.kind in ("mirror",) and self.height % 2:
            raise ShapeError("mirror task needs an even height")
        if self.kind == "copy-corner" and (self.height % 2 or self.width % 2):
            raise ShapeError("copy-corner task needs even dims")

    @property
    def dims(self) -> tuple:
        return (self.height, self.width)

    def sample(self, rng) -> tuple[TokenGrid, TokenGrid]:
        """Draw one (tokens, semantic) instance. Semantic grids are constant:
        the tasks probe image-content dependencies, not label guidance."""
        h, w = self.height, self.width
        if self.kind == "mirror":
            top = rng.integers(0, self.vocab, size=(h // 2, w))
            tokens = np.concatenate([top, top[::-1]], axis=0)
        elif self.kind == "constant-region":
            tokens = np.full((h, w), int(rng.integers(0, self.vocab)))
        else:  # copy-corner
            quad = rng.integers(0, self.vocab, size=(h // 2, w // 2))
            tokens = np.block([[quad, quad], [quad, quad]])
        semantic = np.zeros((h, w), dtype=np.int64)
        return TokenGrid(tokens, self.vocab), TokenGrid(semantic, self.classes)

    def check(self, grid: TokenGrid) -> bool:
        """Exact defining constraint of the family."""
        t = grid.tokens
        if self.kind == "mirror":
            return bool(np.array_equal(t[: self.height // 2], t[self.height // 2 :][::-1]))
        if self.kind == "constant-region":
            return bool((t == t[0, 0]).all())
        hh, hw = self.height // 2, self.width // 2
        quad = t[:hh, :hw]
        return bool(
            np.array_equal(t[:hh, hw:], quad)
            and np.array_equal(t[hh:, :hw], quad)
            and np.array_equal(t[hh:, hw:], quad)
        )

    def mask_region(self) -> Optional[np.ndarray]:
        """Region masks may be drawn in (None = anywhere). Chosen so the
        information needed to restore a masked token stays unmasked."""
        region = np.zeros((self.height, self.width), dtype=bool)
        if self.kind == "mirror":
            region[self.height // 2 :, :] = True
            return region
        if self.kind == "copy-corner":
            region[self.height // 2 :, self.width // 2 :] = True
            return region
        return None

    def source_position(self, i: int, j: int) -> tuple[int, int]:
        """Where the ground truth of cell (i, j) can be read off."""
        if self.kind == "mirror":
            return (self.height - 1 - i, j)
        if self.kind == "copy-corner":
            return (i % (self.height // 2), j % (self.width // 2))
        return (0, 0)

    def oracle_plans(self, config: mdl.ModelConfig, grid: Optional[tuple] = None) -> mdl.PlanBundle:
        """Ideal guiding plans: neighborhood plus the blocks holding each
        query block's source positions (shifted by one for the decoder's
        START offset). This is what a perfect guiding pass would select."""
        h, w = grid if grid is not None else (self.height, self.width)
        length = h * w
        part = sga.partition(length, config.blocks)
        n = config.blocks

        def kept_for(r: int, shift: int) -> tuple:
            keep = set(sga.neighborhood(r, config.radius, n))
            for t in part.tokens_of(r):
                i, j = divmod(int(t), w)
                si, sj = self.source_position(i, j)
                src = si * w + sj + shift
                keep.add(int(part.block_of[min(max(src, 0), length - 1)]))
            return tuple(sorted(keep))

        def plan_for(role: str, layer: int, head: int) -> sga.SparsityPlan:
            shift = 1 if role == "dec_self" else 0
            kept = tuple(kept_for(r, shift) for r in range(n))
            return sga.SparsityPlan(n, config.radius, n, kept, "guided", layer=layer, head=head)

        return mdl.PlanBundle.uniform(config, plan_for)


# ---------------------------------------------------------------------------
# free-form masks
# ---------------------------------------------------------------------------


def _brush_limits(area: int) -> tuple[int, int]:
    """(min, max) brush radius so stamps stay small relative to the grid."""
    if area < 36:
        return 0, 0  # tiny grids: single-cell brush keeps the fraction bounds feasible
    if area < 100:
        return 1, 1
    return 1, 3


def _masked_fraction(mask: np.ndarray) -> float:
    return float(mask.sum()) / mask.size


def free_form_mask(dims: tuple, seed, region: Optional[np.ndarray] = None) -> np.ndarray:
    """Random-brush mask: a seeded 8-direction walk stamping square brushes.

    The masked fraction always lands in [0.1, 0.6] and the mask is one
    4-connected component. `seed` may be an int or a numpy Generator;
    `region` (bool array) confines the walk, e.g. to a reflection half.
    """
    h, w = int(dims[0]), int(dims[1])
    if h < 2 or w < 2:
        raise ShapeError("mask dims must be at least 2 x 2")
    rng = substream(seed, "mask") if isinstance(seed, (int, np.integer)) else seed
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != (h, w):
            raise ShapeError(f"region shape {region.shape} != dims {(h, w)}")
        if not region.any():
            raise ValidationError("mask region is empty")

    area = h * w
    r_min, r_max = _brush_limits(area)
    target = rng.uniform(0.12, 0.5)
    cells = np.argwhere(region) if region is not None else None
    if cells is not None:
        pos = cells[rng.integers(cells.shape[0])]
        pos = [int(pos[0]), int(pos[1])]
        lo = cells.min(axis=0)
        hi = cells.max(axis=0)
    else:
        pos = [int(rng.integers(h)), int(rng.integers(w))]
        lo = np.array([0, 0])
        hi = np.array([h - 1, w - 1])

    moves_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    moves_4 = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    moves = moves_4 if r_max == 0 else moves_8  # single-cell brushes need 4-dir steps for connectivity

    mask = np.zeros((h, w), dtype=bool)
    for _ in range(50 * area):
        frac = _masked_fraction(mask)
        if frac >= target and frac >= 0.1:
            break
        r = int(rng.integers(r_min, r_max + 1))
        stamped = False
        while r >= r_min:
            stamp = np.zeros_like(mask)
            stamp[max(0, pos[0] - r) : pos[0] + r + 1, max(0, pos[1] - r) : pos[1] + r + 1] = True
            if region is not None:
                stamp &= region
            if _masked_fraction(mask | stamp) <= 0.6:
                mask |= stamp
                stamped = True
                break
            r -= 1
        if not stamped and _masked_fraction(mask) >= 0.1:
            break
        dy, dx = moves[int(rng.integers(len(moves)))]
        pos[0] = int(np.clip(pos[0] + dy, lo[0], hi[0]))
        pos[1] = int(np.clip(pos[1] + dx, lo[1], hi[1]))
    return mask


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    weights: mdl.ModelWeights
    losses: list


def _global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.square(g).sum())
    return float(np.sqrt(total))


def train(
    weights: mdl.ModelWeights,
    task: SyntheticTask,
    steps: int,
    lr: float,
    seed: int,
    plans: Optional[mdl.PlanBundle] = None,
    plan_provider: Optional[Callable[[int], mdl.PlanBundle]] = None,
    optimizer: str = "sgd",
    clip: float = 1.0,
    betas: tuple = (0.9, 0.999),
    adam_eps: float = 1e-8,
) -> TrainResult:
    """Teacher-forced training on masked-position cross-entropy.

    Per step: sample a task instance and a free-form mask, run the model on
    the masked input, and take the mean cross-entropy of the decoder logits
    at masked positions against the ground truth. Gradients flow through
    the recorded tape; the global gradient norm is clipped at `clip`.
    `plan_provider(step)`, when given, supplies fresh plans per step (the
    guiding-driven fine-tuning path); otherwise the fixed `plans` are used.
    """
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if (task.height, task.width) != weights.grid:
        raise ShapeError(f"task dims {task.dims} != model grid {weights.grid}")
    cfg = weights.config
    params = {k: np.array(T.value_of(v)) for k, v in weights.params.items()}
    m_state = {k: np.zeros_like(v) for k, v in params.items()} if optimizer == "adam" else None
    v_state = {k: np.zeros_like(v) for k, v in params.items()} if optimizer == "adam" else None
    region = task.mask_region()
    losses = []

    for step in range(steps):
        rng = substream(seed, f"train-{step}")
        x, p = task.sample(rng)
        mask = free_form_mask(task.dims, rng, region=region)
        step_plans = plan_provider(step) if plan_provider is not None else plans
        tape = T.GradTape()
        tw = mdl.ModelWeights(cfg, weights.grid, {k: tape.param(v) for k, v in params.items()})
        enc_out = mdl.encoder_forward(mdl.embed_encoder(apply_mask(x, mask), p, tw), tw, plans=step_plans)
        prev = np.concatenate([[cfg.start_token], x.flat()[:-1]])
        logits, _, _ = mdl.decoder_forward(
            prev,
            enc_out,
            tw,
            step_plans.dec_self if step_plans else None,
            step_plans.dec_cross if step_plans else None,
        )
        rows = np.flatnonzero(mask.ravel())
        loss = T.cross_entropy(T.gather_rows(logits, rows), x.flat()[rows])
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise DivergenceError(step)
        losses.append(loss_val)
        tape.backward(loss)

        grads = {k: (tw.params[k].grad if tw.params[k].grad is not None else np.zeros_like(params[k])) for k in params}
        norm = _global_norm(grads)
        if clip and norm > clip:
            scale = clip / norm
            for g in grads.values():
                g *= scale
        if optimizer == "sgd":
            for k in params:
                params[k] = params[k] - lr * grads[k]
        elif optimizer == "adam":
            t = step + 1
            b1, b2 = betas
            for k in params:
                m_state[k] = b1 * m_state[k] + (1 - b1) * grads[k]
                v_state[k] = b2 * v_state[k] + (1 - b2) * np.square(grads[k])
                mhat = m_state[k] / (1 - b1**t)
                vhat = v_state[k] / (1 - b2**t)
                params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + adam_eps)
        else:
            raise ParameterError(f"unknown optimizer {optimizer!r}")

    return TrainResult(weights=mdl.ModelWeights(cfg, weights.grid, params), losses=losses)


def masked_accuracy(
    weights: mdl.ModelWeights,
    task: SyntheticTask,
    plans: Optional[mdl.PlanBundle],
    instances: int,
    seed: int,
) -> float:
    """Teacher-forced argmax accuracy at masked positions on fresh instances."""
    cfg = weights.config
    region = task.mask_region()
    hits = 0
    total = 0
    for i in range(instances):
        rng = substream(seed, f"eval-{i}")
        x, p = task.sample(rng)
        mask = free_form_mask(task.dims, rng, region=region)
        enc_out = mdl.encoder_forward(mdl.embed_encoder(apply_mask(x, mask), p, weights), weights, plans=plans)
        prev = np.concatenate([[cfg.start_token], x.flat()[:-1]])
        logits, _, _ = mdl.decoder_forward(
            prev, enc_out, weights, plans.dec_self if plans else None, plans.dec_cross if plans else None
        )
        rows = np.flatnonzero(mask.ravel())
        pred = np.argmax(T.value_of(logits)[rows], axis=1)
        hits += int((pred == x.flat()[rows]).sum())
        total += rows.size
    return hits / total if total else 0.0


def write_loss_csv(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("dense", "guided", "local", "sliding", "random", "global")


def variant_bundle(
    kind: str,
    config: mdl.ModelConfig,
    task: SyntheticTask,
    seed: int = 0,
    window: int = 3,
) -> Optional[mdl.PlanBundle]:
    """Plan bundle for one ablation variant at the task's resolution."""
    if kind == "dense":
        return None
    if kind == "guided":
        return task.oracle_plans(config, grid=task.dims)

    def plan_for(role: str, layer: int, head: int) -> sga.SparsityPlan:
        if kind in ("random", "global"):
            rng = substream(seed, f"plan-{kind}-{role}-{layer}-{head}")
            return sga.variant_plan(kind, config.blocks, radius=config.radius, k=config.top_k, rng=rng)
        return sga.variant_plan(kind, config.blocks, radius=config.radius, window=window)

    return mdl.PlanBundle.uniform(config, plan_for)


def forward_score_flops(config: mdl.ModelConfig, bundle: Optional[mdl.PlanBundle], length: int) -> int:
    """Score FLOPs of one full forward pass under the cost model."""

    def role_flops(role_plans, layers: int) -> int:
        if role_plans is None:
            return layers * config.heads * attention.score_flops_dense(length, length, config.d // config.heads)
        return sum(
            sga.score_flops_plan(p, length, length, config.d // config.heads)
            for layer in role_plans
            for p in layer
        )

    if bundle is None:
        bundle = mdl.PlanBundle.dense()
    return (
        role_flops(bundle.enc, config.layers_enc)
        + role_flops(bundle.dec_self, config.layers_dec)
        + role_flops(bundle.dec_cross, config.layers_dec)
    )


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.rows, sort_keys=True, indent=2)

    def to_text(self) -> str:
        cols = ["variant", "accuracy", "acc_per_seed", "sparsity", "score_flops", "steps", "seeds"]
        lines = ["  ".join(f"{c:>14}" for c in cols)]
        for row in self.rows:
            cells = [
                row["variant"],
                f"{row['accuracy']:.4f}",
                "/".join(f"{a:.3f}" for a in row["acc_per_seed"]),
                f"{row['sparsity']:.4f}",
                str(row["score_flops"]),
                str(row["steps"]),
                "/".join(str(s) for s in row["seeds"]),
            ]
            lines.append("  ".join(f"{c:>14}" for c in cells))
        return "\n".join(lines)


def run_ablation(
    variants: list,
    task: SyntheticTask,
    config: mdl.ModelConfig,
    steps: int,
    seeds: list,
    lr: float,
    optimizer: str = "adam",
    eval_instances: int = 32,
    window: int = 3,
) -> AblationReport:
    """Train each attention variant under an identical budget and compare
    masked-token accuracy on held-out instances."""
    report = AblationReport()
    length = task.height * task.width
    for kind in variants:
        if kind not in ABLATION_VARIANTS:
            raise ValidationError(f"unknown ablation variant {kind!r}")
        bundle = variant_bundle(kind, config, task, seed=seeds[0] if seeds else 0, window=window)
        accs = []
        for seed in seeds:
            init = mdl.init_weights(config, task.dims, substream(seed, "init"))
            result = train(init, task, steps=steps, lr=lr, seed=seed, plans=bundle, optimizer=optimizer)
            accs.append(masked_accuracy(result.weights, task, bundle, eval_instances, seed=seed + 10_000))
        ratios = (bundle or mdl.PlanBundle.dense()).mean_sparsity()
        mean_ratio = float(np.mean(list(ratios.values())))
        report.rows.append(
            {
                "variant": kind,
                "accuracy": float(np.mean(accs)),
                "acc_per_seed": [float(a) for a in accs],
                "sparsity": mean_ratio if kind != "dense" else 1.0,
                "score_flops": forward_score_flops(config, bundle, length),
                "steps": steps,
                "seeds": list(seeds),
            }
        )
    return report


# ---------------------------------------------------------------------------
# attention rollout
# ---------------------------------------------------------------------------


def attention_rollout(layer_maps: list) -> np.ndarray:
    """Product of residual-corrected, head-averaged attention maps.

    Each input map must be row-stochastic; per layer the map becomes
    0.5 * map + 0.5 * I, row-normalized, and the layers are multiplied
    last-to-first.
    """
    if not layer_maps:
        raise ValidationError("need at least one attention map")
    size = None
    rollout = None
    for m in layer_maps:
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"attention map must be square, got {m.shape}")
        if size is None:
            size = m.shape[0]
            rollout = np.eye(size)
        if m.shape[0] != size:
            raise ValidationError("attention maps differ in size")
        if m.min() < -1e-9 or np.abs(m.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValidationError("attention map is not row-stochastic")
        corrected = 0.5 * m + 0.5 * np.eye(size)
        corrected /= corrected.sum(axis=1, keepdims=True)
        rollout = corrected @ rollout
    return rollout


def head_averaged_maps(encoder_out: mdl.EncoderOutput) -> list:
    """Per-layer mean over recorded head maps."""
    maps = []
    for layer in encoder_out.attn:
        present = [m for m in layer if m is not None]
        if not present:
            raise ValidationError("encoder pass did not record attention maps")
        maps.append(np.mean(present, axis=0))
    return maps


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def _window_means(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(x, window.shape)
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5).

    Inputs are [0, 1] images; color images are averaged to grayscale.
    """
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"image dims differ: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < 11:
        raise ShapeError("images must be at least 11 x 11 for SSIM")
    window = _gaussian_window()
    c1, c2 = 0.01**2, 0.03**2
    mu_a = _window_means(ga, window)
    mu_b = _window_means(gb, window)
    var_a = _window_means(ga * ga, window) - mu_a**2
    var_b = _window_means(gb * gb, window) - mu_b**2
    cov = _window_means(ga * gb, window) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(score.mean())


# ---------------------------------------------------------------------------
# cost benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.rows, sort_keys=True, indent=2)

    def to_text(self) -> str:
        cols = ["variant", "L", "d", "score_flops", "wall_s", "sparsity", "peak_entries"]
        lines = ["  ".join(f"{c:>12}" for c in cols)]
        for r in self.rows:
            cells = [
                r["variant"],
                str(r["L"]),
                str(r["d"]),
                str(r["score_flops"]),
                f"{r['wall_s']:.5f}",
                f"{r['sparsity']:.5f}",
                str(r["peak_entries"]),
            ]
            lines.append("  ".join(f"{c:>12}" for c in cells))
        return "\n".join(lines)


def benchmark(
    l_values: list,
    d: int,
    variants: list,
    repeats: int = 5,
    n_blocks: int = 64,
    radius: int = 1,
    k: int = 3,
    seed: int = 0,
) -> BenchReport:
    """Wall-clock (median of >= repeats, one warm-up discarded) and exact
    score-FLOPs for dense attention vs sparse-plan evaluation."""
    if repeats < 5:
        raise ParameterError("repeats must be >= 5")
    report = BenchReport()
    for length in l_values:
        rng = substream(seed, f"bench-{length}")
        q = rng.normal(size=(length, d))
        kk = rng.normal(size=(length, d))
        v = rng.normal(size=(length, d))
        part = sga.partition(length, n_blocks)
        zero_mask = np.zeros((length, length))

        def timed(fn) -> float:
            fn()  # warm-up
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
            return float(np.median(times))

        for variant in variants:
            if variant == "dense":
                wall = timed(lambda: attention.dense_attention(q, kk, v, zero_mask))
                report.rows.append(
                    {
                        "variant": "dense",
                        "L": length,
                        "d": d,
                        "score_flops": attention.score_flops_dense(length, length, d),
                        "wall_s": wall,
                        "sparsity": 1.0,
                        "peak_entries": length * length,
                    }
                )
                continue
            if variant == "guided":
                affinity = substream(seed, f"affinity-{length}").random((n_blocks, n_blocks))
                plan = sga.select_plan(affinity, k=k, radius=radius)
            else:
                plan = sga.variant_plan(variant, n_blocks, radius=radius, k=k, seed=seed)
            result = sga.sparse_attention(q, kk, v, plan, part, part)
            wall = timed(lambda: sga.sparse_attention(q, kk, v, plan, part, part))
            report.rows.append(
                {
                    "variant": variant,
                    "L": length,
                    "d": d,
                    "score_flops": result.score_flops,
                    "wall_s": wall,
                    "sparsity": sga.sparsity_ratio(plan),
                    "peak_entries": result.peak_score_entries,
                }
            )
    return report
