from collections import deque

import numpy as np
import pytest

from sgaedit import evalbench as eb
from sgaedit import model as mdl
from sgaedit.errors import DivergenceError, ValidationError
from sgaedit.rng import substream

CFG = mdl.ModelConfig(
    d=16,
    layers_enc=1,
    layers_dec=1,
    heads=2,
    vocab=8,
    vocab_map=3,
    grid_high=(4, 4),
    grid_low=(2, 2),
    blocks=4,
    top_k=2,
    radius=1,
    ffw=32,
)


class TestTasks:
    @pytest.mark.parametrize("kind", eb.TASK_KINDS)
    def test_thousand_samples_satisfy_constraint(self, kind):
        task = eb.SyntheticTask(kind, 8, 8, 16)
        rng = substream(0, f"task-{kind}")
        for _ in range(1000):
            x, p = task.sample(rng)
            assert task.check(x)
            assert not x.masked_positions().any()
            assert (p.tokens == 0).all()

    def test_mirror_constraint_definition(self):
        task = eb.SyntheticTask("mirror", 8, 8, 16)
        x, _ = task.sample(substream(1, "mirror"))
        for i in range(4):
            assert np.array_equal(x.tokens[7 - i], x.tokens[i])

    def test_mirror_source_distance_exceeds_radius1_window(self):
        # bottom-row tokens depend on content >= half the grid away
        task = eb.SyntheticTask("mirror", 8, 8, 16)
        si, sj = task.source_position(7, 3)
        assert (si, sj) == (0, 3)
        assert abs(7 - si) >= 4

    def test_mask_region_keeps_sources_visible(self):
        task = eb.SyntheticTask("mirror", 8, 8, 16)
        region = task.mask_region()
        for i in range(8):
            for j in range(8):
                if region[i, j]:
                    si, sj = task.source_position(i, j)
                    assert not region[si, sj]

    def test_oracle_plans_cover_sources(self):
        from sgaedit import sga

        cfg = mdl.ModelConfig(**{**CFG.to_dict(), "d": 16, "blocks": 8, "grid_high": (8, 8), "grid_low": (4, 4)})
        task = eb.SyntheticTask("mirror", 8, 8, 16)
        plans = task.oracle_plans(cfg, grid=(8, 8))
        part = sga.partition(64, 8)
        plan = plans.dec_cross[0][0]
        for l in range(64):
            i, j = divmod(l, 8)
            si, sj = task.source_position(i, j)
            assert part.block_of[si * 8 + sj] in plan.kept[part.block_of[l]]


def flood_fill_4(mask):
    seeds = np.argwhere(mask)
    if seeds.size == 0:
        return 0
    seen = np.zeros_like(mask)
    queue = deque([tuple(seeds[0])])
    seen[tuple(seeds[0])] = True
    while queue:
        i, j = queue.popleft()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < mask.shape[0] and 0 <= nj < mask.shape[1] and mask[ni, nj] and not seen[ni, nj]:
                seen[ni, nj] = True
                queue.append((ni, nj))
    return int(seen.sum())


class TestFreeFormMask:
    def test_seeded_determinism(self):
        one = eb.free_form_mask((16, 16), 7)
        two = eb.free_form_mask((16, 16), 7)
        assert np.array_equal(one, two)

    @pytest.mark.parametrize("dims", [(16, 16), (8, 8), (12, 20)])
    def test_fraction_bounds_100_seeds(self, dims):
        for seed in range(100):
            mask = eb.free_form_mask(dims, seed)
            frac = mask.mean()
            assert 0.1 <= frac <= 0.6, (dims, seed, frac)

    @pytest.mark.parametrize("dims", [(16, 16), (8, 8)])
    def test_single_4connected_component(self, dims):
        for seed in range(50):
            mask = eb.free_form_mask(dims, seed)
            assert flood_fill_4(mask) == int(mask.sum()), seed

    def test_region_confinement(self):
        region = np.zeros((8, 8), bool)
        region[4:, :] = True
        for seed in range(20):
            mask = eb.free_form_mask((8, 8), seed, region=region)
            assert not mask[:4].any()
            assert 0.1 <= mask.mean() <= 0.6

    def test_tiny_grid(self):
        for seed in range(20):
            mask = eb.free_form_mask((2, 2), seed)
            assert 0.1 <= mask.mean() <= 0.6


class TestTrain:
    def _task(self):
        return eb.SyntheticTask("mirror", *CFG.grid_high, CFG.vocab, classes=CFG.vocab_map)

    def test_lr_zero_leaves_weights_and_flat_loss(self):
        init = mdl.init_weights(CFG, CFG.grid_high, substream(2, "t0"))
        result = eb.train(init, self._task(), steps=3, lr=0.0, seed=0)
        for name in init.params:
            assert np.array_equal(result.weights.params[name], init.params[name])
        assert len(result.losses) == 3

    def test_initial_loss_near_log_vocab(self):
        # exactly uniform logits with a zeroed model
        shapes = mdl.parameter_shapes(CFG, CFG.grid_high)
        zero = mdl.ModelWeights(CFG, CFG.grid_high, {k: np.zeros(s) for k, s in shapes.items()})
        result = eb.train(zero, self._task(), steps=1, lr=0.0, seed=1)
        assert result.losses[0] == pytest.approx(np.log(CFG.vocab), abs=1e-9)
        # random init stays in the same ballpark
        init = mdl.init_weights(CFG, CFG.grid_high, substream(3, "t1"))
        result = eb.train(init, self._task(), steps=1, lr=0.0, seed=1)
        assert abs(result.losses[0] - np.log(CFG.vocab)) < 0.75

    def test_determinism_to_the_last_bit(self):
        init = mdl.init_weights(CFG, CFG.grid_high, substream(4, "t2"))
        a = eb.train(init, self._task(), steps=5, lr=0.1, seed=3)
        b = eb.train(init, self._task(), steps=5, lr=0.1, seed=3)
        assert a.losses == b.losses
        for name in a.weights.params:
            assert np.array_equal(a.weights.params[name], b.weights.params[name])

    def test_divergence_reports_step(self):
        init = mdl.init_weights(CFG, CFG.grid_high, substream(5, "t3"))
        init.params["out_head"][:] = 1e308  # logits overflow -> non-finite loss
        with pytest.raises(DivergenceError) as err:
            with np.errstate(over="ignore", invalid="ignore"):
                eb.train(init, self._task(), steps=2, lr=1e-2, seed=0, clip=0.0)
        assert err.value.step == 0

    def test_adam_option_updates(self):
        init = mdl.init_weights(CFG, CFG.grid_high, substream(6, "t4"))
        result = eb.train(init, self._task(), steps=3, lr=1e-3, seed=2, optimizer="adam")
        assert not np.array_equal(result.weights.params["out_head"], init.params["out_head"])

    def test_loss_improves_on_mirror_2plus2(self):
        # 8x8 mirror, 16 tokens, 2 encoder + 2 decoder layers, d=64:
        # mean loss over the final window < mean over the initial window, 3 seeds.
        cfg = mdl.ModelConfig(
            d=64, layers_enc=2, layers_dec=2, heads=4, vocab=16, vocab_map=4,
            grid_high=(8, 8), grid_low=(4, 4), blocks=8, top_k=3, radius=1, ffw=256,
        )
        task = eb.SyntheticTask("mirror", 8, 8, 16, classes=4)
        window = 500
        for seed in range(3):
            init = mdl.init_weights(cfg, (8, 8), substream(seed, "improve"))
            result = eb.train(init, task, steps=2 * window, lr=0.2, seed=seed)
            first = float(np.mean(result.losses[:window]))
            last = float(np.mean(result.losses[-window:]))
            assert last < first, (seed, first, last)


class TestAblationHarness:
    def test_rows_share_budget_and_include_dense(self):
        task = eb.SyntheticTask("mirror", *CFG.grid_high, CFG.vocab, classes=CFG.vocab_map)
        report = eb.run_ablation(
            ["dense", "local", "random"], task, CFG, steps=2, seeds=[0, 1], lr=0.1, eval_instances=2
        )
        assert [r["variant"] for r in report.rows] == ["dense", "local", "random"]
        assert all(r["steps"] == 2 and r["seeds"] == [0, 1] for r in report.rows)
        dense = report.rows[0]
        assert dense["sparsity"] == 1.0
        assert dense["score_flops"] > report.rows[1]["score_flops"]
        text = report.to_text()
        assert "dense" in text and "random" in text
        assert report.to_json()

    def test_unknown_variant_rejected(self):
        task = eb.SyntheticTask("mirror", *CFG.grid_high, CFG.vocab)
        with pytest.raises(ValidationError):
            eb.run_ablation(["nope"], task, CFG, steps=1, seeds=[0], lr=0.1)


class TestRollout:
    def test_single_identity_layer(self):
        assert np.array_equal(eb.attention_rollout([np.eye(5)]), np.eye(5))

    def test_two_identity_layers(self):
        assert np.array_equal(eb.attention_rollout([np.eye(4), np.eye(4)]), np.eye(4))

    def test_random_stochastic_stacks_row_sums(self):
        rng = substream(7, "roll")
        for _ in range(10):
            maps = []
            for _ in range(3):
                m = rng.random((6, 6))
                maps.append(m / m.sum(axis=1, keepdims=True))
            out = eb.attention_rollout(maps)
            assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-5

    def test_extra_identity_layer_is_noop(self):
        rng = substream(8, "roll2")
        m = rng.random((5, 5))
        m /= m.sum(axis=1, keepdims=True)
        base = eb.attention_rollout([m])
        extended = eb.attention_rollout([m, np.eye(5)])
        assert np.abs(base - extended).max() <= 1e-12

    def test_non_stochastic_rejected(self):
        with pytest.raises(ValidationError):
            eb.attention_rollout([np.ones((3, 3))])


def ssim_loop_oracle(a, b):
    """Direct windowed-formula SSIM with explicit loops."""
    size, sigma = 11, 1.5
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    h, wd = a.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(wd - size + 1):
            pa = a[i : i + size, j : j + size]
            pb = b[i : i + size, j : j + size]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            va = (w * pa * pa).sum() - mu_a**2
            vb = (w * pb * pb).sum() - mu_b**2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_self_similarity(self):
        img = substream(9, "ssim").random((24, 24))
        assert eb.ssim(img, img) == pytest.approx(1.0, abs=1e-6)

    def test_binary_complement_non_positive(self):
        img = (substream(10, "ssim2").random((32, 32)) > 0.5).astype(float)
        assert eb.ssim(img, 1.0 - img) <= 0.0

    def test_against_loop_oracle(self):
        rng = substream(11, "ssim3")
        a = rng.random((20, 20))
        b = np.clip(a + rng.normal(scale=0.1, size=(20, 20)), 0, 1)
        assert eb.ssim(a, b) == pytest.approx(ssim_loop_oracle(a, b), abs=1e-6)

    def test_rgb_converted_by_mean(self):
        rng = substream(12, "ssim4")
        a = rng.random((16, 16, 3))
        assert eb.ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-6)


class TestBenchmark:
    def test_flops_exact_and_dense_baseline(self):
        report = eb.benchmark([256], 32, ["dense", "guided", "local"], repeats=5, n_blocks=16, seed=0)
        by = {r["variant"]: r for r in report.rows}
        assert by["dense"]["score_flops"] == 2 * 256 * 256 * 32
        assert by["dense"]["peak_entries"] == 256 * 256
        for variant in ("guided", "local"):
            row = by[variant]
            assert row["score_flops"] == pytest.approx(row["sparsity"] * by["dense"]["score_flops"], abs=0.5)
            assert row["peak_entries"] < by["dense"]["peak_entries"]

    def test_guided_ratio_bound_at_paper_config(self):
        report = eb.benchmark([256], 16, ["guided"], repeats=5, n_blocks=64, radius=1, k=3, seed=1)
        row = report.rows[0]
        assert row["sparsity"] == 382 / 4096
        assert row["sparsity"] <= 0.09375

    def test_median_reproducibility(self):
        one = eb.benchmark([512], 64, ["dense"], repeats=7, n_blocks=64, seed=2).rows[0]["wall_s"]
        two = eb.benchmark([512], 64, ["dense"], repeats=7, n_blocks=64, seed=2).rows[0]["wall_s"]
        assert abs(one - two) <= 0.3 * max(one, two)

    def test_forward_score_flops_cost_model(self):
        bundle = eb.variant_bundle("local", CFG, eb.SyntheticTask("mirror", *CFG.grid_high, CFG.vocab))
        flops = eb.forward_score_flops(CFG, bundle, CFG.l_high)
        plan = bundle.enc[0][0]
        dh = CFG.d // CFG.heads
        per_head = 2 * dh * plan.kept_count() * (CFG.l_high // CFG.blocks) ** 2
        expected = per_head * CFG.heads * (CFG.layers_enc + 2 * CFG.layers_dec)
        assert flops == expected
