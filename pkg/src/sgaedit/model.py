"""Encoder-decoder transformer over token grids, in two instantiations.

The guiding model runs dense attention on the low-resolution grid and
exposes every attention map. The high-resolution model has the identical
architecture but evaluates attention only over the key blocks named by a
`PlanBundle` (one plan per layer and head for encoder self, decoder self,
and decoder cross attention). With full-kept plans the two paths agree to
float tolerance.

Forward code is written against the tape dispatch ops, so passing weights
wrapped in tape Tensors yields a differentiable graph while plain arrays
give the inference path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import attention, sga
from . import tape as T
from .errors import ConfigError, SequenceError, ShapeError, VocabularyError
from .numerics import read_sgat, write_sgat
from .quantizer import TokenGrid


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers_enc: int = 2
    layers_dec: int = 1
    heads: int = 4
    vocab: int = 16
    vocab_map: int = 4
    grid_high: tuple = (16, 16)
    grid_low: tuple = (8, 8)
    blocks: int = 16
    top_k: int = 3
    radius: int = 1
    ffw: int = 256

    def __post_init__(self):
        object.__setattr__(self, "grid_high", tuple(int(v) for v in self.grid_high))
        object.__setattr__(self, "grid_low", tuple(int(v) for v in self.grid_low))
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2")
        if self.d % self.heads != 0:
            raise ConfigError(f"heads {self.heads} must divide width {self.d}")
        if self.l_high % self.blocks != 0 or self.l_low % self.blocks != 0:
            raise ConfigError(f"blocks {self.blocks} must divide both sequence lengths")

    @property
    def l_high(self) -> int:
        return self.grid_high[0] * self.grid_high[1]

    @property
    def l_low(self) -> int:
        return self.grid_low[0] * self.grid_low[1]

    @property
    def mask_token(self) -> int:
        return self.vocab

    @property
    def start_token(self) -> int:
        return self.vocab + 1

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["grid_high"] = list(self.grid_high)
        out["grid_low"] = list(self.grid_low)
        return out

    @staticmethod
    def from_dict(obj: dict) -> "ModelConfig":
        return ModelConfig(**{**obj, "grid_high": tuple(obj["grid_high"]), "grid_low": tuple(obj["grid_low"])})


@dataclass
class ModelWeights:
    """All parameters of one transformer instance at one grid resolution."""

    config: ModelConfig
    grid: tuple
    params: dict

    @property
    def length(self) -> int:
        return self.grid[0] * self.grid[1]

    def tape_view(self, tape: T.GradTape) -> "ModelWeights":
        """Wrap every parameter as a tape leaf (shared config/grid)."""
        return ModelWeights(self.config, self.grid, {k: tape.param(v) for k, v in self.params.items()})

    def detached(self) -> "ModelWeights":
        return ModelWeights(self.config, self.grid, {k: np.array(T.value_of(v)) for k, v in self.params.items()})


def parameter_shapes(config: ModelConfig, grid: tuple) -> dict:
    length = grid[0] * grid[1]
    d, ffw = config.d, config.ffw
    shapes = {
        "enc_tok_emb": (config.vocab + 1, d),  # codebook entries + MASK
        "enc_map_emb": (config.vocab_map, d),
        "enc_pos": (length, d),
        "dec_tok_emb": (config.vocab + 2, d),  # + MASK + START
        "dec_pos": (length, d),
        "dec_peg": (5, 5, d),
        "out_head": (d, config.vocab),
    }
    for i in range(config.layers_enc):
        shapes[f"enc{i}_peg"] = (5, 5, d)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"enc{i}_{name}"] = (d, d)
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            shapes[f"enc{i}_{name}"] = (d,)
        shapes[f"enc{i}_ff1"] = (d, ffw)
        shapes[f"enc{i}_ff1_b"] = (ffw,)
        shapes[f"enc{i}_ff2"] = (ffw, d)
        shapes[f"enc{i}_ff2_b"] = (d,)
    for i in range(config.layers_dec):
        for kind in ("self", "cross"):
            for name in ("wq", "wk", "wv", "wo"):
                shapes[f"dec{i}_{kind}_{name}"] = (d, d)
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "ln3_g", "ln3_b"):
            shapes[f"dec{i}_{name}"] = (d,)
        shapes[f"dec{i}_ff1"] = (d, ffw)
        shapes[f"dec{i}_ff1_b"] = (ffw,)
        shapes[f"dec{i}_ff2"] = (ffw, d)
        shapes[f"dec{i}_ff2_b"] = (d,)
    return shapes


def init_weights(config: ModelConfig, grid: tuple, rng) -> ModelWeights:
    """Random init: N(0, 0.1) embeddings, fan-in-scaled projections, identity
    layer norms, zero PEG kernels (the residual makes them start as no-ops)."""
    params = {}
    for name, shape in parameter_shapes(config, grid).items():
        if name.endswith("_g"):
            params[name] = np.ones(shape)
        elif name.endswith("_b") or "peg" in name:
            params[name] = np.zeros(shape)
        elif "emb" in name or "pos" in name:
            params[name] = rng.normal(scale=0.1, size=shape)
        else:
            params[name] = rng.normal(scale=1.0 / np.sqrt(shape[0]), size=shape)
    return ModelWeights(config, tuple(grid), params)


@dataclass
class PlanBundle:
    """Per-role sparsity plans: [layer][head] -> SparsityPlan. None = dense."""

    enc: Optional[list] = None
    dec_self: Optional[list] = None
    dec_cross: Optional[list] = None

    @staticmethod
    def dense() -> "PlanBundle":
        return PlanBundle()

    @staticmethod
    def uniform(config: ModelConfig, plan_fn) -> "PlanBundle":
        """Same-plan-per-(layer, head) bundle from plan_fn(role, layer, head)."""
        return PlanBundle(
            enc=[[plan_fn("enc", i, h) for h in range(config.heads)] for i in range(config.layers_enc)],
            dec_self=[[plan_fn("dec_self", i, h) for h in range(config.heads)] for i in range(config.layers_dec)],
            dec_cross=[[plan_fn("dec_cross", i, h) for h in range(config.heads)] for i in range(config.layers_dec)],
        )

    def to_dict(self) -> dict:
        def dump(role):
            if role is None:
                return None
            return [[sga.plan_to_dict(p) for p in layer] for layer in role]

        return {"enc": dump(self.enc), "dec_self": dump(self.dec_self), "dec_cross": dump(self.dec_cross)}

    @staticmethod
    def from_dict(obj: dict) -> "PlanBundle":
        def load(role):
            if role is None:
                return None
            return [[sga.plan_from_dict(p) for p in layer] for layer in role]

        return PlanBundle(enc=load(obj.get("enc")), dec_self=load(obj.get("dec_self")), dec_cross=load(obj.get("dec_cross")))

    def mean_sparsity(self) -> dict:
        out = {}
        for name, role in (("enc", self.enc), ("dec_self", self.dec_self), ("dec_cross", self.dec_cross)):
            if role is None:
                out[name] = 1.0
            else:
                ratios = [sga.sparsity_ratio(p) for layer in role for p in layer]
                out[name] = float(np.mean(ratios)) if ratios else 1.0
        return out


@dataclass
class EncoderOutput:
    context: object  # L x d array or Tensor
    # attn[layer][head]: L x L row-stochastic array (dense heads only, None otherwise)
    attn: list


def _check_tokens(grid: TokenGrid, limit: int, what: str) -> np.ndarray:
    flat = grid.flat()
    if flat.min() < 0 or flat.max() >= limit:
        raise VocabularyError(f"{what} token outside embedding table (limit {limit})")
    return flat


def embed_encoder(x: TokenGrid, p: TokenGrid, weights: ModelWeights):
    """Sum of token, semantic, and positional embeddings, row-major order."""
    if x.tokens.shape != p.tokens.shape:
        raise ShapeError(f"image grid {x.tokens.shape} != semantic grid {p.tokens.shape}")
    if x.tokens.shape != weights.grid:
        raise ShapeError(f"grid {x.tokens.shape} does not match model grid {weights.grid}")
    xf = _check_tokens(x, weights.config.vocab + 1, "image")
    pf = _check_tokens(p, weights.config.vocab_map, "semantic")
    w = weights.params
    rows = T.add(T.gather_rows(w["enc_tok_emb"], xf), T.gather_rows(w["enc_map_emb"], pf))
    return T.add(rows, T.gather_rows(w["enc_pos"], np.arange(xf.size)))


def _peg_rows(rows, kernel, grid):
    """Apply the residual depth-wise conv to row-major rows of a token grid."""
    h, w = grid
    d = T.value_of(rows).shape[1]
    return T.reshape(T.peg(T.reshape(rows, (h, w, d)), kernel), (h * w, d))


def _multi_head(
    x_q,
    x_kv,
    weights: ModelWeights,
    prefix: str,
    plans,  # list per head or None
    part_q,
    part_k,
    extra_mask,
    record: bool,
):
    w = weights.params
    heads = weights.config.heads
    dh = weights.config.d // heads
    q_all = T.matmul(x_q, w[f"{prefix}_wq"])
    k_all = T.matmul(x_kv, w[f"{prefix}_wk"])
    v_all = T.matmul(x_kv, w[f"{prefix}_wv"])
    n_q = T.value_of(q_all).shape[0]
    n_k = T.value_of(k_all).shape[0]
    taped = T.is_tensor(q_all)

    outs, maps = [], []
    for h in range(heads):
        qh = T.slice_cols(q_all, h * dh, (h + 1) * dh)
        kh = T.slice_cols(k_all, h * dh, (h + 1) * dh)
        vh = T.slice_cols(v_all, h * dh, (h + 1) * dh)
        plan = plans[h] if plans is not None else None
        if plan is None:
            mask = extra_mask if extra_mask is not None else np.zeros((n_q, n_k))
            out_h, weights_h = attention.dense_attention(qh, kh, vh, mask)
            maps.append(np.array(T.value_of(weights_h)) if record else None)
        elif not taped and n_q == part_q.length and n_k == part_k.length:
            res = sga.sparse_attention(qh, kh, vh, plan, part_q, part_k, extra_mask=extra_mask)
            out_h = res.output
            maps.append(None)
        else:
            # Training, or a decoding prefix shorter than the partition:
            # evaluate densely under the expanded plan mask (same math).
            mask = sga.build_sparse_mask(plan, part_q, part_k)[:n_q, :n_k]
            if extra_mask is not None:
                mask = attention.combine_masks(mask, extra_mask)
            out_h, weights_h = attention.dense_attention(qh, kh, vh, mask)
            maps.append(np.array(T.value_of(weights_h)) if record else None)
        outs.append(out_h)
    return T.matmul(T.concat_cols(outs), w[f"{prefix}_wo"]), maps


def _feed_forward(x, weights: ModelWeights, prefix: str):
    w = weights.params
    hidden = T.gelu(T.add_bias(T.matmul(x, w[f"{prefix}_ff1"]), w[f"{prefix}_ff1_b"]))
    return T.add_bias(T.matmul(hidden, w[f"{prefix}_ff2"]), w[f"{prefix}_ff2_b"])


def encoder_forward(
    embeddings,
    weights: ModelWeights,
    plans: Optional[PlanBundle] = None,
    record: bool = False,
) -> EncoderOutput:
    """PEG -> self-attention -> add & norm -> feed-forward -> add & norm, per layer."""
    cfg = weights.config
    part = sga.partition(weights.length, cfg.blocks)
    h = embeddings
    all_maps = []
    w = weights.params
    for i in range(cfg.layers_enc):
        h = _peg_rows(h, w[f"enc{i}_peg"], weights.grid)
        layer_plans = plans.enc[i] if plans is not None and plans.enc is not None else None
        attn_out, maps = _multi_head(h, h, weights, f"enc{i}", layer_plans, part, part, None, record)
        h = T.layer_norm(T.add(h, attn_out), w[f"enc{i}_ln1_g"], w[f"enc{i}_ln1_b"])
        h = T.layer_norm(T.add(h, _feed_forward(h, weights, f"enc{i}")), w[f"enc{i}_ln2_g"], w[f"enc{i}_ln2_b"])
        all_maps.append(maps)
    return EncoderOutput(context=h, attn=all_maps)


def decoder_forward(
    prev_tokens,
    encoder_out: EncoderOutput,
    weights: ModelWeights,
    self_plans: Optional[list] = None,  # [layer][head]
    cross_plans: Optional[list] = None,
    record: bool = False,
):
    """Causal decoder over a START-prepended prefix with cross attention.

    Returns (logits steps x vocab, self_maps, cross_maps). Row l of the
    logits depends only on prev_tokens[0..l] and the encoder output.
    """
    cfg = weights.config
    prev = np.asarray(prev_tokens, dtype=np.int64)
    if prev.ndim != 1 or prev.size < 1 or prev.size > weights.length:
        raise SequenceError(f"decoder prefix length {prev.size} invalid (max {weights.length})")
    if prev[0] != cfg.start_token:
        raise SequenceError("decoder input must begin with START")
    if np.any(prev[1:] == cfg.start_token):
        raise SequenceError("START appears after position 0")
    if prev.min() < 0 or prev.max() > cfg.start_token:
        raise VocabularyError("decoder token outside embedding table")

    steps = prev.size
    w = weights.params
    part = sga.partition(weights.length, cfg.blocks)
    context = encoder_out.context

    h = T.add(T.gather_rows(w["dec_tok_emb"], prev), T.gather_rows(w["dec_pos"], np.arange(steps)))
    peg_pos = _peg_rows(context, w["dec_peg"], weights.grid)
    h = T.add(h, T.gather_rows(peg_pos, np.arange(steps)))

    causal = attention.causal_mask(steps)
    self_maps_all, cross_maps_all = [], []
    for i in range(cfg.layers_dec):
        sp = self_plans[i] if self_plans is not None else None
        a, self_maps = _multi_head(h, h, weights, f"dec{i}_self", sp, part, part, causal, record)
        h = T.layer_norm(T.add(h, a), w[f"dec{i}_ln1_g"], w[f"dec{i}_ln1_b"])
        cp = cross_plans[i] if cross_plans is not None else None
        c, cross_maps = _multi_head(h, context, weights, f"dec{i}_cross", cp, part, part, None, record)
        h = T.layer_norm(T.add(h, c), w[f"dec{i}_ln2_g"], w[f"dec{i}_ln2_b"])
        h = T.layer_norm(T.add(h, _feed_forward(h, weights, f"dec{i}")), w[f"dec{i}_ln3_g"], w[f"dec{i}_ln3_b"])
        self_maps_all.append(self_maps)
        cross_maps_all.append(cross_maps)
    logits = T.matmul(h, w["out_head"])
    return logits, self_maps_all, cross_maps_all


@dataclass
class GuidingResult:
    logits: np.ndarray
    encoder: EncoderOutput
    dec_self_attn: list
    dec_cross_attn: list


def guiding_forward(
    x: TokenGrid,
    p: TokenGrid,
    weights: ModelWeights,
    decoder_tokens: Optional[np.ndarray] = None,
    record: bool = True,
) -> GuidingResult:
    """Dense forward pass exposing every attention map.

    `decoder_tokens` is the complete token sequence the decoder is forced
    over; by default the (possibly masked) input grid itself is used.
    """
    enc = encoder_forward(embed_encoder(x, p, weights), weights, plans=None, record=record)
    seq = x.flat() if decoder_tokens is None else np.asarray(decoder_tokens, dtype=np.int64)
    if seq.size != weights.length:
        raise SequenceError(f"decoder sequence length {seq.size} != {weights.length}")
    prev = np.concatenate([[weights.config.start_token], seq[:-1]])
    logits, self_maps, cross_maps = decoder_forward(prev, enc, weights, None, None, record=record)
    return GuidingResult(logits=T.value_of(logits), encoder=enc, dec_self_attn=self_maps, dec_cross_attn=cross_maps)


# ---------------------------------------------------------------------------
# resolution transfer
# ---------------------------------------------------------------------------


def bilinear_resize_table(table: np.ndarray, grid_src: tuple, grid_dst: tuple) -> np.ndarray:
    """Resize a positional table arranged on grid_src to grid_dst (align corners)."""
    hs, ws = grid_src
    hd, wd = grid_dst
    table = np.asarray(table, dtype=np.float64)
    if table.shape[0] != hs * ws:
        raise ShapeError(f"table rows {table.shape[0]} != grid {grid_src}")
    if (hs, ws) == (hd, wd):
        return table.copy()
    src = table.reshape(hs, ws, -1)
    ys = np.zeros(hd) if hd == 1 else np.arange(hd) * (hs - 1) / (hd - 1)
    xs = np.zeros(wd) if wd == 1 else np.arange(wd) * (ws - 1) / (wd - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, hs - 1)
    x1 = np.minimum(x0 + 1, ws - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    out = (
        src[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + src[np.ix_(y0, x1)] * (1 - wy) * wx
        + src[np.ix_(y1, x0)] * wy * (1 - wx)
        + src[np.ix_(y1, x1)] * wy * wx
    )
    return out.reshape(hd * wd, table.shape[1])


def init_from_guiding(weights_low: ModelWeights, config_high: ModelConfig, grid: Optional[tuple] = None) -> ModelWeights:
    """Start a high-resolution model from trained low-resolution weights.

    Every shared-shape parameter is copied; the two positional tables are
    extended by bilinear interpolation over their token-grid arrangement.
    """
    src_cfg = weights_low.config
    for field_ in dataclasses.fields(ModelConfig):
        if field_.name in ("grid_high", "grid_low"):
            continue
        if getattr(src_cfg, field_.name) != getattr(config_high, field_.name):
            raise ConfigError(f"config field {field_.name} differs between models")
    target = tuple(grid) if grid is not None else config_high.grid_high
    params = {}
    for name, value in weights_low.params.items():
        arr = np.array(T.value_of(value))
        if name in ("enc_pos", "dec_pos"):
            params[name] = bilinear_resize_table(arr, weights_low.grid, target)
        else:
            params[name] = arr.copy()
    return ModelWeights(config_high, target, params)


# ---------------------------------------------------------------------------
# checkpoints: directory of SGAT tensors + JSON manifest
# ---------------------------------------------------------------------------


def save_checkpoint(directory, weights: ModelWeights) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": weights.config.to_dict(),
        "grid": list(weights.grid),
        "params": {name: f"{name}.sgat" for name in sorted(weights.params)},
    }
    for name in sorted(weights.params):
        write_sgat(directory / f"{name}.sgat", T.value_of(weights.params[name]))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> ModelWeights:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = ModelConfig.from_dict(manifest["config"])
    grid = tuple(manifest["grid"])
    params = {name: read_sgat(directory / fname) for name, fname in manifest["params"].items()}
    expected = parameter_shapes(config, grid)
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            raise ConfigError(f"checkpoint parameter {name} missing or misshaped")
    return ModelWeights(config, grid, params)
