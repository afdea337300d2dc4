"""Autoregressive editing: forced decoding, top-k sampling, and ranking.

Unmasked positions are forced to the original tokens and contribute no
probability; masked positions are sampled from the top-k truncated softmax
and accumulate log-probability. Candidates are generated from independent
per-candidate random streams, so a worker pool of any size produces the
same set as a sequential run, and are ranked by their summed (joint)
log-probability.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model as mdl
from . import sga
from . import tape as T
from .errors import DegenerateRowError, ParameterError, ShapeError, ValidationError
from .quantizer import TokenGrid, apply_mask
from .rng import substream


def topk_sample(logits: np.ndarray, k: int, rng) -> int:
    """Sample proportionally to softmax over the k highest logits.

    Ties at the k-th logit are resolved toward lower indices; probability
    outside the kept set is exactly zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError(f"logits must be 1D, got {logits.shape}")
    if k < 1 or k > logits.size:
        raise ParameterError(f"top-k {k} out of range [1, {logits.size}]")
    kept = np.lexsort((np.arange(logits.size), -logits))[:k]
    shifted = logits[kept] - logits[kept].max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    u = rng.random()
    pick = int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, k - 1))
    return int(kept[pick])


def topk_logprob(logits: np.ndarray, k: int, index: int) -> float:
    """Log-probability of `index` under the normalized top-k distribution."""
    logits = np.asarray(logits, dtype=np.float64)
    kept = np.lexsort((np.arange(logits.size), -logits))[:k]
    where = np.nonzero(kept == index)[0]
    if where.size == 0:
        raise ValidationError(f"index {index} not inside the top-{k} set")
    shifted = logits[kept] - logits[kept].max()
    logz = float(np.log(np.exp(shifted).sum()))
    return float(shifted[where[0]] - logz)


@dataclass
class EditRequest:
    """One edit: pre-mask token grids, edited semantic grids, and masks at
    both resolutions (high drives the output, low drives the guiding pass)."""

    tokens: TokenGrid
    semantic: TokenGrid
    mask: np.ndarray
    tokens_low: TokenGrid
    semantic_low: TokenGrid
    mask_low: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.mask_low = np.asarray(self.mask_low, dtype=bool)
        for grid, m, tag in ((self.tokens, self.mask, "high"), (self.tokens_low, self.mask_low, "low")):
            if grid.tokens.shape != m.shape:
                raise ShapeError(f"{tag} mask shape {m.shape} != grid {grid.tokens.shape}")
        for sem in (self.semantic, self.semantic_low):
            if sem.masked_positions().any():
                raise ValidationError("semantic grids may not contain MASK")


@dataclass
class Candidate:
    tokens: TokenGrid
    logprob: float
    rank: int = -1


@dataclass
class CandidateSet:
    candidates: list

    def __post_init__(self):
        for c in self.candidates:
            if c.tokens.masked_positions().any():
                raise ValidationError("completed candidate still contains MASK")

    def to_json(self) -> str:
        rows = [
            {"tokens": json.loads(c.tokens.to_json()), "logprob": c.logprob, "rank": c.rank}
            for c in self.candidates
        ]
        return json.dumps(rows, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "CandidateSet":
        rows = json.loads(text)
        cands = [
            Candidate(TokenGrid.from_json(json.dumps(r["tokens"])), float(r["logprob"]), int(r["rank"]))
            for r in rows
        ]
        return CandidateSet(cands)


def rank_candidates(cands: CandidateSet) -> CandidateSet:
    """Stable descending sort by log-probability; ties keep generation order."""
    for c in cands.candidates:
        if not np.isfinite(c.logprob):
            raise ValidationError("candidate log-probability not finite")
    ordered = sorted(cands.candidates, key=lambda c: -c.logprob)
    return CandidateSet([Candidate(c.tokens, c.logprob, rank=i) for i, c in enumerate(ordered)])


def _forced_decode(
    tokens: TokenGrid,
    semantic: TokenGrid,
    mask: np.ndarray,
    weights: mdl.ModelWeights,
    plans: mdl.PlanBundle,
    top_k: int,
    rng,
) -> tuple[TokenGrid, float]:
    """Decode positions row-major; force originals at unmasked positions,
    sample masked positions with top-k, and accumulate their log-probs."""
    cfg = weights.config
    k_eff = min(top_k, cfg.vocab)
    if top_k < 1:
        raise ParameterError(f"top-k must be >= 1, got {top_k}")
    enc_in = apply_mask(tokens, mask)
    enc_out = mdl.encoder_forward(mdl.embed_encoder(enc_in, semantic, weights), weights, plans=plans)
    original = tokens.flat()
    masked = np.asarray(mask, dtype=bool).ravel()
    seq = original.copy()
    logprob = 0.0
    for pos in np.flatnonzero(masked):
        prev = np.concatenate([[cfg.start_token], seq[:pos]])
        try:
            logits, _, _ = mdl.decoder_forward(prev, enc_out, weights, plans.dec_self, plans.dec_cross)
        except DegenerateRowError as exc:
            raise DegenerateRowError(f"decoding position {int(pos)}: {exc}") from exc
        row = T.value_of(logits)[pos]
        choice = topk_sample(row, k_eff, rng)
        logprob += topk_logprob(row, k_eff, choice)
        seq[pos] = choice
    completed = TokenGrid(seq.reshape(tokens.tokens.shape), tokens.vocab)
    return completed, float(logprob)


def plans_from_maps(forced: mdl.GuidingResult, config: mdl.ModelConfig) -> mdl.PlanBundle:
    """Pool every recorded attention map into block affinities and select
    neighborhood+top-K plans, per role, layer, and head."""

    def plan_for(role: str, layer: int, head: int) -> sga.SparsityPlan:
        maps = {"enc": forced.encoder.attn, "dec_self": forced.dec_self_attn, "dec_cross": forced.dec_cross_attn}[role]
        affinity = sga.block_affinity(maps[layer][head], config.blocks)
        return sga.select_plan(affinity, config.top_k, config.radius, provenance="guided", layer=layer, head=head)

    return mdl.PlanBundle.uniform(config, plan_for)


@dataclass
class GuidePlanResult:
    completion_low: TokenGrid
    plans: mdl.PlanBundle
    logprob_low: float


def guide_and_plan(
    request: EditRequest,
    guiding_weights: mdl.ModelWeights,
    config: mdl.ModelConfig,
    seed: int = 0,
    top_k: Optional[int] = None,
) -> GuidePlanResult:
    """Run the low-resolution edit densely and turn its attention into plans.

    The decoder maps come from one forced pass over the completed low-res
    sequence, so every map is a full square matrix; each map is pooled into
    a block-affinity matrix and converted to a neighborhood+top-K plan.
    """
    k = config.top_k if top_k is None else top_k
    completion, logprob = _forced_decode(
        request.tokens_low,
        request.semantic_low,
        request.mask_low,
        guiding_weights,
        mdl.PlanBundle.dense(),
        max(k, 1) if k else 1,
        substream(seed, "guide-sample"),
    )
    enc_in = apply_mask(request.tokens_low, request.mask_low)
    forced = mdl.guiding_forward(enc_in, request.semantic_low, guiding_weights, decoder_tokens=completion.flat())
    return GuidePlanResult(completion_low=completion, plans=plans_from_maps(forced, config), logprob_low=logprob)


def autoregressive_edit(
    request: EditRequest,
    sga_weights: mdl.ModelWeights,
    plans: mdl.PlanBundle,
    top_k: int = 100,
    n_samples: int = 50,
    n_keep: int = 10,
    seed: int = 0,
    workers: int = 1,
) -> CandidateSet:
    """Sample n_samples completions, rank by joint log-prob, keep n_keep."""
    if n_samples < 1 or n_keep < 1:
        raise ParameterError("n_samples and n_keep must be >= 1")

    def one(i: int) -> Candidate:
        rng = substream(seed, f"candidate-{i}")
        tokens, logprob = _forced_decode(
            request.tokens, request.semantic, request.mask, sga_weights, plans, top_k, rng
        )
        return Candidate(tokens=tokens, logprob=logprob)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cands = list(pool.map(one, range(n_samples)))
    else:
        cands = [one(i) for i in range(n_samples)]

    unmasked = ~np.asarray(request.mask, dtype=bool)
    originals = request.tokens.tokens
    for c in cands:
        if not np.array_equal(c.tokens.tokens[unmasked], originals[unmasked]):
            raise ValidationError("candidate modified an unmasked token")

    ranked = rank_candidates(CandidateSet(cands))
    return CandidateSet(ranked.candidates[:n_keep])


def rescore(
    request: EditRequest,
    sga_weights: mdl.ModelWeights,
    plans: mdl.PlanBundle,
    candidate: TokenGrid,
    top_k: int = 100,
) -> float:
    """Recompute a candidate's joint log-prob with one full forced pass."""
    cfg = sga_weights.config
    k_eff = min(top_k, cfg.vocab)
    enc_in = apply_mask(request.tokens, request.mask)
    enc_out = mdl.encoder_forward(mdl.embed_encoder(enc_in, request.semantic, sga_weights), sga_weights, plans=plans)
    seq = candidate.flat()
    prev = np.concatenate([[cfg.start_token], seq[:-1]])
    logits, _, _ = mdl.decoder_forward(prev, enc_out, sga_weights, plans.dec_self, plans.dec_cross)
    rows = T.value_of(logits)
    total = 0.0
    for pos in np.flatnonzero(np.asarray(request.mask, dtype=bool).ravel()):
        total += topk_logprob(rows[pos], k_eff, int(seq[pos]))
    return float(total)
