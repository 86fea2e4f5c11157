"""End-to-end compression: calibrate, merge, factorize, prune, evaluate.

Stage order is fixed: calibration capture, Fisher accumulation, merging,
delta factorization, base pruning, packaging, evaluation. Layers are
independent once calibration statistics exist, so the per-layer stages
run concurrently when D2MOE_THREADS allows; results are gathered in
layer order so outputs never depend on scheduling.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace as dc_replace

import numpy as np
from scipy.special import logsumexp

from .config import CompressionConfig
from .errors import ConfigError, ParameterError, ShapeError
from .factorize import DeltaFactor, RankPolicy, truncation_aware_svd, weighted_error
from .gradients import fisher_accumulate
from .linalg import as_matrix
from .merge import (
    compute_deltas,
    fisher_fallback_entries,
    fisher_merge,
    frequency_merge,
    mean_merge,
)
from .moe import (
    MoELayer,
    MoEModel,
    Role,
    capture_calibration,
    expert_frequency,
    moe_forward_dense,
)
from .pruning import PrunedBase, static_metric_from_gram, static_prune
from .report import CompressionReport, LayerRecord
from .runtime import (
    CompressedLayer,
    CompressedModel,
    compressed_model_forward,
    param_report,
    trim_deltas,
)

__version__ = "0.1.0"


def worker_count(n_tasks: int) -> int:
    """Workers for per-layer stages, capped by the D2MOE_THREADS env var."""
    raw = os.environ.get("D2MOE_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError as exc:
            raise ConfigError(f"D2MOE_THREADS must be an integer, got {raw!r}") from exc
        if cap < 1:
            raise ConfigError(f"D2MOE_THREADS must be at least 1, got {cap}")
    return max(1, min(n_tasks, cap))


def _map_layers(fn, items):
    workers = worker_count(len(items))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class LayerStats:
    """Calibration statistics one layer's compression depends on."""

    grams: dict[Role, list[np.ndarray]]
    total_gram: dict[Role, np.ndarray]
    frequency: np.ndarray
    fisher: list[dict[Role, np.ndarray]] | None


def compute_layer_stats(model: MoEModel, calib_tokens, cfg: CompressionConfig,
                        labels=None) -> list[LayerStats]:
    """Capture Grams, routing frequencies, and (if the merge needs it) Fisher
    blocks for every layer in one calibration pass."""
    calib = as_matrix(calib_tokens, "calib_tokens")
    gram_stats, traces = capture_calibration(model, calib)
    need_fisher = cfg.merge_method in ("fisher", "fisher-scalar")
    fisher = None
    if need_fisher:
        if cfg.fisher_mode == "data-label" and labels is None:
            raise ConfigError("fisher_mode=data-label requires calibration labels")
        fisher = fisher_accumulate(model, calib, mode=cfg.fisher_mode,
                                   seed=cfg.seed, labels=labels)
    stats = []
    for l, layer in enumerate(model.layers):
        grams = {role: list(gram_stats[l].grams[role]) for role in (Role.UP, Role.DOWN)}
        total = {role: gram_stats[l].total_gram(role) for role in (Role.UP, Role.DOWN)}
        stats.append(LayerStats(
            grams=grams, total_gram=total,
            frequency=expert_frequency(traces[l]),
            fisher=fisher.fisher[l] if fisher is not None else None,
        ))
    return stats


# ---------------------------------------------------------------------------
# per-layer stages
# ---------------------------------------------------------------------------

def merge_layer(layer: MoELayer, stats: LayerStats, cfg: CompressionConfig):
    """Merge expert weights into a base per role; returns bases, deltas, and
    the count of Fisher entries that fell back to the plain mean."""
    bases: dict[Role, np.ndarray] = {}
    deltas: dict[Role, list[np.ndarray]] = {}
    fallback = 0
    for role in (Role.UP, Role.DOWN):
        weights = [expert[role] for expert in layer.experts]
        if cfg.merge_method == "mean":
            base = mean_merge(weights)
        elif cfg.merge_method == "frequency":
            base = frequency_merge(weights, stats.frequency)
        else:
            fishers = [stats.fisher[i][role] for i in range(layer.n_experts)]
            base = fisher_merge(weights, fishers, epsilon=cfg.epsilon,
                                scalar=(cfg.merge_method == "fisher-scalar"))
            fallback += fisher_fallback_entries(fishers, epsilon=cfg.epsilon)
        bases[role] = base
        deltas[role] = compute_deltas(weights, base)
    return bases, deltas, fallback


def factorize_layer(deltas: dict[Role, list[np.ndarray]], stats: LayerStats,
                    cfg: CompressionConfig, policy: RankPolicy):
    """Truncation-aware SVD of every expert delta; returns factors keyed by
    expert, the rank used per role, and per-expert whitened residuals."""
    factors: dict[int, dict[Role, DeltaFactor]] = {}
    ranks: dict[str, int] = {}
    errors: dict[str, list[float]] = {}
    for role in (Role.UP, Role.DOWN):
        role_deltas = deltas[role]
        m, n = role_deltas[0].shape
        k = policy.rank_for(m, n)
        ranks[role.value] = k
        errors[role.value] = []
        for i, delta in enumerate(role_deltas):
            factor = truncation_aware_svd(delta, stats.grams[role][i], k,
                                          damping=cfg.damping, expert_id=i, role=role)
            factors.setdefault(i, {})[role] = factor
            errors[role.value].append(weighted_error(delta, factor, stats.grams[role][i]))
    return factors, ranks, errors


def prune_layer(bases: dict[Role, np.ndarray], stats: LayerStats,
                cfg: CompressionConfig) -> dict[Role, PrunedBase]:
    """Static half of semi-dynamic pruning for both base matrices."""
    pruned = {}
    for role in (Role.UP, Role.DOWN):
        metric = static_metric_from_gram(bases[role], stats.total_gram[role])
        pruned[role] = static_prune(bases[role], metric, cfg.sparsity)
    return pruned


def build_compressed_layer(layer: MoELayer, stats: LayerStats, cfg: CompressionConfig,
                           ratio: float | None = None) -> CompressedLayer:
    """Run merge, factorization, and pruning for one layer.

    `ratio` overrides the config's rank policy with a plain ratio policy;
    sensitivity probing uses that to sweep one knob.
    """
    if ratio is not None:
        policy = RankPolicy(mode="ratio", p=float(ratio))
    else:
        policy = cfg.rank_policy()
    bases, deltas, _ = merge_layer(layer, stats, cfg)
    factors, _, _ = factorize_layer(deltas, stats, cfg, policy)
    pruned = prune_layer(bases, stats, cfg)
    built = CompressedLayer(gate=layer.gate, base=pruned, deltas=factors, top_k=layer.top_k)
    if cfg.trim > 0:
        built = trim_deltas(built, stats.frequency, cfg.trim)
    return built


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    loss: float
    perplexity: float
    n_tokens: int


def _forward_any(model, x_batch):
    if isinstance(model, MoEModel):
        logits, _ = moe_forward_dense(model, x_batch)
    else:
        logits, _ = compressed_model_forward(model, x_batch)
    return logits


def evaluate(model, tokens, labels, batch_size: int = 128) -> EvalResult:
    """Mean cross-entropy of the model on labeled tokens, batched.

    Dynamic base masks depend on batch composition, so for compressed
    models the loss is defined relative to this batch size.
    """
    x = as_matrix(tokens, "tokens")
    y = np.asarray(labels)
    if y.ndim != 1 or y.size != x.shape[1]:
        raise ShapeError(f"labels shape {y.shape} does not match {x.shape[1]} tokens")
    if y.size == 0:
        raise ParameterError("cannot evaluate on zero tokens")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be positive, got {batch_size}")
    total = 0.0
    for start in range(0, x.shape[1], batch_size):
        xb = x[:, start:start + batch_size]
        yb = y[start:start + batch_size]
        logits = _forward_any(model, xb)
        if np.any(yb < 0) or np.any(yb >= logits.shape[0]):
            raise ParameterError(f"labels must lie in [0, {logits.shape[0]})")
        lse = logsumexp(logits, axis=0)
        total += float(np.sum(lse - logits[yb, np.arange(xb.shape[1])]))
    loss = total / x.shape[1]
    return EvalResult(loss=loss, perplexity=float(np.exp(min(loss, 709.0))),
                      n_tokens=int(x.shape[1]))


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def _report_ratio(policy: RankPolicy, m: int, n: int) -> float:
    if policy.mode == "ratio":
        return policy.p
    if policy.mode == "lossless":
        return 1.0
    return min(1.0, policy.k * (m + n) / (m * n))


def compress(cfg: CompressionConfig, model: MoEModel, calib_tokens, labels=None):
    """Compress every layer of `model` and report what happened.

    Returns (CompressedModel, CompressionReport). `labels` are needed for
    the evaluation records and for data-label Fisher; when omitted, losses
    are reported as 0 and data-label Fisher is rejected.
    """
    cfg.validate()
    calib = as_matrix(calib_tokens, "calib_tokens")
    n_use = min(cfg.calib_samples, calib.shape[1])
    calib_use = calib[:, :n_use]
    labels_use = None if labels is None else np.asarray(labels)[:n_use]

    timings = []
    t0 = time.perf_counter()
    loss_before = 0.0
    if labels_use is not None:
        loss_before = evaluate(model, calib_use, labels_use, batch_size=cfg.batch_size).loss
    timings.append(("evaluate-dense", time.perf_counter() - t0))

    t0 = time.perf_counter()
    stats = compute_layer_stats(model, calib_use, cfg, labels=labels_use)
    timings.append(("calibrate", time.perf_counter() - t0))

    layers = list(model.layers)

    t0 = time.perf_counter()
    merged = _map_layers(lambda lw: merge_layer(lw[0], lw[1], cfg), list(zip(layers, stats)))
    timings.append(("merge", time.perf_counter() - t0))

    policies = [cfg.rank_policy(l) for l in range(len(layers))]
    t0 = time.perf_counter()
    factored = _map_layers(
        lambda args: factorize_layer(args[0][1], args[1], cfg, args[2]),
        list(zip(merged, stats, policies)))
    timings.append(("factorize", time.perf_counter() - t0))

    t0 = time.perf_counter()
    pruned = _map_layers(lambda args: prune_layer(args[0][0], args[1], cfg),
                         list(zip(merged, stats)))
    timings.append(("prune", time.perf_counter() - t0))

    t0 = time.perf_counter()
    built = []
    for l, layer in enumerate(layers):
        factors, ranks, _ = factored[l]
        built_layer = CompressedLayer(gate=layer.gate, base=pruned[l],
                                      deltas=factors, top_k=layer.top_k)
        if cfg.trim > 0:
            built_layer = trim_deltas(built_layer, stats[l].frequency, cfg.trim)
        built.append(built_layer)
    compressed = CompressedModel(layers=built, head=model.head)
    timings.append(("package", time.perf_counter() - t0))

    t0 = time.perf_counter()
    loss_after = 0.0
    if labels_use is not None:
        loss_after = evaluate(compressed, calib_use, labels_use, batch_size=cfg.batch_size).loss
    timings.append(("evaluate-compressed", time.perf_counter() - t0))

    x_census = calib_use[:, :min(cfg.batch_size, n_use)]
    records = []
    for l, built_layer in enumerate(built):
        _, ranks, errors = factored[l]
        fallback = merged[l][2]
        role_shapes = layers[l].experts[0][Role.UP].shape
        p_used = _report_ratio(policies[l], role_shapes[0], role_shapes[1])
        records.append(LayerRecord(
            layer=l,
            rank=ranks,
            fisher_fallback=fallback,
            trimmed=built_layer.trimmed,
            weighted_errors={k: tuple(v) for k, v in errors.items()},
            params=param_report(built_layer, p_used, cfg.sparsity, x_census),
        ))

    report = CompressionReport(config=cfg.to_dict(), seed=cfg.seed,
                               loss_before=loss_before, loss_after=loss_after,
                               layers=tuple(records), timings=tuple(timings),
                               version=__version__)
    return compressed, report


def ratio_frontier(model: MoEModel, calib_tokens, labels, cfg: CompressionConfig,
                   ratios) -> list[tuple[float, float, int]]:
    """Sweep global delta ratios; returns (ratio, loss, stored params) points."""
    points = []
    for ratio in ratios:
        cfg_r = dc_replace(cfg, rank_mode="ratio", delta_ratio=float(ratio),
                           per_layer_ratios=None)
        compressed, rep = compress(cfg_r, model, calib_tokens, labels=labels)
        stored = sum(rec.params.census_static for rec in rep.layers)
        points.append((float(ratio), rep.loss_after, int(stored)))
    return points
