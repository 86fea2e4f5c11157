"""Compressed inference and parameter accounting.

A compressed layer carries one pruned base per role plus per-expert low-rank
delta factors. Per token the runtime computes the shared masked-base path
once and adds each selected expert's rank-k correction:

    u_i = W_b_up^masked x + du_i (dv_i x)      h_i = silu(u_i)
    y_i = W_b_down^masked h_i + du'_i (dv'_i h_i)
    y   = sum_{i in TopK} G(x)_i y_i

Trimmed experts have no factors and contribute through the base path only.
Dynamic pruning masks are recomputed per batch and never stored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .factorize import DeltaFactor
from .linalg import as_matrix
from .moe import MoELayer, Role, RoutingTrace, _trace_from_routing, route_batch, silu
from .pruning import PrunedBase, dynamic_mask


@dataclass(frozen=True)
class CompressedLayer:
    """Pruned per-role base, per-expert delta factors, and the untouched router."""

    gate: np.ndarray                            # (N, d_model), never compressed
    base: dict[Role, PrunedBase]
    deltas: dict[int, dict[Role, DeltaFactor]]  # absent key = trimmed expert
    top_k: int
    trimmed: tuple[int, ...] = ()

    def __post_init__(self):
        gate = as_matrix(self.gate, "gate")
        object.__setattr__(self, "gate", gate)
        object.__setattr__(self, "trimmed", tuple(sorted(self.trimmed)))
        n, d = gate.shape
        if not 1 <= self.top_k <= n:
            raise ShapeError(f"top_k={self.top_k} outside [1, {n}]")
        if set(self.base) != {Role.UP, Role.DOWN}:
            raise ShapeError("base must define exactly the Up and Down roles")
        up, down = self.base[Role.UP], self.base[Role.DOWN]
        if up.mask.total_cols != d:
            raise ShapeError(f"up base covers {up.mask.total_cols} columns, d_model is {d}")
        hidden = up.kept.shape[0]
        if down.mask.total_cols != hidden:
            raise ShapeError(f"down base covers {down.mask.total_cols} columns, hidden is {hidden}")
        for i, factors in self.deltas.items():
            if not 0 <= i < n:
                raise ShapeError(f"delta factor for unknown expert {i}")
            if i in self.trimmed:
                raise ParameterError(f"expert {i} is trimmed but still has factors")
            if factors[Role.UP].shape != (hidden, d):
                raise ShapeError(f"expert {i} up factor shape {factors[Role.UP].shape} != ({hidden}, {d})")
            if factors[Role.DOWN].shape != (down.kept.shape[0], hidden):
                raise ShapeError(
                    f"expert {i} down factor shape {factors[Role.DOWN].shape} != "
                    f"({down.kept.shape[0]}, {hidden})"
                )

    @property
    def n_experts(self) -> int:
        return self.gate.shape[0]

    @property
    def d_model(self) -> int:
        return self.gate.shape[1]

    @property
    def hidden(self) -> int:
        return self.base[Role.UP].kept.shape[0]

    @property
    def d_out(self) -> int:
        return self.base[Role.DOWN].kept.shape[0]


@dataclass(frozen=True)
class CompressedModel:
    """Layer stack (compressed, or dense for hybrid probes) plus the head."""

    layers: list  # CompressedLayer | MoELayer
    head: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "head", as_matrix(self.head, "head"))


def _masked_base_matmul(base: PrunedBase, active_ids: np.ndarray, x_full: np.ndarray) -> np.ndarray:
    """W_b^masked @ x using only the active columns / input rows."""
    positions = np.searchsorted(base.kept_col_ids, active_ids)
    return base.kept[:, positions] @ x_full[active_ids, :]


def batch_active_columns(layer: CompressedLayer, x_batch) -> dict[Role, np.ndarray]:
    """Per-role active original column ids for this batch.

    The Up mask scores the batch inputs; the Down mask scores the base-path
    hidden activations silu(W_b_up^masked x) so it is expert-independent.
    """
    xb = as_matrix(x_batch, "x_batch")
    if xb.shape[0] != layer.d_model:
        raise ShapeError(f"x_batch rows {xb.shape[0]} != d_model {layer.d_model}")
    up = layer.base[Role.UP]
    active_up = dynamic_mask(up, xb[up.kept_col_ids, :])
    h_base = silu(_masked_base_matmul(up, active_up, xb))
    down = layer.base[Role.DOWN]
    active_down = dynamic_mask(down, h_base[down.kept_col_ids, :])
    return {Role.UP: active_up, Role.DOWN: active_down}


def compressed_forward(layer: CompressedLayer, x_batch) -> tuple[np.ndarray, RoutingTrace]:
    """Eq.-style compressed layer forward over one batch.

    Dynamic masks are computed once for the batch; gating is identical to the
    dense router. Returns (y_batch, routing trace).
    """
    xb = as_matrix(x_batch, "x_batch")
    if xb.shape[0] != layer.d_model:
        raise ShapeError(f"x_batch rows {xb.shape[0]} != d_model {layer.d_model}")
    active = batch_active_columns(layer, xb)
    up, down = layer.base[Role.UP], layer.base[Role.DOWN]
    u_base = _masked_base_matmul(up, active[Role.UP], xb)  # (hidden, T)

    selected, weights = route_batch(layer.gate, layer.top_k, xb)
    down_positions = np.searchsorted(down.kept_col_ids, active[Role.DOWN])
    down_masked = down.kept[:, down_positions]

    y = np.zeros((layer.d_out, xb.shape[1]))
    for i in range(layer.n_experts):
        rows, slots = np.nonzero(selected == i)
        if rows.size == 0:
            continue
        factors = layer.deltas.get(i)
        u_i = u_base[:, rows]
        if factors is not None:
            f = factors[Role.UP]
            u_i = u_i + f.u @ (f.v @ xb[:, rows])
        h_i = silu(u_i)
        y_i = down_masked @ h_i[active[Role.DOWN], :]
        if factors is not None:
            f = factors[Role.DOWN]
            y_i = y_i + f.u @ (f.v @ h_i)
        y[:, rows] += weights[rows, slots] * y_i
    return y, _trace_from_routing(selected, weights, layer.n_experts)


def compressed_model_forward(model: CompressedModel, x_batch) -> tuple[np.ndarray, list[RoutingTrace]]:
    """Chained forward over one batch; layers may be compressed or dense."""
    from .moe import layer_forward_dense  # local import avoids cycle at module load

    h = as_matrix(x_batch, "x_batch")
    traces = []
    for layer in model.layers:
        if isinstance(layer, MoELayer):
            h, trace = layer_forward_dense(layer, h)
        else:
            h, trace = compressed_forward(layer, h)
        traces.append(trace)
    return model.head @ h, traces


def trim_deltas(layer: CompressedLayer, freq, t: int) -> CompressedLayer:
    """Drop the delta factors of the t lowest-frequency experts.

    Ties trim the lower expert index first; gating and base are unchanged.
    """
    f = np.asarray(freq, dtype=np.float64)
    if f.shape != (layer.n_experts,):
        raise ShapeError(f"freq shape {f.shape} != ({layer.n_experts},)")
    if not 0 <= t <= layer.n_experts:
        raise ParameterError(f"trim count {t} outside [0, {layer.n_experts}]")
    if t == 0:
        return layer
    order = np.argsort(f, kind="stable")  # ascending frequency, lower index first
    to_trim = set(int(i) for i in order[:t])
    deltas = {i: factors for i, factors in layer.deltas.items() if i not in to_trim}
    trimmed = tuple(sorted(set(layer.trimmed) | to_trim))
    return CompressedLayer(gate=layer.gate, base=layer.base, deltas=deltas,
                           top_k=layer.top_k, trimmed=trimmed)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamCounts:
    """Closed-formula parameter counts plus the differing literal expression.

    `total` is the census-consistent count (factors + surviving base mass);
    `literal` is the published shorthand that books s-dependent base storage
    as s/2*m (resp. s*m) instead of the surviving (1 - s/2)*m (resp.
    (1 - s)*m). `literal_differs` flags the discrepancy.
    """

    original: float
    factors: float
    base: float
    total: float
    literal: float
    literal_differs: bool
    decomposed: float | None = None


def static_param_count(n: int, m: float, p: float, s: float) -> ParamCounts:
    """Stored parameters per layer for n experts of m parameters each.

    original n*m; after decomposition (n+1)*m; compressed n*p*m of factors
    plus the surviving base (1 - s/2)*m.
    """
    _check_ps(p, s)
    factors = n * p * m
    base = (1.0 - s / 2.0) * m
    literal = (n * p + s / 2.0) * m
    total = factors + base
    return ParamCounts(original=n * m, factors=factors, base=base, total=total,
                       literal=literal, literal_differs=bool(literal != total),
                       decomposed=(n + 1) * m)


def active_param_count(k_top: int, m: float, p: float, s: float) -> ParamCounts:
    """Active multiply-weights per token: k_top*p*m of factors plus the base
    surviving full static+dynamic masking, (1 - s)*m."""
    _check_ps(p, s)
    factors = k_top * p * m
    base = (1.0 - s) * m
    literal = (k_top * p + s) * m
    total = factors + base
    return ParamCounts(original=k_top * m, factors=factors, base=base, total=total,
                       literal=literal, literal_differs=bool(literal != total))


def _check_ps(p: float, s: float) -> None:
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"p must be in (0, 1], got {p}")
    if not 0.0 <= s < 1.0:
        raise ParameterError(f"s must be in [0, 1), got {s}")


@dataclass(frozen=True)
class ParamReport:
    """Per-layer accounting: closed formulas next to the exact census."""

    n: int
    m: int
    k_top: int
    p: float
    s: float
    original_static: float
    compressed_static: float
    original_active: float
    compressed_active: float
    literal_static: float
    literal_active: float
    literal_differs: bool
    census_static: int
    census_active_per_token: float


def census_static_params(layer: CompressedLayer) -> int:
    """Entries actually stored for the expert path: kept base + factors."""
    total = sum(layer.base[role].kept.size for role in (Role.UP, Role.DOWN))
    for factors in layer.deltas.values():
        for role in (Role.UP, Role.DOWN):
            total += factors[role].u.size + factors[role].v.size
    return int(total)


def census_active_params(layer: CompressedLayer, x_batch) -> float:
    """Average active multiply-weights per token in one forward call."""
    xb = as_matrix(x_batch, "x_batch")
    active = batch_active_columns(layer, xb)
    base_per_token = (layer.hidden * active[Role.UP].size
                      + layer.d_out * active[Role.DOWN].size)
    selected, _ = route_batch(layer.gate, layer.top_k, xb)
    factor_total = 0
    for i in range(layer.n_experts):
        hits = int(np.count_nonzero(selected == i))
        if hits and i in layer.deltas:
            factors = layer.deltas[i]
            per_token = sum(factors[r].u.size + factors[r].v.size for r in (Role.UP, Role.DOWN))
            factor_total += hits * per_token
    return base_per_token + factor_total / xb.shape[1]


def param_report(layer: CompressedLayer, p: float, s: float, x_batch) -> ParamReport:
    """Assemble the accounting report for one compressed layer."""
    d, hidden, d_out = layer.d_model, layer.hidden, layer.d_out
    m = hidden * d + d_out * hidden  # per-expert parameters over both roles
    n = layer.n_experts
    stat = static_param_count(n, m, p, s)
    act = active_param_count(layer.top_k, m, p, s)
    return ParamReport(
        n=n, m=m, k_top=layer.top_k, p=p, s=s,
        original_static=stat.original, compressed_static=stat.total,
        original_active=act.original, compressed_active=act.total,
        literal_static=stat.literal, literal_active=act.literal,
        literal_differs=stat.literal_differs or act.literal_differs,
        census_static=census_static_params(layer),
        census_active_per_token=census_active_params(layer, x_batch),
    )
