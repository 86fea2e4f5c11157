"""Toy mixture-of-experts network: layers, top-k routing, dense forward,
and calibration-time activation/frequency capture.

Conventions: token batches are matrices with tokens along columns
(d_model x n_tokens). Each expert is a two-matrix FFN
E(x) = W_down @ silu(W_up @ x), with roles Up (hidden x d_model) and
Down (d_model x hidden). The router W_g and the classifier head are never
compressed, only the expert weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import DegenerateInputError, ShapeError
from .linalg import as_matrix


class Role(Enum):
    """Which weight slot of an expert a matrix occupies."""

    UP = "up"
    DOWN = "down"


ROLES = (Role.UP, Role.DOWN)


def silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass(frozen=True)
class MoELayer:
    """One MoE block: router weights plus N two-matrix experts."""

    gate: np.ndarray                      # (N, d_model)
    experts: list[dict[Role, np.ndarray]]
    top_k: int

    def __post_init__(self):
        gate = as_matrix(self.gate, "gate")
        object.__setattr__(self, "gate", gate)
        n = gate.shape[0]
        if len(self.experts) != n:
            raise ShapeError(f"gate rows {n} != expert count {len(self.experts)}")
        if not 1 <= self.top_k <= n:
            raise ShapeError(f"top_k={self.top_k} outside [1, {n}]")
        up_shape = down_shape = None
        for i, expert in enumerate(self.experts):
            if set(expert) != set(ROLES):
                raise ShapeError(f"expert {i} must define exactly the roles {[r.value for r in ROLES]}")
            up = as_matrix(expert[Role.UP], f"expert {i} up")
            down = as_matrix(expert[Role.DOWN], f"expert {i} down")
            expert[Role.UP], expert[Role.DOWN] = up, down
            if up_shape is None:
                up_shape, down_shape = up.shape, down.shape
            elif up.shape != up_shape or down.shape != down_shape:
                raise ShapeError(f"expert {i} shapes differ from expert 0")
            if up.shape[1] != gate.shape[1]:
                raise ShapeError(f"expert {i} up cols {up.shape[1]} != d_model {gate.shape[1]}")
            if down.shape[1] != up.shape[0]:
                raise ShapeError(f"expert {i} down cols {down.shape[1]} != hidden {up.shape[0]}")

    @property
    def n_experts(self) -> int:
        return self.gate.shape[0]

    @property
    def d_model(self) -> int:
        return self.gate.shape[1]

    @property
    def hidden(self) -> int:
        return self.experts[0][Role.UP].shape[0]

    @property
    def d_out(self) -> int:
        return self.experts[0][Role.DOWN].shape[0]


@dataclass(frozen=True)
class MoEModel:
    """Stack of MoE layers followed by a linear classifier head."""

    layers: list[MoELayer]
    head: np.ndarray  # (num_classes, d_model of last layer output)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        head = as_matrix(self.head, "head")
        object.__setattr__(self, "head", head)
        if head.shape[0] < 2:
            raise ShapeError("head must produce at least 2 classes")
        d = self.layers[0].d_model
        for i, layer in enumerate(self.layers):
            if layer.d_model != d:
                raise ShapeError(f"layer {i} expects d_model {layer.d_model}, chain provides {d}")
            d = layer.d_out
        if head.shape[1] != d:
            raise ShapeError(f"head cols {head.shape[1]} != final layer output dim {d}")

    @property
    def num_classes(self) -> int:
        return self.head.shape[0]


@dataclass(frozen=True)
class RoutingTrace:
    """Per-token selections/weights and per-expert selection counts."""

    selected: np.ndarray  # (T, k) expert indices, descending logit order
    weights: np.ndarray   # (T, k) gating weights, sum to 1 per token
    counts: np.ndarray    # (N,) selection counts

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]

    @property
    def top_k(self) -> int:
        return self.selected.shape[1]


@dataclass
class GramStats:
    """Per-expert activation Gram matrices for one layer.

    grams[role][i] accumulates X_i @ X_i.T over the tokens routed to expert i,
    where X_i holds that expert's role inputs along columns (layer inputs for
    Up, post-activation hidden vectors for Down). tokens[i] counts them.
    """

    grams: dict[Role, list[np.ndarray]]
    tokens: np.ndarray  # (N,) int64

    def total_gram(self, role: Role) -> np.ndarray:
        """Sum of per-expert Grams, in expert order (deterministic)."""
        out = np.zeros_like(self.grams[role][0])
        for g in self.grams[role]:
            out += g
        return out


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------

def topk_select(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits, ties broken toward the lower index.

    Returned in descending-logit order (stable, so equal logits keep
    ascending index order).
    """
    order = np.argsort(-logits, kind="stable")
    return order[:k]


def gate(x, layer: MoELayer) -> np.ndarray:
    """Dense length-N gating vector: softmax over the k largest router logits.

    The non-selected entries are exactly zero; the selected ones are the
    softmax of their logits (TopK masks to -inf, softmax over survivors).
    """
    xv = np.ascontiguousarray(x, dtype=np.float64)
    if xv.ndim != 1 or xv.shape[0] != layer.d_model:
        raise ShapeError(f"gate input must be a length-{layer.d_model} vector")
    logits = layer.gate @ xv
    sel = topk_select(logits, layer.top_k)
    out = np.zeros(layer.n_experts)
    out[sel] = _softmax(logits[sel])
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def route_batch(gate_w: np.ndarray, top_k: int, x_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Routing for a token batch: (selected (T,k) indices, weights (T,k))."""
    logits = gate_w @ x_batch  # (N, T)
    t = x_batch.shape[1]
    selected = np.empty((t, top_k), dtype=np.int64)
    weights = np.empty((t, top_k))
    for j in range(t):
        sel = topk_select(logits[:, j], top_k)
        selected[j] = sel
        weights[j] = _softmax(logits[sel, j])
    return selected, weights


def _trace_from_routing(selected: np.ndarray, weights: np.ndarray, n_experts: int) -> RoutingTrace:
    counts = np.bincount(selected.ravel(), minlength=n_experts).astype(np.int64)
    return RoutingTrace(selected=selected, weights=weights, counts=counts)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def layer_forward_dense(layer: MoELayer, x_batch: np.ndarray) -> tuple[np.ndarray, RoutingTrace]:
    """One dense MoE layer over a token batch: y = sum_i G(x)_i E_i(x)."""
    xb = as_matrix(x_batch, "x_batch")
    if xb.shape[0] != layer.d_model:
        raise ShapeError(f"x_batch rows {xb.shape[0]} != d_model {layer.d_model}")
    selected, weights = route_batch(layer.gate, layer.top_k, xb)
    y = np.zeros((layer.d_out, xb.shape[1]))
    for i in range(layer.n_experts):
        rows, slots = np.nonzero(selected == i)
        if rows.size == 0:
            continue
        xi = xb[:, rows]
        hi = silu(layer.experts[i][Role.UP] @ xi)
        yi = layer.experts[i][Role.DOWN] @ hi
        y[:, rows] += weights[rows, slots] * yi
    return y, _trace_from_routing(selected, weights, layer.n_experts)


def moe_forward_dense(model: MoEModel, x_batch) -> tuple[np.ndarray, list[RoutingTrace]]:
    """Full dense forward: chained MoE layers, then head logits.

    Returns (logits (num_classes, T), routing trace per layer).
    """
    h = as_matrix(x_batch, "x_batch")
    traces = []
    for layer in model.layers:
        h, trace = layer_forward_dense(layer, h)
        traces.append(trace)
    return model.head @ h, traces


def expert_frequency(trace: RoutingTrace) -> np.ndarray:
    """Per-expert selection frequency; proportional to counts, sums to 1."""
    total = int(trace.counts.sum())
    if total < 1:
        raise DegenerateInputError("routing trace covers no tokens")
    return trace.counts / float(total)


# ---------------------------------------------------------------------------
# calibration capture
# ---------------------------------------------------------------------------

def capture_calibration(model: MoEModel, calib) -> tuple[list[GramStats], list[RoutingTrace]]:
    """Run calibration tokens through the dense model, accumulating per-expert
    activation Grams (Up: layer inputs; Down: post-activation hidden vectors)
    and routing traces for every layer.

    Accumulation order is layer -> expert -> token, so results are
    run-to-run identical.
    """
    xb = as_matrix(calib, "calibration tokens")
    if xb.shape[1] < 1:
        raise DegenerateInputError("empty calibration batch")
    stats: list[GramStats] = []
    traces: list[RoutingTrace] = []
    h = xb
    for layer in model.layers:
        selected, weights = route_batch(layer.gate, layer.top_k, h)
        d, hid = layer.d_model, layer.hidden
        up_grams = [np.zeros((d, d)) for _ in range(layer.n_experts)]
        down_grams = [np.zeros((hid, hid)) for _ in range(layer.n_experts)]
        y = np.zeros((layer.d_out, h.shape[1]))
        for i in range(layer.n_experts):
            rows, slots = np.nonzero(selected == i)
            if rows.size == 0:
                continue
            xi = h[:, rows]
            hi = silu(layer.experts[i][Role.UP] @ xi)
            up_grams[i] += xi @ xi.T
            down_grams[i] += hi @ hi.T
            y[:, rows] += weights[rows, slots] * (layer.experts[i][Role.DOWN] @ hi)
        trace = _trace_from_routing(selected, weights, layer.n_experts)
        stats.append(GramStats(grams={Role.UP: up_grams, Role.DOWN: down_grams}, tokens=trace.counts.copy()))
        traces.append(trace)
        h = y
    return stats, traces
