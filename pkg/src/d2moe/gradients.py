"""Reverse-mode gradients of the calibration log-likelihood and Fisher
information accumulation.

The discrete top-k routing choice is treated as locally constant (it is
piecewise constant in the parameters, so this is the exact gradient almost
everywhere); the softmax over the surviving logits is differentiated exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .linalg import as_matrix
from .moe import MoEModel, Role, ROLES, _softmax, route_batch, silu, silu_grad

FISHER_MODES = ("sampled-label", "data-label")


@dataclass
class GradientSet:
    """Per-parameter gradients mirroring the model structure."""

    gate_grads: list[np.ndarray]                      # per layer (N, d)
    expert_grads: list[list[dict[Role, np.ndarray]]]  # per layer, expert, role
    head_grad: np.ndarray


@dataclass
class FisherInfo:
    """Elementwise accumulated squared gradients per layer/expert/role.

    Entries are averages over sample_count calibration inputs; experts never
    routed during calibration have exactly-zero blocks.
    """

    fisher: list[list[dict[Role, np.ndarray]]]
    sample_count: int
    mode: str

    def scalar_reduction(self, layer: int, expert: int, role: Role) -> float:
        """Mean of the block's entries (scalar-per-expert Fisher mode)."""
        return float(np.mean(self.fisher[layer][expert][role]))


def _forward_with_cache(model: MoEModel, x: np.ndarray):
    """Single-token forward keeping the activations backward needs."""
    caches = []
    h = x
    for layer in model.layers:
        sel, g = route_batch(layer.gate, layer.top_k, h[:, None])
        sel, g = sel[0], g[0]
        per_expert = {}
        y = np.zeros(layer.d_out)
        for j, i in enumerate(sel):
            a = layer.experts[i][Role.UP] @ h
            hid = silu(a)
            e = layer.experts[i][Role.DOWN] @ hid
            per_expert[int(i)] = (a, hid, e)
            y += g[j] * e
        caches.append((h, sel, g, per_expert))
        h = y
    logits = model.head @ h
    return logits, h, caches


def backward_logloss(model: MoEModel, x, y: int) -> GradientSet:
    """Exact analytic gradient of log softmax(head @ MoE(x))[y] with respect
    to every gate, expert, and head entry."""
    xv = np.ascontiguousarray(x, dtype=np.float64)
    if xv.ndim != 1 or xv.shape[0] != model.layers[0].d_model:
        raise ShapeError(f"x must be a length-{model.layers[0].d_model} vector")
    if not 0 <= y < model.num_classes:
        raise ParameterError(f"label {y} outside [0, {model.num_classes})")

    logits, final_h, caches = _forward_with_cache(model, xv)
    p = _softmax(logits)
    lbar = -p
    lbar[y] += 1.0  # d log p(y|x) / d logits = onehot(y) - softmax

    head_grad = np.outer(lbar, final_h)
    ybar = model.head.T @ lbar

    gate_grads = [np.zeros_like(layer.gate) for layer in model.layers]
    expert_grads = [
        [{role: np.zeros_like(expert[role]) for role in ROLES} for expert in layer.experts]
        for layer in model.layers
    ]

    for l in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[l]
        xin, sel, g, per_expert = caches[l]
        xbar = np.zeros_like(xin)

        # gating weights are softmax over the surviving logits
        gbar = np.array([per_expert[int(i)][2] @ ybar for i in sel])
        zbar = g * (gbar - g @ gbar)
        gate_grads[l][sel, :] += zbar[:, None] * xin[None, :]
        xbar += layer.gate[sel].T @ zbar

        for j, i in enumerate(sel):
            i = int(i)
            a, hid, _ = per_expert[i]
            ebar = g[j] * ybar
            expert_grads[l][i][Role.DOWN] += np.outer(ebar, hid)
            hbar = layer.experts[i][Role.DOWN].T @ ebar
            abar = hbar * silu_grad(a)
            expert_grads[l][i][Role.UP] += np.outer(abar, xin)
            xbar += layer.experts[i][Role.UP].T @ abar
        ybar = xbar

    return GradientSet(gate_grads=gate_grads, expert_grads=expert_grads, head_grad=head_grad)


def fisher_accumulate(model: MoEModel, calib, mode: str = "sampled-label",
                      seed: int = 0, labels=None) -> FisherInfo:
    """Average elementwise squared log-likelihood gradients over calibration
    tokens.

    sampled-label mode draws one label per input from the model's own
    predictive distribution (seeded, in calibration order); data-label mode
    uses the provided labels.
    """
    xb = as_matrix(calib, "calibration tokens")
    n_tokens = xb.shape[1]
    if n_tokens < 1:
        raise DegenerateInputError("empty calibration batch")
    if mode not in FISHER_MODES:
        raise ParameterError(f"fisher mode must be one of {FISHER_MODES}, got {mode!r}")
    if mode == "data-label":
        if labels is None:
            raise ParameterError("data-label mode requires labels")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n_tokens,):
            raise ShapeError(f"labels shape {labels.shape} != ({n_tokens},)")

    rng = np.random.default_rng(seed)
    acc = [
        [{role: np.zeros_like(expert[role]) for role in ROLES} for expert in layer.experts]
        for layer in model.layers
    ]
    classes = model.num_classes
    for t in range(n_tokens):
        x = xb[:, t]
        if mode == "sampled-label":
            logits, _, _ = _forward_with_cache(model, x)
            y = int(rng.choice(classes, p=_softmax(logits)))
        else:
            y = int(labels[t])
        grads = backward_logloss(model, x, y)
        for l, layer_grads in enumerate(grads.expert_grads):
            for i, expert in enumerate(layer_grads):
                for role in ROLES:
                    g = expert[role]
                    if g.any():
                        acc[l][i][role] += g * g
    for layer_acc in acc:
        for expert in layer_acc:
            for role in ROLES:
                expert[role] /= n_tokens
    return FisherInfo(fisher=acc, sample_count=n_tokens, mode=mode)
