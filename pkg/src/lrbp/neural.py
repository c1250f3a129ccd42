"""Neuralized low-rank message passing over a factor graph.

Node states are unconstrained real vectors. One layer computes, per node i,
the sum over its factors of W_out[slot(a,i)] @ hadamard_{j in scope(a), j != i}
(W_in[slot(a,j)]^T h_j), feeds the sum through a one-hidden-layer ReLU MLP,
and adds the result to the previous state (residual connection). Each
parameter slot carries a doubled pair of matrices: W_in transforms before the
Hadamard product, W_out after.

Gradients are hand-derived reverse mode; Hadamard leave-one-out gradients are
recomputed with prefix/suffix products, never by division. Parameters are
read-only during a step; all update functions return fresh structures.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graph import FactorGraph, LowRankPayload


@dataclass(frozen=True)
class HiddenStates:
    """Per-node real state vectors (num_nodes, d_h) at layer index t."""

    values: np.ndarray
    t: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"hidden states must be 2-d, got shape {v.shape}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SlotPair:
    """Doubled weight set of one parameter slot: both are d_h x R."""

    w_in: np.ndarray
    w_out: np.ndarray


@dataclass(frozen=True)
class LayerParams:
    d_h: int
    rank: int
    slots: dict[str, SlotPair]
    w1: np.ndarray  # (d_mlp, d_h)
    b1: np.ndarray  # (d_mlp,)
    w2: np.ndarray  # (d_h, d_mlp)
    b2: np.ndarray  # (d_h,)
    w_ro: np.ndarray  # (out_dim, d_h) readout affine map
    b_ro: np.ndarray  # (out_dim,)


@dataclass
class GradientBundle:
    """Gradients keyed like named_arrays(params), plus input-state grads."""

    by_name: dict[str, np.ndarray]
    input_states: np.ndarray


def factor_slots(g: FactorGraph, a: int) -> tuple[str, ...]:
    """Slot ids of factor a: explicit slot_ids, else derived from param_id."""
    binding = g.factors[a]
    if binding.slot_ids is not None:
        return binding.slot_ids
    if not isinstance(binding.payload, LowRankPayload):
        raise ValueError(f"factor {a} has no low-rank payload; cannot derive slots")
    pid = binding.payload.param_id
    return tuple(f"{pid}/{k}" for k in range(len(binding.scope)))


def graph_slot_ids(g: FactorGraph) -> list[str]:
    """All slot ids of a graph in first-appearance order, deduplicated."""
    seen: dict[str, None] = {}
    for a in range(len(g.factors)):
        for sid in factor_slots(g, a):
            seen.setdefault(sid)
    return list(seen)


def init_layer_params(
    slot_ids,
    d_h: int,
    rank: int,
    out_dim: int = 1,
    d_mlp: int | None = None,
    seed: int = 0,
) -> LayerParams:
    """Seeded uniform init: slot matrices on [-1/sqrt(R), 1/sqrt(R)] so that
    Hadamard products stay scale-stable, MLP and readout on
    [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    d_mlp = 2 * d_h if d_mlp is None else d_mlp
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(rank)
    slots = {
        sid: SlotPair(
            rng.uniform(-s, s, size=(d_h, rank)), rng.uniform(-s, s, size=(d_h, rank))
        )
        for sid in slot_ids
    }
    s1 = 1.0 / np.sqrt(d_h)
    s2 = 1.0 / np.sqrt(d_mlp)
    return LayerParams(
        d_h=d_h,
        rank=rank,
        slots=slots,
        w1=rng.uniform(-s1, s1, size=(d_mlp, d_h)),
        b1=rng.uniform(-s1, s1, size=d_mlp),
        w2=rng.uniform(-s2, s2, size=(d_h, d_mlp)),
        b2=rng.uniform(-s2, s2, size=d_h),
        w_ro=rng.uniform(-s1, s1, size=(out_dim, d_h)),
        b_ro=rng.uniform(-s1, s1, size=out_dim),
    )


def named_arrays(p: LayerParams) -> dict[str, np.ndarray]:
    """Flat name -> array view of all parameters (shared slots appear once)."""
    out = {}
    for sid, pair in p.slots.items():
        out[f"slot/{sid}/w_in"] = pair.w_in
        out[f"slot/{sid}/w_out"] = pair.w_out
    out["mlp/w1"] = p.w1
    out["mlp/b1"] = p.b1
    out["mlp/w2"] = p.w2
    out["mlp/b2"] = p.b2
    out["readout/w"] = p.w_ro
    out["readout/b"] = p.b_ro
    return out


def replace_arrays(p: LayerParams, named: dict[str, np.ndarray]) -> LayerParams:
    slots = {
        sid: SlotPair(named[f"slot/{sid}/w_in"], named[f"slot/{sid}/w_out"])
        for sid in p.slots
    }
    return LayerParams(
        d_h=p.d_h,
        rank=p.rank,
        slots=slots,
        w1=named["mlp/w1"],
        b1=named["mlp/b1"],
        w2=named["mlp/w2"],
        b2=named["mlp/b2"],
        w_ro=named["readout/w"],
        b_ro=named["readout/b"],
    )


def _leave_one_out(vectors: list[np.ndarray], rank: int) -> list[np.ndarray]:
    """loo[k] = hadamard of all vectors except k; ones(R) for a single slot."""
    n = len(vectors)
    prefix = [np.ones(rank)]
    for v in vectors[:-1]:
        prefix.append(prefix[-1] * v)
    suffix = [np.ones(rank)] * (n + 1)
    for k in range(n - 1, -1, -1):
        suffix[k] = vectors[k] * suffix[k + 1]
    return [prefix[k] * suffix[k + 1] for k in range(n)]


@dataclass
class _FactorRecord:
    scope: tuple[int, ...]
    slots: tuple[str, ...]
    us: list[np.ndarray]
    loos: list[np.ndarray]


@dataclass
class Tape:
    """Forward intermediates needed by the hand-derived backward pass."""

    params: LayerParams
    h_in: np.ndarray
    records: list[_FactorRecord]
    agg: np.ndarray
    z: np.ndarray  # MLP pre-activations
    r: np.ndarray  # relu(z)


def lrbp_forward(h: HiddenStates, g: FactorGraph, p: LayerParams) -> tuple[HiddenStates, Tape]:
    """One message-passing layer; returns the new states and the tape.

    Deterministic: repeated calls on identical inputs are bitwise equal.
    Raises on unmapped slot ids and on non-finite intermediates.
    """
    values = h.values
    if values.shape != (g.num_vars, p.d_h):
        raise ValueError(
            f"hidden states have shape {values.shape}, expected {(g.num_vars, p.d_h)}"
        )
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite input hidden states")

    agg = np.zeros_like(values)
    records = []
    for a, binding in enumerate(g.factors):
        slots = factor_slots(g, a)
        for sid in slots:
            if sid not in p.slots:
                raise ValueError(f"factor {a}: unmapped slot id {sid!r}")
        us = [
            p.slots[sid].w_in.T @ values[j] for sid, j in zip(slots, binding.scope)
        ]
        loos = _leave_one_out(us, p.rank)
        for k, (sid, j) in enumerate(zip(slots, binding.scope)):
            contrib = p.slots[sid].w_out @ loos[k]
            if not np.all(np.isfinite(contrib)):
                raise FloatingPointError(
                    f"non-finite message from factor {a} into node {j}"
                )
            agg[j] += contrib
        records.append(_FactorRecord(binding.scope, slots, us, loos))

    z = agg @ p.w1.T + p.b1
    r = np.maximum(z, 0.0)
    out = r @ p.w2.T + p.b2
    new_values = values + out
    tape = Tape(params=p, h_in=values, records=records, agg=agg, z=z, r=r)
    return HiddenStates(new_values, h.t + 1), tape


def lrbp_backward(tape: Tape, upstream: np.ndarray) -> GradientBundle:
    """Exact reverse-mode gradients of one layer.

    `upstream` is the loss gradient w.r.t. the layer's output states.
    Hadamard leave-one-out gradients are recomputed via prefix/suffix
    products over the reduced slot sets (no division by possibly-zero
    factors). Shared slot ids accumulate across factors.
    """
    p = tape.params
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.h_in.shape:
        raise ValueError(
            f"upstream gradient shape {upstream.shape} != states shape {tape.h_in.shape}"
        )
    grads = {name: np.zeros_like(arr) for name, arr in named_arrays(p).items()}
    dh = upstream.copy()  # residual path

    # MLP backward
    grads["mlp/b2"] += upstream.sum(axis=0)
    grads["mlp/w2"] += upstream.T @ tape.r
    dz = (upstream @ p.w2) * (tape.z > 0)
    grads["mlp/b1"] += dz.sum(axis=0)
    grads["mlp/w1"] += dz.T @ tape.agg
    dagg = dz @ p.w1

    for rec in tape.records:
        n = len(rec.us)
        dus = [np.zeros(p.rank) for _ in range(n)]
        for k, (j, sid) in enumerate(zip(rec.scope, rec.slots)):
            gk = dagg[j]
            grads[f"slot/{sid}/w_out"] += np.outer(gk, rec.loos[k])
            if n == 1:
                continue
            dloo = p.slots[sid].w_out.T @ gk
            sub = [rec.us[m] for m in range(n) if m != k]
            sub_loos = _leave_one_out(sub, p.rank)
            idx = 0
            for l in range(n):
                if l == k:
                    continue
                dus[l] += dloo * sub_loos[idx]
                idx += 1
        for k, (j, sid) in enumerate(zip(rec.scope, rec.slots)):
            grads[f"slot/{sid}/w_in"] += np.outer(tape.h_in[j], dus[k])
            dh[j] += p.slots[sid].w_in @ dus[k]

    return GradientBundle(grads, dh)


def forward_stack(
    h: HiddenStates, g: FactorGraph, p: LayerParams, layers: int
) -> tuple[HiddenStates, list[Tape]]:
    """`layers` forward passes with shared parameters."""
    tapes = []
    cur = h
    for _ in range(layers):
        cur, tape = lrbp_forward(cur, g, p)
        tapes.append(tape)
    return cur, tapes


def backward_stack(tapes: list[Tape], upstream: np.ndarray) -> GradientBundle:
    """Backward through a stack of shared-parameter layers, summing grads."""
    total: dict[str, np.ndarray] | None = None
    up = upstream
    for tape in reversed(tapes):
        bundle = lrbp_backward(tape, up)
        if total is None:
            total = bundle.by_name
        else:
            total = {k: total[k] + bundle.by_name[k] for k in total}
        up = bundle.input_states
    assert total is not None
    return GradientBundle(total, up)


@dataclass
class GradCheckResult:
    max_relative_error: float
    worst_param: str | None
    checked: int
    skipped: int


def grad_check(
    g: FactorGraph,
    p: LayerParams,
    seed: int = 0,
    eps: float = 1e-5,
    layers: int = 3,
) -> GradCheckResult:
    """Compare hand-derived gradients against central finite differences.

    Loss is the sum of squared output states after `layers` stacked layers
    on seeded random inputs. A parameter coordinate is skipped when its
    +/-eps perturbations land on different sides of a ReLU kink (the
    activation masks of the two evaluations differ), where the central
    difference is invalid.
    """
    rng = np.random.default_rng(seed)
    h0 = HiddenStates(rng.standard_normal((g.num_vars, p.d_h)))

    def loss_and_masks():
        cur = h0
        masks = []
        for _ in range(layers):
            cur, tape = lrbp_forward(cur, g, p)
            masks.append(tape.z > 0)
        return float(np.sum(cur.values**2)), masks

    h_t, tapes = forward_stack(h0, g, p, layers)
    bundle = backward_stack(tapes, 2.0 * h_t.values)

    worst = 0.0
    worst_name = None
    checked = 0
    skipped = 0
    for name, arr in named_arrays(p).items():
        flat = arr.ravel()
        ana_flat = bundle.by_name[name].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            loss_p, masks_p = loss_and_masks()
            flat[idx] = orig - eps
            loss_m, masks_m = loss_and_masks()
            flat[idx] = orig
            if any(not np.array_equal(mp, mm) for mp, mm in zip(masks_p, masks_m)):
                skipped += 1
                continue
            numeric = (loss_p - loss_m) / (2.0 * eps)
            analytic = ana_flat[idx]
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-3)
            checked += 1
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{idx}]"
    return GradCheckResult(worst, worst_name, checked, skipped)


def node_mean(values: np.ndarray) -> np.ndarray:
    """Mean over node vectors, bitwise invariant to node order.

    Each column is summed in sorted order, so relabelling nodes cannot
    change the reduction order.
    """
    return np.sort(values, axis=0).sum(axis=0) / values.shape[0]


def readout(h: HiddenStates, p: LayerParams) -> np.ndarray:
    """Graph embedding: mean over node states, then one affine map.

    Permutation-invariant by construction (bitwise: see node_mean).
    """
    if h.values.shape[0] == 0:
        raise ValueError("readout of an empty graph")
    return p.w_ro @ node_mean(h.values) + p.b_ro


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adam_init(named: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        0,
        {k: np.zeros_like(a) for k, a in named.items()},
        {k: np.zeros_like(a) for k, a in named.items()},
    )


def adam_step(
    named: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    t = state.step + 1
    new, m, v = {}, {}, {}
    for k, arr in named.items():
        gk = grads[k]
        m[k] = beta1 * state.m[k] + (1.0 - beta1) * gk
        v[k] = beta2 * state.v[k] + (1.0 - beta2) * gk * gk
        m_hat = m[k] / (1.0 - beta1**t)
        v_hat = v[k] / (1.0 - beta2**t)
        new[k] = arr - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(t, m, v)


def train_step(
    batch,
    p: LayerParams,
    opt_state: AdamState | None,
    lr: float = 1e-3,
    layers: int = 3,
):
    """One Adam step on mean absolute error of the readout.

    `batch` is a sequence of (graph, HiddenStates, target) triples. Runs
    `layers` forward passes, the readout, and the hand-derived backward;
    gradients accumulate over the batch in order. A non-finite loss aborts
    the step with parameters unchanged. Returns (params, opt_state, loss).
    """
    named = named_arrays(p)
    if opt_state is None:
        opt_state = adam_init(named)
    grads = {k: np.zeros_like(a) for k, a in named.items()}
    total_loss = 0.0
    for g, h0, target in batch:
        target = np.atleast_1d(np.asarray(target, dtype=np.float64))
        h_t, tapes = forward_stack(h0, g, p, layers)
        mean = h_t.values.mean(axis=0)
        pred = p.w_ro @ mean + p.b_ro
        resid = pred - target
        total_loss += float(np.mean(np.abs(resid)))
        dpred = np.sign(resid) / resid.size
        grads["readout/w"] += np.outer(dpred, mean)
        grads["readout/b"] += dpred
        dmean = p.w_ro.T @ dpred
        n_nodes = h_t.values.shape[0]
        upstream = np.tile(dmean / n_nodes, (n_nodes, 1))
        bundle = backward_stack(tapes, upstream)
        for k in grads:
            grads[k] += bundle.by_name[k]
    scale = 1.0 / len(batch)
    total_loss *= scale
    if not np.isfinite(total_loss):
        return p, opt_state, total_loss
    grads = {k: v * scale for k, v in grads.items()}
    new_named, new_state = adam_step(named, grads, opt_state, lr)
    return replace_arrays(p, new_named), new_state, total_loss


def save_checkpoint(p: LayerParams, path, opt_state: AdamState | None = None) -> None:
    """JSON checkpoint; float round-trip is exact."""
    doc = {
        "d_h": p.d_h,
        "rank": p.rank,
        "slots": {
            sid: {"w_in": sp.w_in.tolist(), "w_out": sp.w_out.tolist()}
            for sid, sp in p.slots.items()
        },
        "mlp": {
            "w1": p.w1.tolist(),
            "b1": p.b1.tolist(),
            "w2": p.w2.tolist(),
            "b2": p.b2.tolist(),
        },
        "readout": {"w": p.w_ro.tolist(), "b": p.b_ro.tolist()},
        "optimizer": None
        if opt_state is None
        else {
            "step": opt_state.step,
            "m": {k: v.tolist() for k, v in opt_state.m.items()},
            "v": {k: v.tolist() for k, v in opt_state.v.items()},
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[LayerParams, AdamState | None]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    arr = lambda x: np.asarray(x, dtype=np.float64)  # noqa: E731
    slots = {
        sid: SlotPair(arr(spec["w_in"]), arr(spec["w_out"]))
        for sid, spec in doc["slots"].items()
    }
    p = LayerParams(
        d_h=int(doc["d_h"]),
        rank=int(doc["rank"]),
        slots=slots,
        w1=arr(doc["mlp"]["w1"]),
        b1=arr(doc["mlp"]["b1"]),
        w2=arr(doc["mlp"]["w2"]),
        b2=arr(doc["mlp"]["b2"]),
        w_ro=arr(doc["readout"]["w"]),
        b_ro=arr(doc["readout"]["b"]),
    )
    opt = None
    if doc.get("optimizer") is not None:
        spec = doc["optimizer"]
        opt = AdamState(
            int(spec["step"]),
            {k: arr(v) for k, v in spec["m"].items()},
            {k: arr(v) for k, v in spec["v"].items()},
        )
    return p, opt
