"""Sum-product loopy belief propagation with a dense oracle path and a
low-rank fast path.

Updates run on a synchronous flooding schedule: one iteration computes all
variable-to-factor messages from the previous factor-to-variable buffer,
then all factor-to-variable messages from the fresh variable-to-factor
buffer. Every message is L1-normalized as it is produced. The low-rank
factor-to-variable update projects incoming messages to rank space,
Hadamard-multiplies the projections, and projects back, so a full sweep
over one factor of arity n costs O(n * d * R).
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import DensePayload, FactorGraph, factor_cp, factor_table, joint_table
from .tensors import marginalize_product

NEGATIVE_TOL = -1e-12


class ZeroMessageError(Exception):
    """A message or belief normalized to zero total mass."""


class SignViolationWarning(UserWarning):
    """A low-rank update produced negative entries (mixed-sign weights)."""


@dataclass
class MessageState:
    """Message buffers keyed (var, factor_idx) and (factor_idx, var).

    Vectors are treated as immutable; sweeps build fresh buffers.
    """

    var_to_factor: dict[tuple[int, int], np.ndarray]
    factor_to_var: dict[tuple[int, int], np.ndarray]


@dataclass
class BeliefSet:
    beliefs: np.ndarray  # (num_vars, d), rows sum to 1
    converged: bool
    iterations_used: int
    final_delta: float
    trace: tuple[tuple[int, float], ...] | None = None


@dataclass
class LBPOptions:
    max_iters: int = 200
    tol: float = 1e-8
    damping: float = 0.0
    schedule: str = "flooding"
    workers: int = 1
    collect_trace: bool = False


def _normalize(vec: np.ndarray, what: str) -> np.ndarray:
    total = vec.sum()
    if total == 0.0:
        raise ZeroMessageError(f"{what} normalized to zero mass")
    return vec / total


def init_messages(g: FactorGraph) -> MessageState:
    """Uniform 1/d start for both message families."""
    d = g.cardinality
    uniform = np.full(d, 1.0 / d)
    v2f = {}
    f2v = {}
    for a, binding in enumerate(g.factors):
        for i in binding.scope:
            v2f[(i, a)] = uniform.copy()
            f2v[(a, i)] = uniform.copy()
    return MessageState(v2f, f2v)


def var_to_factor_update(state: MessageState, g: FactorGraph, i: int, a: int) -> np.ndarray:
    """Product of incoming factor messages excluding `a`, times the unary.

    Normalized; with no other neighbours this is the normalized unary
    (uniform when the unary is absent).
    """
    if a not in g.var_adjacency[i]:
        raise ValueError(f"factor {a} is not adjacent to variable {i}")
    prod = g.unary[i].copy() if g.unary is not None else np.ones(g.cardinality)
    for c in g.var_adjacency[i]:
        if c != a:
            prod = prod * state.factor_to_var[(c, i)]
    return _normalize(prod, f"message {i}->{a}")


def factor_to_var_dense(
    state: MessageState, g: FactorGraph, a: int, i: int, cap: int | None = None
) -> np.ndarray:
    """Factor-to-variable update by dense marginalization (the oracle path).

    Low-rank payloads are expanded first, subject to the capacity cap.
    """
    binding = g.factors[a]
    pos = binding.scope.index(i)
    incoming = [
        None if j == i else state.var_to_factor[(j, a)] for j in binding.scope
    ]
    vec = marginalize_product(factor_table(g, a, cap=cap), incoming, keep=pos)
    return _normalize(vec, f"message {a}->{i}")


def _check_sign(vec: np.ndarray, a: int, i: int) -> None:
    if np.any(vec < NEGATIVE_TOL):
        warnings.warn(
            f"low-rank message {a}->{i} has negative entries "
            f"(min {vec.min():.3e}); mixed-sign weights void the "
            f"probabilistic guarantees",
            SignViolationWarning,
            stacklevel=3,
        )


def factor_to_var_lowrank(state: MessageState, g: FactorGraph, a: int, i: int) -> np.ndarray:
    """Low-rank factor-to-variable update.

    Projects each other incoming message to rank space, Hadamard-accumulates
    the projections, and maps back through the target slot's weight matrix:
    O(n_a * d * R) for a single message.
    """
    cp = factor_cp(g, a)
    binding = g.factors[a]
    pos = binding.scope.index(i)
    acc = np.ones(cp.rank)
    for k, j in enumerate(binding.scope):
        if k == pos:
            continue
        acc = acc * (cp.weights[k].T @ state.var_to_factor[(j, a)])
    vec = cp.weights[pos] @ acc
    _check_sign(vec, a, i)
    return _normalize(vec, f"message {a}->{i}")


def _factor_sweep(
    state: MessageState, g: FactorGraph, a: int, cap: int | None
) -> list[tuple[tuple[int, int], np.ndarray]]:
    """All factor-to-variable messages of one factor.

    The low-rank path shares the rank-space projections across target slots
    via prefix/suffix Hadamard products, so the whole sweep stays
    O(n_a * d * R).
    """
    binding = g.factors[a]
    scope = binding.scope
    if isinstance(binding.payload, DensePayload):
        return [((a, i), factor_to_var_dense(state, g, a, i, cap=cap)) for i in scope]
    cp = factor_cp(g, a)
    n = len(scope)
    gammas = [cp.weights[k].T @ state.var_to_factor[(j, a)] for k, j in enumerate(scope)]
    prefix = [np.ones(cp.rank)]
    for gm in gammas[:-1]:
        prefix.append(prefix[-1] * gm)
    suffix = [np.ones(cp.rank)] * (n + 1)
    for k in range(n - 1, -1, -1):
        suffix[k] = gammas[k] * suffix[k + 1]
    out = []
    for k, i in enumerate(scope):
        vec = cp.weights[k] @ (prefix[k] * suffix[k + 1])
        _check_sign(vec, a, i)
        out.append(((a, i), _normalize(vec, f"message {a}->{i}")))
    return out


def _var_half_sweep(
    state: MessageState, g: FactorGraph, a: int
) -> list[tuple[tuple[int, int], np.ndarray]]:
    return [((i, a), var_to_factor_update(state, g, i, a)) for i in g.factors[a].scope]


def _map_factors(fn, factor_ids, workers: int):
    # results merged in factor order, so output is worker-count independent
    if workers <= 1:
        return [fn(a) for a in factor_ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, factor_ids))


def _blend(new: dict, old: dict, damping: float) -> dict:
    if damping == 0.0:
        return new
    return {k: (1.0 - damping) * v + damping * old[k] for k, v in new.items()}


def _max_delta(new: dict, old: dict) -> float:
    delta = 0.0
    for k, v in new.items():
        delta = max(delta, float(np.max(np.abs(v - old[k]))))
    return delta


def _check_finite(buffers: dict, iteration: int) -> None:
    for key, vec in buffers.items():
        if not np.all(np.isfinite(vec)):
            raise FloatingPointError(
                f"non-finite message {key} at iteration {iteration}"
            )


def beliefs_from_messages(g: FactorGraph, state: MessageState) -> np.ndarray:
    """Per-variable beliefs: unary times all incoming factor messages."""
    out = np.empty((g.num_vars, g.cardinality))
    for i in range(g.num_vars):
        b = g.unary[i].copy() if g.unary is not None else np.ones(g.cardinality)
        for a in g.var_adjacency[i]:
            b = b * state.factor_to_var[(a, i)]
        out[i] = _normalize(b, f"belief of variable {i}")
    return out


def run_lbp(
    g: FactorGraph,
    opts: LBPOptions | None = None,
    init: MessageState | None = None,
) -> BeliefSet:
    """Run synchronous-flooding sum-product LBP until the max-norm message
    change drops below opts.tol or opts.max_iters is reached.

    Low-rank payloads always take the low-rank path. Optional damping blends
    each new message with its previous value (damping 0 reproduces the
    undamped update bit for bit). `init` overrides the uniform start.
    """
    opts = opts or LBPOptions()
    if opts.schedule != "flooding":
        raise ValueError(f"unsupported schedule {opts.schedule!r}")
    if not opts.tol > 0:
        raise ValueError(f"tol must be positive, got {opts.tol}")
    if not 0.0 <= opts.damping < 1.0:
        raise ValueError(f"damping must be in [0, 1), got {opts.damping}")

    state = init if init is not None else init_messages(g)
    factor_ids = range(len(g.factors))
    trace: list[tuple[int, float]] = []
    converged = False
    delta = math.inf
    iteration = 0

    for iteration in range(1, opts.max_iters + 1):
        pairs = _map_factors(lambda a: _var_half_sweep(state, g, a), factor_ids, opts.workers)
        new_v2f = {k: v for chunk in pairs for k, v in chunk}
        new_v2f = _blend(new_v2f, state.var_to_factor, opts.damping)

        half = MessageState(new_v2f, state.factor_to_var)
        pairs = _map_factors(lambda a: _factor_sweep(half, g, a, None), factor_ids, opts.workers)
        new_f2v = {k: v for chunk in pairs for k, v in chunk}
        new_f2v = _blend(new_f2v, state.factor_to_var, opts.damping)

        delta = max(_max_delta(new_v2f, state.var_to_factor),
                    _max_delta(new_f2v, state.factor_to_var))
        _check_finite(new_v2f, iteration)
        _check_finite(new_f2v, iteration)
        state = MessageState(new_v2f, new_f2v)
        if opts.collect_trace:
            trace.append((iteration, delta))
        if delta < opts.tol:
            converged = True
            break

    return BeliefSet(
        beliefs=beliefs_from_messages(g, state),
        converged=converged,
        iterations_used=iteration,
        final_delta=delta,
        trace=tuple(trace) if opts.collect_trace else None,
    )


def exact_marginals(g: FactorGraph, cap: int | None = None) -> BeliefSet:
    """Exact per-variable marginals by summing the joint table.

    Ground truth for tree tests; subject to the capacity cap.
    """
    joint, z = joint_table(g, cap=cap)
    arr = joint.array
    out = np.empty((g.num_vars, g.cardinality))
    for i in range(g.num_vars):
        axes = tuple(ax for ax in range(g.num_vars) if ax != i)
        out[i] = arr.sum(axis=axes) / z if axes else arr / z
    return BeliefSet(beliefs=out, converged=True, iterations_used=0, final_delta=0.0)
