"""Bipartite variable/factor graph structure and its JSON file format.

Factor scopes are ordered: the k-th scope position binds the k-th weight
matrix of a low-rank payload. Low-rank payloads live in a parameter table
keyed by id and may be shared across factors. Graphs are immutable after
build and safe for concurrent read.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tensors import CapacityError, CPFactor, DenseTensor, capacity_cap, cp_expand


class GraphError(ValueError):
    """Graph construction or file-format violation."""


@dataclass(frozen=True)
class DensePayload:
    tensor: DenseTensor


@dataclass(frozen=True)
class LowRankPayload:
    param_id: str


@dataclass(frozen=True)
class FactorBinding:
    """One factor: an ordered variable scope plus its potential payload.

    slot_ids optionally names a per-position parameter key for each scope
    slot; the neural layer and the sharing-scheme builders use these, the
    classical engine ignores them.
    """

    scope: tuple[int, ...]
    payload: DensePayload | LowRankPayload
    slot_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "scope", tuple(int(v) for v in self.scope))
        if self.slot_ids is not None:
            if len(self.slot_ids) != len(self.scope):
                raise GraphError(
                    f"slot_ids length {len(self.slot_ids)} != scope length {len(self.scope)}"
                )
            object.__setattr__(self, "slot_ids", tuple(self.slot_ids))

    @property
    def arity(self) -> int:
        return len(self.scope)


@dataclass(frozen=True)
class FactorGraph:
    num_vars: int
    cardinality: int
    factors: tuple[FactorBinding, ...]
    params: dict[str, CPFactor]
    var_adjacency: tuple[tuple[int, ...], ...]
    unary: np.ndarray | None  # (num_vars, d) or None (treated as all-ones)


def build_graph(
    num_vars: int,
    cardinality: int,
    bindings,
    unary=None,
    params: dict[str, CPFactor] | None = None,
) -> FactorGraph:
    """Validate bindings, build variable adjacency, and freeze the graph.

    Factor ordering is preserved from the input. Raises GraphError with the
    offending factor index for out-of-range variables, duplicate variables
    in one scope, or payload shape mismatches.
    """
    if num_vars < 0:
        raise GraphError(f"num_vars must be >= 0, got {num_vars}")
    if cardinality < 2:
        raise GraphError(f"cardinality must be >= 2, got {cardinality}")
    params = dict(params) if params else {}
    bindings = tuple(bindings)

    adjacency: list[list[int]] = [[] for _ in range(num_vars)]
    for a, binding in enumerate(bindings):
        scope = binding.scope
        if not scope:
            raise GraphError(f"factor {a}: empty scope")
        if len(set(scope)) != len(scope):
            raise GraphError(f"factor {a}: duplicate variable in scope {scope}")
        for v in scope:
            if not 0 <= v < num_vars:
                raise GraphError(f"factor {a}: variable {v} out of range [0, {num_vars})")
        payload = binding.payload
        if isinstance(payload, DensePayload):
            want = (cardinality,) * len(scope)
            if payload.tensor.shape != want:
                raise GraphError(
                    f"factor {a}: dense payload shape {payload.tensor.shape}, expected {want}"
                )
        elif isinstance(payload, LowRankPayload):
            if payload.param_id not in params:
                raise GraphError(f"factor {a}: unknown param_id {payload.param_id!r}")
            cp = params[payload.param_id]
            if cp.arity != len(scope):
                raise GraphError(
                    f"factor {a}: low-rank arity {cp.arity} != scope length {len(scope)}"
                )
            if cp.cardinality != cardinality:
                raise GraphError(
                    f"factor {a}: low-rank cardinality {cp.cardinality} != {cardinality}"
                )
        else:
            raise GraphError(f"factor {a}: unknown payload type {type(payload).__name__}")
        for v in scope:
            adjacency[v].append(a)

    unary_arr = None
    if unary is not None:
        unary_arr = np.ascontiguousarray(unary, dtype=np.float64)
        if unary_arr.shape != (num_vars, cardinality):
            raise GraphError(
                f"unary has shape {unary_arr.shape}, expected {(num_vars, cardinality)}"
            )

    return FactorGraph(
        num_vars=num_vars,
        cardinality=cardinality,
        factors=bindings,
        params=params,
        var_adjacency=tuple(tuple(lst) for lst in adjacency),
        unary=unary_arr,
    )


def factor_cp(g: FactorGraph, a: int) -> CPFactor:
    """The CP parameter set of factor `a`; raises for dense payloads."""
    payload = g.factors[a].payload
    if not isinstance(payload, LowRankPayload):
        raise GraphError(f"factor {a} has no low-rank payload")
    return g.params[payload.param_id]


def factor_table(g: FactorGraph, a: int, cap: int | None = None) -> DenseTensor:
    """Dense table of factor `a`, expanding a low-rank payload if needed."""
    payload = g.factors[a].payload
    if isinstance(payload, DensePayload):
        return payload.tensor
    return cp_expand(g.params[payload.param_id], cap=cap)


def joint_table(g: FactorGraph, cap: int | None = None) -> tuple[DenseTensor, float]:
    """Full joint potential over all variables and its total mass Z.

    The exact-inference oracle: multiplies every factor table (low-rank
    payloads expanded) and the unary potentials over the d**num_vars grid.
    Raises CapacityError past the element cap and GraphError when Z == 0.
    """
    cap = capacity_cap() if cap is None else cap
    d, n = g.cardinality, g.num_vars
    n_elements = d**n
    if n_elements > cap:
        raise CapacityError(
            f"joint table over {n} variables with d={d} needs {n_elements} elements, "
            f"cap is {cap}"
        )
    joint = np.ones((d,) * n)
    if g.unary is not None:
        for i in range(n):
            shape = [1] * n
            shape[i] = d
            joint = joint * g.unary[i].reshape(shape)
    for a, binding in enumerate(g.factors):
        table = factor_table(g, a, cap=cap).array
        order = np.argsort(binding.scope)
        aligned = np.transpose(table, order)
        shape = [1] * n
        for v in sorted(binding.scope):
            shape[v] = d
        joint = joint * aligned.reshape(shape)
    z = float(joint.sum())
    if z == 0.0:
        raise GraphError("degenerate distribution: joint table has zero total mass")
    return DenseTensor.from_array(joint), z


def _payload_to_json(binding: FactorBinding) -> dict:
    payload = binding.payload
    if isinstance(payload, DensePayload):
        return {
            "kind": "dense",
            "shape": list(payload.tensor.shape),
            "data": payload.tensor.data.tolist(),
        }
    return {"kind": "lowrank", "param_id": payload.param_id}


def save_graph(g: FactorGraph, path) -> None:
    """Write the graph as a single JSON document; round-trip is value-exact.

    The optional per-factor "slots" field is an extension carrying slot ids
    for the neural layer; readers that only know the base format can ignore
    it, and absent means null.
    """
    doc = {
        "num_vars": g.num_vars,
        "cardinality": g.cardinality,
        "unary": g.unary.tolist() if g.unary is not None else None,
        "factors": [
            {
                "scope": list(b.scope),
                "payload": _payload_to_json(b),
                "slots": list(b.slot_ids) if b.slot_ids is not None else None,
            }
            for b in g.factors
        ],
        "params": {
            pid: {
                "arity": cp.arity,
                "d": cp.cardinality,
                "rank": cp.rank,
                "weights": [w.tolist() for w in cp.weights],
            }
            for pid, cp in g.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_graph(path) -> FactorGraph:
    """Load a graph JSON document written by save_graph (or by hand)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        num_vars = int(doc["num_vars"])
        cardinality = int(doc["cardinality"])
        raw_factors = doc["factors"]
        raw_params = doc.get("params") or {}
    except KeyError as exc:
        raise GraphError(f"graph file missing required field: {exc}") from exc

    params = {}
    for pid, spec in raw_params.items():
        try:
            params[pid] = CPFactor(
                arity=int(spec["arity"]),
                cardinality=int(spec["d"]),
                rank=int(spec["rank"]),
                weights=tuple(np.asarray(w, dtype=np.float64) for w in spec["weights"]),
            )
        except (KeyError, ValueError) as exc:
            raise GraphError(f"param {pid!r}: {exc}") from exc

    bindings = []
    for a, spec in enumerate(raw_factors):
        try:
            scope = tuple(int(v) for v in spec["scope"])
            payload_spec = spec["payload"]
            kind = payload_spec["kind"]
        except (KeyError, TypeError) as exc:
            raise GraphError(f"factor {a}: malformed entry, missing {exc}") from exc
        if kind == "dense":
            try:
                tensor = DenseTensor(
                    tuple(int(s) for s in payload_spec["shape"]),
                    np.asarray(payload_spec["data"], dtype=np.float64),
                )
            except (KeyError, ValueError) as exc:
                raise GraphError(f"factor {a}: bad dense payload: {exc}") from exc
            payload = DensePayload(tensor)
        elif kind == "lowrank":
            try:
                payload = LowRankPayload(str(payload_spec["param_id"]))
            except KeyError as exc:
                raise GraphError(f"factor {a}: lowrank payload missing {exc}") from exc
        else:
            raise GraphError(f"factor {a}: unknown payload kind {kind!r}")
        slots = spec.get("slots")
        bindings.append(
            FactorBinding(scope, payload, tuple(slots) if slots is not None else None)
        )

    unary = doc.get("unary")
    return build_graph(num_vars, cardinality, bindings, unary=unary, params=params)
