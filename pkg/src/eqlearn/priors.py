"""Declarative prior-knowledge constraints evaluated on synthetic sample tuples.

Each constraint stores concrete input points (1-3 per sample), so a set is
fully reproducible from its JSON form.  Residuals follow the rewritten
equality/inequality convention: equalities give |lhs - rhs|, inequalities give
max(violation, 0), and curvature triples penalize the wrong-signed second
difference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np


class ConstraintKind(str, Enum):
    VALUE_PIN = "value_pin"
    EQUALITY_INVARIANT = "equality_invariant"
    SYMMETRY = "symmetry"
    INEQUALITY_BOUND = "inequality_bound"
    SIGN = "sign"
    MONOTONE_PAIR = "monotone_pair"
    CURVATURE_TRIPLE = "curvature_triple"

    @property
    def arity(self) -> int:
        return {"symmetry": 2, "monotone_pair": 2, "curvature_triple": 3}.get(self.value, 1)


@dataclass(frozen=True)
class Constraint:
    """One prior-knowledge relation with its sample tuples.

    points: (K, arity, n) input points per sample.
    anchors: (K,) target values (pins/equalities) or upper bounds; None otherwise.
    direction: +1/-1 for sign constraints (f >= 0 / f <= 0) and
        monotone pairs (increasing / decreasing).
    monotone/curvature: curvature-triple options; monotone in {0, -1, +1},
        curvature +1 requires f'' >= 0, -1 requires f'' <= 0.
    """

    name: str
    kind: ConstraintKind
    points: np.ndarray
    anchors: np.ndarray | None = None
    direction: int = 0
    monotone: int = 0
    curvature: int = 0
    weight: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[1] != self.kind.arity:
            raise ValueError(f"{self.name}: points must be (K, {self.kind.arity}, n)")
        object.__setattr__(self, "points", pts)
        if self.anchors is not None:
            object.__setattr__(self, "anchors", np.asarray(self.anchors, dtype=np.float64))

    @property
    def n_samples(self) -> int:
        return self.points.shape[0]

    @property
    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1, self.points.shape[2])


def residuals_and_grads(con: Constraint, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residuals e_k >= 0 and de/df for model outputs f of shape (K, arity)."""
    f = np.asarray(f, dtype=np.float64).reshape(con.n_samples, con.kind.arity)
    de = np.zeros_like(f)
    kind = con.kind
    if kind in (ConstraintKind.VALUE_PIN, ConstraintKind.EQUALITY_INVARIANT):
        v = f[:, 0] - con.anchors
        e = np.abs(v)
        de[:, 0] = np.sign(v)
    elif kind is ConstraintKind.SYMMETRY:
        v = f[:, 0] - f[:, 1]
        e = np.abs(v)
        de[:, 0] = np.sign(v)
        de[:, 1] = -np.sign(v)
    elif kind is ConstraintKind.INEQUALITY_BOUND:
        v = f[:, 0] - con.anchors
        e = np.maximum(v, 0.0)
        de[:, 0] = (v > 0).astype(np.float64)
    elif kind is ConstraintKind.SIGN:
        v = -con.direction * f[:, 0]
        e = np.maximum(v, 0.0)
        de[:, 0] = -con.direction * (v > 0)
    elif kind is ConstraintKind.MONOTONE_PAIR:
        v = con.direction * (f[:, 0] - f[:, 1])
        e = np.maximum(v, 0.0)
        act = (v > 0).astype(np.float64)
        de[:, 0] = con.direction * act
        de[:, 1] = -con.direction * act
    elif kind is ConstraintKind.CURVATURE_TRIPLE:
        fl, fc, fr = f[:, 0], f[:, 1], f[:, 2]
        e = np.zeros(con.n_samples)
        if con.monotone == -1:
            v1 = fr - fc
            v2 = fc - fl
            e += np.maximum(v1, 0.0) + np.maximum(v2, 0.0)
            de[:, 2] += (v1 > 0)
            de[:, 1] += -(v1 > 0).astype(np.float64) + (v2 > 0)
            de[:, 0] += -(v2 > 0).astype(np.float64)
        elif con.monotone == 1:
            v1 = fc - fr
            v2 = fl - fc
            e += np.maximum(v1, 0.0) + np.maximum(v2, 0.0)
            de[:, 1] += (v1 > 0).astype(np.float64) - (v2 > 0)
            de[:, 2] += -(v1 > 0).astype(np.float64)
            de[:, 0] += (v2 > 0)
        if con.curvature == 1:
            v = 2.0 * fc - fr - fl  # negative second difference
            act = (v > 0).astype(np.float64)
            e += np.maximum(v, 0.0)
            de[:, 1] += 2.0 * act
            de[:, 0] -= act
            de[:, 2] -= act
        elif con.curvature == -1:
            v = fl + fr - 2.0 * fc  # positive second difference
            act = (v > 0).astype(np.float64)
            e += np.maximum(v, 0.0)
            de[:, 0] += act
            de[:, 2] += act
            de[:, 1] -= 2.0 * act
    else:
        raise ValueError(f"unknown constraint kind {kind}")
    return e, de


def residual(con: Constraint, sample_index: int, model_eval) -> float:
    """Residual of one sample; model_eval maps an (m, n) matrix to m outputs."""
    pts = con.points[sample_index]
    f = np.asarray(model_eval(pts), dtype=np.float64).reshape(1, -1)
    single = replace(con, points=con.points[sample_index:sample_index + 1],
                     anchors=None if con.anchors is None
                     else con.anchors[sample_index:sample_index + 1])
    e, _ = residuals_and_grads(single, f)
    return float(e[0])


def violation_rmse(con: Constraint, model_eval) -> float:
    """Root-mean-square of the constraint's residuals over its sample set."""
    if con.n_samples == 0:
        raise ValueError(f"{con.name}: empty sample set")
    f = np.asarray(model_eval(con.flat_points), dtype=np.float64)
    e, _ = residuals_and_grads(con, f.reshape(con.n_samples, con.kind.arity))
    return float(np.sqrt(np.mean(e * e)))


@dataclass(frozen=True)
class ConstraintSet:
    constraints: tuple[Constraint, ...]

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    @property
    def total_samples(self) -> int:
        return sum(c.n_samples for c in self.constraints)

    def all_points(self) -> tuple[np.ndarray, list[slice]]:
        """Stack every constraint's flattened points; slices index each constraint's rows."""
        blocks, slices, at = [], [], 0
        for c in self.constraints:
            flat = c.flat_points
            blocks.append(flat)
            slices.append(slice(at, at + flat.shape[0]))
            at += flat.shape[0]
        if blocks:
            return np.concatenate(blocks, axis=0), slices
        return np.zeros((0, 0)), slices


def sample_region(rng: np.random.Generator, bounds, count: int) -> np.ndarray:
    """Uniform points over an axis-aligned box given as (n, 2) [lo, hi] rows."""
    if count <= 0:
        raise ValueError("sample count must be positive")
    b = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    if np.any(b[:, 1] <= b[:, 0]):
        raise ValueError("degenerate sampling region")
    return rng.uniform(b[:, 0], b[:, 1], size=(count, b.shape[0]))


def sample_interval_union(rng: np.random.Generator, intervals, count: int) -> np.ndarray:
    """Uniform scalars over a union of intervals, weighted by interval length."""
    iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    widths = iv[:, 1] - iv[:, 0]
    if count <= 0 or np.any(widths <= 0):
        raise ValueError("bad interval-union sampling request")
    u = rng.uniform(0.0, widths.sum(), size=count)
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    which = np.searchsorted(edges, u, side="right") - 1
    return iv[which, 0] + (u - edges[which])


def generate_samples(kind: ConstraintKind, region, count: int,
                     rng: np.random.Generator, *, axis: int = 0,
                     delta: float = 1e-3, direction: int = 1,
                     monotone: int = 0, curvature: int = 0,
                     anchors=None, name: str = "") -> Constraint:
    """Build a constraint with `count` samples drawn uniformly over `region`.

    Pairs and triples are spaced by `delta` along `axis`, shifted so every
    tuple member stays inside the region.
    """
    b = np.asarray(region, dtype=np.float64).reshape(-1, 2)
    if kind is ConstraintKind.SYMMETRY:
        base = sample_region(rng, b, count)
        swapped = base[:, ::-1].copy()
        pts = np.stack([base, swapped], axis=1)
        return Constraint(name or "symmetry", kind, pts)
    if kind is ConstraintKind.SIGN:
        pts = sample_region(rng, b, count)[:, None, :]
        return Constraint(name or "sign", kind, pts, direction=direction)
    if kind is ConstraintKind.MONOTONE_PAIR:
        inner = b.copy()
        inner[axis, 1] -= delta
        base = sample_region(rng, inner, count)
        shifted = base.copy()
        shifted[:, axis] += delta
        pts = np.stack([base, shifted], axis=1)
        return Constraint(name or "monotone", kind, pts, direction=direction)
    if kind is ConstraintKind.CURVATURE_TRIPLE:
        inner = b.copy()
        inner[axis, 0] += delta
        inner[axis, 1] -= delta
        center = sample_region(rng, inner, count)
        left = center.copy()
        left[:, axis] -= delta
        right = center.copy()
        right[:, axis] += delta
        pts = np.stack([left, center, right], axis=1)
        return Constraint(name or "curvature", kind, pts,
                          monotone=monotone, curvature=curvature)
    if kind in (ConstraintKind.VALUE_PIN, ConstraintKind.EQUALITY_INVARIANT,
                ConstraintKind.INEQUALITY_BOUND):
        pts = sample_region(rng, b, count)[:, None, :]
        if anchors is None:
            raise ValueError(f"{kind.value} needs anchor values")
        return Constraint(name or kind.value, kind, pts, anchors=np.asarray(anchors))
    raise ValueError(f"unknown constraint kind {kind}")


def constraint_to_dict(con: Constraint) -> dict:
    return {
        "name": con.name,
        "kind": con.kind.value,
        "points": con.points.tolist(),
        "anchors": None if con.anchors is None else con.anchors.tolist(),
        "direction": con.direction,
        "monotone": con.monotone,
        "curvature": con.curvature,
        "weight": con.weight,
    }


def constraint_from_dict(doc: dict) -> Constraint:
    return Constraint(
        name=doc["name"],
        kind=ConstraintKind(doc["kind"]),
        points=np.asarray(doc["points"], dtype=np.float64),
        anchors=None if doc["anchors"] is None else np.asarray(doc["anchors"]),
        direction=doc.get("direction", 0),
        monotone=doc.get("monotone", 0),
        curvature=doc.get("curvature", 0),
        weight=doc.get("weight", 1.0),
    )


def constraint_set_to_json(cset: ConstraintSet) -> str:
    return json.dumps([constraint_to_dict(c) for c in cset], separators=(",", ":"))


def constraint_set_from_json(text: str) -> ConstraintSet:
    return ConstraintSet(tuple(constraint_from_dict(d) for d in json.loads(text)))
