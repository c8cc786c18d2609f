"""Heterogeneous layered computational graph with copy units and learnable affine inputs.

Each hidden layer holds learnable function units (sin, tanh, arctan, identity,
multiply, divide) plus implicit copy units that replicate the whole previous
layer's output with fixed weight 1.  Every learnable unit owns one affine node
per operand (z = W @ y_prev + b); the flat weight vector concatenates, layer by
layer, all z-node weight rows followed by all z-node biases.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

DEFAULT_ACTIVITY_THRESHOLD = 1e-4
DEFAULT_DIV_GUARD = 1e-4


class StructureError(ValueError):
    """Raised when an architecture spec cannot describe a buildable network."""


class UnitKind(str, Enum):
    SIN = "sin"
    TANH = "tanh"
    ARCTAN = "arctan"
    IDENT = "ident"
    MUL = "mul"
    DIV = "div"

    @property
    def arity(self) -> int:
        return 2 if self in (UnitKind.MUL, UnitKind.DIV) else 1

    @property
    def has_singularity(self) -> bool:
        # Division is the only shipped singularity type; its critical z node is
        # the denominator (second operand).
        return self is UnitKind.DIV


@dataclass(frozen=True)
class ArchitectureSpec:
    """Seed-independent structural description of a network."""

    input_names: tuple[str, ...]
    hidden_layers: tuple[tuple[UnitKind, ...], ...]
    output_units: tuple[UnitKind, ...] = (UnitKind.IDENT,)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    def validate(self, for_build: bool = False) -> None:
        if self.n_inputs < 1:
            raise StructureError("network needs at least one input variable")
        if len(self.output_units) != 1:
            raise StructureError("exactly one output unit is supported")
        for i, layer in enumerate(self.hidden_layers):
            if len(layer) == 0:
                raise StructureError(f"hidden layer {i} is empty")
        if for_build and len(self.hidden_layers) == 0:
            raise StructureError("cannot build a network without hidden layers")

    def to_json(self) -> str:
        doc = {
            "inputs": list(self.input_names),
            "hidden": [[u.value for u in layer] for layer in self.hidden_layers],
            "output": [u.value for u in self.output_units],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        doc = json.loads(text)
        return cls(
            input_names=tuple(doc["inputs"]),
            hidden_layers=tuple(tuple(UnitKind(u) for u in layer) for layer in doc["hidden"]),
            output_units=tuple(UnitKind(u) for u in doc["output"]),
        )

    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def general_architecture(input_names: tuple[str, ...] | list[str],
                         trig: str = "tanh") -> ArchitectureSpec:
    """Three hidden layers of {sin, tanh|arctan, ident, mul} x2, plus one div in layer 3."""
    second = UnitKind.ARCTAN if trig == "arctan" else UnitKind.TANH
    base = (UnitKind.SIN, UnitKind.SIN, second, second,
            UnitKind.IDENT, UnitKind.IDENT, UnitKind.MUL, UnitKind.MUL)
    return ArchitectureSpec(
        input_names=tuple(input_names),
        hidden_layers=(base, base, base + (UnitKind.DIV,)),
    )


def informed_architecture(input_names: tuple[str, ...] | list[str]) -> ArchitectureSpec:
    """Restricted {ident, mul, div} topology: 4+4 units in layers 1-2, 3+3+div in layer 3."""
    wide = (UnitKind.IDENT,) * 4 + (UnitKind.MUL,) * 4
    narrow = (UnitKind.IDENT,) * 3 + (UnitKind.MUL,) * 3 + (UnitKind.DIV,)
    return ArchitectureSpec(
        input_names=tuple(input_names),
        hidden_layers=(wide, wide, narrow),
    )


ARCHITECTURE_PRESETS = {
    "general": lambda names: general_architecture(names, trig="tanh"),
    "general-arctan": lambda names: general_architecture(names, trig="arctan"),
    "informed": informed_architecture,
}


@dataclass(frozen=True)
class _LayerLayout:
    """Precomputed indexing for one layer of learnable units."""

    kinds: tuple[UnitKind, ...]
    fan_in: int                 # width of the previous layer's output
    n_units: int
    n_z: int                    # total affine nodes in this layer
    w_offset: int               # flat offset of the (n_z, fan_in) weight block
    b_offset: int               # flat offset of the (n_z,) bias block
    z_unit: np.ndarray          # z row -> owning unit index
    unary_groups: tuple[tuple[UnitKind, np.ndarray, np.ndarray], ...]  # (kind, unit rows, z rows)
    mul_units: np.ndarray
    mul_z: np.ndarray           # (n_mul, 2) z rows
    div_units: np.ndarray
    div_z: np.ndarray           # (n_div, 2) z rows
    has_copies: bool            # hidden layers append a copy of the previous output

    @property
    def out_width(self) -> int:
        return self.n_units + (self.fan_in if self.has_copies else 0)

    @property
    def end_offset(self) -> int:
        return self.b_offset + self.n_z


def _build_layout(spec: ArchitectureSpec) -> tuple[_LayerLayout, ...]:
    layers = []
    width = spec.n_inputs
    offset = 0
    all_layers = list(spec.hidden_layers) + [spec.output_units]
    for li, kinds in enumerate(all_layers):
        is_output = li == len(all_layers) - 1
        z_unit = []
        unary: dict[UnitKind, tuple[list[int], list[int]]] = {}
        mul_units, mul_z, div_units, div_z = [], [], [], []
        z = 0
        for ui, kind in enumerate(kinds):
            if kind.arity == 1:
                unary.setdefault(kind, ([], []))
                unary[kind][0].append(ui)
                unary[kind][1].append(z)
                z_unit.append(ui)
                z += 1
            else:
                rows = [z, z + 1]
                z_unit.extend([ui, ui])
                if kind is UnitKind.MUL:
                    mul_units.append(ui)
                    mul_z.append(rows)
                else:
                    div_units.append(ui)
                    div_z.append(rows)
                z += 2
        n_z = z
        layers.append(_LayerLayout(
            kinds=tuple(kinds),
            fan_in=width,
            n_units=len(kinds),
            n_z=n_z,
            w_offset=offset,
            b_offset=offset + n_z * width,
            z_unit=np.asarray(z_unit, dtype=np.intp),
            unary_groups=tuple(
                (k, np.asarray(u, dtype=np.intp), np.asarray(zr, dtype=np.intp))
                for k, (u, zr) in unary.items()
            ),
            mul_units=np.asarray(mul_units, dtype=np.intp),
            mul_z=np.asarray(mul_z, dtype=np.intp).reshape(-1, 2),
            div_units=np.asarray(div_units, dtype=np.intp),
            div_z=np.asarray(div_z, dtype=np.intp).reshape(-1, 2),
            has_copies=not is_output,
        ))
        offset += n_z * width + n_z
        width = layers[-1].out_width
    return tuple(layers)


def verify_weight_count(spec: ArchitectureSpec) -> int:
    """Closed-form learnable-weight count: each z node carries fan_in weights + 1 bias."""
    spec.validate()
    count = 0
    width = spec.n_inputs
    for kinds in list(spec.hidden_layers) + [spec.output_units]:
        n_z = sum(k.arity for k in kinds)
        count += n_z * (width + 1)
        width = len(kinds) + width  # learnable outputs + copies of the previous layer
    # The output layer has no copy units; the last iteration overcounted nothing
    # because count only uses the *previous* width.
    return count


@dataclass
class Network:
    """A concrete network: spec, layout, and the flat 64-bit weight vector."""

    spec: ArchitectureSpec
    weights: np.ndarray
    layout: tuple[_LayerLayout, ...] = field(repr=False, default=())

    def __post_init__(self):
        if not self.layout:
            self.layout = _build_layout(self.spec)
        expected = verify_weight_count(self.spec)
        if self.weights.shape != (expected,):
            raise StructureError(
                f"weight vector has length {self.weights.shape}, spec requires {expected}")

    @property
    def n_weights(self) -> int:
        return self.weights.shape[0]

    def layer_w(self, li: int) -> np.ndarray:
        lay = self.layout[li]
        return self.weights[lay.w_offset:lay.b_offset].reshape(lay.n_z, lay.fan_in)

    def layer_b(self, li: int) -> np.ndarray:
        lay = self.layout[li]
        return self.weights[lay.b_offset:lay.end_offset]

    def copy(self) -> "Network":
        return Network(self.spec, self.weights.copy(), self.layout)


def build_network(spec: ArchitectureSpec, rng_seed: int) -> Network:
    """Initialize weights uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases on [-0.1, 0.1]."""
    spec.validate(for_build=True)
    rng = np.random.default_rng(rng_seed)
    layout = _build_layout(spec)
    chunks = []
    for lay in layout:
        scale = 1.0 / np.sqrt(lay.fan_in)
        chunks.append(rng.uniform(-scale, scale, size=lay.n_z * lay.fan_in))
        chunks.append(rng.uniform(-0.1, 0.1, size=lay.n_z))
    return Network(spec, np.concatenate(chunks), layout)


@dataclass
class LayerCache:
    y_in: np.ndarray      # (rows, fan_in)
    z: np.ndarray         # (rows, n_z)
    units: np.ndarray     # (rows, n_units)
    div_ok: np.ndarray    # (rows, n_div) denominator-above-guard mask


def forward_batch(net: Network, x: np.ndarray,
                  div_guard: float = DEFAULT_DIV_GUARD) -> tuple[np.ndarray, list[LayerCache]]:
    """Evaluate the network on a (rows, n) matrix; returns outputs and per-layer caches."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.spec.n_inputs:
        raise StructureError(f"input has {x.shape[1]} columns, spec has {net.spec.n_inputs}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    caches: list[LayerCache] = []
    y = x
    for li, lay in enumerate(net.layout):
        z = y @ net.layer_w(li).T + net.layer_b(li)
        units = np.empty((x.shape[0], lay.n_units))
        for kind, urows, zrows in lay.unary_groups:
            v = z[:, zrows]
            if kind is UnitKind.SIN:
                units[:, urows] = np.sin(v)
            elif kind is UnitKind.TANH:
                units[:, urows] = np.tanh(v)
            elif kind is UnitKind.ARCTAN:
                units[:, urows] = np.arctan(v)
            else:
                units[:, urows] = v
        if lay.mul_units.size:
            units[:, lay.mul_units] = z[:, lay.mul_z[:, 0]] * z[:, lay.mul_z[:, 1]]
        if lay.div_units.size:
            num = z[:, lay.div_z[:, 0]]
            den = z[:, lay.div_z[:, 1]]
            ok = den > div_guard
            units[:, lay.div_units] = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        else:
            ok = np.zeros((x.shape[0], 0), dtype=bool)
        caches.append(LayerCache(y_in=y, z=z, units=units, div_ok=ok))
        y = np.concatenate([units, y], axis=1) if lay.has_copies else units
    return y, caches


def forward(net: Network, x, div_guard: float = DEFAULT_DIV_GUARD) -> tuple[float, list[LayerCache]]:
    """Single-sample forward pass; returns the scalar output and the activation caches."""
    y, caches = forward_batch(net, np.asarray(x, dtype=np.float64).reshape(1, -1), div_guard)
    return float(y[0, 0]), caches


@dataclass(frozen=True)
class ActivityReport:
    """Active-weight analysis at a threshold: which weights reach the output."""

    threshold: float
    active_mask: np.ndarray      # bool over the flat weight vector
    n_active_links: int
    n_active_units: int

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active_mask)


def activity(net: Network, threshold: float = DEFAULT_ACTIVITY_THRESHOLD) -> ActivityReport:
    """Collect weights with |w| >= threshold lying on an output-reaching path.

    A learnable unit is active when it has at least one above-threshold input
    weight (bias included) and its output reaches the network output through
    active units; copy chains are traversed transparently.  Output units feed
    the report's link set but are not counted as active units.
    """
    if threshold <= 0:
        raise ValueError("activity threshold must be positive")
    mask = np.zeros(net.n_weights, dtype=bool)
    n_units_active = 0
    needed = np.ones(net.layout[-1].n_units, dtype=bool)  # the outputs themselves
    for li in range(len(net.layout) - 1, -1, -1):
        lay = net.layout[li]
        is_output = li == len(net.layout) - 1
        if is_output:
            needed_units = needed
            needed_copy = np.zeros(0, dtype=bool)
        else:
            needed_units = needed[:lay.n_units]
            needed_copy = needed[lay.n_units:]
        live_w = np.abs(net.layer_w(li)) >= threshold       # (n_z, fan_in)
        live_b = np.abs(net.layer_b(li)) >= threshold       # (n_z,)
        z_live_any = live_w.any(axis=1) | live_b
        unit_live = np.bincount(lay.z_unit, weights=z_live_any, minlength=lay.n_units) > 0
        active_units = needed_units & unit_live
        if not is_output:
            n_units_active += int(active_units.sum())
        z_active = active_units[lay.z_unit]
        w_mask = live_w & z_active[:, None]
        b_mask = live_b & z_active
        mask[lay.w_offset:lay.b_offset] = w_mask.reshape(-1)
        mask[lay.b_offset:lay.end_offset] = b_mask
        needed_prev = w_mask.any(axis=0)
        if needed_copy.size:
            needed_prev = needed_prev | needed_copy
        needed = needed_prev
    return ActivityReport(
        threshold=float(threshold),
        active_mask=mask,
        n_active_links=int(mask.sum()),
        n_active_units=n_units_active,
    )


def dump_weights(net: Network) -> str:
    """Serialize the weight vector with the spec hash for integrity checking."""
    doc = {"spec_hash": net.spec.spec_hash(), "weights": net.weights.tolist()}
    return json.dumps(doc, separators=(",", ":"))


def load_weights(net_or_spec, text: str) -> Network:
    doc = json.loads(text)
    spec = net_or_spec.spec if isinstance(net_or_spec, Network) else net_or_spec
    if doc["spec_hash"] != spec.spec_hash():
        raise StructureError("weight dump does not match the architecture spec")
    return Network(spec, np.asarray(doc["weights"], dtype=np.float64))
