"""Benchmark problem bundles: data sets, constraint sets, and reference models.

Four systems ship: parallel resistors, the tire slip-force curve, the magnetic
manipulator force, and the mobile-robot x-position update.  The robot and
manipulator bundles use documented synthetic generators standing in for the
original measurements; every generator is a pure function of its seed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .priors import (Constraint, ConstraintKind, ConstraintSet,
                     constraint_set_from_json, constraint_set_to_json,
                     generate_samples, sample_interval_union, sample_region)

TS = 0.2                      # robot sampling period, seconds
MAGIC_PARAMS = dict(m=407.75, g=9.81, b=55.56, c=1.35, d=0.4, e=0.52)
MAGMAN_C2 = 5.0 * 0.008 ** 2  # places the force extremum at x = +-0.008
MAGMAN_DECAY_PIN = 1e-3       # |f(+-0.075)| pinned to this value


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=np.float64)))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class ProblemBundle:
    name: str
    input_names: tuple[str, ...]
    architecture: str
    train: Dataset
    valid: Dataset
    constraints: ConstraintSet
    interp: Dataset | None = None       # interpolation test set
    ext_test: Dataset | None = None     # extrapolation test set
    ext_valid: Dataset | None = None    # extrapolation-validation set (selection only)
    sequences: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    def reference_eval(self):
        return reference_model(self.name, self.manifest)


def resistors_reference(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return X[:, 0] * X[:, 1] / (X[:, 0] + X[:, 1])


def magic_reference(X, normalized: bool = True) -> np.ndarray:
    k = np.atleast_2d(np.asarray(X, dtype=np.float64))[:, 0]
    p = MAGIC_PARAMS
    raw = p["m"] * p["g"] * p["d"] * np.sin(
        p["c"] * np.arctan(p["b"] * (1 - p["e"]) * k + p["e"] * np.arctan(p["b"] * k)))
    return raw / (p["m"] * p["g"]) if normalized else raw


def magman_c1(i_current: float = 1.0) -> float:
    # chosen so the decay pin f(-0.075) = 1e-3 holds exactly
    return MAGMAN_DECAY_PIN * (0.075 ** 2 + MAGMAN_C2) ** 3 / (i_current * 0.075)


def magman_reference(X, i_current: float = 1.0) -> np.ndarray:
    x = np.atleast_2d(np.asarray(X, dtype=np.float64))[:, 0]
    return -i_current * magman_c1(i_current) * x / (x * x + MAGMAN_C2) ** 3


def turtlebot_reference(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return X[:, 0] + TS * X[:, 3] * np.cos(X[:, 2])


def reference_model(name: str, manifest: dict | None = None):
    manifest = manifest or {}
    if name == "resistors":
        return resistors_reference
    if name == "magic":
        normalized = manifest.get("normalized", True)
        return lambda X: magic_reference(X, normalized)
    if name == "magman":
        i_current = manifest.get("i_current", 1.0)
        return lambda X: magman_reference(X, i_current)
    if name == "turtlebot":
        return turtlebot_reference
    raise ValueError(f"unknown problem {name}")


def gen_resistors(size: int = 500, rng=None, seed: int | None = None,
                  interp_size: int = 500) -> ProblemBundle:
    """Two resistors in parallel; r1, r2 uniform on [0.0001, 20] Ohm."""
    if size not in (10, 500):
        raise ValueError("resistors data set size must be 10 or 500")
    rng = np.random.default_rng(seed) if rng is None else rng
    lo, hi = 1e-4, 20.0
    box = [[lo, hi], [lo, hi]]
    X = sample_region(rng, box, size)
    clean = resistors_reference(X)
    y = clean + rng.normal(0.0, 0.05 * np.std(clean), size=size)
    n_train = int(round(size * (0.8 if size == 10 else 0.7)))
    perm = rng.permutation(size)
    tr, va = perm[:n_train], perm[n_train:]
    Xi = sample_region(rng, box, interp_size)
    ext_box = [[20.0, 40.0], [20.0, 40.0]]
    Xe = sample_region(rng, ext_box, 500)
    Xev = sample_region(rng, ext_box, 40)
    sym = generate_samples(ConstraintKind.SYMMETRY, box, 50, rng, name="symmetry")
    diag = sample_region(rng, [[lo, hi]], 50)[:, 0]
    equal_r = Constraint("equal_resistors", ConstraintKind.EQUALITY_INVARIANT,
                         np.stack([diag, diag], axis=1)[:, None, :], anchors=diag / 2.0)
    bpts = sample_region(rng, box, 50)
    below_min = Constraint("below_each_input", ConstraintKind.INEQUALITY_BOUND,
                           bpts[:, None, :], anchors=bpts.min(axis=1))
    return ProblemBundle(
        name="resistors", input_names=("r1", "r2"), architecture="informed",
        train=Dataset(X[tr], y[tr]), valid=Dataset(X[va], y[va]),
        interp=Dataset(Xi, resistors_reference(Xi)),
        ext_test=Dataset(Xe, resistors_reference(Xe)),
        ext_valid=Dataset(Xev, resistors_reference(Xev)),
        constraints=ConstraintSet((sym, equal_r, below_min)),
        manifest={"problem": "resistors", "seed": seed, "size": size,
                  "noise": "normal(0, 0.05*std(y))", "train_domain": [lo, hi],
                  "ext_domain": [20.0, 40.0]},
    )


def gen_magic(rng=None, seed: int | None = None, normalized: bool = True) -> ProblemBundle:
    """Tire slip-force curve, unevenly sampled; the peak region is the extrapolation domain."""
    rng = np.random.default_rng(seed) if rng is None else rng
    ref = lambda X: magic_reference(X, normalized)
    k_left = sample_region(rng, [[0.0, 0.02]], 50)
    k_right = sample_region(rng, [[0.2, 0.99]], 50)
    k_peak = sample_region(rng, [[0.03, 0.1]], 10)
    X = np.concatenate([k_left, k_right, k_peak])
    noise = np.concatenate([rng.normal(0.0, 0.0025, 100), rng.normal(0.0, 0.005, 10)])
    y = ref(X) + noise
    perm = rng.permutation(110)
    tr, va = perm[:88], perm[88:]
    Xi = sample_interval_union(rng, [[0.0, 0.02], [0.2, 0.99]], 200)[:, None]
    Xev = sample_region(rng, [[0.03, 0.1]], 40)
    Xe = sample_region(rng, [[0.03, 0.1]], 100)
    pin = Constraint("zero_at_origin", ConstraintKind.VALUE_PIN,
                     np.zeros((50, 1, 1)), anchors=np.zeros(50))
    right = generate_samples(ConstraintKind.CURVATURE_TRIPLE, [[0.2, 0.99]], 50, rng,
                             delta=1e-3, monotone=-1, curvature=1,
                             name="decreasing_convex_right")
    concave = generate_samples(ConstraintKind.CURVATURE_TRIPLE, [[0.03, 0.1]], 50, rng,
                               delta=1e-3, curvature=-1, name="concave_peak")
    return ProblemBundle(
        name="magic", input_names=("kappa",), architecture="general-arctan",
        train=Dataset(X[tr], y[tr]), valid=Dataset(X[va], y[va]),
        interp=Dataset(Xi, ref(Xi)), ext_test=Dataset(Xe, ref(Xe)),
        ext_valid=Dataset(Xev, ref(Xev)),
        constraints=ConstraintSet((pin, right, concave)),
        manifest={"problem": "magic", "seed": seed, "normalized": normalized,
                  "interp_domain": [[0.0, 0.02], [0.2, 0.99]],
                  "ext_domain": [0.03, 0.1]},
    )


def gen_magman(i_current: float = 1.0, rng=None, seed: int | None = None,
               noise_rel: float = 0.01) -> ProblemBundle:
    """Magnetic manipulator force curve; data cover only [-0.027, 0.027] m."""
    if i_current <= 0:
        raise ValueError("coil current must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    ref = lambda X: magman_reference(X, i_current)
    X_all = sample_region(rng, [[-0.027, 0.027]], 858)
    clean = ref(X_all)
    y_all = clean + rng.normal(0.0, noise_rel * np.std(clean), 858)
    perm = rng.permutation(858)
    tr, va, te = perm[:400], perm[400:601], perm[601:]
    ext_iv = [[-0.075, -0.027], [0.027, 0.075]]
    Xev = sample_interval_union(rng, ext_iv, 40)[:, None]
    Xe = sample_interval_union(rng, ext_iv, 200)[:, None]
    pos = generate_samples(ConstraintKind.SIGN, [[-0.075, 0.0]], 50, rng,
                           direction=1, name="positive_left")
    neg = generate_samples(ConstraintKind.SIGN, [[0.0, 0.075]], 50, rng,
                           direction=-1, name="negative_right")
    width = 0.075 - 0.008
    inc_l = generate_samples(ConstraintKind.MONOTONE_PAIR, [[-0.075, -0.008]], 25, rng,
                             delta=1e-3 * width, direction=1)
    inc_r = generate_samples(ConstraintKind.MONOTONE_PAIR, [[0.008, 0.075]], 25, rng,
                             delta=1e-3 * width, direction=1)
    increasing = Constraint("increasing_outer", ConstraintKind.MONOTONE_PAIR,
                            np.concatenate([inc_l.points, inc_r.points]), direction=1)
    decreasing = generate_samples(ConstraintKind.MONOTONE_PAIR, [[-0.008, 0.008]], 50, rng,
                                  delta=1e-3 * 0.016, direction=-1, name="decreasing_inner")
    pins = Constraint("exact_values", ConstraintKind.VALUE_PIN,
                      np.array([[[0.0]], [[-0.075]], [[0.075]]]),
                      anchors=np.array([0.0, MAGMAN_DECAY_PIN, -MAGMAN_DECAY_PIN]))
    return ProblemBundle(
        name="magman", input_names=("x",), architecture="general",
        train=Dataset(X_all[tr], y_all[tr]), valid=Dataset(X_all[va], y_all[va]),
        interp=Dataset(X_all[te], y_all[te]),
        ext_test=Dataset(Xe, ref(Xe)), ext_valid=Dataset(Xev, ref(Xev)),
        constraints=ConstraintSet((pos, neg, increasing, decreasing, pins)),
        manifest={"problem": "magman", "seed": seed, "i_current": i_current,
                  "noise_rel": noise_rel, "train_domain": [-0.027, 0.027],
                  "ext_domain": ext_iv},
    )


def _rollout_sequence(rng: np.random.Generator, steps: int) -> np.ndarray:
    """Unicycle kinematics from the origin; columns x, y, phi, v_f, v_a, x_next."""
    vf = rng.uniform(0.0, 0.3, steps)
    va = rng.uniform(-1.0, 1.0, steps)
    rows = np.zeros((steps, 6))
    x = y = phi = 0.0
    for k in range(steps):
        rows[k, :5] = (x, y, phi, vf[k], va[k])
        x_next = x + TS * vf[k] * np.cos(phi)
        rows[k, 5] = x_next
        y = y + TS * vf[k] * np.sin(phi)
        phi = phi + TS * va[k]
        x = x_next
    return rows


def gen_turtlebot(rng=None, seed: int | None = None, noise_abs: float = 1e-3,
                  steps: int = 150) -> ProblemBundle:
    """Synthetic robot x-position sequences; 1 train + 1 valid + 3 test runs."""
    rng = np.random.default_rng(seed) if rng is None else rng
    seqs = {name: _rollout_sequence(rng, steps)
            for name in ("train", "valid", "test1", "test2", "test3")}

    def noisy_dataset(seq: np.ndarray) -> Dataset:
        y = seq[:, 5].copy()
        if noise_abs > 0:
            y = y + rng.normal(0.0, noise_abs, seq.shape[0])
        return Dataset(seq[:, :5], y)

    train = noisy_dataset(seqs["train"])
    valid = noisy_dataset(seqs["valid"])
    # Constraint states sampled within the training sequence's observed limits.
    st = seqs["train"]
    lim = [[st[:, i].min(), st[:, i].max()] for i in range(3)]
    lim = [[lo - 1e-3, hi + 1e-3] if hi - lo < 1e-6 else [lo, hi] for lo, hi in lim]

    def states(count):
        return sample_region(rng, lim, count)

    s = states(50)
    steady = Constraint("steady_state", ConstraintKind.EQUALITY_INVARIANT,
                        np.column_stack([s, np.zeros((50, 2))])[:, None, :],
                        anchors=s[:, 0])
    s = states(50)
    vf = sample_region(rng, [[0.0, 0.3]], 50)[:, 0]
    phi = np.where(np.arange(50) < 25, -np.pi / 2, np.pi / 2)
    axis = Constraint("axis_parallel", ConstraintKind.EQUALITY_INVARIANT,
                      np.column_stack([s[:, 0], s[:, 1], phi, vf,
                                       np.zeros(50)])[:, None, :],
                      anchors=s[:, 0])
    s = states(50)
    va = sample_region(rng, [[-1.0, 1.0]], 50)[:, 0]
    turn = Constraint("turn_on_spot", ConstraintKind.EQUALITY_INVARIANT,
                      np.column_stack([s[:, 0], s[:, 1], s[:, 2],
                                       np.zeros(50), va])[:, None, :],
                      anchors=s[:, 0])
    return ProblemBundle(
        name="turtlebot", input_names=("x_pos", "y_pos", "phi", "v_f", "v_a"),
        architecture="general",
        train=train, valid=valid,
        constraints=ConstraintSet((steady, axis, turn)),
        sequences=seqs,
        manifest={"problem": "turtlebot", "seed": seed, "noise_abs": noise_abs,
                  "steps": steps, "sampling_period": TS},
    )


GENERATORS = {
    "resistors": gen_resistors,
    "magic": gen_magic,
    "magman": gen_magman,
    "turtlebot": gen_turtlebot,
}


def generate(problem: str, seed: int, **params) -> ProblemBundle:
    if problem not in GENERATORS:
        raise ValueError(f"unknown problem {problem!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[problem](seed=seed, **params)


def _csv_bytes(header: list[str], rows: np.ndarray) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue().encode()


def _read_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.asarray([[float(v) for v in row] for row in reader])


def save_bundle(bundle: ProblemBundle, out_dir: str | Path) -> Path:
    """Persist a bundle as CSV data sets plus JSON manifest and constraints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = list(bundle.input_names) + ["y"]
    for name in ("train", "valid", "interp", "ext_test", "ext_valid"):
        ds = getattr(bundle, name)
        if ds is not None:
            rows = np.column_stack([ds.X, ds.y])
            (out / f"{name}.csv").write_bytes(_csv_bytes(header, rows))
    for name, seq in bundle.sequences.items():
        seq_header = list(bundle.input_names) + ["x_next"]
        (out / f"seq_{name}.csv").write_bytes(_csv_bytes(seq_header, seq))
    (out / "constraints.json").write_text(constraint_set_to_json(bundle.constraints))
    manifest = dict(bundle.manifest)
    manifest.update({"input_names": list(bundle.input_names),
                     "architecture": bundle.architecture,
                     "sequences": sorted(bundle.sequences)})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_bundle(in_dir: str | Path) -> ProblemBundle:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    names = tuple(manifest["input_names"])

    def dataset(name):
        path = src / f"{name}.csv"
        if not path.exists():
            return None
        rows = _read_csv(path)
        return Dataset(rows[:, :-1], rows[:, -1])

    sequences = {name: _read_csv(src / f"seq_{name}.csv")
                 for name in manifest.get("sequences", [])}
    return ProblemBundle(
        name=manifest["problem"], input_names=names,
        architecture=manifest["architecture"],
        train=dataset("train"), valid=dataset("valid"), interp=dataset("interp"),
        ext_test=dataset("ext_test"), ext_valid=dataset("ext_valid"),
        constraints=constraint_set_from_json((src / "constraints.json").read_text()),
        sequences=sequences, manifest=manifest,
    )
