"""Loss terms, stage compositions, and self-adaptive term weighting.

Four terms feed the stage losses: training RMSE, the singularity penalty on
division denominators, the constraint-violation term, and the smoothed L0.5
regularizer over active weights.  The three secondary terms are scaled by
coefficients (alpha, beta, gamma) kept near target ratios of the training term
via sliding-window statistics, then clamped so no weighted term ever exceeds
ratio * training RMSE.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import priors
from .autodiff import backward
from .netgraph import Network, forward_batch

STAGES = ("L1", "L2", "L3")


def rmse(residuals: np.ndarray) -> float:
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise ValueError("RMSE of an empty data set")
    return float(np.sqrt(np.mean(r * r)))


def training_rmse(net: Network, X: np.ndarray, y: np.ndarray,
                  div_guard: float) -> float:
    out, _ = forward_batch(net, X, div_guard)
    return rmse(out[:, 0] - np.asarray(y, dtype=np.float64))


def singularity_metric(theta: float, z):
    """Eq-style penalty: max(theta - z, 0) away from the pole, exactly 10 at z == 0."""
    if theta <= 0:
        raise ValueError("singularity threshold must be positive")
    z = np.asarray(z, dtype=np.float64)
    out = np.where(z == 0.0, 10.0, np.maximum(theta - z, 0.0))
    return float(out) if out.ndim == 0 else out


def smoothed_l05(w, a: float):
    """|w|^(1/2) outside [-a, a]; an even C1 quartic-under-sqrt bridge inside."""
    if a <= 0:
        raise ValueError("smoothing half-width must be positive")
    w = np.asarray(w, dtype=np.float64)
    aw = np.abs(w)
    wc = np.clip(w, -a, a)  # the bridge polynomial is only valid inside [-a, a]
    inner = -wc ** 4 / (8.0 * a ** 3) + 3.0 * wc * wc / (4.0 * a) + 3.0 * a / 8.0
    out = np.where(aw >= a, np.sqrt(aw), np.sqrt(inner))
    return float(out) if out.ndim == 0 else out


def smoothed_l05_grad(w, a: float):
    w = np.asarray(w, dtype=np.float64)
    aw = np.abs(w)
    outer = np.sign(w) * 0.5 / np.sqrt(np.maximum(aw, a))
    wc = np.clip(w, -a, a)
    inner = -wc ** 4 / (8.0 * a ** 3) + 3.0 * wc * wc / (4.0 * a) + 3.0 * a / 8.0
    d_inner = -wc ** 3 / (2.0 * a ** 3) + 3.0 * wc / (2.0 * a)
    bridge = d_inner / (2.0 * np.sqrt(inner))
    out = np.where(aw >= a, outer, bridge)
    return float(out) if out.ndim == 0 else out


def clamp_terms(l_t: float, l_s: float, l_c: float, l_r: float,
                ratios: tuple[float, float, float]):
    """Cap each weighted secondary term at ratio * L_t; returns terms + clamp flags."""
    r_s, r_c, r_r = ratios
    caps = (r_s * l_t, r_c * l_t, r_r * l_t)
    vals = (l_s, l_c, l_r)
    clamped = tuple(min(v, cap) for v, cap in zip(vals, caps))
    flags = tuple(v > cap for v, cap in zip(vals, caps))
    return l_t, *clamped, flags


def compose(stage: str, terms: dict[str, float]) -> float:
    """Stage losses: L1 = t+s, L2 = t+s+c, L3 = t+s+c+r."""
    need = {"L1": ("t", "s"), "L2": ("t", "s", "c"), "L3": ("t", "s", "c", "r")}
    if stage not in need:
        raise ValueError(f"unknown stage {stage}")
    missing = [k for k in need[stage] if k not in terms]
    if missing:
        raise ValueError(f"stage {stage} missing terms {missing}")
    return float(sum(terms[k] for k in need[stage]))


def _window_mean(buf: deque) -> float:
    return float(np.mean(buf)) if buf else 0.0


class StaticInitError(RuntimeError):
    """Raised when a frozen static coefficient is initialized twice."""


@dataclass
class LossState:
    """Sliding-window histories and the current term coefficients."""

    window: int
    n_sing_types: int
    n_constraints: int
    ratios: tuple[float, float, float] = (0.5, 0.5, 0.5)
    mode: str = "adaptive"  # adaptive | static
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    b_t: deque = field(default_factory=deque)
    rho_s_raw: list[deque] = field(default_factory=list)
    rho_s_norm: list[deque] = field(default_factory=list)
    rho_c_raw: list[deque] = field(default_factory=list)
    rho_c_norm: list[deque] = field(default_factory=list)
    rho_r_hist: deque = field(default_factory=deque)
    alpha_frozen: bool = False
    beta_frozen: bool = False
    gamma_frozen: bool = False

    def __post_init__(self):
        if self.mode not in ("adaptive", "static"):
            raise ValueError(f"unknown weighting mode {self.mode}")
        w = self.window
        self.b_t = deque(maxlen=w)
        self.rho_s_raw = [deque(maxlen=w) for _ in range(self.n_sing_types)]
        self.rho_s_norm = [deque(maxlen=w) for _ in range(self.n_sing_types)]
        self.rho_c_raw = [deque(maxlen=w) for _ in range(self.n_constraints)]
        self.rho_c_norm = [deque(maxlen=w) for _ in range(self.n_constraints)]
        self.rho_r_hist = deque(maxlen=w)

    def h_s(self) -> np.ndarray:
        """Scaling denominators from the raw history: mean of the window, 1 when unusable."""
        if self.mode == "static":
            return np.ones(self.n_sing_types)
        h = np.array([_window_mean(b) for b in self.rho_s_raw])
        h[h == 0.0] = 1.0
        return h if h.size else h

    def h_c(self) -> np.ndarray:
        if self.mode == "static":
            return np.ones(self.n_constraints)
        h = np.array([_window_mean(b) for b in self.rho_c_raw])
        h[h == 0.0] = 1.0
        return h

    def record(self, l_t: float, rho_s: np.ndarray, h_s: np.ndarray,
               rho_c: np.ndarray, h_c: np.ndarray, rho_r: float | None) -> None:
        """Append this iteration's raw values (normalized by the h used to weight them)."""
        self.b_t.append(l_t)
        for j in range(self.n_sing_types):
            self.rho_s_raw[j].append(float(rho_s[j]))
            self.rho_s_norm[j].append(float(rho_s[j] / h_s[j]))
        for j in range(self.n_constraints):
            self.rho_c_raw[j].append(float(rho_c[j]))
            self.rho_c_norm[j].append(float(rho_c[j] / h_c[j]))
        if rho_r is not None:
            self.rho_r_hist.append(float(rho_r))

    def update_alpha(self) -> float:
        if self.mode == "static":
            return self.alpha
        denom = sum(_window_mean(b) for b in self.rho_s_norm)
        self.alpha = self.ratios[0] * _window_mean(self.b_t) / denom if denom > 0 else 1.0
        return self.alpha

    def update_beta(self) -> float:
        if self.mode == "static":
            return self.beta
        denom = sum(_window_mean(b) for b in self.rho_c_norm)
        self.beta = self.ratios[1] * _window_mean(self.b_t) / denom if denom > 0 else 1.0
        return self.beta

    def update_gamma(self) -> float:
        if self.mode == "static":
            return self.gamma
        denom = _window_mean(self.rho_r_hist)
        self.gamma = self.ratios[2] * _window_mean(self.b_t) / denom if denom > 0 else 1.0
        return self.gamma

    def static_init_alpha(self, l_t: float, rho_s: np.ndarray) -> float:
        if self.alpha_frozen:
            raise StaticInitError("alpha already frozen")
        total = float(np.sum(rho_s))
        self.alpha = self.ratios[0] * l_t / total if total > 0 else 1.0
        self.alpha_frozen = True
        return self.alpha

    def static_init_beta(self, l_t: float, rho_c: np.ndarray) -> float:
        if self.beta_frozen:
            raise StaticInitError("beta already frozen")
        total = float(np.sum(rho_c))
        self.beta = self.ratios[1] * l_t / total if total > 0 else 1.0
        self.beta_frozen = True
        return self.beta

    def static_init_gamma(self, l_t: float, rho_r: float) -> float:
        if self.gamma_frozen:
            raise StaticInitError("gamma already frozen")
        self.gamma = self.ratios[2] * l_t / rho_r if rho_r > 0 else 1.0
        self.gamma_frozen = True
        return self.gamma

    def adapt_weights(self) -> tuple[float, float, float]:
        """Recompute all three coefficients from the windows (adaptive mode)."""
        return self.update_alpha(), self.update_beta(), self.update_gamma()


@dataclass(frozen=True)
class TermCoeffs:
    """Frozen weighting snapshot used to evaluate one iteration's loss."""

    alpha: float
    beta: float
    gamma: float
    h_s: np.ndarray
    h_c: np.ndarray


@dataclass
class RawTerms:
    l_t: float
    rho_s: np.ndarray          # per singularity type
    rho_c: np.ndarray          # per constraint
    valid_rmse: float
    ext_rmse: float | None
    caches: list = field(repr=False, default=None)
    y_all: np.ndarray = field(repr=False, default=None)
    train_residuals: np.ndarray = field(repr=False, default=None)


@dataclass
class LossBreakdown:
    stage: str
    total: float
    l_t: float
    l_s: float
    l_c: float | None
    l_r: float | None
    rho_s: np.ndarray
    rho_c: np.ndarray
    rho_r: float | None
    clamped: tuple[bool, bool, bool]
    valid_rmse: float
    ext_rmse: float | None
    grad: np.ndarray | None = None


class CompositeLoss:
    """Binds a network to its training bundle and evaluates stage losses + gradients.

    One forward pass covers the aggregated rows: training data, validation
    data, every constraint-sample point (these three form the singularity
    check set D), and optionally the extrapolation-validation inputs.
    """

    def __init__(self, net: Network, X_train, y_train, X_valid, y_valid,
                 constraints: priors.ConstraintSet | None,
                 theta_s: float = 1e-4, l05_a: float = 0.01,
                 ratios: tuple[float, float, float] = (0.5, 0.5, 0.5),
                 X_extval=None, y_extval=None):
        self.net = net
        self.theta_s = float(theta_s)
        self.l05_a = float(l05_a)
        self.ratios = ratios
        self.X_train = np.asarray(X_train, dtype=np.float64)
        self.y_train = np.asarray(y_train, dtype=np.float64)
        self.y_valid = np.asarray(y_valid, dtype=np.float64)
        self.constraints = constraints if constraints is not None else priors.ConstraintSet(())
        self.n_train = self.X_train.shape[0]
        self.n_valid = np.asarray(X_valid).shape[0]
        c_points, c_slices = self.constraints.all_points()
        blocks = [self.X_train, np.asarray(X_valid, dtype=np.float64)]
        if c_points.size:
            blocks.append(c_points)
        self.c_slices = [slice(s.start + self.n_train + self.n_valid,
                               s.stop + self.n_train + self.n_valid) for s in c_slices]
        self.n_sing_rows = self.n_train + self.n_valid + (c_points.shape[0] if c_points.size else 0)
        self.y_extval = None if y_extval is None else np.asarray(y_extval, dtype=np.float64)
        if X_extval is not None:
            blocks.append(np.asarray(X_extval, dtype=np.float64))
        self.X_all = np.concatenate(blocks, axis=0)
        # Singularity bookkeeping: one type (division); S = every div unit.
        self.div_layers = [(li, lay.div_z) for li, lay in enumerate(net.layout)
                           if lay.div_z.size]
        self.n_div_units = sum(z.shape[0] for _, z in self.div_layers)
        self.n_sing_types = 1 if self.n_div_units else 0

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def make_state(self, window: int, mode: str) -> LossState:
        return LossState(window=window, n_sing_types=self.n_sing_types,
                         n_constraints=self.n_constraints, ratios=self.ratios, mode=mode)

    def coeffs(self, state: LossState) -> TermCoeffs:
        return TermCoeffs(alpha=state.alpha, beta=state.beta, gamma=state.gamma,
                          h_s=state.h_s(), h_c=state.h_c())

    def forward_terms(self) -> RawTerms:
        """Forward pass over the aggregated rows; raw loss terms and metrics."""
        y_all, caches = forward_batch(self.net, self.X_all, self.theta_s)
        out = y_all[:, 0]
        res_t = out[:self.n_train] - self.y_train
        l_t = rmse(res_t)
        valid = out[self.n_train:self.n_train + self.n_valid]
        valid_rmse = rmse(valid - self.y_valid) if self.n_valid else float("nan")
        rho_s = np.zeros(self.n_sing_types)
        if self.n_sing_types:
            sq_sum = 0.0
            for li, div_z in self.div_layers:
                z = caches[li].z[:self.n_sing_rows, div_z[:, 1]]
                m = singularity_metric(self.theta_s, z)
                sq_sum += float(np.sum(m * m))
            rho_s[0] = np.sqrt(sq_sum / (self.n_div_units * self.n_sing_rows))
        rho_c = np.zeros(self.n_constraints)
        for j, con in enumerate(self.constraints):
            f = out[self.c_slices[j]].reshape(con.n_samples, con.kind.arity)
            e, _ = priors.residuals_and_grads(con, f)
            rho_c[j] = np.sqrt(np.mean(e * e))
        ext = None
        if self.y_extval is not None:
            ext = rmse(out[-self.y_extval.shape[0]:] - self.y_extval)
        return RawTerms(l_t=l_t, rho_s=rho_s, rho_c=rho_c, valid_rmse=valid_rmse,
                        ext_rmse=ext, caches=caches, y_all=y_all, train_residuals=res_t)

    def rho_r(self, active_mask: np.ndarray) -> float:
        w = self.net.weights[active_mask]
        return float(np.sum(smoothed_l05(w, self.l05_a))) if w.size else 0.0

    def evaluate(self, stage: str, coeffs: TermCoeffs,
                 reg_mask: np.ndarray | None = None,
                 trainable_mask: np.ndarray | None = None,
                 want_grad: bool = False,
                 raw: RawTerms | None = None) -> LossBreakdown:
        """Weighted, clamped stage loss; optionally its gradient w.r.t. the weights.

        The weighting snapshot (coefficients and history denominators) is held
        constant, so for fixed masks the result is a pure function of the
        weight vector.
        """
        if raw is None:
            raw = self.forward_terms()
        use_c = stage in ("L2", "L3") and self.n_constraints > 0
        use_r = stage == "L3"
        l_s_raw = float(np.sum(raw.rho_s / coeffs.h_s)) if self.n_sing_types else 0.0
        l_s = coeffs.alpha * l_s_raw
        l_c = coeffs.beta * float(np.sum(raw.rho_c / coeffs.h_c)) if use_c else 0.0
        rho_r_val = self.rho_r(reg_mask) if use_r else None
        l_r = coeffs.gamma * rho_r_val if use_r else 0.0
        _, l_s_cl, l_c_cl, l_r_cl, flags = clamp_terms(raw.l_t, l_s, l_c, l_r, self.ratios)
        terms = {"t": raw.l_t, "s": l_s_cl}
        if stage in ("L2", "L3"):
            terms["c"] = l_c_cl if use_c else 0.0
        if use_r:
            terms["r"] = l_r_cl
        total = compose(stage, terms)
        grad = None
        if want_grad:
            grad = self._gradient(stage, coeffs, raw, flags, reg_mask, trainable_mask,
                                  use_c, use_r)
        return LossBreakdown(
            stage=stage, total=total, l_t=raw.l_t, l_s=l_s_cl,
            l_c=(l_c_cl if use_c else (0.0 if stage in ("L2", "L3") else None)),
            l_r=l_r_cl if use_r else None,
            rho_s=raw.rho_s, rho_c=raw.rho_c, rho_r=rho_r_val,
            clamped=flags, valid_rmse=raw.valid_rmse, ext_rmse=raw.ext_rmse, grad=grad)

    def _gradient(self, stage, coeffs, raw, flags, reg_mask, trainable_mask,
                  use_c, use_r) -> np.ndarray:
        s_clamped, c_clamped, r_clamped = flags
        r_s, r_c, r_r = self.ratios
        # Clamped terms turn into ratio * L_t, so their gradient rides on dL_t.
        t_coef = 1.0
        if s_clamped:
            t_coef += r_s
        if use_c and c_clamped:
            t_coef += r_c
        if use_r and r_clamped:
            t_coef += r_r
        d_out = np.zeros((self.X_all.shape[0], 1))
        if raw.l_t > 0.0:
            d_out[:self.n_train, 0] = t_coef * raw.train_residuals / (self.n_train * raw.l_t)
        d_z: dict[int, np.ndarray] = {}
        if self.n_sing_types and not s_clamped and raw.rho_s[0] > 0.0:
            scale = coeffs.alpha / coeffs.h_s[0] / (self.n_div_units * self.n_sing_rows * raw.rho_s[0])
            for li, div_z in self.div_layers:
                z = raw.caches[li].z[:self.n_sing_rows, div_z[:, 1]]
                m = singularity_metric(self.theta_s, z)
                dm = np.where((z != 0.0) & (z < self.theta_s), -1.0, 0.0)
                dzl = np.zeros_like(raw.caches[li].z)
                dzl[:self.n_sing_rows, div_z[:, 1]] = scale * m * dm
                d_z[li] = dzl
        if use_c and not c_clamped:
            out = raw.y_all[:, 0]
            for j, con in enumerate(self.constraints):
                if raw.rho_c[j] <= 0.0:
                    continue
                f = out[self.c_slices[j]].reshape(con.n_samples, con.kind.arity)
                e, de = priors.residuals_and_grads(con, f)
                w = coeffs.beta / coeffs.h_c[j] / (con.n_samples * raw.rho_c[j])
                d_out[self.c_slices[j], 0] += (w * e[:, None] * de).reshape(-1)
        grad = backward(self.net, raw.caches, d_out, d_z or None, None)
        if use_r and not r_clamped and reg_mask is not None:
            w = self.net.weights
            grad[reg_mask] += coeffs.gamma * smoothed_l05_grad(w[reg_mask], self.l05_a)
        if trainable_mask is not None:
            grad[~trainable_mask] = 0.0
        return grad

    def loss_value(self, weights: np.ndarray, stage: str, coeffs: TermCoeffs,
                   reg_mask: np.ndarray | None = None) -> float:
        """Scalar stage loss at an arbitrary weight vector (for derivative checks)."""
        saved = self.net.weights
        try:
            self.net.weights = np.asarray(weights, dtype=np.float64)
            return self.evaluate(stage, coeffs, reg_mask=reg_mask).total
        finally:
            self.net.weights = saved

    def branch_signature(self, weights: np.ndarray, stage: str, coeffs: TermCoeffs,
                         reg_mask: np.ndarray | None = None) -> bytes:
        """Hashable record of every branch decision the loss makes at this point.

        Finite-difference checks exclude coordinates whose perturbed
        evaluations land on different branches (kinks of max/abs/guards).
        """
        saved = self.net.weights
        try:
            self.net.weights = np.asarray(weights, dtype=np.float64)
            raw = self.forward_terms()
            bits: list[np.ndarray] = []
            for li, lay in enumerate(self.net.layout):
                if lay.div_z.size:
                    bits.append(raw.caches[li].div_ok.ravel())
                    z = raw.caches[li].z[:self.n_sing_rows, lay.div_z[:, 1]]
                    bits.append((z < self.theta_s).ravel())
                    bits.append((z == 0.0).ravel())
            out = raw.y_all[:, 0]
            for j, con in enumerate(self.constraints):
                f = out[self.c_slices[j]].reshape(con.n_samples, con.kind.arity)
                _, de = priors.residuals_and_grads(con, f)
                bits.append(np.signbit(de).ravel())
                bits.append((de == 0.0).ravel())
            if reg_mask is not None:
                bits.append((np.abs(self.net.weights[reg_mask]) >= self.l05_a))
            use_c = stage in ("L2", "L3") and self.n_constraints > 0
            use_r = stage == "L3"
            l_s = coeffs.alpha * float(np.sum(raw.rho_s / coeffs.h_s)) if self.n_sing_types else 0.0
            l_c = coeffs.beta * float(np.sum(raw.rho_c / coeffs.h_c)) if use_c else 0.0
            l_r = coeffs.gamma * self.rho_r(reg_mask) if use_r else 0.0
            _, _, _, _, flags = clamp_terms(raw.l_t, l_s, l_c, l_r, self.ratios)
            bits.append(np.asarray(flags))
            packed = np.packbits(np.concatenate([b.astype(np.uint8) for b in bits if b.size]))
            return packed.tobytes()
        finally:
            self.net.weights = saved


def singularity_loss(net: Network, X_all: np.ndarray, state: LossState,
                     theta_s: float) -> tuple[float, np.ndarray]:
    """Weighted singularity term over an aggregated input matrix; appends raw history."""
    _, caches = forward_batch(net, X_all, theta_s)
    n_rows = np.atleast_2d(X_all).shape[0]
    div_layers = [(li, lay.div_z) for li, lay in enumerate(net.layout) if lay.div_z.size]
    n_units = sum(z.shape[0] for _, z in div_layers)
    if n_units == 0:
        return 0.0, np.zeros(0)
    sq = 0.0
    for li, div_z in div_layers:
        m = singularity_metric(theta_s, caches[li].z[:, div_z[:, 1]])
        sq += float(np.sum(m * m))
    rho = np.array([np.sqrt(sq / (n_units * n_rows))])
    h = state.h_s()
    l_s = state.alpha * float(np.sum(rho / h))
    for j in range(state.n_sing_types):
        state.rho_s_raw[j].append(float(rho[j]))
        state.rho_s_norm[j].append(float(rho[j] / h[j]))
    return l_s, rho


def constraint_loss(net: Network, cset: priors.ConstraintSet, state: LossState,
                    div_guard: float) -> tuple[float, np.ndarray]:
    """Weighted constraint term; appends raw history."""
    def model_eval(pts):
        out, _ = forward_batch(net, pts, div_guard)
        return out[:, 0]

    rho = np.array([priors.violation_rmse(c, model_eval) for c in cset])
    h = state.h_c()
    l_c = state.beta * float(np.sum(rho / h)) if len(cset) else 0.0
    for j in range(len(cset)):
        state.rho_c_raw[j].append(float(rho[j]))
        state.rho_c_norm[j].append(float(rho[j] / h[j]))
    return l_c, rho


def regularization_loss(net: Network, active_mask: np.ndarray, state: LossState,
                        l05_a: float) -> tuple[float, float]:
    """Weighted smoothed-L0.5 term over active weights; appends raw history."""
    w = net.weights[active_mask]
    rho = float(np.sum(smoothed_l05(w, l05_a))) if w.size else 0.0
    state.rho_r_hist.append(rho)
    return state.gamma * rho, rho
