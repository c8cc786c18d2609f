"""Three-stage training loop: initial, epoch-wise exploration-focus, final pruning.

Two trackers run side by side.  model* is the returned best-so-far snapshot
under the configured selection rule, updated at every learning step.  m* seeds
each epoch: it is updated during the second half of the initial stage by the
acceptance rule, and during focus phases by the acceptance rule additionally
gated by the validation threshold theta_v = (1 + eps) * mean validation RMSE
over the last k epoch-best models.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AdamState, NumericalError, adam_step, zero_masked
from .lossfn import CompositeLoss, LossState
from .netgraph import (ARCHITECTURE_PRESETS, ActivityReport, ArchitectureSpec,
                       Network, activity, build_network)
from .priors import ConstraintSet
from .problems import ProblemBundle


@dataclass(frozen=True)
class StageSchedule:
    """Iteration counts; total = n_init + epochs*(n_explore + n_focus) + n_final."""

    n_init: int = 2000
    n_explore: int = 20
    n_focus: int = 980
    epochs: int = 87
    n_final: int = 1000

    @property
    def total(self) -> int:
        return self.n_init + self.epochs * (self.n_explore + self.n_focus) + self.n_final


@dataclass(frozen=True)
class VariantConfig:
    """Ablation switches: weighting / selection / constraints / epoch strategy."""

    weighting: str = "adaptive"        # adaptive | static
    selection: str = "constraint"      # constraint | extrapolation
    use_constraints: bool = True
    epoch_mode: str = "epoch"          # epoch | single

    def __post_init__(self):
        if self.weighting not in ("adaptive", "static"):
            raise ValueError(f"bad weighting {self.weighting}")
        if self.selection not in ("constraint", "extrapolation"):
            raise ValueError(f"bad selection {self.selection}")
        if self.epoch_mode not in ("epoch", "single"):
            raise ValueError(f"bad epoch mode {self.epoch_mode}")
        if not self.use_constraints and self.selection != "extrapolation":
            raise ValueError("runs without constraints must select on extrapolation error")

    @property
    def code(self) -> str:
        return ((("A" if self.weighting == "adaptive" else "S")
                 + ("C" if self.selection == "constraint" else "E")
                 + ("Y" if self.use_constraints else "N")
                 + ("E" if self.epoch_mode == "epoch" else "S")))

    @classmethod
    def from_code(cls, code: str) -> "VariantConfig":
        code = code.upper()
        if len(code) != 4 or any(c not in ok for c, ok in zip(code, ("AS", "CE", "YN", "ES"))):
            raise ValueError(f"bad variant code {code!r}; expected e.g. ACYE")
        return cls(weighting="adaptive" if code[0] == "A" else "static",
                   selection="constraint" if code[1] == "C" else "extrapolation",
                   use_constraints=code[2] == "Y",
                   epoch_mode="epoch" if code[3] == "E" else "single")


@dataclass(frozen=True)
class TrainSettings:
    """Loss and optimizer knobs; defaults are the reference configuration."""

    theta_a: float = 1e-4          # activity threshold
    theta_s: float = 1e-4          # singularity threshold / division guard
    ratios: tuple[float, float, float] = (0.5, 0.5, 0.5)
    window: int = 10               # N_w
    eps_v: float = 0.5             # validation-threshold tolerance
    k_snapshots: int = 10          # ring length for epoch-best models
    l05_a: float = 0.01            # regularizer smoothing half-width
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    adam_reset: str = "stage_and_epoch"   # stage_and_epoch | never


@dataclass(frozen=True)
class ModelSnapshot:
    """Frozen weights plus the metrics the selection rules compare."""

    weights: np.ndarray
    links: int
    units: int
    valid_rmse: float
    rho_s: tuple[float, ...]
    rho_c: tuple[float, ...]
    ext_rmse: float | None
    iteration: int

    @property
    def complexity(self) -> tuple[int, int]:
        return (self.links, self.units)


def is_nontrivial(snapshot: ModelSnapshot) -> bool:
    """A model with more than one active link (more than the output bias)."""
    return snapshot.links > 1


def select_accept(candidate: ModelSnapshot, incumbent: ModelSnapshot) -> bool:
    """Accept on lower complexity, or equal complexity with no metric worse."""
    if candidate.complexity < incumbent.complexity:
        return True
    if candidate.complexity != incumbent.complexity:
        return False
    return (all(c <= i for c, i in zip(candidate.rho_s, incumbent.rho_s))
            and all(c <= i for c, i in zip(candidate.rho_c, incumbent.rho_c))
            and candidate.valid_rmse <= incumbent.valid_rmse)


def select_accept_ext(candidate: ModelSnapshot, incumbent: ModelSnapshot) -> bool:
    """Extrapolation-based variant: complexity, then extrapolation RMSE only."""
    if candidate.ext_rmse is None or incumbent.ext_rmse is None:
        raise ValueError("extrapolation-validation RMSE missing from snapshot")
    if candidate.complexity < incumbent.complexity:
        return True
    if candidate.complexity != incumbent.complexity:
        return False
    return candidate.ext_rmse <= incumbent.ext_rmse


def epoch_accept(candidate: ModelSnapshot, m_star: ModelSnapshot, theta_v: float) -> bool:
    """Epoch gate: complexity not higher than m*'s and validation RMSE within theta_v."""
    return candidate.complexity <= m_star.complexity and candidate.valid_rmse <= theta_v


@dataclass
class TrainResult:
    spec: ArchitectureSpec
    model_star: ModelSnapshot
    m_star: ModelSnapshot
    log: list[dict]
    net: Network

    def model_network(self, theta_a: float = 1e-4) -> Network:
        """The deliverable model: model* weights with inactive weights zeroed."""
        net = Network(self.spec, self.model_star.weights.copy())
        report = activity(net, theta_a)
        return zero_masked(net, report.active_mask)


def resolve_spec(bundle: ProblemBundle, architecture: str | ArchitectureSpec | None) -> ArchitectureSpec:
    arch = architecture if architecture is not None else bundle.architecture
    if isinstance(arch, ArchitectureSpec):
        return arch
    if arch not in ARCHITECTURE_PRESETS:
        raise ValueError(f"unknown architecture preset {arch!r}")
    return ARCHITECTURE_PRESETS[arch](bundle.input_names)


def run(bundle: ProblemBundle, schedule: StageSchedule, variant: VariantConfig,
        seed: int, settings: TrainSettings = TrainSettings(),
        architecture: str | ArchitectureSpec | None = None) -> TrainResult:
    """Execute one full training run and return the tracked best model plus the log."""
    if bundle.train is None or bundle.train.n == 0 or bundle.valid is None or bundle.valid.n == 0:
        raise ValueError("training and validation data must be non-empty")
    spec = resolve_spec(bundle, architecture)
    net = build_network(spec, seed)
    constraints = bundle.constraints if variant.use_constraints else ConstraintSet(())
    need_ext = variant.selection == "extrapolation"
    if need_ext and bundle.ext_valid is None:
        raise ValueError("extrapolation-based selection needs an extrapolation-validation set")
    ev = CompositeLoss(
        net, bundle.train.X, bundle.train.y, bundle.valid.X, bundle.valid.y,
        constraints, theta_s=settings.theta_s, l05_a=settings.l05_a,
        ratios=settings.ratios,
        X_extval=bundle.ext_valid.X if need_ext else None,
        y_extval=bundle.ext_valid.y if need_ext else None)
    state = ev.make_state(settings.window, variant.weighting)
    adam = AdamState.for_network(net, lr=settings.lr, beta1=settings.beta1,
                                 beta2=settings.beta2, eps=settings.adam_eps)
    all_mask = np.ones(net.n_weights, dtype=bool)
    accept_rule = select_accept_ext if need_ext else select_accept
    log: list[dict] = []
    model_star: ModelSnapshot | None = None
    m_star: ModelSnapshot | None = None
    it = 0

    def snapshot_from(raw, report: ActivityReport) -> ModelSnapshot:
        return ModelSnapshot(
            weights=net.weights.copy(), links=report.n_active_links,
            units=report.n_active_units, valid_rmse=float(raw.valid_rmse),
            rho_s=tuple(float(v) for v in raw.rho_s),
            rho_c=tuple(float(v) for v in raw.rho_c),
            ext_rmse=None if raw.ext_rmse is None else float(raw.ext_rmse),
            iteration=it)

    def metrics_only_snapshot() -> ModelSnapshot:
        return snapshot_from(ev.forward_terms(), activity(net, settings.theta_a))

    def learning_step(stage: str, tag: str, epoch: int | None,
                      theta_v: float | None, masked: bool, zero_inactive: bool) -> None:
        nonlocal it, model_star, m_star
        report = activity(net, settings.theta_a)
        if zero_inactive:
            zero_masked(net, report.active_mask)  # pruned weights never return
        trainable = report.active_mask if masked else all_mask
        reg_mask = report.active_mask if stage == "L3" else None
        try:
            raw = ev.forward_terms()
            if variant.weighting == "static":
                if not state.alpha_frozen:
                    state.static_init_alpha(raw.l_t, raw.rho_s)
                if (stage in ("L2", "L3") and ev.n_constraints
                        and not state.beta_frozen):
                    state.static_init_beta(raw.l_t, raw.rho_c)
                if stage == "L3" and not state.gamma_frozen:
                    state.static_init_gamma(raw.l_t, ev.rho_r(reg_mask))
            coeffs = ev.coeffs(state)
            bd = ev.evaluate(stage, coeffs, reg_mask=reg_mask,
                             trainable_mask=trainable, want_grad=True, raw=raw)
            cand = snapshot_from(raw, report)
            if model_star is None or accept_rule(cand, model_star):
                model_star = cand
            if tag == "init_l2" and (m_star is None or select_accept(cand, m_star)):
                m_star = cand
            elif tag == "focus" and select_accept(cand, m_star) and cand.valid_rmse <= theta_v:
                m_star = cand
            adam_step(net, bd.grad, adam, trainable)
        except NumericalError as err:
            raise RuntimeError(f"numerical failure at iteration {it}: {err}") from err
        state.record(raw.l_t, raw.rho_s, coeffs.h_s, raw.rho_c, coeffs.h_c, bd.rho_r)
        if variant.weighting == "adaptive":
            state.update_alpha()
            if stage in ("L2", "L3") and ev.n_constraints:
                state.update_beta()
            if stage == "L3":
                state.update_gamma()
        log.append({
            "it": it, "stage": tag, "epoch": epoch,
            "Lt": float(raw.l_t), "Ls": float(bd.l_s),
            "Lc": None if bd.l_c is None else float(bd.l_c),
            "Lr": None if bd.l_r is None else float(bd.l_r),
            "rho_s": [float(v) for v in raw.rho_s],
            "rho_c": [float(v) for v in raw.rho_c],
            "rho_r": None if bd.rho_r is None else float(bd.rho_r),
            "alpha": float(coeffs.alpha), "beta": float(coeffs.beta),
            "gamma": float(coeffs.gamma),
            "links": report.n_active_links, "units": report.n_active_units,
            "valid": float(raw.valid_rmse),
            "ext": None if raw.ext_rmse is None else float(raw.ext_rmse),
            "ms_links": model_star.links, "ms_units": model_star.units,
            "ms_valid": model_star.valid_rmse, "ms_ext": model_star.ext_rmse,
            "mstar_links": None if m_star is None else m_star.links,
            "mstar_units": None if m_star is None else m_star.units,
            "mstar_valid": None if m_star is None else m_star.valid_rmse,
            "theta_v": theta_v,
        })
        it += 1

    # initial stage: L1 first half, L2 second half
    n_l1 = schedule.n_init // 2
    for _ in range(n_l1):
        learning_step("L1", "init_l1", None, None, masked=False, zero_inactive=False)
    for _ in range(schedule.n_init - n_l1):
        learning_step("L2", "init_l2", None, None, masked=False, zero_inactive=False)
    if m_star is None:
        m_star = metrics_only_snapshot()
    if model_star is None:
        model_star = m_star
    best_ring: deque[ModelSnapshot] = deque(maxlen=settings.k_snapshots)
    best_ring.append(m_star)

    # exploration-focus stage
    if variant.epoch_mode == "single":
        epochs = 1
        n_focus = schedule.epochs * (schedule.n_explore + schedule.n_focus) - schedule.n_explore
    else:
        epochs = schedule.epochs
        n_focus = schedule.n_focus
    for epoch in range(epochs):
        net.weights[:] = m_star.weights
        if settings.adam_reset == "stage_and_epoch":
            adam.reset()
        theta_v = (1.0 + settings.eps_v) * float(np.mean([s.valid_rmse for s in best_ring]))
        for _ in range(schedule.n_explore):
            learning_step("L2", "explore", epoch, theta_v, masked=False, zero_inactive=False)
        for _ in range(n_focus):
            learning_step("L3", "focus", epoch, theta_v, masked=True, zero_inactive=False)
        best_ring.append(m_star)

    # final stage: prune-and-polish on the active weights only
    if settings.adam_reset == "stage_and_epoch":
        adam.reset()
    for _ in range(schedule.n_final):
        learning_step("L2", "final", None, None, masked=True, zero_inactive=True)

    return TrainResult(spec=spec, model_star=model_star, m_star=m_star, log=log, net=net)
