"""Loss terms, smoothed L0.5, adaptive weighting, clamping, compositions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqlearn.lossfn import (CompositeLoss, LossState, StaticInitError,
                            clamp_terms, compose, constraint_loss,
                            regularization_loss, singularity_loss,
                            singularity_metric, smoothed_l05,
                            smoothed_l05_grad, training_rmse)
from eqlearn.netgraph import (activity, build_network, general_architecture,
                              informed_architecture)
from eqlearn.priors import (Constraint, ConstraintKind, ConstraintSet,
                            generate_samples)

finite_floats = st.floats(allow_nan=False, allow_infinity=False,
                          min_value=-1e6, max_value=1e6)


class TestTrainingRmse:
    def test_hand_value(self):
        # predictions {0,0}, targets {3,4} -> sqrt((9+16)/2)
        net = build_network(general_architecture(("x",)), 0)
        net.weights[:] = 0.0
        rmse = training_rmse(net, [[0.1], [0.2]], [3.0, 4.0], 1e-4)
        assert rmse == pytest.approx(np.sqrt(12.5))

    def test_perfect_predictions(self):
        net = build_network(general_architecture(("x",)), 0)
        net.weights[:] = 0.0
        net.weights[-1] = 2.0
        assert training_rmse(net, [[0.3]], [2.0], 1e-4) == 0.0

    def test_matches_independent_summation(self, rng):
        net = build_network(informed_architecture(("a", "b")), 5)
        X = rng.uniform(0.1, 3, size=(37, 2))
        y = rng.uniform(size=37)
        got = training_rmse(net, X, y, 1e-4)
        from eqlearn.netgraph import forward_batch
        out, _ = forward_batch(net, X)
        # different accumulation path: sorted squared residuals, math.fsum
        import math
        expected = math.sqrt(math.fsum(sorted((out[:, 0] - y) ** 2)) / 37)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_empty_rejected(self):
        net = build_network(general_architecture(("x",)), 0)
        with pytest.raises(ValueError):
            training_rmse(net, np.zeros((0, 1)), np.zeros(0), 1e-4)


class TestSingularityMetric:
    def test_exact_spike_at_zero(self):
        assert singularity_metric(1e-4, 0.0) == 10.0

    def test_zero_above_threshold(self):
        assert singularity_metric(1e-4, 1.0) == 0.0
        assert singularity_metric(1e-4, 1e-4) == 0.0

    def test_linear_below_threshold(self):
        assert singularity_metric(1e-4, 5e-5) == pytest.approx(5e-5)

    def test_negative_z_penalized(self):
        assert singularity_metric(1e-4, -0.3) == pytest.approx(0.3 + 1e-4)

    def test_theta_must_be_positive(self):
        with pytest.raises(ValueError):
            singularity_metric(0.0, 1.0)


class TestSmoothedL05:
    def test_sqrt_branch(self):
        assert smoothed_l05(4.0, 0.01) == pytest.approx(2.0)

    def test_value_at_zero(self):
        assert smoothed_l05(0.0, 0.01) == pytest.approx(np.sqrt(3 * 0.01 / 8))

    def test_branch_continuity(self):
        for a in (0.01, 0.1, 1.0):
            outside = np.sqrt(a)
            inside = np.sqrt(-a ** 4 / (8 * a ** 3) + 3 * a * a / (4 * a) + 3 * a / 8)
            assert abs(outside - inside) < 1e-12
            assert abs(smoothed_l05(a, a) - outside) < 1e-12

    def test_one_sided_derivatives_agree(self):
        # second-order one-sided differences at h=1e-7 balance the sqrt's
        # truncation term (f''' ~ 3.75e4 at the knot) against roundoff
        a, h = 0.01, 1e-7
        f = smoothed_l05
        left = (3 * f(a, a) - 4 * f(a - h, a) + f(a - 2 * h, a)) / (2 * h)
        right = (-3 * f(a, a) + 4 * f(a + h, a) - f(a + 2 * h, a)) / (2 * h)
        assert abs(left - right) < 1e-8
        # the two analytic branch derivatives coincide at the knot
        outer = 0.5 / np.sqrt(a)
        inner = (-a ** 3 / (2 * a ** 3) + 3 * a / (2 * a)) / (2 * np.sqrt(a))
        assert abs(outer - inner) < 1e-12

    def test_zero_slope_at_origin(self):
        assert smoothed_l05_grad(0.0, 0.01) == 0.0

    @given(w=finite_floats, a=st.floats(min_value=1e-6, max_value=10.0))
    @settings(max_examples=200, deadline=None)
    def test_even_function(self, w, a):
        assert smoothed_l05(w, a) == smoothed_l05(-w, a)

    @given(a=st.floats(min_value=1e-4, max_value=1.0),
           w1=st.floats(min_value=0, max_value=1e3),
           w2=st.floats(min_value=0, max_value=1e3))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_magnitude(self, a, w1, w2):
        lo, hi = sorted((w1, w2))
        assert smoothed_l05(lo, a) <= smoothed_l05(hi, a) + 1e-15

    def test_grad_matches_finite_difference(self):
        a = 0.01
        for w in (-3.0, -0.02, -0.004, 0.0, 0.004, 0.02, 3.0):
            h = 1e-7
            fd = (smoothed_l05(w + h, a) - smoothed_l05(w - h, a)) / (2 * h)
            assert smoothed_l05_grad(w, a) == pytest.approx(fd, abs=1e-6)


class TestClampAndCompose:
    def test_clamp_example(self):
        _, ls, lc, lr, flags = clamp_terms(2.0, 0.1, 1.5, 0.0, (0.5, 0.5, 0.5))
        assert lc == 1.0 and flags == (False, True, False)

    def test_below_cap_unchanged(self):
        _, ls, lc, lr, _ = clamp_terms(2.0, 0.1, 0.3, 0.2, (0.5, 0.5, 0.5))
        assert (ls, lc, lr) == (0.1, 0.3, 0.2)

    def test_zero_training_loss_clamps_everything(self):
        _, ls, lc, lr, _ = clamp_terms(0.0, 0.4, 0.3, 0.2, (0.5, 0.5, 0.5))
        assert (ls, lc, lr) == (0.0, 0.0, 0.0)

    @given(lt=st.floats(min_value=0, max_value=1e6),
           ls=st.floats(min_value=0, max_value=1e6),
           lc=st.floats(min_value=0, max_value=1e6),
           lr=st.floats(min_value=0, max_value=1e6))
    @settings(max_examples=200, deadline=None)
    def test_post_clamp_ratio_bound(self, lt, ls, lc, lr):
        _, cs, cc, cr, _ = clamp_terms(lt, ls, lc, lr, (0.5, 0.5, 0.5))
        assert cs <= 0.5 * lt and cc <= 0.5 * lt and cr <= 0.5 * lt
        assert min(cs, cc, cr) >= 0.0

    def test_compose_stages(self):
        assert compose("L1", {"t": 1.0, "s": 0.2}) == pytest.approx(1.2)
        assert compose("L3", {"t": 0.0, "s": 0.0, "c": 0.0, "r": 0.0}) == 0.0
        t = {"t": 1.0, "s": 0.5, "c": 0.25, "r": 0.125}
        assert compose("L3", t) - compose("L2", t) == pytest.approx(0.125)

    def test_missing_term_rejected(self):
        with pytest.raises(ValueError):
            compose("L2", {"t": 1.0, "s": 0.2})
        with pytest.raises(ValueError):
            compose("L9", {"t": 1.0})


def make_state(n_types=1, n_cons=3, mode="adaptive", window=10):
    return LossState(window=window, n_sing_types=n_types, n_constraints=n_cons,
                     ratios=(0.5, 0.5, 0.5), mode=mode)


class TestAdaptiveWeights:
    def test_alpha_plugin_example(self):
        # B^t = 2, one type with normalized history mean 1, r = 0.5 -> alpha = 1
        state = make_state(n_types=1, n_cons=0)
        for _ in range(4):
            state.b_t.append(2.0)
            state.rho_s_norm[0].append(1.0)
        assert state.update_alpha() == pytest.approx(1.0)

    def test_beta_three_constraints(self):
        state = make_state(n_types=0, n_cons=3)
        for _ in range(4):
            state.b_t.append(2.0)
            for buf in state.rho_c_norm:
                buf.append(1.0)
        assert state.update_beta() == pytest.approx(1.0 / 3.0)

    def test_zero_history_gives_one(self):
        state = make_state()
        state.b_t.append(2.0)
        for buf in state.rho_s_norm:
            buf.append(0.0)
        state.rho_r_hist.append(0.0)
        assert state.update_alpha() == 1.0
        assert state.update_gamma() == 1.0

    def test_h_is_one_until_history_exists(self):
        state = make_state()
        assert np.all(state.h_s() == 1.0)
        assert np.all(state.h_c() == 1.0)

    def test_window_bounded(self):
        state = make_state(window=5)
        for i in range(20):
            state.record(float(i), np.array([1.0]), np.ones(1),
                         np.ones(3), np.ones(3), 0.5)
        assert len(state.b_t) == 5
        assert list(state.b_t) == [15.0, 16.0, 17.0, 18.0, 19.0]

    def test_self_normalization_constant_history(self):
        # constant raw history -> rho/h == 1 exactly once the window holds it
        state = make_state(n_types=1, n_cons=0)
        for _ in range(10):
            h = state.h_s()
            state.record(1.0, np.array([0.7]), h, np.zeros(0), np.zeros(0), None)
        assert state.rho_s_norm[0][-1] == pytest.approx(1.0)


class TestStaticWeights:
    def test_alpha_freeze_plugin(self):
        state = make_state(mode="static")
        assert state.static_init_alpha(4.0, np.array([2.0])) == pytest.approx(1.0)
        assert state.alpha_frozen

    def test_zero_denominator_rule(self):
        state = make_state(mode="static")
        assert state.static_init_alpha(4.0, np.array([0.0])) == 1.0

    def test_double_init_rejected(self):
        state = make_state(mode="static")
        state.static_init_alpha(4.0, np.array([2.0]))
        with pytest.raises(StaticInitError):
            state.static_init_alpha(4.0, np.array([2.0]))

    def test_static_h_is_always_one(self):
        state = make_state(mode="static")
        for _ in range(12):
            state.record(1.0, np.array([5.0]), state.h_s(),
                         np.full(3, 2.0), state.h_c(), None)
        assert np.all(state.h_s() == 1.0)
        assert np.all(state.h_c() == 1.0)

    def test_updates_are_frozen(self):
        state = make_state(mode="static")
        state.static_init_alpha(4.0, np.array([2.0]))
        state.b_t.append(100.0)
        state.rho_s_norm[0].append(100.0)
        assert state.update_alpha() == 1.0  # unchanged by window contents


class TestLossWrappers:
    def test_singularity_rho_hand_value(self, rng):
        # one divide unit, two samples with denominators {0, 2e-4}:
        # rho = sqrt((10^2 + 0)/2)
        from eqlearn.netgraph import ArchitectureSpec, UnitKind
        spec = ArchitectureSpec(("x",), ((UnitKind.DIV,),))
        net = build_network(spec, 0)
        net.weights[:] = 0.0
        net.weights[net.layout[0].w_offset + 1] = 1.0  # denominator z = x
        state = make_state(n_types=1, n_cons=0)
        l_s, rho = singularity_loss(net, np.array([[0.0], [2e-4]]), state, 1e-4)
        assert rho[0] == pytest.approx(np.sqrt(50.0))
        assert l_s == pytest.approx(np.sqrt(50.0))  # alpha = h = 1 here

    def test_singularity_zero_when_far_from_pole(self):
        from eqlearn.netgraph import ArchitectureSpec, UnitKind
        spec = ArchitectureSpec(("x",), ((UnitKind.DIV,),))
        net = build_network(spec, 0)
        net.weights[:] = 0.0
        net.weights[net.layout[0].w_offset + 1] = 1.0
        state = make_state(n_types=1, n_cons=0)
        l_s, rho = singularity_loss(net, np.array([[1.0], [2.0]]), state, 1e-4)
        assert l_s == 0.0 and rho[0] == 0.0

    def test_constant_history_makes_ls_alpha_times_types(self):
        from eqlearn.netgraph import ArchitectureSpec, UnitKind
        spec = ArchitectureSpec(("x",), ((UnitKind.DIV,),))
        net = build_network(spec, 0)
        net.weights[:] = 0.0
        net.weights[net.layout[0].w_offset + 1] = 1.0
        state = make_state(n_types=1, n_cons=0)
        state.alpha = 0.7
        X = np.array([[5e-5], [5e-5]])
        for _ in range(12):
            l_s, rho = singularity_loss(net, X, state, 1e-4)
        assert l_s == pytest.approx(0.7 * 1.0)  # rho/h == 1 with constant history

    def test_constraint_loss_perfect_model_is_zero(self, rng):
        cset = ConstraintSet((
            generate_samples(ConstraintKind.SYMMETRY, [[0.1, 2], [0.1, 2]], 8, rng),
        ))
        net = build_network(informed_architecture(("a", "b")), 1)
        net.weights[:] = 0.0
        net.weights[-1] = 3.0  # constant output: symmetric by construction
        state = make_state(n_types=1, n_cons=1)
        l_c, rho = constraint_loss(net, cset, state, 1e-4)
        assert l_c == 0.0 and rho[0] == 0.0

    def test_constant_histories_lc_beta_times_count(self, rng):
        cset = ConstraintSet((
            generate_samples(ConstraintKind.SIGN, [[0.1, 2], [0.1, 2]], 5, rng,
                             direction=-1),
        ))
        net = build_network(informed_architecture(("a", "b")), 1)
        net.weights[:] = 0.0
        net.weights[-1] = 3.0  # violates f <= 0 by 3 everywhere
        state = make_state(n_types=0, n_cons=1)
        state.beta = 2.0
        for _ in range(12):
            l_c, _ = constraint_loss(net, cset, state, 1e-4)
        assert l_c == pytest.approx(2.0 * 1.0)

    def test_regularization_values(self):
        net = build_network(informed_architecture(("a", "b")), 1)
        state = make_state()
        mask = np.zeros(net.n_weights, dtype=bool)
        _, rho = regularization_loss(net, mask, state, 0.01)
        assert rho == 0.0
        net.weights[0] = 4.0
        mask[0] = True
        _, rho = regularization_loss(net, mask, state, 0.01)
        assert rho == pytest.approx(2.0)
        net.weights[1] = 0.25
        net.weights[2] = 1.0
        mask[1] = mask[2] = True
        _, rho = regularization_loss(net, mask, state, 0.01)
        assert rho == pytest.approx(2.0 + 0.5 + 1.0)


class TestCompositeEvaluator:
    def test_all_terms_nonnegative_and_clamped(self, resistors_bundle, rng):
        from eqlearn.trainer import resolve_spec
        spec = resolve_spec(resistors_bundle, None)
        net = build_network(spec, 11)
        ev = CompositeLoss(net, resistors_bundle.train.X, resistors_bundle.train.y,
                           resistors_bundle.valid.X, resistors_bundle.valid.y,
                           resistors_bundle.constraints)
        state = ev.make_state(10, "adaptive")
        rep = activity(net, 1e-4)
        bd = ev.evaluate("L3", ev.coeffs(state), reg_mask=rep.active_mask)
        assert bd.l_t >= 0 and bd.l_s >= 0 and bd.l_c >= 0 and bd.l_r >= 0
        assert bd.l_s <= 0.5 * bd.l_t + 1e-15
        assert bd.l_c <= 0.5 * bd.l_t + 1e-15
        assert bd.l_r <= 0.5 * bd.l_t + 1e-15
        assert bd.total == pytest.approx(bd.l_t + bd.l_s + bd.l_c + bd.l_r)
