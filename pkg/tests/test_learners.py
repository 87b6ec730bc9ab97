import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from sapd.core import BoxDomain, LinearConstraint, QuadraticLoss
from sapd.environments import ConfigError, Round, ScenarioConfig, Stream, generate
from sapd.learners import (AlgoConfig, LearnerState, RunAbort, RunContext, adaptive_beta, dual_cap,
                           estimate_slater, pd_fixed_step, run, sapd_step, vq_oco_step)
from sapd.metrics import BRANCH_CODE


def one_dim_round(t=1):
    return Round(t, QuadraticLoss(np.array([1.0])), LinearConstraint(np.array([1.0]), 0.3),
                 LinearConstraint(np.array([1.0]), 0.3))


def one_dim_ctx(T=100, xi=0.1):
    return RunContext(T=T, domain=BoxDomain(np.array([-1.0]), np.array([1.0])), R=2.0, G=4.0,
                      B=1.3, H=1.0, xi=xi)


def tiny_stream(T, b, target=0.5, d=1):
    targets = np.full((T, d), target)
    A = np.ones((T, d))
    b = np.asarray(b, dtype=float)
    return Stream(BoxDomain.cube(d), "quadratic", targets, A, b, b.copy(), xi=0.1, name="tiny")


# ---------------------------------------------------------------- single steps by hand

@pytest.mark.parametrize("step, name", [(sapd_step, "sapd"), (pd_fixed_step, "pd_fixed")])
def test_primal_dual_step_by_hand(step, name):
    # x1 = 0.5, loss (x - 1)^2, constraint x - 0.3: g = 0.2, grad loss = -1
    cfg = AlgoConfig(name=name, beta=0.05, alpha=0.1)
    ctx = one_dim_ctx()
    state = LearnerState(cfg, ctx, x0=np.array([0.5]))
    state, rec = step(state, one_dim_round(), cfg, ctx)
    assert rec.g == pytest.approx(0.2)
    assert state.mu == pytest.approx(0.01)
    np.testing.assert_allclose(state.x, [0.599])
    assert rec.branch == "standard"


def test_current_dual_in_primal_step():
    cfg = AlgoConfig(name="pd_fixed", beta=0.05, alpha=0.1, dual_in_primal="current")
    ctx = one_dim_ctx()
    state = LearnerState(cfg, ctx, x0=np.array([0.5]))
    state, _ = pd_fixed_step(state, one_dim_round(), cfg, ctx)
    np.testing.assert_allclose(state.x, [0.6])


def test_pd_fixed_default_dual_step():
    cfg = AlgoConfig(name="pd_fixed")
    ctx = one_dim_ctx(T=10_000)
    state = LearnerState(cfg, ctx, x0=np.array([0.5]))
    _, rec = pd_fixed_step(state, one_dim_round(), cfg, ctx)
    assert rec.beta == pytest.approx(0.1)
    # alpha_1 = R / (G sqrt(1))
    assert rec.alpha == pytest.approx(0.5)


def test_vq_queue_and_step():
    cfg = AlgoConfig(name="vq_oco")
    ctx = one_dim_ctx(T=100)
    state = LearnerState(cfg, ctx, x0=np.array([0.5]))
    state, rec = vq_oco_step(state, one_dim_round(), cfg, ctx)
    assert state.mu == pytest.approx(0.2)
    alpha = 2.0 / (4.0 * 10.0)
    np.testing.assert_allclose(state.x, [0.5 - alpha * (-1.0 + 0.1 * 0.2)])
    # a satisfied constraint drains the queue but never below zero
    slack = Round(2, QuadraticLoss(np.array([1.0])), LinearConstraint(np.array([1.0]), 5.0),
                  LinearConstraint(np.array([1.0]), 5.0))
    state, _ = vq_oco_step(state, slack, cfg, ctx)
    assert state.mu == 0.0


def test_dual_clipped_at_zero():
    cfg = AlgoConfig(name="pd_fixed", beta=0.05, alpha=0.1)
    ctx = one_dim_ctx()
    state = LearnerState(cfg, ctx, x0=np.array([-1.0]))
    state, rec = pd_fixed_step(state, one_dim_round(), cfg, ctx)
    assert rec.g < 0 and state.mu == 0.0


def test_adaptive_beta_formula():
    assert dual_cap(1.0, 10_000) == pytest.approx(0.1)
    assert adaptive_beta(1.0, 10_000, 0.15, 0.0, 1e-6) == pytest.approx(0.1)
    assert adaptive_beta(1.0, 10_000, 0.15, 0.75, 1e-6) == pytest.approx(0.15 / (2 * (0.75 + 1e-6)))


# ---------------------------------------------------------------- branches

def test_reset_branch_zeroes_dual():
    b = [0.2] * 30 + [1.0] * 10
    s = tiny_stream(40, b, target=0.9)
    tr = run(s, AlgoConfig(name="sapd", xi=0.1))
    assert tr.branch[30] == BRANCH_CODE["reset"]
    assert tr.info["resets"] == 1
    # the dual entering round 32 is the reset value
    assert tr.mu[31] == 0.0


def test_periodic_branch_mixes_phase_average():
    s = generate(ScenarioConfig(kind="periodic", period=50, T=400, d=3))
    tr = run(s, AlgoConfig(name="sapd"))
    assert tr.info["P_hat"] == 50 and tr.info["P_round"] == 100
    rounds = np.nonzero(tr.branch == BRANCH_CODE["periodic"])[0] + 1
    assert len(rounds) > 0
    assert np.all(rounds % 50 == 0)
    assert rounds.min() >= 100


def test_periodic_update_value():
    s = generate(ScenarioConfig(kind="periodic", period=50, T=300, d=3))
    cfg = AlgoConfig(name="sapd", rho=0.5)
    ctx = RunContext.from_stream(s, cfg)
    state = LearnerState(cfg, ctx)
    for rnd in s:
        mu = state.mu
        state, rec = sapd_step(state, rnd, cfg, ctx)
        if rec.branch == "periodic":
            # the phase read here is untouched by this round's own record
            expect = state.phase_average((rnd.t + 1) % rec.period)
            assert state.mu == pytest.approx(0.5 * mu + 0.5 * expect)


# ---------------------------------------------------------------- degeneracy

@pytest.mark.parametrize("kind", ["smooth", "sparse", "periodic"])
def test_sapd_without_mechanisms_is_pd_fixed(kind):
    s = generate(ScenarioConfig(kind=kind, T=2000, d=4, K=5, period=50))
    plain = AlgoConfig(name="sapd", c1=1.0, adaptive_beta=False, reset=False, periodic=False)
    a = run(s, plain)
    b = run(s, AlgoConfig(name="pd_fixed"))
    assert a.same_trajectory(b)
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.loss, b.loss)
    np.testing.assert_array_equal(a.g, b.g)
    np.testing.assert_array_equal(a.x_final, b.x_final)


def test_zero_drift_keeps_beta_at_cap():
    s = generate(ScenarioConfig(kind="smooth", delta_c=0.0, T=500))
    tr = run(s, AlgoConfig(name="sapd", c1=1.0))
    np.testing.assert_allclose(tr.beta, dual_cap(1.0, 500))
    assert tr.info["resets"] == 0


def test_large_drift_shrinks_beta():
    s = generate(ScenarioConfig(kind="smooth", delta_c=0.05, T=300))
    tr = run(s, AlgoConfig(name="sapd"))
    assert tr.beta[-1] == pytest.approx(0.15 / (2 * (0.05 + 1e-6)))
    assert tr.beta[-1] < dual_cap(100.0, 300)


# ---------------------------------------------------------------- invariants

@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.sampled_from(["smooth", "periodic", "sparse"]), st.sampled_from(["sapd", "pd_fixed", "vq_oco"]),
       st.integers(0, 10_000), st.floats(0, 0.05))
def test_runs_respect_invariants(kind, algo, seed, sigma):
    s = generate(ScenarioConfig(kind=kind, T=300, d=3, K=3, period=40, noise_sigma=sigma), seed_index=seed)
    tr = run(s, AlgoConfig(name=algo))  # check_invariants raises on any violation
    assert np.all(tr.mu >= 0)
    assert s.domain.contains(tr.x_final)
    assert np.all(np.isfinite(tr.loss))


def test_run_aborts_on_nan():
    b = np.full(20, 0.5)
    b[5] = np.nan
    s = tiny_stream(20, b)
    with pytest.raises(RunAbort):
        run(s, AlgoConfig(name="pd_fixed"))


def test_run_is_deterministic():
    s = generate(ScenarioConfig(kind="sparse", K=3, T=500))
    a, b = run(s, AlgoConfig()), run(s, AlgoConfig())
    assert a.equals(b)


def test_run_info_fields():
    s = generate(ScenarioConfig(kind="sparse", K=2, T=600))
    tr = run(s, AlgoConfig())
    assert tr.info["K_hat"] == 4 and tr.info["resets"] == 4
    assert tr.info["fingerprint"] == s.fingerprint()
    assert tr.algorithm == "SA-PD"


# ---------------------------------------------------------------- Slater estimate

def test_estimate_slater_examples():
    gs = [LinearConstraint(np.ones(2), 0.4), LinearConstraint(np.ones(2), 1.6)]
    dom = BoxDomain.cube(2)
    # margins at the centre (1, 1 sum) are -0.6 and 0.6
    assert estimate_slater(gs, domain=dom) == pytest.approx(0.3)
    assert estimate_slater(gs[:1], domain=dom) == 0.01
    assert estimate_slater([(gs[0], np.zeros(2))]) == pytest.approx(0.2)
    assert estimate_slater(gs, x_ref=np.zeros(2), xi_min=0.05) == pytest.approx(0.8)


def test_online_slater_used_without_declared_margin():
    s = tiny_stream(50, np.full(50, 0.9))
    s = Stream(s.domain, s.loss_kind, s.loss_params, s.A, s.b, s.b_true, xi=None)
    tr = run(s, AlgoConfig())
    assert tr.info["xi"] == pytest.approx(0.2)


@pytest.mark.parametrize("bad", [dict(name="x"), dict(c1=-1.0), dict(rho=1.0), dict(gamma=0.5),
                                 dict(dual_in_primal="later"), dict(delta_mode="cheap"), dict(p_min=1)])
def test_algo_config_validation(bad):
    with pytest.raises(ConfigError):
        AlgoConfig(**bad)


def test_algo_config_defaults():
    assert AlgoConfig().dual_constant == 100.0
    assert AlgoConfig(name="pd_fixed").dual_constant == 1.0
    with pytest.raises(ConfigError, match="valid keys"):
        AlgoConfig.from_dict({"nme": "sapd"})
