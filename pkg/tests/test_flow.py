import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dialogue_flow import tokens as tk
from dialogue_flow.errors import AllMasked, ConfigError, ShapeMismatch
from dialogue_flow.flow import (
    UNCONDITIONED,
    Condition,
    ContractingOracleField,
    FlowConfig,
    GaussianOracleField,
    Solver,
    cfg_dropout,
    cfg_field,
    fm_loss,
    integrate,
    ode_sample,
    sample_flow,
)
from dialogue_flow.prompt import PromptPrefix, build_inference_context
from dialogue_flow.streams import FrameGrid, SpeakerStreamPair

finite = st.floats(-10, 10, allow_nan=False)


def test_defaults():
    c = FlowConfig()
    assert (c.sigma_min, c.p_uncond, c.alpha, c.nfe, c.solver) == (0.1, 0.2, 1.0, 32, Solver.EULER)
    assert FlowConfig(nfe=32, solver="midpoint").steps == 16
    with pytest.raises(ConfigError):
        FlowConfig(sigma_min=0)
    with pytest.raises(ConfigError):
        FlowConfig(alpha=-1)


def test_sample_flow_endpoints(rng):
    m, m0 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    assert np.array_equal(sample_flow(m, m0, 0.0).w, m0)
    np.testing.assert_allclose(sample_flow(m, m0, 1.0).w, 0.1 * m0 + m, rtol=0, atol=1e-15)
    z = np.zeros_like(m)
    fs = sample_flow(m, z, 0.3)
    np.testing.assert_allclose(fs.w, 0.3 * m)
    assert np.array_equal(fs.target, m)
    with pytest.raises(ShapeMismatch):
        sample_flow(m, m0[:2], 0.5)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.5), st.integers(0, 2**32 - 1))
def test_target_is_time_derivative(t, sigma, seed):
    r = np.random.default_rng(seed)
    m, m0 = r.standard_normal(6), r.standard_normal(6)
    h = 1e-6
    fd = (sample_flow(m, m0, t + h, sigma).w - sample_flow(m, m0, t - h, sigma).w) / (2 * h)
    np.testing.assert_allclose(fd, sample_flow(m, m0, t, sigma).target, atol=1e-7)
    assert np.array_equal(sample_flow(m, m0, t, sigma).target, sample_flow(m, m0, 0.5, sigma).target)


def test_fm_loss_semantics(rng):
    x = rng.standard_normal((2, 6, 3))
    mask = np.ones((2, 6), dtype=bool)
    assert fm_loss(x, x, mask) == 0
    assert fm_loss(x + 1, x, mask) == pytest.approx(1.0)
    half = mask.copy()
    half[:, 3:] = False
    y = x.copy()
    y[:, 3:] += 5
    assert fm_loss(y, x, half) == 0
    with pytest.raises(AllMasked):
        fm_loss(x, x, np.zeros_like(mask))


def test_fm_loss_gradient_zero_on_masked_frames():
    pred = torch.randn(1, 8, 2, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[True] * 4 + [False] * 4])
    fm_loss(pred, torch.zeros_like(pred), mask).backward()
    assert (pred.grad[0, 4:] == 0).all() and (pred.grad[0, :4] != 0).all()


def test_cfg_dropout_extremes_and_rate():
    r = np.random.default_rng(0)
    cond = object()
    assert all(cfg_dropout(cond, 0.0, r) is cond for _ in range(100))
    assert all(cfg_dropout(cond, 1.0, r) is UNCONDITIONED for _ in range(100))
    drops = sum(cfg_dropout(cond, 0.2, np.random.default_rng(s)) is UNCONDITIONED for s in range(10000))
    # binomial sd at n=10000 is 0.004; the tolerance is 2.5 sd
    assert abs(drops / 10000 - 0.2) <= 0.01


@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (4, 3), elements=finite), st.floats(0, 5))
def test_cfg_identities(vc, vu, alpha):
    assert np.array_equal(cfg_field(vc, vu, 0.0), vc)
    assert np.array_equal(cfg_field(vc, vc, alpha), vc)
    np.testing.assert_allclose(cfg_field(vc, vu, alpha), (1 + alpha) * vc - alpha * vu, atol=1e-9)


def test_cfg_arithmetic():
    assert np.array_equal(cfg_field(np.full(3, 2.0), np.ones(3), 1.0), np.full(3, 3.0))
    with pytest.raises(ShapeMismatch):
        cfg_field(np.ones(3), np.ones(2), 1.0)


def _streams(n):
    return SpeakerStreamPair.silent(FrameGrid(n_frames=n))


def test_constant_field_reaches_path_endpoint(rng):
    m, m0 = rng.standard_normal((7, 2)), rng.standard_normal((7, 2))
    field = lambda w, t, cond: m - 0.9 * m0  # noqa: E731
    ctx = PromptPrefix.empty(2)
    for nfe in (1, 4, 32):
        out = ode_sample(field, ctx, _streams(7), FlowConfig(nfe=nfe, alpha=0.0), m0=m0)
        np.testing.assert_allclose(out, m + 0.1 * m0, atol=1e-12)


def test_single_euler_step(rng):
    m0 = rng.standard_normal((3, 2))
    field = lambda w, t, cond: np.sin(w) + t  # noqa: E731
    out = ode_sample(field, PromptPrefix.empty(2), _streams(3), FlowConfig(nfe=1, alpha=0.0), m0=m0)
    assert np.array_equal(out, m0 + np.sin(m0))


def test_guidance_uses_null_condition(rng):
    seen = []

    def field(w, t, cond):
        seen.append(cond)
        return np.full_like(w, 2.0 if len(cond.prefix) else 1.0)

    ctx = build_inference_context(np.ones((5, 2)))
    out = ode_sample(field, ctx, _streams(4), FlowConfig(nfe=1, alpha=1.0), m0=np.zeros((4, 2)))
    assert np.array_equal(out, np.full((4, 2), 3.0))
    cond, null = seen
    assert np.array_equal(cond.prefix.features, ctx.features)  # prompt stays clean
    assert len(null.prefix) == 0 and set(null.full_z1) == {tk.SILENCE}


def test_sampling_is_seeded():
    field = GaussianOracleField(np.zeros(2))
    ctx = build_inference_context(np.ones((5, 2)))
    a = ode_sample(field, ctx, _streams(6), rng=np.random.default_rng(3))
    b = ode_sample(field, ctx, _streams(6), rng=np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_gaussian_oracle_field_follows_its_trajectories(rng):
    f = GaussianOracleField(np.array([1.0, -2.0]), spread=0.7, sigma_min=0.1)
    z = rng.standard_normal(2)

    def traj(t):
        beta, _ = f._beta(t)
        return t * f.mean + beta * z

    for t in (0.1, 0.5, 0.9):
        h = 1e-6
        fd = (traj(t + h) - traj(t - h)) / (2 * h)
        np.testing.assert_allclose(fd, f(traj(t), t), atol=1e-7)
    np.testing.assert_allclose(traj(1.0), f.endpoint(z))


def test_gaussian_oracle_matches_path_marginal():
    # the path w = a*m0 + t*m with m ~ N(mean, spread^2) has sd sqrt(a^2 + t^2 spread^2)
    f = GaussianOracleField(np.zeros(1), spread=0.5)
    r = np.random.default_rng(5)
    t = 0.6
    w = sample_flow(r.normal(0, 0.5, 200000), r.standard_normal(200000), t).w
    assert w.std() == pytest.approx(f._beta(t)[0], rel=0.01)


def test_contracting_oracle_follows_its_trajectories(rng):
    f = ContractingOracleField(np.array([1.0, 2.0]), rate=1.0)
    z = rng.standard_normal(2)
    h = 1e-6
    for t in (0.0 + h, 0.4, 0.9):
        fd = (f.trajectory(z, t + h) - f.trajectory(z, t - h)) / (2 * h)
        np.testing.assert_allclose(fd, f(f.trajectory(z, t), t), atol=1e-7)
    assert np.array_equal(f.trajectory(z, 0.0), z)


def test_integrators_converge_at_their_order(rng):
    f = ContractingOracleField(np.array([1.5, -0.5]))
    m0 = rng.standard_normal((3, 2))
    exact = f.endpoint(m0)
    for solver, order in ((Solver.EULER, 1), (Solver.MIDPOINT, 2)):
        errs = [np.abs(integrate(lambda w, t: f(w, t), m0, n, solver) - exact).max() for n in (8, 16, 32)]
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(np.abs(rates - order) < 0.3)


def test_gaussian_oracle_midpoint_superconverges(rng):
    # documents why the order test uses the contracting field
    f = GaussianOracleField(np.array([1.5, -0.5]), spread=0.4)
    m0 = rng.standard_normal((3, 2))
    errs = [np.abs(integrate(lambda w, t: f(w, t), m0, n, Solver.MIDPOINT) - f.endpoint(m0)).max() for n in (8, 16)]
    assert np.log2(errs[0] / errs[1]) > 2.5


def test_null_condition():
    c = Condition.null(5, 3)
    assert len(c.prefix) == 0 and c.prefix.features.shape == (0, 3)
    assert set(c.z1) == set(c.z2) == {tk.SILENCE}
