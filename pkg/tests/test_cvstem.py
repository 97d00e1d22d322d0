import numpy as np
import pytest

from cmsynth.cvstem import (
    Infeasible,
    MetricField,
    MetricSample,
    NoFeasibleAlpha,
    SynthOptions,
    alpha_cond_feasible,
    alpha_line_search,
    bounded_real_check,
    contraction_margin,
    kyp_check,
    synth_control_metric,
    synth_estim_metric,
)
from cmsynth.dynamics import SystemModel, make_benchmark
from cmsynth.numkernel import spd_inverse, sym_eig, symmetrize


def lti_model(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n, m = b.shape
    return SystemModel(
        name="lti", n=n, m=m, p=0,
        f=lambda x, t: a @ x, B=lambda x, t: b,
        jac_f=lambda x, t: a,
        box=np.array([[-10.0, 10.0]] * n),
    )


def const_traj(model, n_samples=1, dt=0.1):
    return [(k * dt, np.zeros(model.n), np.zeros(model.n), np.zeros(model.m))
            for k in range(n_samples)]


def test_double_integrator_metric_and_margin():
    model = lti_model([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])
    fld = synth_control_metric(model, const_traj(model), alpha=0.5, R=1.0,
                               costs=(1.0, 0.0))
    s = fld.samples[0]
    assert s.chi >= 1.0 - 1e-9
    w, _ = sym_eig(s.wbar)
    assert w[0] >= 1.0 - 1e-8 and w[-1] <= s.chi + 1e-8
    assert np.isclose(s.m_upper / s.m_lower, s.chi)
    assert contraction_margin(fld, model, 0) <= 1e-6 * s.nu
    # grid cross-check of the optimal condition number over (wbar, nu)
    oracle = _double_integrator_grid_chi(alpha=0.5)
    assert abs(s.chi - oracle) <= 1e-2


def _double_integrator_grid_chi(alpha, nu_cap=1e7):
    """Nested grid search over the 3 Wbar entries; the gain scale nu sits at
    its cap because feasibility is monotone in nu (the actuation term only
    adds positive semidefinite slack)."""
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    brb = np.array([[0.0, 0.0], [0.0, 1.0]])
    center = np.array([2.0, -1.0, 2.0])
    width = np.array([10.0, 10.0, 10.0])
    best_val, best_w = np.inf, None
    for _ in range(8):
        grids = [np.linspace(center[i] - width[i] / 2,
                             center[i] + width[i] / 2, 13) for i in range(3)]
        for w1 in grids[0]:
            for w2 in grids[1]:
                for w3 in grids[2]:
                    wbar = np.array([[w1, w2], [w2, w3]])
                    lam = np.linalg.eigvalsh(wbar)
                    if lam[0] < 1.0 or lam[-1] >= best_val:
                        continue
                    lhs = -(a @ wbar + wbar @ a.T) - 2.0 * alpha * wbar \
                        + 2.0 * nu_cap * brb
                    if np.linalg.eigvalsh(lhs)[0] >= 0.0:
                        best_val, best_w = lam[-1], np.array([w1, w2, w3])
        if best_w is not None:
            center = best_w
        width = width * 0.35
    return best_val


def test_already_contracting_scalar():
    model = lti_model([[-1.0]], [[1.0]])
    fld = synth_control_metric(model, const_traj(model), alpha=0.8, R=1.0,
                               costs=(1.0, 1e-3))
    s = fld.samples[0]
    assert s.chi <= 1.0 + 1e-5
    assert contraction_margin(fld, model, 0) <= 0.0


def test_spacecraft_sweep_feasible():
    model = make_benchmark("spacecraft")
    radius, omega = 2.0, 2.0 * np.pi / 40.0
    thr = model.extras["thruster"]
    pinv = np.linalg.pinv(thr)
    hmat = np.diag([model.params["mass"]] * 2 + [model.params["inertia"]])

    def target(t):
        xd = np.array([radius * np.cos(omega * t), radius * np.sin(omega * t), 0.0,
                       -radius * omega * np.sin(omega * t),
                       radius * omega * np.cos(omega * t), 0.0])
        acc = np.array([-radius * omega ** 2 * np.cos(omega * t),
                        -radius * omega ** 2 * np.sin(omega * t), 0.0])
        ud = pinv @ (hmat @ acc)
        return xd, ud

    traj = []
    for k in range(5):
        t = 0.5 * k
        xd, ud = target(t)
        traj.append((t, xd, xd, ud))
    fld = synth_control_metric(model, traj, alpha=0.3, R=1.0, costs=(1.0, 0.01))
    assert fld.meta["min_slack"] >= -1e-8
    assert all(m <= 1e-6 * s.nu for m, s in zip(fld.meta["margins"], fld.samples))


def test_lorenz_estimation_sweep():
    model = make_benchmark("lorenz")
    tr = [(0.5 * k, np.array([1.0 + k, 2.0, 20.0 + k])) for k in range(5)]
    fld = synth_estim_metric(model, tr, alpha=1.0, R=1.0, costs=(1.0, 0.01),
                             bounds={"rho_bar": 1.0, "c_bar": 1.0})
    assert fld.meta["min_slack"] >= -1e-8
    assert all(s.chi >= 1.0 - 1e-9 for s in fld.samples)


def test_estimation_needs_injection():
    # unobservable unstable pair: C = 0 row makes injection impossible
    model = lti_model([[0.5]], [[1.0]])
    model.h = lambda x, t: np.array([0.0])
    model.jac_h = lambda x, t: np.array([[0.0]])
    model.p = 1
    with pytest.warns(UserWarning):
        with pytest.raises(Infeasible):
            synth_estim_metric(model, [(0.0, np.zeros(1))], alpha=0.3, R=1.0)


def test_estimation_lti_observable_easy():
    # Hurwitz A with full measurement: tiny injection suffices
    model = lti_model([[-1.0, 0.2], [0.0, -2.0]], np.zeros((2, 1)))
    model.h = lambda x, t: x.copy()
    model.jac_h = lambda x, t: np.eye(2)
    model.p = 2
    fld = synth_estim_metric(model, [(0.0, np.zeros(2))], alpha=0.5, R=1.0,
                             costs=(1.0, 1.0))
    assert fld.samples[0].nu <= 10.0


def test_alpha_line_search_matches_calculus():
    # J(alpha) = dbar * chi(alpha) / alpha with chi = 1/(1-alpha): minimum at 1/2
    grid = np.linspace(0.1, 0.9, 9)

    def objective(a):
        return 0.75 / (a * (1.0 - a))

    best = alpha_line_search(objective, grid)
    assert np.isclose(best, 0.5)


def test_alpha_line_search_single_and_empty():
    assert alpha_line_search(lambda a: 1.0 if a == 0.3 else None, [0.1, 0.3]) == 0.3
    with pytest.raises(NoFeasibleAlpha):
        alpha_line_search(lambda a: None, [0.1, 0.2])


def _manual_scalar_field(alpha):
    model = SystemModel(name="pure_decay", n=1, m=0, p=0,
                        f=lambda x, t: -x, B=lambda x, t: np.zeros((1, 0)),
                        jac_f=lambda x, t: np.array([[-1.0]]),
                        box=np.array([[-5.0, 5.0]]))
    s = MetricSample(t=0.0, x=np.zeros(1), x_d=np.zeros(1), u_d=np.zeros(0),
                     wbar=np.eye(1), nu=1.0, chi=1.0, alpha=alpha)
    return model, MetricField([s], alpha)


def test_contraction_margin_scalar_examples():
    model, fld = _manual_scalar_field(alpha=1.0)
    assert abs(contraction_margin(fld, model, 0)) <= 1e-12
    model, fld2 = _manual_scalar_field(alpha=2.0)
    assert np.isclose(contraction_margin(fld2, model, 0), 2.0)


def test_objective_monotonicity_in_c2():
    model = lti_model([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])
    nus = []
    for c2 in (0.01, 0.1, 1.0, 10.0):
        fld = synth_control_metric(model, const_traj(model), alpha=0.5, R=1.0,
                                   costs=(1.0, c2))
        nus.append(fld.samples[0].nu)
    for a, b in zip(nus, nus[1:]):
        assert b <= a + 1e-6 * (1.0 + a)


def test_stochastic_control_mode():
    model = lti_model([[0.0, 1.0], [-1.0, -1.0]], [[0.0], [1.0]])
    fld = synth_control_metric(
        model, const_traj(model), alpha=0.3, R=1.0, costs=(1.0, 0.1),
        stochastic={"g_bar": 0.2, "L_m": 0.5, "alpha_G": 1.0})
    assert fld.beta > 0.0
    s = fld.samples[0]
    assert alpha_cond_feasible(np.array([[0.0, 1.0], [-1.0, -1.0]]),
                               np.array([[0.0], [1.0]]), np.eye(1),
                               s.wbar, s.nu, 0.3, fld.beta, tol=1e-7)


def test_stochastic_estimation_outer_search():
    model = lti_model([[-0.2, 1.0], [0.0, -0.5]], np.zeros((2, 1)))
    model.h = lambda x, t: np.array([x[0]])
    model.jac_h = lambda x, t: np.array([[1.0, 0.0]])
    model.p = 1
    fld = synth_estim_metric(
        model, [(0.0, np.zeros(2))], alpha=0.3, R=1.0, costs=(1.0, 0.05),
        bounds={"rho_bar": 1.0, "c_bar": 1.0},
        stochastic={"g0_bar": 0.1, "g1_bar": 0.1, "L_m": 0.2, "alpha_G": 1.0},
        opts=SynthOptions(stationary=True))
    assert fld.samples[0].nu > 0.0
    assert fld.beta > 0.0


def test_bounded_real_not_applicable_at_zero_beta():
    assert bounded_real_check(np.array([[-1.0]]), np.eye(1), 0.5, 0.0) is None


def test_bounded_real_agrees_with_schur_form():
    rng = np.random.default_rng(11)
    n = 3
    count = 0
    while count < 100:
        a = rng.standard_normal((n, n))
        b = rng.standard_normal((n, 1))
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        wbar = symmetrize(q @ np.diag(rng.uniform(1.0, 4.0, n)) @ q.T)
        nu = rng.uniform(0.5, 5.0)
        alpha = rng.uniform(0.05, 1.5)
        beta = rng.uniform(0.05, 1.0)
        m = symmetrize(nu * spd_inverse(wbar))
        a_cl = a - b @ b.T @ m
        lhs = bounded_real_check(a_cl, m, alpha, beta, tol=0.0)
        rhs = alpha_cond_feasible(a, b, np.eye(1), wbar, nu, alpha, beta, tol=0.0)
        # skip razor-edge instances where roundoff decides the sign
        top = symmetrize(m @ a_cl + a_cl.T @ m + 2 * alpha * m)
        edge = np.linalg.eigvalsh(np.block([[top, np.eye(n)],
                                            [np.eye(n), -np.eye(n) / beta]]))
        if min(abs(edge[-1]), 1.0) < 1e-8:
            continue
        assert lhs == rhs
        count += 1


def test_kyp_implies_bounded_real():
    rng = np.random.default_rng(12)
    hits = 0
    for _ in range(100):
        alpha = rng.uniform(0.1, 1.0)
        beta = 2.0 * alpha
        kappa = rng.uniform(0.5, 4.0)
        a_cl = -kappa * np.eye(2) + 0.1 * rng.standard_normal((2, 2))
        k = kyp_check(a_cl, np.eye(2), alpha, beta)
        if k:
            hits += 1
            assert bounded_real_check(a_cl, np.eye(2), alpha, beta)
    assert hits >= 10  # the construction produces plenty of feasible cases


def test_field_serialization_roundtrip(tmp_path):
    model = lti_model([[-1.0]], [[1.0]])
    fld = synth_control_metric(model, const_traj(model, n_samples=3),
                               alpha=0.5, R=1.0)
    path = tmp_path / "field.json"
    fld.to_json(path)
    back = MetricField.from_json(str(path))
    assert len(back) == 3
    assert np.allclose(back.samples[1].wbar, fld.samples[1].wbar)
    assert np.isclose(back.alpha, fld.alpha)


def test_field_interpolation_spd_at_midpoints():
    model = lti_model([[0.0, 1.0], [-2.0, -1.0]], [[0.0], [1.0]])
    fld = synth_control_metric(model, const_traj(model, n_samples=4, dt=0.25),
                               alpha=0.4, R=1.0)
    for k in range(len(fld) - 1):
        tm = 0.5 * (fld.samples[k].t + fld.samples[k + 1].t)
        m = fld.metric_at_time(tm)
        w, _ = sym_eig(m)
        assert w[0] > 0.0
