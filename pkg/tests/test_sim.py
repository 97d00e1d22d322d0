import numpy as np
import pytest

from cmsynth.dynamics import make_benchmark
from cmsynth.sim import NonFinite, Trace, Xoshiro256, em_run, monte_carlo, rk4_run


def _decay_model():
    model = make_benchmark("scalar_toy")

    # plain xdot = -x (drop the forcing) for the analytic decay checks
    model_f = lambda x, t: np.array([-x[0]])
    model.f = model_f
    return model


def test_rk4_exponential_decay():
    model = _decay_model()
    tr = rk4_run(model, None, None, [1.0], lambda t: (np.zeros(1), None), 1.0, 1e-3)
    assert abs(tr.x[-1, 0] - np.exp(-1.0)) <= 1e-8


def test_rk4_scalar_toy_closed_form():
    model = make_benchmark("scalar_toy")
    tr = rk4_run(model, None, None, [0.5], lambda t: (np.zeros(1), None), 2.0, 1e-3)
    expected = np.exp(tr.t) / 2.0
    assert np.max(np.abs(tr.x[:, 0] - expected)) <= 1e-6


def test_rk4_measured_order():
    model = make_benchmark("sinc2d")
    x0 = [0.8, -0.4]
    ref = rk4_run(model, None, None, x0, None, 2.0, 1e-5).x[-1]
    errs = []
    for dt in (0.02, 0.01):
        tr = rk4_run(model, None, None, x0, None, 2.0, dt)
        errs.append(np.linalg.norm(tr.x[-1] - ref))
    order = np.log2(errs[0] / errs[1])
    assert order >= 3.7


def test_rk4_nonfinite_aborts():
    model = make_benchmark("scalar_toy")
    model.f = lambda x, t: np.array([x[0] ** 3])
    with pytest.raises(NonFinite):
        rk4_run(model, None, None, [5.0], None, 10.0, 0.1)


def test_em_zero_diffusion_matches_euler():
    model = _decay_model()
    tr = em_run(model, None, lambda x, t: np.zeros((1, 1)) * 0.0, [1.0], 1.0, 0.01, seed=42)
    x = np.array([1.0])
    for _ in range(100):
        x = x + 0.01 * (-x)
    assert tr.x[-1, 0] == x[0]


def test_em_seed_determinism():
    model = _decay_model()
    kw = dict(x0=[0.3], T=1.0, dt=0.01, seed=99)
    tr1 = em_run(model, None, lambda x, t: np.eye(1), **kw)
    tr2 = em_run(model, None, lambda x, t: np.eye(1), **kw)
    assert np.array_equal(tr1.x, tr2.x)
    tr3 = em_run(model, None, lambda x, t: np.eye(1), x0=[0.3], T=1.0, dt=0.01, seed=100)
    assert not np.array_equal(tr1.x, tr3.x)


def test_em_ou_second_moment():
    # dx = -x dt + dW from x0 = 0: E[x(T)^2] = (1 - e^{-2T})/2
    model = _decay_model()
    T = 1.0
    vals = []
    for i in range(2000):
        tr = em_run(model, None, lambda x, t: np.eye(1), [0.0], T, 0.01, seed=1000 + i)
        vals.append(tr.x[-1, 0] ** 2)
    vals = np.asarray(vals)
    target = 0.5 * (1.0 - np.exp(-2.0 * T))
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - target) <= 3.0 * se


def test_em_weak_error_decreases_with_dt():
    model = _decay_model()
    T = 1.0
    target = 0.5 * (1.0 - np.exp(-2.0 * T))

    def mean_sq(dt):
        vals = [em_run(model, None, lambda x, t: np.eye(1), [0.0], T, dt, seed=5000 + i).x[-1, 0] ** 2
                for i in range(1500)]
        return float(np.mean(vals))

    coarse = abs(mean_sq(0.2) - target)
    fine = abs(mean_sq(0.025) - target)
    assert fine < coarse


def test_monte_carlo_constant_runs():
    t = np.linspace(0.0, 1.0, 11)

    def run(seed):
        e = np.full(11, 0.25)
        return Trace(t, np.zeros((11, 1)), np.zeros((11, 1)), np.zeros((11, 0)), e)

    out = monte_carlo(run, 16, base_seed=1, n_boot=200)
    assert np.allclose(out["mean_sq"], 0.0625)
    assert np.allclose(out["ci_lo"], out["ci_hi"])


def test_monte_carlo_low_n_flag():
    t = np.linspace(0.0, 1.0, 3)

    def run(seed):
        return Trace(t, np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((3, 0)),
                     np.full(3, float(seed % 3)))

    out = monte_carlo(run, 2, base_seed=0, n_boot=50)
    assert out["low_n"]
    with pytest.raises(ValueError):
        monte_carlo(run, 1, base_seed=0)


def test_monte_carlo_ci_coverage():
    # OU ensembles: the bootstrap CI of E[x(T)^2] should cover the analytic
    # moment in at least 93 of 100 repetitions
    model = _decay_model()
    T = 0.5
    dt = 0.02
    target = 0.5 * (1.0 - np.exp(-2.0 * T))

    def make_run(block):
        def run(seed):
            tr = em_run(model, None, lambda x, t: np.eye(1), [0.0], T, dt, seed=seed)
            tr.err = np.abs(tr.x[:, 0])
            return tr
        return run

    covered = 0
    for rep in range(100):
        out = monte_carlo(make_run(rep), 100, base_seed=100000 + 1000 * rep, n_boot=600)
        if out["ci_lo"][-1] <= target <= out["ci_hi"][-1]:
            covered += 1
    assert covered >= 93


def test_trace_csv_roundtrip(tmp_path):
    t = np.linspace(0.0, 1.0, 5)
    tr = Trace(t, np.ones((5, 2)), np.zeros((5, 2)), np.ones((5, 1)), np.ones(5))
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "t,x_1,x_2,xd_1,xd_2,u_1,err_norm"
    assert len(lines) == 6


def test_xoshiro_stream_reproducibility():
    a = Xoshiro256(123)
    b = Xoshiro256(123)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]
    u = Xoshiro256(7).uniform()
    assert 0.0 < u < 1.0
