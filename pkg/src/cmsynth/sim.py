"""Fixed-step deterministic/stochastic integration, trace records, Monte Carlo.

The pseudo-random stream is a xoshiro256** generator seeded through splitmix64,
with one independent stream per path (stream i uses seed base_seed + i). The
algorithm is fixed here so traces reproduce bit-for-bit across platforms.
Gaussian increments come from the Box-Muller transform on successive 53-bit
uniforms.
"""

from dataclasses import dataclass, field

import numpy as np

_MASK = (1 << 64) - 1


class NonFinite(Exception):
    """A simulated state stopped being finite; carries the offending time."""


def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256:
    """xoshiro256** stream; state expanded from a 64-bit seed via splitmix64."""

    def __init__(self, seed):
        s = int(seed) & _MASK
        self.s = []
        for _ in range(4):
            s, out = _splitmix64(s)
            self.s.append(out)

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self):
        """Uniform in (0, 1), 53-bit resolution, never exactly 0."""
        return ((self.next_u64() >> 11) + 1) * (1.0 / (9007199254740992.0 + 1.0))

    def normals(self, count):
        """Array of `count` standard normals via Box-Muller."""
        out = np.empty(count)
        i = 0
        while i < count:
            u1 = self.uniform()
            u2 = self.uniform()
            r = np.sqrt(-2.0 * np.log(u1))
            out[i] = r * np.cos(2.0 * np.pi * u2)
            i += 1
            if i < count:
                out[i] = r * np.sin(2.0 * np.pi * u2)
                i += 1
        return out


@dataclass
class Trace:
    """Uniform-grid record of one simulated run.

    `x` holds the primary state history, `ref` the target (or true-state)
    history aligned with it, `u` the input history, and `err` the per-sample
    Euclidean error norm used by the tube checks.
    """

    t: np.ndarray
    x: np.ndarray
    ref: np.ndarray
    u: np.ndarray
    err: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def to_csv(self, path, ref_label="xd"):
        n = self.x.shape[1]
        m = self.u.shape[1] if self.u.ndim == 2 else 0
        cols = ["t"]
        cols += [f"x_{i+1}" for i in range(n)]
        cols += [f"{ref_label}_{i+1}" for i in range(self.ref.shape[1])]
        cols += [f"u_{i+1}" for i in range(m)]
        cols.append("err_norm")
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for k in range(len(self.t)):
                row = [self.t[k]]
                row += list(self.x[k])
                row += list(self.ref[k])
                if m:
                    row += list(self.u[k])
                row.append(self.err[k])
                f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _check_finite(x, t):
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"non-finite state at t={t:.6g}: {x}")


def rollout(fun, x0, T, dt):
    """Plain fixed-step RK4 of dx/dt = fun(x, t); returns (t grid, states).

    Convenience for augmented systems (states stacked with parameter
    estimates) that do not fit the model/controller split of rk4_run."""
    x = np.asarray(x0, dtype=float).copy()
    steps = int(round(T / dt))
    ts = np.linspace(0.0, steps * dt, steps + 1)
    xs = np.zeros((steps + 1, x.size))
    xs[0] = x
    for k in range(steps):
        t = ts[k]
        k1 = fun(x, t)
        k2 = fun(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = fun(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = fun(x + dt * k3, t + dt)
        x = x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        _check_finite(x, t + dt)
        xs[k + 1] = x
    return ts, xs


def rk4_run(model, controller, disturbance, x0, target, T, dt, meta=None):
    """Classic fixed-step 4th-order Runge-Kutta rollout of a closed loop.

    Parameters
    ----------
    model : SystemModel
    controller : callable (x, t) -> u, or None for the unforced system
    disturbance : callable (x, t) -> additive state-rate disturbance, or None
    x0 : initial state
    target : callable t -> (x_d, u_d) used for the error column, or None
    T, dt : horizon and step

    Returns
    -------
    Trace
    """
    x0 = np.asarray(x0, dtype=float)
    steps = int(round(T / dt))
    n = x0.size
    m = model.m
    ts = np.linspace(0.0, steps * dt, steps + 1)
    xs = np.zeros((steps + 1, n))
    refs = np.zeros((steps + 1, n))
    us = np.zeros((steps + 1, m))
    errs = np.zeros(steps + 1)

    def rate(x, t):
        u = controller(x, t) if controller is not None else np.zeros(m)
        dx = model.f(x, t)
        if m:
            dx = dx + model.B(x, t) @ u
        if disturbance is not None:
            dx = dx + disturbance(x, t)
        return dx, u

    x = x0.copy()
    for k in range(steps + 1):
        t = ts[k]
        dx1, u = rate(x, t)
        xs[k] = x
        us[k] = u
        if target is not None:
            xd, _ = target(t)
            refs[k] = xd
            errs[k] = np.linalg.norm(x - xd)
        if k == steps:
            break
        k2, _ = rate(x + 0.5 * dt * dx1, t + 0.5 * dt)
        k3, _ = rate(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4, _ = rate(x + dt * k3, t + dt)
        x = x + dt * (dx1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        _check_finite(x, t + dt)
    tr = Trace(ts, xs, refs, us, errs, meta=dict(meta or {}))
    tr.meta.update(dt=dt, integrator="rk4")
    return tr


def em_run(model, controller, diffusion, x0, T, dt, seed, target=None, meta=None):
    """Euler-Maruyama rollout with seeded Gaussian increments.

    `diffusion` maps (x, t) to the n-by-w diffusion matrix; increments are
    sqrt(dt) * N(0, I_w). With diffusion identically zero this matches an
    explicit-Euler deterministic run bit for bit.
    """
    x0 = np.asarray(x0, dtype=float)
    steps = int(round(T / dt))
    n = x0.size
    m = model.m
    g0 = diffusion(x0, 0.0)
    w = g0.shape[1] if g0.ndim == 2 else 0
    rng = Xoshiro256(seed)
    normals = rng.normals(steps * w).reshape(steps, w) if w else np.zeros((steps, 0))

    ts = np.linspace(0.0, steps * dt, steps + 1)
    xs = np.zeros((steps + 1, n))
    refs = np.zeros((steps + 1, n))
    us = np.zeros((steps + 1, m))
    errs = np.zeros(steps + 1)
    sdt = np.sqrt(dt)
    x = x0.copy()
    for k in range(steps + 1):
        t = ts[k]
        u = controller(x, t) if controller is not None else np.zeros(m)
        xs[k] = x
        us[k] = u
        if target is not None:
            xd, _ = target(t)
            refs[k] = xd
            errs[k] = np.linalg.norm(x - xd)
        if k == steps:
            break
        dx = model.f(x, t)
        if m:
            dx = dx + model.B(x, t) @ u
        x = x + dt * dx
        if w:
            x = x + diffusion(xs[k], t) @ (sdt * normals[k])
        _check_finite(x, t + dt)
    tr = Trace(ts, xs, refs, us, errs, meta=dict(meta or {}))
    tr.meta.update(dt=dt, integrator="em", seed=int(seed))
    return tr


def monte_carlo(run, n_paths, base_seed, n_boot=1000, exceed_levels=()):
    """Ensemble statistics of squared error over seeded independent paths.

    Parameters
    ----------
    run : callable seed -> Trace
    n_paths : number of paths; path i uses seed base_seed + i
    n_boot : bootstrap resamples for the 95% CI of the per-time mean
    exceed_levels : error-norm thresholds; exceedance counted per time sample

    Returns
    -------
    dict with keys t, mean_sq (per-time mean of ||e||^2), ci_lo, ci_hi,
    exceed_frac {level: per-time fraction}, n_paths, low_n flag.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    errs = []
    ts = None
    for i in range(n_paths):
        tr = run(base_seed + i)
        if ts is None:
            ts = tr.t
        errs.append(tr.err)
    e2 = np.asarray(errs) ** 2
    mean_sq = e2.mean(axis=0)
    # dedicated bootstrap stream, decoupled from the path seeds; multinomial
    # path weights are equivalent to index resampling
    boot_rng = np.random.default_rng((int(base_seed) * 2654435761 + 7) & _MASK)
    counts = boot_rng.multinomial(n_paths, np.full(n_paths, 1.0 / n_paths),
                                  size=n_boot).astype(float)
    boot_means = (counts / n_paths) @ e2
    ci_lo = np.quantile(boot_means, 0.025, axis=0)
    ci_hi = np.quantile(boot_means, 0.975, axis=0)
    exceed = {}
    e_abs = np.sqrt(e2)
    for lev in exceed_levels:
        exceed[lev] = (e_abs >= lev).mean(axis=0)
    return {
        "t": ts,
        "mean_sq": mean_sq,
        "ci_lo": ci_lo,
        "ci_hi": ci_hi,
        "exceed_frac": exceed,
        "n_paths": n_paths,
        "low_n": n_paths < 30,
    }
