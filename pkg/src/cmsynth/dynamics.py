"""System models, benchmark dynamics, and bounded disturbance generators."""

from dataclasses import dataclass, field
from math import cos, sin
from typing import Callable, Optional

import numpy as np

from .sim import Xoshiro256

_CBRT_EPS = float(np.cbrt(np.finfo(float).eps))


class UnknownBenchmark(Exception):
    pass


class BadOverride(Exception):
    pass


class WrongKind(Exception):
    pass


@dataclass
class SystemModel:
    """Control-affine dynamics record: xdot = f(x,t) + B(x,t) u, y = h(x,t).

    Callbacks must be pure; analytic Jacobians are optional and fall back to
    central differences. `extras` carries benchmark-specific structure
    (inertia/Coriolis terms, regressors, residuals) used by the adaptive and
    controller layers.
    """

    name: str
    n: int
    m: int
    p: int
    f: Callable
    B: Callable
    h: Optional[Callable] = None
    jac_f: Optional[Callable] = None
    jac_h: Optional[Callable] = None
    jac_Bu: Optional[Callable] = None
    jac_fbar: Optional[Callable] = None  # fused (x, u, t) -> d(f + B u)/dx
    box: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def fd_jacobian(fun, x, t, out_dim=None):
    """Central-difference Jacobian with per-coordinate step cbrt(eps)*max(1,|x_i|)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    y0 = np.asarray(fun(x, t), dtype=float)
    out = y0.size if out_dim is None else out_dim
    jac = np.zeros((out, n))
    for i in range(n):
        h = _CBRT_EPS * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(fun(xp, t)) - np.asarray(fun(xm, t))) / (2.0 * h)
    return jac


def jacobian_f(model, x, t):
    """State Jacobian of the drift; analytic callback when available."""
    if model.jac_f is not None:
        return np.asarray(model.jac_f(x, t), dtype=float)
    return fd_jacobian(model.f, x, t, out_dim=model.n)


def jacobian_fbar(model, x, u, t):
    """State Jacobian of f(x,t) + B(x,t) u."""
    if model.jac_fbar is not None:
        return model.jac_fbar(x, u, t)
    jf = jacobian_f(model, x, t)
    if model.m == 0 or u is None or not np.any(u):
        return jf
    if model.jac_Bu is not None:
        return jf + np.asarray(model.jac_Bu(x, u, t), dtype=float)
    return jf + fd_jacobian(lambda q, tt: model.B(q, tt) @ u, x, t, out_dim=model.n)


def jacobian_h(model, x, t):
    if model.h is None:
        raise ValueError(f"model {model.name} has no measurement map")
    if model.jac_h is not None:
        return np.asarray(model.jac_h(x, t), dtype=float)
    return fd_jacobian(model.h, x, t, out_dim=model.p)


# ----------------------------------------------------------------------------
# benchmarks
# ----------------------------------------------------------------------------

def _lorenz(params):
    sigma = params.pop("sigma", 10.0)
    beta = params.pop("beta", 8.0 / 3.0)
    rho = params.pop("rho", 28.0)

    def f(x, t):
        return np.array([
            sigma * (x[1] - x[0]),
            x[0] * (rho - x[2]) - x[1],
            x[0] * x[1] - beta * x[2],
        ])

    def jac(x, t):
        return np.array([
            [-sigma, sigma, 0.0],
            [rho - x[2], -1.0, -x[0]],
            [x[1], x[0], -beta],
        ])

    box = np.array([[-30.0, 30.0]] * 3)
    return SystemModel(
        name="lorenz", n=3, m=0, p=1,
        f=f, B=lambda x, t: np.zeros((3, 0)),
        h=lambda x, t: np.array([x[0]]),
        jac_f=jac, jac_h=lambda x, t: np.array([[1.0, 0.0, 0.0]]),
        box=box, params=dict(sigma=sigma, beta=beta, rho=rho),
    )


def spacecraft_thruster_matrix(arm_l, arm_b):
    return np.array([
        [-1.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 1.0, 1.0],
        [-arm_l, arm_l, -arm_b, arm_b, -arm_l, arm_l, -arm_b, arm_b],
    ])


def _spacecraft(params):
    mass = params.pop("mass", 17.0)
    inertia = params.pop("inertia", 1.8)
    arm_l = params.pop("arm_l", 0.4)
    arm_b = params.pop("arm_b", 0.4)
    thr = spacecraft_thruster_matrix(arm_l, arm_b)
    h_inv = np.diag([1.0 / mass, 1.0 / mass, 1.0 / inertia])

    def rot(phi):
        c, s = np.cos(phi), np.sin(phi)
        return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])

    def drot(phi):
        c, s = np.cos(phi), np.sin(phi)
        return np.array([[-s, c, 0.0], [-c, -s, 0.0], [0.0, 0.0, 0.0]])

    def f(x, t):
        return np.array([x[3], x[4], x[5], 0.0, 0.0, 0.0])

    jf = np.zeros((6, 6))
    jf[:3, 3:] = np.eye(3)

    def big_b(x, t):
        b = np.zeros((6, 8))
        b[3:, :] = h_inv @ rot(x[2]) @ thr
        return b

    def jac_bu(x, u, t):
        j = np.zeros((6, 6))
        j[3:, 2] = h_inv @ drot(x[2]) @ thr @ u
        return j

    box = np.array([[-10.0, 10.0]] * 2 + [[-np.pi, np.pi]] + [[-5.0, 5.0]] * 3)
    return SystemModel(
        name="spacecraft", n=6, m=8, p=0,
        f=f, B=big_b, jac_f=lambda x, t: jf, jac_Bu=jac_bu,
        box=box,
        params=dict(mass=mass, inertia=inertia, arm_l=arm_l, arm_b=arm_b),
        extras=dict(thruster=thr, h_inv=h_inv, rot=rot),
    )


def _sinc2d(params):
    def f(x, t):
        return np.array([x[1], -x[0] * x[1]])

    def jac(x, t):
        return np.array([[0.0, 1.0], [-x[1], -x[0]]])

    def big_b(x, t):
        return np.array([[0.0], [np.cos(x[0])]])

    def jac_bu(x, u, t):
        return np.array([[0.0, 0.0], [-u[0] * np.sin(x[0]), 0.0]])

    box = np.array([[-3.0, 3.0]] * 2)
    return SystemModel(name="sinc2d", n=2, m=1, p=0, f=f, B=big_b,
                       jac_f=jac, jac_Bu=jac_bu, box=box)


def _scalar_toy(params):
    def f(x, t):
        return np.array([-x[0] + np.exp(t)])

    return SystemModel(
        name="scalar_toy", n=1, m=1, p=0,
        f=f, B=lambda x, t: np.array([[1.0]]),
        jac_f=lambda x, t: np.array([[-1.0]]),
        box=np.array([[-50.0, 50.0]]),
    )


def lagrangian_terms(q, qdot, m1, m2, l1, l2, grav):
    """Inertia, Coriolis, and gravity terms of the planar two-link arm."""
    c2 = np.cos(q[1])
    s2 = np.sin(q[1])
    h11 = (m1 + m2) * l1 ** 2 + m2 * l2 ** 2 + 2.0 * m2 * l1 * l2 * c2
    h12 = m2 * l2 ** 2 + m2 * l1 * l2 * c2
    H = np.array([[h11, h12], [h12, m2 * l2 ** 2]])
    hcor = m2 * l1 * l2 * s2
    C = np.array([
        [-hcor * qdot[1], -hcor * (qdot[0] + qdot[1])],
        [hcor * qdot[0], 0.0],
    ])
    c1 = np.cos(q[0])
    c12 = np.cos(q[0] + q[1])
    G = np.array([
        (m1 + m2) * grav * l1 * c1 + m2 * grav * l2 * c12,
        m2 * grav * l2 * c12,
    ])
    return H, C, G


def lagrangian_regressor(q, qdot, qr_dot, qr_ddot, l1, l2, grav):
    """2-by-2 regressor Y with Y @ [m1, m2] = H qr_ddot + C qr_dot + G."""
    y = np.zeros((2, 2))
    for i, (dm1, dm2) in enumerate(((1.0, 0.0), (0.0, 1.0))):
        H, C, G = lagrangian_terms(q, qdot, dm1, dm2, l1, l2, grav)
        y[:, i] = H @ qr_ddot + C @ qr_dot + G
    return y


def _lagrangian2(params):
    m1 = params.pop("m1", 1.0)
    m2 = params.pop("m2", 1.0)
    l1 = params.pop("l1", 1.0)
    l2 = params.pop("l2", 1.0)
    grav = params.pop("gravity", 9.8)

    def terms(q, qdot, masses=None):
        a, b = (m1, m2) if masses is None else masses
        return lagrangian_terms(q, qdot, a, b, l1, l2, grav)

    def f(x, t):
        H, C, G = terms(x[:2], x[2:])
        qdd = np.linalg.solve(H, -C @ x[2:] - G)
        return np.concatenate([x[2:], qdd])

    def big_b(x, t):
        H, _, _ = terms(x[:2], x[2:])
        b = np.zeros((4, 2))
        b[2:, :] = np.linalg.inv(H)
        return b

    mll = m2 * l1 * l2
    msum = m1 + m2
    m2l2sq = m2 * l2 ** 2

    def jac_fused(x, u, t):
        """Fused analytic d(f + B u)/dx; u merges into the torque channel."""
        q1, q2, v1, v2 = x
        c1, c2 = cos(q1), cos(q2)
        s1, s2 = sin(q1), sin(q2)
        c12, s12 = cos(q1 + q2), sin(q1 + q2)
        h11 = msum * l1 ** 2 + m2l2sq + 2.0 * mll * c2
        h12 = m2l2sq + mll * c2
        h22 = m2l2sq
        det = h11 * h22 - h12 * h12
        i11, i12, i22 = h22 / det, -h12 / det, h11 / det
        hc = mll * s2
        dhc = mll * c2
        cor1 = -(2.0 * v1 * v2 + v2 * v2)
        cor2 = v1 * v1
        g1 = msum * grav * l1 * c1 + m2 * grav * l2 * c12
        g2 = m2 * grav * l2 * c12
        r1 = -hc * cor1 - g1
        r2 = -hc * cor2 - g2
        if u is not None:
            r1 += u[0]
            r2 += u[1]
        w1 = i11 * r1 + i12 * r2
        w2 = i12 * r1 + i22 * r2
        dg1_1 = -msum * grav * l1 * s1 - m2 * grav * l2 * s12
        dg1_2 = -m2 * grav * l2 * s12
        dg2_1 = -m2 * grav * l2 * s12
        dg2_2 = dg2_1
        # column q1: Hinv @ (-dG/dq1)
        a1 = -(i11 * dg1_1 + i12 * dg1_2)
        a2 = -(i12 * dg1_1 + i22 * dg1_2)
        # column q2: Hinv @ (-dhc*cor - dG/dq2) - Hinv dH2 w
        b1 = -dhc * cor1 - dg2_1
        b2 = -dhc * cor2 - dg2_2
        # dH/dq2 = -mll*s2 * [[2,1],[1,0]]
        d1 = -mll * s2 * (2.0 * w1 + w2)
        d2 = -mll * s2 * w1
        b1 -= d1
        b2 -= d2
        c1c = i11 * b1 + i12 * b2
        c2c = i12 * b1 + i22 * b2
        # velocity block: Hinv @ (-hc * dcor)
        e11 = -hc * (-2.0 * v2)
        e12 = -hc * (-2.0 * (v1 + v2))
        e21 = -hc * (2.0 * v1)
        out = np.zeros((4, 4))
        out[0, 2] = 1.0
        out[1, 3] = 1.0
        out[2, 0] = a1
        out[3, 0] = a2
        out[2, 1] = c1c
        out[3, 1] = c2c
        out[2, 2] = i11 * e11 + i12 * e21
        out[3, 2] = i12 * e11 + i22 * e21
        out[2, 3] = i11 * e12
        out[3, 3] = i12 * e12
        return out

    box = np.array([[-np.pi, np.pi]] * 2 + [[-2.0, 2.0]] * 2)
    return SystemModel(
        name="lagrangian2", n=4, m=2, p=0, f=f, B=big_b, box=box,
        jac_f=lambda x, t: jac_fused(x, None, t), jac_fbar=jac_fused,
        params=dict(m1=m1, m2=m2, l1=l1, l2=l2, gravity=grav),
        extras=dict(
            terms=terms,
            regressor=lambda q, qd, qrd, qrdd: lagrangian_regressor(
                q, qd, qrd, qrdd, l1, l2, grav),
            masses=np.array([m1, m2]),
        ),
    )


def _nonaffine_toy(params):
    kappa = params.pop("kappa", 0.5)

    def f(x, t):
        return np.array([-x[0]])

    return SystemModel(
        name="nonaffine_toy", n=1, m=1, p=0,
        f=f, B=lambda x, t: np.array([[1.0]]),
        jac_f=lambda x, t: np.array([[-1.0]]),
        box=np.array([[-10.0, 10.0]]),
        params=dict(kappa=kappa),
        extras=dict(residual=lambda x, u, t: kappa * np.tanh(u)),
    )


_BENCHMARKS = {
    "lorenz": _lorenz,
    "spacecraft": _spacecraft,
    "sinc2d": _sinc2d,
    "scalar_toy": _scalar_toy,
    "lagrangian2": _lagrangian2,
    "nonaffine_toy": _nonaffine_toy,
}


def make_benchmark(bench_id, **overrides):
    """Instantiate a benchmark model by name with keyword overrides.

    Raises UnknownBenchmark for an unrecognized id and BadOverride for an
    unrecognized or non-finite override key.
    """
    if bench_id not in _BENCHMARKS:
        raise UnknownBenchmark(bench_id)
    work = dict(overrides)
    for key, val in work.items():
        if not np.all(np.isfinite(val)):
            raise BadOverride(f"{key}={val}")
    model = _BENCHMARKS[bench_id](work)
    if work:
        raise BadOverride(f"unknown override keys {sorted(work)} for {bench_id}")
    return model


# ----------------------------------------------------------------------------
# disturbances
# ----------------------------------------------------------------------------

@dataclass
class DisturbanceSpec:
    """Bounded disturbance description.

    kind 'deterministic' uses d_bar with one of the waveforms below; kind
    'stochastic' carries the Frobenius bound g_bar for a diffusion matrix;
    kind 'none' is the zero disturbance.

    Waveforms: 'rotating' keeps the norm exactly at d_bar by rotating in a
    seed-chosen 2-plane (constant d_bar for n = 1); 'clipped' is a smooth
    seeded multi-sine clipped to norm <= d_bar.
    """

    kind: str = "none"
    d_bar: float = 0.0
    g_bar: float = 0.0
    waveform: str = "rotating"
    seed: int = 0
    omega: float = 1.0


def _seeded_frame(seed, n):
    rng = Xoshiro256(seed)
    v1 = rng.normals(n)
    v1 /= np.linalg.norm(v1)
    if n == 1:
        return v1, v1, 2.0 * np.pi * rng.uniform()
    v2 = rng.normals(n)
    v2 -= (v2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    return v1, v2, 2.0 * np.pi * rng.uniform()


def _clipped_coeffs(seed, n):
    rng = Xoshiro256(seed)
    amps = rng.normals(3 * n).reshape(n, 3)
    freqs = 0.3 + 2.0 * np.abs(rng.normals(3 * n)).reshape(n, 3)
    phases = 2.0 * np.pi * np.array([rng.uniform() for _ in range(3 * n)]).reshape(n, 3)
    return amps, freqs, phases


def sample_disturbance(spec, t, x=None):
    """Disturbance vector at time t; deterministic in (seed, t)."""
    if spec.kind != "deterministic":
        raise WrongKind(f"expected deterministic spec, got {spec.kind!r}")
    n = np.asarray(x).size if x is not None else 1
    if spec.d_bar == 0.0:
        return np.zeros(n)
    if spec.waveform == "rotating":
        v1, v2, phase0 = _seeded_frame(spec.seed, n)
        if n == 1:
            return spec.d_bar * v1
        ang = spec.omega * t + phase0
        return spec.d_bar * (np.cos(ang) * v1 + np.sin(ang) * v2)
    if spec.waveform == "clipped":
        amps, freqs, phases = _clipped_coeffs(spec.seed, n)
        raw = (amps * np.sin(freqs * t + phases)).sum(axis=1)
        nrm = np.linalg.norm(raw)
        if nrm > spec.d_bar:
            raw = raw * (spec.d_bar / nrm)
        return raw
    raise WrongKind(f"unknown waveform {spec.waveform!r}")
