"""Convex synthesis of contraction metrics along trajectories or state regions.

Per sample the program minimizes c1*chi + c2*nu (nu appears squared for
stochastic estimation) over the scaled inverse metric Wbar = nu * M^-1 subject
to I <= Wbar <= chi*I and the contraction LMI for the closed loop. The metric
is recovered as M = nu * Wbar^-1, so m_lower = nu/chi, m_upper = nu, and the
condition-number bound chi = m_upper/m_lower holds by construction.

Two solve modes:
  sweep  - one program per trajectory sample; the time derivative of Wbar is a
           backward difference with the previous sample frozen (zero at the
           first sample or with stationary=True). After a first optimizing
           pass, the scalar bounds (chi, nu) are frozen at their sweep maxima
           and every sample is re-centered, which keeps the recovered metric
           smooth in time so the finite-difference contraction margins
           certify.
  shared - one program whose contraction constraint is enforced at every
           supplied (A, B) or (A, C) atom simultaneously with a single
           stationary Wbar; with atoms at the vertices of a box in which the
           factorization matrices are affine, the certificate holds on the
           whole region.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import jacobian_h
from .lmisolver import LmiBlock, SdpProblem, solve_sdp
from .numkernel import chol_upper, spd_inverse, sym_eig, symmetrize
from .sdc import SdcConfig, sdc_matrix


class Infeasible(Exception):
    def __init__(self, sample_index, detail=""):
        self.sample_index = sample_index
        super().__init__(f"infeasible at sample {sample_index} {detail}")


class NoFeasibleAlpha(Exception):
    pass


@dataclass
class MetricSample:
    t: float
    x: np.ndarray
    x_d: np.ndarray
    u_d: np.ndarray
    wbar: np.ndarray
    nu: float
    chi: float
    alpha: float

    @property
    def m(self):
        return symmetrize(self.nu * spd_inverse(self.wbar))

    @property
    def m_lower(self):
        return self.nu / self.chi

    @property
    def m_upper(self):
        return self.nu


class MetricField:
    """Time-ordered metric samples with piecewise-linear interpolation in the
    Wbar entries (and nu), plus serialization used by the trainer and CLI."""

    def __init__(self, samples, alpha, beta=0.0, meta=None):
        self.samples = list(samples)
        if any(b.t <= a.t for a, b in zip(self.samples, self.samples[1:])):
            raise ValueError("samples must be strictly increasing in t")
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.meta = dict(meta or {})

    def __len__(self):
        return len(self.samples)

    @property
    def dt(self):
        if len(self.samples) < 2:
            return 0.0
        return self.samples[1].t - self.samples[0].t

    @property
    def m_lower(self):
        return min(s.m_lower for s in self.samples)

    @property
    def m_upper(self):
        return max(s.m_upper for s in self.samples)

    @property
    def chi(self):
        return max(s.chi for s in self.samples)

    @property
    def nu(self):
        return max(s.nu for s in self.samples)

    def wbar_nu_at(self, t):
        ss = self.samples
        if t <= ss[0].t or len(ss) == 1:
            return ss[0].wbar, ss[0].nu
        if t >= ss[-1].t:
            return ss[-1].wbar, ss[-1].nu
        ts = np.array([s.t for s in ss])
        j = int(np.searchsorted(ts, t, side="right")) - 1
        j = min(j, len(ss) - 2)
        lam = (t - ss[j].t) / (ss[j + 1].t - ss[j].t)
        wbar = (1.0 - lam) * ss[j].wbar + lam * ss[j + 1].wbar
        nu = (1.0 - lam) * ss[j].nu + lam * ss[j + 1].nu
        return wbar, nu

    def metric_at_time(self, t):
        wbar, nu = self.wbar_nu_at(t)
        return symmetrize(nu * spd_inverse(wbar))

    def to_json(self, path=None):
        doc = {
            "alpha": self.alpha,
            "beta": self.beta,
            "meta": {k: _jsonable(v) for k, v in self.meta.items()},
            "samples": [
                {
                    "t": s.t,
                    "x": s.x.tolist(),
                    "x_d": s.x_d.tolist(),
                    "u_d": s.u_d.tolist(),
                    "wbar_upper": _upper_entries(s.wbar).tolist(),
                    "nu": s.nu,
                    "chi": s.chi,
                    "alpha": s.alpha,
                }
                for s in self.samples
            ],
        }
        if path is not None:
            with open(path, "w") as f:
                json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        return doc

    @classmethod
    def from_json(cls, doc_or_path):
        if isinstance(doc_or_path, (str, bytes)):
            with open(doc_or_path) as f:
                doc = json.load(f)
        else:
            doc = doc_or_path
        samples = []
        for s in doc["samples"]:
            n = len(s["x"])
            samples.append(MetricSample(
                t=float(s["t"]), x=np.array(s["x"]), x_d=np.array(s["x_d"]),
                u_d=np.array(s["u_d"]),
                wbar=_from_upper(np.array(s["wbar_upper"]), n),
                nu=float(s["nu"]), chi=float(s["chi"]), alpha=float(s["alpha"]),
            ))
        return cls(samples, doc["alpha"], doc.get("beta", 0.0), doc.get("meta"))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def _upper_entries(mat):
    n = mat.shape[0]
    return mat[np.triu_indices(n)]


def _from_upper(entries, n):
    mat = np.zeros((n, n))
    mat[np.triu_indices(n)] = entries
    return symmetrize(mat + np.triu(mat, 1).T)


def _sym_basis(n):
    """Basis E_k of symmetric n-by-n matrices matching _upper_entries order."""
    basis = []
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            if i == j:
                e[i, i] = 1.0
            else:
                e[i, j] = e[j, i] = 1.0
            basis.append(e)
    return basis


def _sym2(x):
    return x + x.T


@dataclass
class SynthOptions:
    """Knobs shared by both synthesis directions."""

    stationary: bool = False
    shared: bool = False
    sdc_cfg: SdcConfig = field(default_factory=SdcConfig)
    chi_max: float = 1e6
    nu_min: float = 1e-6
    nu_max: float = 1e7
    trust_factor: float = 1.5
    scalar_slack: float = 1.05
    margin_tol_factor: float = 1e-6
    refine_passes: int = 3
    dump_cb: object = None  # callable (index, SdpProblem) for --dump-sdp
    rank_warnings: bool = True


def _ctrb_rank(a, b):
    n = a.shape[0]
    blocks = [b]
    for _ in range(n - 1):
        blocks.append(a @ blocks[-1])
    return np.linalg.matrix_rank(np.hstack(blocks), tol=1e-9)


class _Program:
    """Assembles one per-sample LMI program over (w entries [, chi][, nu])."""

    def __init__(self, n, chi_fixed=None, nu_fixed=None):
        self.n = n
        self.basis = _sym_basis(n)
        self.nw = len(self.basis)
        self.chi_fixed = chi_fixed
        self.nu_fixed = nu_fixed
        self.d = self.nw + (chi_fixed is None) + (nu_fixed is None)
        self.i_chi = self.nw if chi_fixed is None else None
        self.i_nu = self.d - 1 if nu_fixed is None else None
        self.blocks = []

    def _zeros_list(self, dim):
        return [np.zeros((dim, dim)) for _ in range(self.d)]

    def add_bounds(self):
        n = self.n
        fs = self._zeros_list(n)
        for k, e in enumerate(self.basis):
            fs[k] = e
        self.blocks.append(LmiBlock(-np.eye(n), fs))
        fs = self._zeros_list(n)
        for k, e in enumerate(self.basis):
            fs[k] = -e
        f0 = np.zeros((n, n))
        if self.i_chi is not None:
            fs[self.i_chi] = np.eye(n)
        else:
            f0 = self.chi_fixed * np.eye(n)
        self.blocks.append(LmiBlock(f0, fs))

    def add_control_contraction(self, a, brb, alpha, beta, wprev, dt_inv,
                                tighten=0.0):
        """(dWbar) - 2 sym(A Wbar) + 2 nu BRB - 2 alpha Wbar (- Schur) >= 0."""
        n = self.n
        if beta == 0.0:
            f0 = -dt_inv * wprev if wprev is not None else np.zeros((n, n))
            fs = self._zeros_list(n)
            for k, e in enumerate(self.basis):
                fk = -_sym2(a @ e) - 2.0 * alpha * e
                if wprev is not None:
                    fk = fk + dt_inv * e
                fs[k] = fk
            if self.i_nu is not None:
                fs[self.i_nu] = 2.0 * brb
            else:
                f0 = f0 + 2.0 * self.nu_fixed * brb
        else:
            f0 = np.zeros((2 * n, 2 * n))
            if wprev is not None:
                f0[:n, :n] = -dt_inv * wprev
            fs = self._zeros_list(2 * n)
            for k, e in enumerate(self.basis):
                fk = np.zeros((2 * n, 2 * n))
                top = -_sym2(a @ e) - 2.0 * alpha * e
                if wprev is not None:
                    top = top + dt_inv * e
                fk[:n, :n] = top
                fk[:n, n:] = -e
                fk[n:, :n] = -e
                fs[k] = fk
            if self.i_nu is not None:
                fnu = np.zeros((2 * n, 2 * n))
                fnu[:n, :n] = 2.0 * brb
                fnu[n:, n:] = np.eye(n) / beta
                fs[self.i_nu] = fnu
            else:
                f0[:n, :n] += 2.0 * self.nu_fixed * brb
                f0[n:, n:] = (self.nu_fixed / beta) * np.eye(n)
        if tighten:
            f0 = f0 - tighten * np.eye(f0.shape[0])
        self.blocks.append(LmiBlock(f0, fs))

    def add_estim_contraction(self, a, crc, alpha, beta_const, wprev, dt_inv,
                              tighten=0.0):
        """-(dWbar) - 2 sym(Wbar A) + 2 nu C'R^-1C - 2 alpha Wbar
        - beta_const I >= 0 where beta_const folds the nu*beta term."""
        n = self.n
        f0 = dt_inv * wprev if wprev is not None else np.zeros((n, n))
        f0 = f0 - beta_const * np.eye(n)
        fs = self._zeros_list(n)
        for k, e in enumerate(self.basis):
            fk = -_sym2(e @ a) - 2.0 * alpha * e
            if wprev is not None:
                fk = fk - dt_inv * e
            fs[k] = fk
        if self.i_nu is not None:
            fs[self.i_nu] = 2.0 * crc
        else:
            f0 = f0 + 2.0 * self.nu_fixed * crc
        if tighten:
            f0 = f0 - tighten * np.eye(n)
        self.blocks.append(LmiBlock(f0, fs))

    def solve(self, c1, c2, opts, z0=None, trust=None):
        c = np.zeros(self.d)
        box = [(-2.0 * opts.chi_max, 2.0 * opts.chi_max)] * self.d
        if self.i_chi is not None:
            c[self.i_chi] = c1
            box[self.i_chi] = (1.0, opts.chi_max)
        if self.i_nu is not None:
            c[self.i_nu] = c2
            box[self.i_nu] = (opts.nu_min, opts.nu_max)
        if trust is not None:
            chi_prev, nu_prev = trust
            rho = opts.trust_factor
            if self.i_chi is not None:
                box[self.i_chi] = (max(1.0, chi_prev / rho),
                                   min(opts.chi_max, chi_prev * rho))
            if self.i_nu is not None:
                box[self.i_nu] = (max(opts.nu_min, nu_prev / rho),
                                  min(opts.nu_max, nu_prev * rho))
        problem = SdpProblem(c=c, blocks=self.blocks, box=box)
        sol = solve_sdp(problem, z0=z0)
        if trust is not None and sol.status != "optimal":
            # the trust region may cut the feasible set; retry with full boxes
            return self.solve(c1, c2, opts, z0=z0, trust=None)
        return problem, sol

    def unpack(self, sol):
        wbar = sum(sol.z[k] * self.basis[k] for k in range(self.nw))
        chi = self.chi_fixed if self.i_chi is None else sol.z[self.i_chi]
        nu = self.nu_fixed if self.i_nu is None else sol.z[self.i_nu]
        return symmetrize(wbar), float(chi), float(nu)


def _build_control_program(a, brb, alpha, beta, wprev, dt_inv, fixed=None,
                           tighten=0.0):
    n = a.shape[0]
    prog = _Program(n, *(fixed or (None, None)))
    prog.add_bounds()
    prog.add_control_contraction(a, brb, alpha, beta, wprev, dt_inv, tighten)
    return prog


def _control_block_value(a, brb, alpha, beta, wbar, nu):
    """Value of the stationary control contraction block at a solution."""
    n = a.shape[0]
    top = -_sym2(a @ wbar) - 2.0 * alpha * wbar + 2.0 * nu * brb
    if beta == 0.0:
        return top
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = top
    out[:n, n:] = -wbar
    out[n:, :n] = -wbar
    out[n:, n:] = (nu / beta) * np.eye(n)
    return out


def _estim_block_value(a, crc, alpha, beta_const, wbar, nu):
    return -_sym2(wbar @ a) - 2.0 * alpha * wbar + 2.0 * nu * crc \
        - beta_const * np.eye(a.shape[0])


def _solve_shared(n, n_atoms, build_prog, block_value, c1, c2, opts,
                  max_rounds=20, batch=8):
    """Shared-metric solve by constraint generation.

    Starts from a spread of atoms, solves, then adds the worst violated atoms
    until every block is satisfied at the solution. Returns
    (wbar, chi, nu, min_slack, problem).
    """
    if n_atoms <= batch:
        active = list(range(n_atoms))
    else:
        active = list(np.linspace(0, n_atoms - 1, batch).astype(int))
    z0 = None
    for _ in range(max_rounds):
        prog = build_prog(active)
        problem, sol = prog.solve(c1, c2, opts, z0=z0)
        if sol.status != "optimal":
            raise Infeasible(0, f"(shared mode, status {sol.status}, "
                             f"{len(active)} active atoms)")
        wbar, chi, nu = prog.unpack(sol)
        slacks = np.empty(n_atoms)
        for i in range(n_atoms):
            w, _ = sym_eig(symmetrize(block_value(i, wbar, nu)))
            slacks[i] = w[0]
        scale = 1.0 + abs(nu)
        violated = [i for i in np.argsort(slacks)
                    if slacks[i] < -1e-9 * scale and i not in active]
        if not violated:
            return wbar, chi, nu, float(slacks.min()), problem
        active.extend(violated[:batch])
        z0 = None  # the active set changed; restart the barrier cleanly
    raise Infeasible(0, "(shared mode: constraint generation did not settle)")


def _build_estim_program(a, crc, alpha, beta_const, wprev, dt_inv, fixed=None,
                         tighten=0.0):
    n = a.shape[0]
    prog = _Program(n, *(fixed or (None, None)))
    prog.add_bounds()
    prog.add_estim_contraction(a, crc, alpha, beta_const, wprev, dt_inv, tighten)
    return prog


# ----------------------------------------------------------------------------
# control synthesis
# ----------------------------------------------------------------------------

def synth_control_metric(model, trajectory, alpha, R, costs=(1.0, 0.0),
                         stochastic=None, opts=None, atoms=None):
    """Synthesize the tracking-control metric along a sampled trajectory.

    Parameters
    ----------
    model : SystemModel
    trajectory : list of (t, x, x_d, u_d)
    alpha : contraction rate
    R : input weight (SPD matrix or positive scalar)
    costs : (c1, c2) weights on chi and nu
    stochastic : optional dict {g_bar, L_m, alpha_G} enabling the mean-square
        (Schur) constraint
    opts : SynthOptions
    atoms : optional list of (A, B) pairs; with opts.shared the contraction
        constraint is enforced at every atom with one stationary Wbar

    Returns
    -------
    MetricField with per-sample contraction margins in meta["margins"] and a
    meta["certified"] flag (margins below margin_tol_factor * nu everywhere).
    """
    opts = opts or SynthOptions()
    c1, c2 = costs
    n = model.n
    rmat = np.eye(model.m) * R if np.isscalar(R) else np.asarray(R, dtype=float)
    rinv = spd_inverse(rmat) if model.m else np.zeros((0, 0))
    beta = 0.0
    if stochastic is not None:
        beta = stochastic["L_m"] * stochastic["g_bar"] ** 2 \
            * (stochastic["alpha_G"] + 0.5)

    traj = [(float(t), np.asarray(x, float), np.asarray(xd, float),
             np.asarray(ud, float)) for t, x, xd, ud in trajectory]
    dt = traj[1][0] - traj[0][0] if len(traj) > 1 else 0.0

    def sample_ab(t, x, x_d, u_d):
        a = sdc_matrix(model, x, x_d, u_d, t, opts.sdc_cfg)
        return a, model.B(x, t)

    if atoms is None:
        atoms_eval = [sample_ab(*s) for s in traj]
    else:
        atoms_eval = list(atoms)
    if opts.rank_warnings:
        a0, b0 = atoms_eval[0]
        if b0.size and _ctrb_rank(a0, b0) < n:
            warnings.warn("pair (A, B) not controllable at first atom")
    brbs = [b @ rinv @ b.T for _, b in atoms_eval]

    if opts.shared:
        def build_prog(active):
            prog = _Program(n)
            prog.add_bounds()
            for i in active:
                prog.add_control_contraction(atoms_eval[i][0], brbs[i],
                                             alpha, beta, None, 0.0)
            return prog

        def block_value(i, wbar, nu):
            return _control_block_value(atoms_eval[i][0], brbs[i], alpha,
                                        beta, wbar, nu)

        wbar, chi, nu, min_slack, problem = _solve_shared(
            n, len(atoms_eval), build_prog, block_value, c1, c2, opts)
        if opts.dump_cb is not None:
            opts.dump_cb(0, problem)
        samples = [MetricSample(t, x, xd, ud, wbar, nu, chi, alpha)
                   for t, x, xd, ud in traj]
        fld = MetricField(samples, alpha, beta,
                          meta={"task": "control", "R": rmat,
                                "min_slack": min_slack, "shared": True,
                                "stationary": True, "costs": list(costs)})
        _verify_control_margins(fld, model, rinv, opts, atoms_eval)
        return fld

    # pass 1: optimizing sweep with temporal trust coupling on (chi, nu)
    dt_inv = 0.0 if (opts.stationary or dt == 0.0) else 1.0 / dt
    chi_nu = []
    pass1 = []
    wprev = None
    z0 = None
    trust = None
    for k, ((t, x, xd, ud), (a, _), brb) in enumerate(
            zip(traj, atoms_eval, brbs)):
        wp = None if (k == 0 or dt_inv == 0.0) else wprev
        prog = _build_control_program(a, brb, alpha, beta, wp, dt_inv)
        problem, sol = prog.solve(c1, c2, opts, z0=z0, trust=trust)
        if sol.status != "optimal":
            raise Infeasible(k, f"(status {sol.status})")
        wbar, chi, nu = prog.unpack(sol)
        chi_nu.append((chi, nu))
        pass1.append(MetricSample(t, x, xd, ud, wbar, nu, chi, alpha))
        wprev = wbar
        z0 = sol.z
        trust = (chi, nu) if dt_inv != 0.0 else None
    if dt_inv == 0.0:
        # stationary or single-sample: the optimizing pass is the field
        if opts.dump_cb is not None:
            opts.dump_cb(0, problem)
        fld = MetricField(pass1, alpha, beta,
                          meta={"task": "control", "R": rmat,
                                "min_slack": sol.min_slack, "shared": False,
                                "stationary": True, "costs": list(costs)})
        _verify_control_margins(fld, model, rinv, opts, atoms_eval)
        return fld
    chi_star = max(c for c, _ in chi_nu) * opts.scalar_slack
    nu_star = max(v for _, v in chi_nu) * opts.scalar_slack

    # pass 2: freeze the scalars and re-center every sample against the
    # stationary (no derivative credit) constraint; the analytic centers then
    # vary smoothly with the data, and the per-sample tightening absorbs the
    # finite-difference term that the margin check measures
    tighten = [0.0] * len(traj)
    for attempt in range(max(1, opts.refine_passes)):
        samples = []
        z0 = None
        min_slack = np.inf
        for k, ((t, x, xd, ud), (a, _), brb) in enumerate(
                zip(traj, atoms_eval, brbs)):
            prog = _build_control_program(a, brb, alpha, beta, None, 0.0,
                                          fixed=(chi_star, nu_star),
                                          tighten=tighten[k])
            problem, sol = prog.solve(0.0, 0.0, opts, z0=z0)
            if opts.dump_cb is not None:
                opts.dump_cb(k, problem)
            if sol.status != "optimal":
                raise Infeasible(k, f"(status {sol.status})")
            min_slack = min(min_slack, sol.min_slack)
            wbar, chi, nu = prog.unpack(sol)
            samples.append(MetricSample(t, x, xd, ud, wbar, nu, chi, alpha))
            z0 = sol.z
        fld = MetricField(samples, alpha, beta,
                          meta={"task": "control", "R": rmat,
                                "min_slack": min_slack, "shared": False,
                                "costs": list(costs)})
        margins = _verify_control_margins(fld, model, rinv, opts, atoms_eval)
        bad = [k for k, mg in enumerate(margins)
               if mg > opts.margin_tol_factor * fld.samples[k].nu]
        if not bad:
            return fld
        for k in bad:
            nu_k = fld.samples[k].nu
            tighten[k] += 1.2 * margins[k] + opts.margin_tol_factor * nu_k
    warnings.warn(f"contraction margins above tolerance at samples {bad} "
                  "after refinement")
    return fld


def _verify_control_margins(fld, model, rinv, opts, atoms_eval):
    margins = [contraction_margin(fld, model, k, rinv=rinv,
                                  a_matrix=atoms_eval[k][0],
                                  b_matrix=atoms_eval[k][1])
               for k in range(len(fld))]
    fld.meta["margins"] = margins
    fld.meta["certified"] = all(
        mg <= opts.margin_tol_factor * s.nu
        for mg, s in zip(margins, fld.samples))
    return margins


def contraction_margin(fld, model, k, alpha=None, beta=None, rinv=None,
                       sdc_cfg=None, a_matrix=None, b_matrix=None):
    """Largest eigenvalue of Mdot + 2 sym(M A) - 2 M B R^-1 B' M + 2 alpha M
    + beta I at sample k; non-positive certifies contraction there.

    Mdot is the backward difference of the recovered metric across the field
    samples (zero at the first sample or for stationary fields).
    """
    s = fld.samples[k]
    alpha = fld.alpha if alpha is None else alpha
    beta = fld.beta if beta is None else beta
    if rinv is None:
        rmat = fld.meta.get("R")
        rinv = spd_inverse(rmat) if rmat is not None and np.size(rmat) \
            else np.zeros((0, 0))
    m = s.m
    if k == 0 or len(fld) == 1 or fld.meta.get("stationary"):
        # a stationary field asserts a time-invariant metric per sample, so
        # the quasi-static margin drops the finite difference
        mdot = np.zeros_like(m)
    else:
        dt = s.t - fld.samples[k - 1].t
        mdot = (m - fld.samples[k - 1].m) / dt
    a = a_matrix if a_matrix is not None else sdc_matrix(
        model, s.x, s.x_d, s.u_d, s.t, sdc_cfg or SdcConfig())
    b = b_matrix if b_matrix is not None else model.B(s.x, s.t)
    lhs = mdot + _sym2(m @ a) + 2.0 * alpha * m + beta * np.eye(m.shape[0])
    if b.size:
        lhs = lhs - 2.0 * m @ b @ rinv @ b.T @ m
    w, _ = sym_eig(symmetrize(lhs))
    return float(w[-1])


# ----------------------------------------------------------------------------
# estimation synthesis
# ----------------------------------------------------------------------------

def synth_estim_metric(model, trajectory, alpha, R, costs=(1.0, 0.0),
                       bounds=None, stochastic=None, opts=None, atoms=None,
                       nu_fixed=None):
    """Synthesize the estimation metric along estimator-state samples.

    trajectory : list of (t, xhat); the factorization matrix A is evaluated
        at xhat against the origin (or pass explicit (A, C) atoms)
    R : measurement weight (SPD or scalar)
    bounds : optional dict with rho_bar (||R^-1|| bound) and c_bar (||C||
        bound), recorded for the error-tube constructors
    stochastic : optional dict {g0_bar, g1_bar, L_m, alpha_G}; the nu^3
        coupling is handled by an outer golden-section search on nu (each
        inner problem stays affine)

    Returns MetricField whose metric M = nu * Wbar^-1 feeds the output
    injection L = M Cbar' R^-1.
    """
    opts = opts or SynthOptions()
    if model.h is None:
        raise ValueError("estimation synthesis needs a measurement map h")
    c1, c2 = costs
    n = model.n
    rmat = np.eye(model.p) * R if np.isscalar(R) else np.asarray(R, dtype=float)
    rinv = spd_inverse(rmat)

    traj = [(float(t), np.asarray(x, float)) for t, x in trajectory]
    dt = traj[1][0] - traj[0][0] if len(traj) > 1 else 0.0
    dt_inv = 0.0 if (opts.stationary or opts.shared or dt == 0.0) else 1.0 / dt

    fp_cfg = SdcConfig(mode="fixed_point", fixed_state=np.zeros(n),
                       fixed_input=None,
                       quadrature_points=opts.sdc_cfg.quadrature_points)

    def sample_ac(t, xh):
        return sdc_matrix(model, xh, cfg=fp_cfg, t=t), jacobian_h(model, xh, t)

    atoms_eval = [sample_ac(t, xh) for t, xh in traj] if atoms is None \
        else list(atoms)
    if opts.rank_warnings:
        a0, c0 = atoms_eval[0]
        if _ctrb_rank(a0.T, c0.T) < n:
            warnings.warn("pair (A, C) not observable at first atom")
    crcs = [cm.T @ rinv @ cm for _, cm in atoms_eval]

    def beta_terms(nu_val):
        if stochastic is None:
            return 0.0, 0.0
        lm = stochastic["L_m"]
        ag = stochastic["alpha_G"]
        a_e0 = lm * stochastic["g0_bar"] ** 2 * (ag + 0.5) / 2.0
        a_e1 = lm * (bounds["rho_bar"] * bounds["c_bar"]
                     * stochastic["g1_bar"]) ** 2 * (ag + 0.5) / 2.0
        # constraint carries -nu*beta*I with beta = a_e0 + nu^2 a_e1
        return a_e0 * nu_val + a_e1 * nu_val ** 3, a_e0 + a_e1 * nu_val ** 2

    def solve_at_nu(nu_val, want_field=False):
        with_nu = nu_val is None
        beta_c, alpha_s = beta_terms(nu_val) if not with_nu else (0.0, 0.0)
        fixed = None if with_nu else (None, nu_val)
        if opts.shared:
            def build_prog(active):
                prog = _Program(n, None, None if with_nu else nu_val)
                prog.add_bounds()
                for i in active:
                    prog.add_estim_contraction(atoms_eval[i][0], crcs[i],
                                               alpha, beta_c, None, 0.0)
                return prog

            def block_value(i, wbar, nu):
                return _estim_block_value(atoms_eval[i][0], crcs[i], alpha,
                                          beta_c, wbar, nu)

            wbar, chi, nu, min_slack, problem = _solve_shared(
                n, len(atoms_eval), build_prog, block_value, c1,
                c2 if with_nu else 0.0, opts)
            if opts.dump_cb is not None:
                opts.dump_cb(0, problem)
            if not want_field:
                return c1 * chi + c2 * (nu if stochastic is None else nu ** 2)
            samples = [MetricSample(t, xh, xh, np.zeros(model.m), wbar, nu,
                                    chi, alpha) for t, xh in traj]
            fld = MetricField(samples, alpha, alpha_s,
                              meta=_estim_meta(rmat, bounds, costs, True))
            fld.meta.update(min_slack=min_slack, stationary=True)
            return fld
        # optimizing sweep, then a frozen-scalar recentering pass
        chi_nu = []
        pass1 = []
        wprev = None
        z0 = None
        trust = None
        for k, ((t, xh), (a, _), crc) in enumerate(zip(traj, atoms_eval, crcs)):
            wp = None if (k == 0 or dt_inv == 0.0) else wprev
            prog = _build_estim_program(a, crc, alpha, beta_c, wp, dt_inv,
                                        fixed=fixed)
            problem, sol = prog.solve(c1, c2 if with_nu else 0.0, opts,
                                      z0=z0, trust=trust)
            if sol.status != "optimal":
                raise Infeasible(k, f"(status {sol.status})")
            wbar, chi, nu = prog.unpack(sol)
            chi_nu.append((chi, nu))
            pass1.append(MetricSample(t, xh, xh, np.zeros(model.m), wbar, nu,
                                      chi, alpha))
            wprev = wbar
            z0 = sol.z
            trust = (chi, nu) if (dt_inv != 0.0 and with_nu) else None
        obj = max(c1 * c + c2 * (v if stochastic is None else v ** 2)
                  for c, v in chi_nu)
        if not want_field:
            return obj
        if dt_inv == 0.0:
            if opts.dump_cb is not None:
                opts.dump_cb(0, problem)
            fld = MetricField(pass1, alpha, alpha_s,
                              meta=_estim_meta(rmat, bounds, costs, False))
            fld.meta.update(min_slack=sol.min_slack, stationary=True)
            return fld
        chi_star = max(c for c, _ in chi_nu) * opts.scalar_slack
        nu_star = (max(v for _, v in chi_nu) * opts.scalar_slack) if with_nu \
            else nu_val
        samples = []
        z0 = None
        min_slack = np.inf
        for k, ((t, xh), (a, _), crc) in enumerate(zip(traj, atoms_eval, crcs)):
            prog = _build_estim_program(a, crc, alpha, beta_c, None, 0.0,
                                        fixed=(chi_star, nu_star))
            problem, sol = prog.solve(0.0, 0.0, opts, z0=z0)
            if opts.dump_cb is not None:
                opts.dump_cb(k, problem)
            if sol.status != "optimal":
                raise Infeasible(k, f"(status {sol.status})")
            min_slack = min(min_slack, sol.min_slack)
            wbar, chi, nu = prog.unpack(sol)
            samples.append(MetricSample(t, xh, xh, np.zeros(model.m), wbar,
                                        nu, chi, alpha))
            z0 = sol.z
        fld = MetricField(samples, alpha, alpha_s,
                          meta=_estim_meta(rmat, bounds, costs, False))
        fld.meta["min_slack"] = min_slack
        return fld

    if stochastic is None:
        return solve_at_nu(None, want_field=True)
    if nu_fixed is not None:
        return solve_at_nu(nu_fixed, want_field=True)
    nu_best = _golden_log(lambda v: _safe_obj(solve_at_nu, v),
                          opts.nu_min * 10.0, opts.nu_max / 10.0)
    if nu_best is None:
        raise NoFeasibleAlpha("no feasible nu for stochastic estimation")
    return solve_at_nu(nu_best, want_field=True)


def _estim_meta(rmat, bounds, costs, shared):
    meta = {"task": "estimation", "R": rmat, "shared": shared,
            "costs": list(costs)}
    if bounds:
        meta.update(bounds)
    return meta


def _safe_obj(fn, v):
    try:
        return fn(v)
    except Infeasible:
        return None


def _golden_log(fn, lo, hi, iters=20):
    """Golden-section minimization of fn over log-spaced nu; None if every
    probe is infeasible."""
    gl, gh = np.log(lo), np.log(hi)
    grid = np.linspace(gl, gh, 17)
    vals = [(g, fn(np.exp(g))) for g in grid]
    feas = [(g, v) for g, v in vals if v is not None]
    if not feas:
        return None
    g_best = min(feas, key=lambda p: p[1])[0]
    span = (gh - gl) / 16.0
    a, b = g_best - span, g_best + span
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = fn(np.exp(c)), fn(np.exp(d))
    for _ in range(iters):
        fc_val = np.inf if fc is None else fc
        fd_val = np.inf if fd is None else fd
        if fc_val <= fd_val:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fn(np.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fn(np.exp(d))
    return float(np.exp((a + b) / 2.0))


def alpha_line_search(objective, grid):
    """Best contraction rate over a grid.

    `objective` maps alpha to a scalar cost, returning None (or raising
    Infeasible) for infeasible rates. Raises NoFeasibleAlpha when the whole
    grid fails.
    """
    best = None
    for a in grid:
        try:
            val = objective(a)
        except Infeasible:
            val = None
        if val is None:
            continue
        if best is None or val < best[1]:
            best = (a, val)
    if best is None:
        raise NoFeasibleAlpha(f"no feasible rate in grid {list(grid)}")
    return best[0]


# ----------------------------------------------------------------------------
# bounded-real / KYP checks
# ----------------------------------------------------------------------------

def bounded_real_check(a_cl, m, alpha, beta, mdot=None, tol=1e-9):
    """Bounded-real LMI for the closed loop in the metric m.

    Uses the realization A = a_cl, B = m^-1, C'C = 2 alpha m, D = 0, P = m,
    gain 1/sqrt(beta). Returns True/False, or None when beta <= 0 (the gain
    is undefined there).
    """
    if beta <= 0.0:
        return None
    m = symmetrize(m)
    n = m.shape[0]
    top = _sym2(m @ a_cl) + 2.0 * alpha * m
    if mdot is not None:
        top = top + mdot
    lmi = np.block([[top, np.eye(n)], [np.eye(n), -np.eye(n) / beta]])
    w, _ = sym_eig(symmetrize(lmi))
    scale = 1.0 + abs(w).max()
    return bool(w[-1] <= tol * scale)


def kyp_check(a_cl, m, alpha, beta, tol=1e-9):
    """Output-strict-passivity LMI with Q = P/gamma = sqrt(beta) m.

    True implies the bounded-real LMI holds with P = gamma Q (one-way)."""
    if beta <= 0.0:
        return None
    m = symmetrize(m)
    n = m.shape[0]
    gamma = 1.0 / np.sqrt(beta)
    q = m / gamma
    theta = chol_upper(m)
    cmat = np.sqrt(2.0 * alpha) * theta
    top = _sym2(q @ a_cl) + (2.0 / gamma) * cmat.T @ cmat
    off = q @ spd_inverse(m) - cmat.T
    lmi = np.block([[top, off], [off.T, np.zeros((n, n))]])
    w, _ = sym_eig(symmetrize(lmi))
    scale = 1.0 + abs(w).max()
    return bool(w[-1] <= tol * scale)


def alpha_cond_feasible(a, b_or_none, rinv, wbar, nu, alpha, beta, tol=1e-9):
    """Directly evaluate the Schur-form mean-square contraction LMI at a
    given (Wbar, nu); used as the independent cross-check against the
    bounded-real test."""
    n = a.shape[0]
    top = _sym2(a @ wbar) + 2.0 * alpha * wbar
    if b_or_none is not None and b_or_none.size:
        top = top - 2.0 * nu * b_or_none @ rinv @ b_or_none.T
    lmi = np.block([[top, wbar], [wbar, -(nu / beta) * np.eye(n)]])
    w, _ = sym_eig(symmetrize(lmi))
    scale = 1.0 + abs(w).max()
    return bool(w[-1] <= tol * scale)


def estimate_metric_lipschitz(fld):
    """Empirical bound on the metric's state-derivative variation: the max
    finite-difference slope of the recovered metric entries across samples."""
    best = 0.0
    for a, b in zip(fld.samples, fld.samples[1:]):
        dx = np.linalg.norm(b.x - a.x)
        if dx <= 1e-12:
            continue
        best = max(best, float(np.max(np.abs(b.m - a.m))) / dx)
    return best
