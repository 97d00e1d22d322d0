"""Scenario-driven command line: synth / train / verify / adapt.

Scenarios are strict-schema JSON (unknown keys are errors). Every command
writes a manifest.json with the fully resolved configuration and sha256
hashes of its outputs; re-running a command with the manifest as its scenario
reproduces the outputs bit for bit.

Exit codes: 0 ok, 1 schema error, 2 infeasible synthesis, 3 diverged
training, 4 missing artifact, 5 bound violated.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import bounds as bnd
from . import cvstem, metricnet
from .adaptive import (QuadraticPotential, SmoothedL1Potential,
                       bregman_adaptation, matched_adaptation, project,
                       sigma_mod_adaptation, slotine_li)
from .controllers import MetricSource, cvstem_feedback, estimator_gain
from .dynamics import DisturbanceSpec, make_benchmark, sample_disturbance
from .sim import Trace, rk4_run, rollout


class SchemaError(Exception):
    pass


_SCHEMA = {
    "name": None,
    "benchmark": {"id": None, "overrides": "dict"},
    "target": {"kind": None, "radius": None, "period": None, "center": None,
               "amplitude": None, "omega": None, "setpoint": None},
    "synthesis": {"task": None, "alpha": None, "alpha_grid": None, "c1": None,
                  "c2": None, "R": None, "T": None, "dt": None,
                  "stationary": None, "shared": None, "region_samples": None,
                  "stochastic": "dict", "bounds": "dict",
                  "quadrature_points": None},
    "net": {"widths": None, "inputs": None, "c_nn": None, "epochs": None,
            "lr": None, "batch": None, "seed": None, "momentum": None,
            "val_fraction": None, "eps_budget": None},
    "disturbance": {"kind": None, "d_bar": None, "g_bar": None,
                    "waveform": None, "seed": None, "omega": None,
                    "d0_bar": None, "d1_bar": None, "seed_measurement": None},
    "adaptation": {"law": None, "gamma": None, "sigma": None,
                   "theta_true": None, "theta0": None, "T": None, "dt": None,
                   "k_gain": None, "lambda_gain": None, "theta_max": None,
                   "eps_theta": None, "eps_psi": None},
    "sim": {"T": None, "dt": None, "seeds": None, "x0": None, "xhat0": None,
            "x0_box": None, "v0_offset": None},
    "bounds": {"kinds": None, "grace": None, "eps_l_override": None},
    "outputs": None,
}


def validate_scenario(doc):
    """Walk the strict schema; unknown keys raise SchemaError naming them."""
    if not isinstance(doc, dict):
        raise SchemaError("scenario must be a JSON object")
    for key, val in doc.items():
        if key not in _SCHEMA:
            raise SchemaError(f"unknown scenario key {key!r}")
        sub = _SCHEMA[key]
        if isinstance(sub, dict):
            if not isinstance(val, dict):
                raise SchemaError(f"scenario key {key!r} must be an object")
            for k2 in val:
                if k2 not in sub:
                    raise SchemaError(f"unknown key {key}.{k2!r}")
    if "benchmark" not in doc or "id" not in doc["benchmark"]:
        raise SchemaError("scenario needs benchmark.id")
    return doc


def _json_bytes(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(outdir, command, scenario, files):
    manifest = {
        "command": command,
        "scenario": scenario,
        "artifacts": {os.path.basename(p): _sha256(p) for p in files},
    }
    path = os.path.join(outdir, "manifest.json")
    with open(path, "wb") as f:
        f.write(_json_bytes(manifest))
    return path


def load_scenario(path):
    with open(path) as f:
        doc = json.load(f)
    if "scenario" in doc and "command" in doc:
        doc = doc["scenario"]  # manifest re-run
    return validate_scenario(doc)


def _fmt_rows(rows):
    return "\n".join(",".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                              for v in row) for row in rows) + "\n"


# ----------------------------------------------------------------------------
# scenario plumbing
# ----------------------------------------------------------------------------

def build_model(scn):
    b = scn["benchmark"]
    return make_benchmark(b["id"], **b.get("overrides", {}))


def spacecraft_circle_target(model, radius, period):
    thr = model.extras["thruster"]
    pinv = np.linalg.pinv(thr)
    hmat = np.diag([model.params["mass"]] * 2 + [model.params["inertia"]])
    omega = 2.0 * np.pi / period

    def target(t):
        c, s = np.cos(omega * t), np.sin(omega * t)
        xd = np.array([radius * c, radius * s, 0.0,
                       -radius * omega * s, radius * omega * c, 0.0])
        acc = np.array([-radius * omega ** 2 * c, -radius * omega ** 2 * s, 0.0])
        return xd, pinv @ (hmat @ acc)

    return target


def build_target(scn, model):
    tgt = scn.get("target", {"kind": "origin"})
    kind = tgt.get("kind", "origin")
    if kind == "circle":
        return spacecraft_circle_target(model, tgt.get("radius", 2.0),
                                        tgt.get("period", 40.0))
    if kind == "setpoint":
        xp = np.asarray(tgt.get("setpoint", np.zeros(model.n)), dtype=float)

        def target(t):
            return xp, np.zeros(model.m)

        return target
    if kind == "origin":
        def target(t):
            return np.zeros(model.n), np.zeros(model.m)

        return target
    raise SchemaError(f"unknown target.kind {kind!r}")


def synth_trajectory(scn, model):
    syn = scn["synthesis"]
    target = build_target(scn, model)
    steps = int(round(syn["T"] / syn["dt"]))
    traj = []
    for k in range(steps + 1):
        t = k * syn["dt"]
        xd, ud = target(t)
        traj.append((t, xd, xd, ud))
    return traj


def run_synthesis(scn, dump_dir=None, stationary_flag=False):
    """Builds and solves the scenario's metric program; returns MetricField."""
    model = build_model(scn)
    syn = scn["synthesis"]
    opts = cvstem.SynthOptions(
        stationary=bool(syn.get("stationary", False)) or stationary_flag,
        shared=bool(syn.get("shared", False)),
    )
    if syn.get("quadrature_points"):
        opts.sdc_cfg = type(opts.sdc_cfg)(quadrature_points=int(
            syn["quadrature_points"]))
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)

        def dump(idx, problem):
            with open(os.path.join(dump_dir, f"sdp_{idx:04d}.json"), "wb") as f:
                f.write(_json_bytes(problem.to_json_dict()))

        opts.dump_cb = dump
    costs = (float(syn.get("c1", 1.0)), float(syn.get("c2", 0.0)))
    rw = syn.get("R", 1.0)
    task = syn.get("task", "control")
    alphas = syn.get("alpha_grid") or [syn["alpha"]]

    if task == "control":
        traj = synth_trajectory(scn, model)
        atoms = None
        if syn.get("region_samples"):
            atoms = _control_atoms(model, traj, syn, opts)

        def solve(alpha):
            return cvstem.synth_control_metric(model, traj, alpha, rw, costs,
                                               stochastic=syn.get("stochastic"),
                                               opts=opts, atoms=atoms)
    elif task == "estimation":
        sim = scn.get("sim", {})
        if syn.get("region_samples"):
            states = [np.asarray(s, dtype=float)
                      for s in syn["region_samples"]]
        else:
            # states along the reference clock (token trajectory of xhat)
            states = [np.asarray(sim.get("xhat0", np.zeros(model.n)))]
        traj = [(k * syn["dt"], s) for k, s in enumerate(states)]
        sto = syn.get("stochastic")
        bounds_blk = syn.get("bounds") or {"rho_bar": 1.0, "c_bar": 1.0}

        def solve(alpha):
            return cvstem.synth_estim_metric(model, traj, alpha, rw, costs,
                                             bounds=bounds_blk,
                                             stochastic=sto, opts=opts)
    else:
        raise SchemaError(f"unknown synthesis.task {task!r}")

    if len(alphas) == 1:
        fld = solve(alphas[0])
    else:
        def objective(alpha):
            f = solve(alpha)
            c1, c2 = costs
            return c1 * f.chi + c2 * f.nu

        best = cvstem.alpha_line_search(objective, alphas)
        fld = solve(best)
    return model, fld


def _control_atoms(model, traj, syn, opts):
    """Contraction atoms at explicitly listed states plus the trajectory."""
    from .sdc import sdc_matrix
    atoms = []
    for t, x, xd, ud in traj:
        atoms.append((sdc_matrix(model, x, xd, ud, t, opts.sdc_cfg),
                      model.B(x, t)))
    for s in syn["region_samples"]:
        s = np.asarray(s, dtype=float)
        atoms.append((sdc_matrix(model, s, s, np.zeros(model.m), 0.0,
                                 opts.sdc_cfg), model.B(s, 0.0)))
    return atoms


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_synth(scn, outdir, dump_sdp=False, stationary=False):
    os.makedirs(outdir, exist_ok=True)
    try:
        model, fld = run_synthesis(
            scn, dump_dir=os.path.join(outdir, "sdp") if dump_sdp else None,
            stationary_flag=stationary)
    except cvstem.Infeasible as exc:
        print(f"infeasible at sample {exc.sample_index}", file=sys.stderr)
        return 2
    field_path = os.path.join(outdir, "metric.json")
    fld.to_json(field_path)
    rows = [("k", "t", "margin", "nu", "chi")]
    margins = fld.meta.get("margins") or [float("nan")] * len(fld)
    for k, (s, mg) in enumerate(zip(fld.samples, margins)):
        rows.append((k, float(s.t), float(mg), float(s.nu), float(s.chi)))
    margin_path = os.path.join(outdir, "margins.csv")
    with open(margin_path, "w") as f:
        f.write(_fmt_rows(rows))
    files = [field_path, margin_path]
    _write_manifest(outdir, "synth", scn, files)
    print(f"synthesized {len(fld)} samples at alpha={fld.alpha:.6g} "
          f"(chi={fld.chi:.6g}, nu={fld.nu:.6g})")
    return 0


def cmd_train(scn, outdir):
    os.makedirs(outdir, exist_ok=True)
    field_path = os.path.join(outdir, "metric.json")
    if not os.path.exists(field_path):
        print(f"missing artifact: {field_path}", file=sys.stderr)
        return 4
    fld = cvstem.MetricField.from_json(field_path)
    model = build_model(scn)
    cfg = scn.get("net", {})
    spec = tuple(cfg.get("inputs", ["x"]))
    dims = {"x": model.n, "x_d": model.n, "u_d": model.m, "t": 1}
    pairs = metricnet.dataset_from_field(fld, spec)
    val_frac = float(cfg.get("val_fraction", 0.2))
    n_val = max(1, int(len(pairs) * val_frac)) if len(pairs) > 1 else 0
    val_samples = fld.samples[len(fld) - n_val:] if n_val else fld.samples
    val_field = cvstem.MetricField(val_samples, fld.alpha, fld.beta, fld.meta) \
        if n_val else fld
    train_pairs = pairs[: len(pairs) - n_val] if n_val else pairs
    net = metricnet.init_net(model.n, cfg.get("widths", [32, 32]), spec, dims,
                             c_nn=cfg.get("c_nn"),
                             seed=int(cfg.get("seed", 0)))
    metricnet.fit_scaling(net, pairs)
    try:
        net, hist = metricnet.train(
            net, train_pairs, epochs=int(cfg.get("epochs", 200)),
            lr=float(cfg.get("lr", 0.01)), batch=int(cfg.get("batch", 16)),
            seed=int(cfg.get("seed", 0)),
            momentum=float(cfg.get("momentum", 0.9)))
    except metricnet.DivergedLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    eps_l = metricnet.estimate_learning_error(net, val_field, spec)
    ckpt_path = os.path.join(outdir, "net.json")
    net.to_json(ckpt_path)
    loss_path = os.path.join(outdir, "loss.csv")
    with open(loss_path, "w") as f:
        rows = [("epoch", "train_loss", "val_eps")]
        rows += [(e, float(l), float(v)) for e, l, v in hist]
        f.write(_fmt_rows(rows))
    eps_path = os.path.join(outdir, "eps_l.json")
    with open(eps_path, "wb") as f:
        f.write(_json_bytes({"eps_l": eps_l,
                             "budget": cfg.get("eps_budget")}))
    _write_manifest(outdir, "train", scn, [ckpt_path, loss_path, eps_path])
    print(f"trained net: eps_l={eps_l:.6g}")
    budget = cfg.get("eps_budget")
    if budget is not None and eps_l > budget:
        print(f"eps_l exceeds budget {budget}", file=sys.stderr)
        return 3
    return 0


def _control_verify_runs(scn, model, source, fld):
    sim = scn["sim"]
    dist = scn.get("disturbance", {})
    target = build_target(scn, model)
    rmat = scn["synthesis"].get("R", 1.0)
    x0 = np.asarray(sim.get("x0", np.zeros(model.n)), dtype=float)
    traces = []
    seeds = range(int(sim.get("seeds", 1)))
    for seed in seeds:
        spec = DisturbanceSpec(kind="deterministic",
                               d_bar=float(dist.get("d_bar", 0.0)),
                               waveform=dist.get("waveform", "rotating"),
                               seed=int(dist.get("seed", 0)) + seed,
                               omega=float(dist.get("omega", 1.0)))

        def controller(x, t):
            xd, ud = target(t)
            return cvstem_feedback(source, model, x, xd, ud, t, rmat)

        def disturbance(x, t):
            return sample_disturbance(spec, t, x)

        tr = rk4_run(model, controller, disturbance, x0, target,
                     sim["T"], sim["dt"], meta={"seed": seed})
        traces.append(tr)
    return traces


def _estimation_verify_runs(scn, model, source, fld):
    sim = scn["sim"]
    dist = scn.get("disturbance", {})
    rmat = scn["synthesis"].get("R", 1.0)
    d0 = float(dist.get("d0_bar", 0.0))
    d1 = float(dist.get("d1_bar", 0.0))
    n_seeds = int(sim.get("seeds", 1))
    box = np.asarray(sim.get("x0_box", model.box), dtype=float)
    traces = []
    rng = np.random.default_rng(int(dist.get("seed", 0)))
    for seed in range(n_seeds):
        x0 = rng.uniform(box[:, 0], box[:, 1])
        xh0 = np.asarray(sim.get("xhat0", np.zeros(model.n)), dtype=float)
        spec0 = DisturbanceSpec(kind="deterministic", d_bar=d0,
                                waveform=dist.get("waveform", "rotating"),
                                seed=1000 + seed)
        spec1 = DisturbanceSpec(kind="deterministic", d_bar=d1,
                                waveform="clipped", seed=2000 + seed)

        def aug_rate(z, t):
            x, xh = z[:model.n], z[model.n:]
            dx = model.f(x, t) + sample_disturbance(spec0, t, x)
            y = model.h(x, t) + sample_disturbance(spec1, t, np.zeros(model.p))
            gain = estimator_gain(source, model, xh, t, rmat)
            dxh = model.f(xh, t) + gain @ (y - model.h(xh, t))
            return np.concatenate([dx, dxh])

        ts, zs = rollout(aug_rate, np.concatenate([x0, xh0]),
                         sim["T"], sim["dt"])
        err = np.linalg.norm(zs[:, model.n:] - zs[:, :model.n], axis=1)
        traces.append(Trace(ts, zs[:, model.n:], zs[:, :model.n],
                            np.zeros((len(ts), 0)), err,
                            meta={"seed": seed}))
    return traces


def cmd_verify(scn, outdir):
    field_path = os.path.join(outdir, "metric.json")
    if not os.path.exists(field_path):
        print(f"missing artifact: {field_path}", file=sys.stderr)
        return 4
    fld = cvstem.MetricField.from_json(field_path)
    model = build_model(scn)
    kinds = scn.get("bounds", {}).get("kinds", ["deterministic"])
    use_net = "learning" in kinds
    if use_net:
        net_path = os.path.join(outdir, "net.json")
        if not os.path.exists(net_path):
            print(f"missing artifact: {net_path}", file=sys.stderr)
            return 4
        net = metricnet.MetricNet.from_json(net_path)
        source = MetricSource.from_net(net)
    else:
        source = MetricSource.from_field(fld)

    task = scn["synthesis"].get("task", "control")
    dist = scn.get("disturbance", {})
    sim = scn.get("sim", {})
    grace = float(scn.get("bounds", {}).get("grace", 0.0))
    if task == "control":
        traces = _control_verify_runs(scn, model, source, fld)
        x0 = np.asarray(sim.get("x0", np.zeros(model.n)), dtype=float)
        xd0, ud0 = build_target(scn, model)(0.0)
        v0 = bnd.path_energy(lambda q, t: fld.metric_at_time(0.0), xd0, x0)
        if "learning" in kinds:
            eps_doc = json.load(open(os.path.join(outdir, "eps_l.json")))
            eps_l = scn.get("bounds", {}).get("eps_l_override",
                                              eps_doc["eps_l"])
            rho_bar = 1.0 / float(scn["synthesis"].get("R", 1.0))
            b_bar = _actuation_bound(model)
            eps1 = rho_bar * b_bar ** 2 * eps_l
            tube = bnd.learn_tube(v0, fld.alpha, fld.m_lower, fld.m_upper,
                                  0.0, eps1, float(dist.get("d_bar", 0.0)))
        else:
            tube = bnd.det_tube(v0, fld.alpha, fld.m_lower, fld.m_upper,
                                float(dist.get("d_bar", 0.0)))
    else:
        traces = _estimation_verify_runs(scn, model, source, fld)
        # worst-case initial path energy over the sampled initial conditions,
        # measured in the inverse metric
        v0 = max(bnd.path_energy(
            lambda q, t: np.linalg.inv(fld.metric_at_time(0.0)),
            tr.ref[0], tr.x[0]) for tr in traces)
        meta = fld.meta
        tube = bnd.estim_tube(v0, fld.alpha, fld.m_lower, fld.m_upper,
                              float(dist.get("d0_bar", 0.0)),
                              float(dist.get("d1_bar", 0.0)),
                              float(meta.get("rho_bar", 1.0)),
                              float(meta.get("c_bar", 1.0)))
    report = bnd.verify_containment(traces, tube, grace=grace)
    report_path = os.path.join(outdir, "containment.json")
    with open(report_path, "wb") as f:
        f.write(_json_bytes({"tube": {k: float(v) for k, v in
                                      tube.params.items()},
                             "kind": tube.kind, **report.to_dict()}))
    curve_path = os.path.join(outdir, "curves.csv")
    t = traces[0].t
    errs = np.array([tr.err for tr in traces])
    rows = [("t", "bound", "max_err", "mean_err")]
    curve = tube.curve(t)
    for i in range(len(t)):
        rows.append((float(t[i]), float(curve[i]), float(errs[:, i].max()),
                     float(errs[:, i].mean())))
    with open(curve_path, "w") as f:
        f.write(_fmt_rows(rows))
    _write_manifest(outdir, "verify", scn, [report_path, curve_path])
    if not report.passed:
        print(f"containment FAILED: max margin {report.max_margin:.3e} at "
              f"t={report.worst_time:.3g}", file=sys.stderr)
        return 5
    print(f"containment PASS over {len(traces)} runs "
          f"(worst margin {report.max_margin:.3e})")
    return 0


def _actuation_bound(model, samples=200, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        x = rng.uniform(model.box[:, 0], model.box[:, 1])
        worst = max(worst, float(np.linalg.norm(model.B(x, 0.0), 2)))
    return worst


def cmd_adapt(scn, outdir):
    os.makedirs(outdir, exist_ok=True)
    model = build_model(scn)
    ada = scn.get("adaptation", {})
    law = ada.get("law", "slotine_li")
    if law != "slotine_li":
        raise SchemaError(f"cli adaptation supports law 'slotine_li'; "
                          f"got {law!r}")
    theta_true = np.asarray(ada.get("theta_true", model.extras["masses"]),
                            dtype=float)
    theta0 = np.asarray(ada.get("theta0", 0.5 * theta_true), dtype=float)
    gains = (np.eye(2) * float(ada.get("k_gain", 25.0)),
             np.eye(2) * float(ada.get("lambda_gain", 8.0)),
             np.eye(2) * float(ada.get("gamma", 8.0)))
    terms = model.extras["terms"]

    def target(t):
        qd = np.array([0.6 * np.sin(t), 0.4 * np.cos(0.7 * t)])
        qdd = np.array([0.6 * np.cos(t), -0.28 * np.sin(0.7 * t)])
        qddd = np.array([-0.6 * np.sin(t), -0.196 * np.cos(0.7 * t)])
        return qd, qdd, qddd

    def aug_rate(z, t):
        x, th = z[:4], z[4:]
        u, dth = slotine_li(model, gains, x, target(t), th)
        q, qdot = x[:2], x[2:4]
        hmat, cmat, gvec = terms(q, qdot, masses=theta_true)
        qdd = np.linalg.solve(hmat, u - cmat @ qdot - gvec)
        return np.concatenate([qdot, qdd, dth])

    sim = scn.get("sim", {"T": 30.0, "dt": 2e-3})
    x0 = np.asarray(sim.get("x0", [0.5, -0.3, 0.0, 0.0]), dtype=float)
    ts, zs = rollout(aug_rate, np.concatenate([x0, theta0]),
                     float(sim.get("T", 30.0)), float(sim.get("dt", 2e-3)))
    qd_fin, _, _ = target(ts[-1])
    final_err = float(np.linalg.norm(zs[-1, :2] - qd_fin))
    rows = [("t", "theta_1", "theta_2", "err_norm")]
    stride = max(1, len(ts) // 2000)
    for k in range(0, len(ts), stride):
        qd, _, _ = target(ts[k])
        rows.append((float(ts[k]), float(zs[k, 4]), float(zs[k, 5]),
                     float(np.linalg.norm(zs[k, :2] - qd))))
    theta_path = os.path.join(outdir, "adaptation.csv")
    with open(theta_path, "w") as f:
        f.write(_fmt_rows(rows))
    summary_path = os.path.join(outdir, "adapt_summary.json")
    with open(summary_path, "wb") as f:
        f.write(_json_bytes({"law": law, "final_err": final_err,
                             "theta_final": zs[-1, 4:].tolist()}))
    _write_manifest(outdir, "adapt", scn, [theta_path, summary_path])
    print(f"adaptation finished: final tracking error {final_err:.3e}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="cmsynth", description=__doc__)
    parser.add_argument("command",
                        choices=["synth", "train", "verify", "adapt"])
    parser.add_argument("--scenario", required=True)
    parser.add_argument("--out", default="out")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scenario's primary seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker threads for Monte-Carlo paths")
    parser.add_argument("--dump-sdp", action="store_true")
    parser.add_argument("--stationary", action="store_true",
                        help="drop the metric time derivative in synthesis")
    args = parser.parse_args(argv)
    try:
        scn = load_scenario(args.scenario)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing scenario file: {exc}", file=sys.stderr)
        return 4
    if args.seed is not None:
        scn.setdefault("disturbance", {})["seed"] = args.seed
    os.makedirs(args.out, exist_ok=True)
    if args.command == "synth":
        return cmd_synth(scn, args.out, dump_sdp=args.dump_sdp,
                         stationary=args.stationary)
    if args.command == "train":
        return cmd_train(scn, args.out)
    if args.command == "verify":
        return cmd_verify(scn, args.out)
    return cmd_adapt(scn, args.out)


if __name__ == "__main__":
    sys.exit(main())
