"""Feedforward approximator of the contraction metric via its Cholesky factor.

The net maps a configurable input slice (x, x_d, u_d, theta, t) to the
n(n+1)/2 entries of the upper-triangular factor. Diagonal entries pass
through softplus plus a floor, so every predicted metric is SPD by
construction no matter how far the query sits from the training data.
Training is plain SGD with manual backpropagation (optionally with momentum),
deterministic in its seed; spectral normalization rescales each weight matrix
to a fixed norm budget, bounding the network's global Lipschitz constant by
c_nn^(L+1) (tanh has unit Lipschitz constant).
"""

import json

import numpy as np

from .numkernel import chol_upper, sym_eig, symmetrize


class DivergedLoss(Exception):
    pass


INPUT_DIMS = ("x", "x_d", "u_d", "theta", "t")


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MetricNet:
    """Spectrally-normalizable MLP emitting upper-Cholesky metric factors."""

    def __init__(self, n, widths, input_spec=("x",), dims=None, eps_d=1e-3,
                 c_nn=None, seed=0):
        self.n = int(n)
        self.widths = list(widths)
        self.input_spec = tuple(input_spec)
        # physical dimension of each input slot (t contributes 1)
        self.dims = dict(dims or {})
        self.eps_d = float(eps_d)
        self.c_nn = c_nn
        self.seed = int(seed)
        self.out_dim = self.n * (self.n + 1) // 2
        self.in_dim = sum(self.dims.get(k, self.n if k in ("x", "x_d") else 1)
                          for k in self.input_spec)
        if any(w < 1 for w in self.widths):
            raise ValueError("hidden widths must be >= 1")
        rng = np.random.default_rng(seed)
        sizes = [self.in_dim] + self.widths + [self.out_dim]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(scale * rng.standard_normal((fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.scale_lo = np.full(self.in_dim, -1.0)
        self.scale_hi = np.full(self.in_dim, 1.0)
        self._diag_mask = np.zeros(self.out_dim, dtype=bool)
        idx = 0
        for i in range(self.n):
            for j in range(i, self.n):
                if i == j:
                    self._diag_mask[idx] = True
                idx += 1

    # ------------------------------------------------------------------
    @property
    def depth(self):
        """Hidden-layer count L (total linear maps = L + 1)."""
        return len(self.weights) - 1

    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def lipschitz_budget(self):
        """c_nn^(L+1) * L_sigma^L with L_sigma = 1 for tanh."""
        if self.c_nn is None:
            raise ValueError("no spectral budget set")
        return float(self.c_nn ** (self.depth + 1))

    def set_scaling(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        span = hi - lo
        span[span <= 0.0] = 1.0
        self.scale_lo = lo
        self.scale_hi = lo + span

    def scale_input(self, raw):
        return 2.0 * (np.asarray(raw, dtype=float) - self.scale_lo) \
            / (self.scale_hi - self.scale_lo) - 1.0

    def pack_input(self, x=None, x_d=None, u_d=None, theta=None, t=None):
        parts = []
        values = {"x": x, "x_d": x_d, "u_d": u_d, "theta": theta, "t": t}
        for key in self.input_spec:
            v = values[key]
            if v is None:
                raise ValueError(f"input_spec requires {key!r}")
            parts.append(np.atleast_1d(np.asarray(v, dtype=float)))
        return np.concatenate(parts)

    # ------------------------------------------------------------------
    def forward_raw(self, scaled):
        """Raw output head, with the per-layer activations for backprop."""
        acts = [np.atleast_2d(scaled)]
        h = acts[0]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = np.tanh(z) if k < len(self.weights) - 1 else z
            acts.append(h)
        return h, acts

    def theta_entries(self, raw):
        """Positive map on the diagonal slots: softplus + eps_d."""
        out = np.array(raw, dtype=float, copy=True)
        dm = self._diag_mask
        out[..., dm] = _softplus(out[..., dm]) + self.eps_d
        return out

    def predict_theta(self, raw_input):
        scaled = self.scale_input(raw_input)
        raw, _ = self.forward_raw(scaled)
        return self.theta_entries(raw[0])

    def predict_metric(self, raw_input):
        """SPD metric M = Theta' Theta at the (unscaled) input."""
        entries = self.predict_theta(raw_input)
        theta = np.zeros((self.n, self.n))
        theta[np.triu_indices(self.n)] = entries
        return symmetrize(theta.T @ theta)

    # ------------------------------------------------------------------
    def loss_and_grads(self, inputs_scaled, targets):
        """Mean-squared error over factor entries plus its weight gradients."""
        raw, acts = self.forward_raw(inputs_scaled)
        pred = self.theta_entries(raw)
        diff = pred - targets
        batch = raw.shape[0]
        loss = float(np.mean(diff ** 2))
        dl_draw = 2.0 * diff / diff.size
        dm = self._diag_mask
        dl_draw[:, dm] *= _sigmoid(raw[:, dm])
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = dl_draw
        for k in range(len(self.weights) - 1, -1, -1):
            grads_w[k] = delta.T @ acts[k]
            grads_b[k] = delta.sum(axis=0)
            if k:
                delta = (delta @ self.weights[k]) * (1.0 - acts[k] ** 2)
        return loss, grads_w, grads_b

    def copy(self):
        out = MetricNet.__new__(MetricNet)
        out.__dict__.update({k: v for k, v in self.__dict__.items()
                             if not isinstance(v, (list, np.ndarray))})
        out.widths = list(self.widths)
        out.dims = dict(self.dims)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        out.scale_lo = self.scale_lo.copy()
        out.scale_hi = self.scale_hi.copy()
        out._diag_mask = self._diag_mask.copy()
        return out

    # ------------------------------------------------------------------
    def to_json(self, path=None):
        doc = {
            "n": self.n, "widths": self.widths,
            "input_spec": list(self.input_spec), "dims": self.dims,
            "eps_d": self.eps_d, "c_nn": self.c_nn, "seed": self.seed,
            "scale_lo": self.scale_lo.tolist(),
            "scale_hi": self.scale_hi.tolist(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
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
        net = cls(doc["n"], doc["widths"], tuple(doc["input_spec"]),
                  doc["dims"], doc["eps_d"], doc["c_nn"], doc["seed"])
        net.weights = [np.array(w) for w in doc["weights"]]
        net.biases = [np.array(b) for b in doc["biases"]]
        net.scale_lo = np.array(doc["scale_lo"])
        net.scale_hi = np.array(doc["scale_hi"])
        return net


def init_net(n, widths, input_spec=("x",), dims=None, eps_d=1e-3, c_nn=None,
             seed=0):
    """Deterministic-in-seed constructor; output head width is n(n+1)/2."""
    return MetricNet(n, widths, input_spec, dims, eps_d, c_nn, seed)


def exact_sigma_max(w):
    """Largest singular value via the symmetric eigensolver on W'W."""
    gram = symmetrize(w.T @ w) if w.shape[0] >= w.shape[1] \
        else symmetrize(w @ w.T)
    lam, _ = sym_eig(gram)
    return float(np.sqrt(max(lam[-1], 0.0)))


def power_iter_sigma(w, iters=10):
    """10-step power iteration on W'W with a deterministic start vector."""
    v = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
    for _ in range(iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = w.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(w @ v))


def spectral_normalize(net, c_nn, exact=True):
    """Rescale every weight matrix to spectral norm c_nn (idempotent)."""
    out = net.copy()
    out.c_nn = float(c_nn)
    for k, w in enumerate(out.weights):
        sigma = exact_sigma_max(w) if exact else power_iter_sigma(w)
        if sigma > 0.0:
            out.weights[k] = w * (c_nn / sigma)
    return out


def dataset_from_field(fld, input_spec=("x",), extra_time=False):
    """Flatten a metric field into (raw input, factor-entry target) pairs."""
    pairs = []
    for s in fld.samples:
        values = {"x": s.x, "x_d": s.x_d, "u_d": s.u_d, "t": s.t,
                  "theta": None}
        raw = np.concatenate([np.atleast_1d(np.asarray(values[k], dtype=float))
                              for k in input_spec])
        theta = chol_upper(s.m)
        target = theta[np.triu_indices(theta.shape[0])]
        pairs.append((raw, target))
    return pairs


def fit_scaling(net, pairs):
    """Min-max input scaling from dataset statistics, stored in the net."""
    arr = np.array([p[0] for p in pairs])
    lo = arr.min(axis=0)
    hi = arr.max(axis=0)
    net.set_scaling(lo, hi)


def train(net, pairs, epochs, lr=1e-2, batch=16, seed=0, momentum=0.0,
          val_field=None, val_spec=None, project_every=1):
    """SGD on the mean-squared factor-entry loss.

    Deterministic in `seed` (shuffling and batching included). When the net
    carries a spectral budget, weights are re-projected onto the norm ball
    every `project_every` epochs with a 10-step power iteration and exactly
    at the end. Returns (net, history) with history rows
    (epoch, train_loss, val_eps).
    """
    net = net.copy()
    rng = np.random.default_rng(seed)
    inputs = np.array([net.scale_input(p[0]) for p in pairs])
    targets = np.array([p[1] for p in pairs])
    count = len(pairs)
    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(count)
        total = 0.0
        for start in range(0, count, batch):
            sel = order[start:start + batch]
            loss, gw, gb = net.loss_and_grads(inputs[sel], targets[sel])
            total += loss * len(sel)
            if not np.isfinite(loss) or loss > 1e6:
                raise DivergedLoss(f"loss {loss:.3e} at epoch {epoch}")
            for k in range(len(net.weights)):
                vel_w[k] = momentum * vel_w[k] - lr * gw[k]
                vel_b[k] = momentum * vel_b[k] - lr * gb[k]
                net.weights[k] = net.weights[k] + vel_w[k]
                net.biases[k] = net.biases[k] + vel_b[k]
        if net.c_nn is not None and (epoch + 1) % project_every == 0:
            for k, w in enumerate(net.weights):
                sigma = power_iter_sigma(w)
                if sigma > net.c_nn:
                    net.weights[k] = w * (net.c_nn / sigma)
        epoch_loss = total / count
        val_eps = np.nan
        if val_field is not None:
            val_eps = estimate_learning_error(net, val_field,
                                              val_spec or net.input_spec)
        history.append((epoch, epoch_loss, val_eps))
    if net.c_nn is not None:
        net = spectral_normalize(net, net.c_nn)
    return net, history


def estimate_learning_error(net, fld, input_spec=("x",)):
    """Max spectral norm of (predicted - reference) metric over the field."""
    worst = 0.0
    for s in fld.samples:
        values = {"x": s.x, "x_d": s.x_d, "u_d": s.u_d, "t": s.t}
        raw = np.concatenate([np.atleast_1d(np.asarray(values[k], dtype=float))
                              for k in input_spec])
        diff = symmetrize(net.predict_metric(raw) - s.m)
        lam, _ = sym_eig(diff)
        worst = max(worst, float(np.max(np.abs(lam))))
    return worst
