"""Hand-differentiated MLPs whose last activation can be a reduced-basis solve.

Samples are stored row-wise.  A network is a stack of ReLU :class:`DenseLayer`
objects followed by a final affine map and a *head* that turns the final
pre-activations ``z`` into outputs:

* :class:`RbOutputLayer` -- ``y = E u_N(theta(sigmoid(z))) + offset`` where
  ``u_N`` solves the reduced system assembled from the affine set;
* :class:`ActivationHead` -- elementwise sigmoid or identity (plain MLPs).

Gradients are propagated layer by layer; the reduced solve is differentiated
through its adjoint system ``A_N^T lam = E^T dL/dy``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import DimensionError, NumericalError, TrainingAbort
from .rom import AffineOperatorSet

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def relu(x):
    return np.maximum(x, 0.0)


def _activate(name, z):
    if name == "relu":
        return relu(z)
    if name == "sigmoid":
        return expit(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name, z, y, dy):
    if name == "relu":
        return dy * (z > 0)
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    if name == "identity":
        return dy
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    """``y = act(x W^T + b)`` with ``W`` of shape (n_out, n_in)."""

    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


def he_uniform(rng, n_in, n_out):
    lim = math.sqrt(6.0 / n_in)
    return rng.uniform(-lim, lim, size=(n_out, n_in))


def xavier_uniform(rng, n_in, n_out):
    lim = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_out, n_in))


# ------------------------------------------------------------------ theta maps


class AdvDiffTheta:
    """Physical parameters ``(nu, alpha)`` -> affine weights ``(nu, sin a, cos a)``.

    The same weights multiply the matrix and the lifted right-hand side terms.
    """

    name = "advdiff"
    n_params = 2
    q_a = 3
    q_f = 3

    def __call__(self, mu):
        nu, al = mu[:, 0], mu[:, 1]
        th = np.column_stack([nu, np.sin(al), np.cos(al)])
        theta = np.concatenate([th, th], axis=1)
        jac = np.zeros((mu.shape[0], 6, 2))
        for off in (0, 3):
            jac[:, off, 0] = 1.0
            jac[:, off + 1, 1] = np.cos(al)
            jac[:, off + 2, 1] = -np.sin(al)
        return theta, jac


THETA_MAPS = {"advdiff": AdvDiffTheta}


# ---------------------------------------------------------------------- heads


class ActivationHead:
    """Elementwise output activation (``sigmoid`` or ``identity``)."""

    def __init__(self, activation="sigmoid"):
        self.activation = activation

    def forward(self, z):
        y = _activate(self.activation, z)
        return y, (z, y)

    def backward(self, cache, dy):
        z, y = cache
        return _activate_grad(self.activation, z, y, dy)

    def latent(self, z):
        return None


class RbOutputLayer:
    """Sigmoid-preconditioned reduced-basis solver used as an activation.

    Parameters
    ----------
    ops : AffineOperatorSet
        Frozen reduced arrays.
    extraction : (N_out, N) array
        Rows of the reduced basis at the output nodes.
    mode : {"affine-coefficients", "physical-parameters"}
    lo, hi : (s,) arrays
        Scaler ranges; ``sigmoid(z)`` in (0, 1) is mapped to ``lo + (hi - lo) xi``.
    theta_map : callable, optional
        Required in physical-parameter mode: maps ``mu`` (B, p) to affine weights
        (B, Q_a + Q_f) and their Jacobian (B, Q_a + Q_f, p).
    offset : (N_out,) array, optional
        Lifting values at the output nodes.
    """

    def __init__(self, ops: AffineOperatorSet, extraction, mode="affine-coefficients",
                 lo=None, hi=None, theta_map=None, offset=None):
        self.ops = ops
        self.extraction = np.ascontiguousarray(extraction, dtype=np.float64)
        if self.extraction.shape[1] != ops.n:
            raise DimensionError("extraction matrix does not match the reduced dimension")
        self.mode = mode
        if mode == "affine-coefficients":
            self.s = ops.q_a + ops.q_f
            lo = ops.lo if lo is None else lo
            hi = ops.hi if hi is None else hi
        elif mode == "physical-parameters":
            if theta_map is None:
                raise ValueError("physical-parameter mode needs a theta map")
            if theta_map.q_a != ops.q_a or theta_map.q_f != ops.q_f:
                raise DimensionError("theta map does not match the affine set")
            self.s = theta_map.n_params
        else:
            raise ValueError(f"unknown mode {mode!r}")
        self.theta_map = theta_map
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if self.lo.shape != (self.s,) or np.any(self.hi <= self.lo):
            raise DimensionError("scaler ranges must be non-degenerate with one entry per latent")
        self.offset = (np.zeros(self.extraction.shape[0]) if offset is None
                       else np.asarray(offset, dtype=np.float64))
        n = ops.n
        self._a_flat = ops.matrices.reshape(ops.q_a, n * n)
        self.n_shifted = 0

    @property
    def n_out(self) -> int:
        return self.extraction.shape[0]

    def scale(self, xi):
        return self.lo + (self.hi - self.lo) * xi

    def coefficients(self, z):
        """Latent ``xi``, scaled latent and affine weights for pre-activations ``z``."""
        xi = expit(z)
        scaled = self.scale(xi)
        if self.mode == "physical-parameters":
            theta, jac = self.theta_map(scaled)
        else:
            theta, jac = scaled, None
        return xi, scaled, theta, jac

    def forward_theta(self, theta):
        """Reduced solve for explicit affine weights (B, Q_a + Q_f)."""
        qa = self.ops.q_a
        n = self.ops.n
        mats = (theta[:, :qa] @ self._a_flat).reshape(-1, n, n)
        rhs = theta[:, qa:] @ self.ops.vectors
        u, factor, shifted = kernels.factor_solve(mats, rhs)
        return u, factor, shifted

    def forward(self, z):
        z = np.atleast_2d(z)
        if z.shape[1] != self.s:
            raise DimensionError(f"RB layer expects {self.s} latents, got {z.shape[1]}")
        xi, scaled, theta, jac = self.coefficients(z)
        u, factor, shifted = self.forward_theta(theta)
        self.n_shifted = int(np.count_nonzero(shifted))
        y = u @ self.extraction.T + self.offset
        return y, (xi, theta, jac, u, factor, shifted)

    def backward(self, cache, dy):
        xi, theta, jac, u, factor, _ = cache
        qa = self.ops.q_a
        b, n = u.shape
        g = dy @ self.extraction
        lam = kernels.solve_transpose(factor, g)
        outer = (lam[:, :, None] * u[:, None, :]).reshape(b, n * n)
        d_theta = np.empty_like(theta)
        d_theta[:, :qa] = -(outer @ self._a_flat.T)
        d_theta[:, qa:] = lam @ self.ops.vectors.T
        if jac is not None:
            d_scaled = np.einsum("bk,bkp->bp", d_theta, jac)
        else:
            d_scaled = d_theta
        d_xi = d_scaled * (self.hi - self.lo)
        return d_xi * xi * (1.0 - xi)

    def latent(self, z):
        """Latent readout: ``mu`` in physical mode, affine weights otherwise."""
        return self.scale(expit(np.atleast_2d(z)))


# -------------------------------------------------------------------- network


class Network:
    """ReLU hidden stack + final affine map + head."""

    def __init__(self, layers, head):
        self.layers = list(layers)
        self.head = head
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.n_out != b.n_in:
                raise DimensionError("layer dimensions do not chain")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out

    def param_names(self):
        names = []
        for i in range(len(self.layers)):
            names.extend([f"W{i + 1}", f"b{i + 1}"])
        return names

    def copy_params(self):
        return [p.copy() for p in self.params()]

    def set_params(self, values):
        for p, v in zip(self.params(), values):
            p[...] = v

    def forward(self, X):
        z, cache = mlp_forward(self, X)
        y, hcache = self.head.forward(z)
        cache["head"] = hcache
        return y, cache

    def predict(self, X, batch_size=4096):
        X = np.atleast_2d(X)
        out = [self.forward(X[i:i + batch_size])[0] for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(out, axis=0)

    def latent(self, X):
        z, _ = mlp_forward(self, np.atleast_2d(X))
        return self.head.latent(z)

    def backward(self, cache, dy):
        """Gradients (same order as :meth:`params`) and ``dL/dX``."""
        dz = self.head.backward(cache["head"], dy)
        grads = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x = cache["inputs"][i]
            if i < len(self.layers) - 1:
                dz = _activate_grad(layer.activation, cache["pre"][i], cache["inputs"][i + 1], dz)
            grads[2 * i] = dz.T @ x
            grads[2 * i + 1] = dz.sum(axis=0)
            dz = dz @ layer.W
        return grads, dz


def mlp_forward(model: Network, X):
    """Run every layer up to the final affine map.

    Returns the final pre-activations ``z`` of shape (B, s) and a cache with
    the inputs and pre-activations of each layer.
    """
    x = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite network input")
    inputs, pre = [], []
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        inputs.append(x)
        with np.errstate(over="ignore", invalid="ignore"):
            z = x @ layer.W.T + layer.b
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite pre-activation in layer {i + 1}")
        pre.append(z)
        if i < last:
            x = _activate(layer.activation, z)
    return z, {"inputs": inputs, "pre": pre}


def build_network(n_in, hidden, head, n_latent, seed=0, out_scale=1.0):
    """He-uniform ReLU layers and a Xavier-uniform final affine map.

    ``out_scale`` shrinks the final weights; values below 1 start every latent
    coordinate close to zero, i.e. the sigmoid output close to 1/2.
    """
    rng = np.random.default_rng(seed)
    layers = []
    prev = n_in
    for width in hidden:
        layers.append(DenseLayer(he_uniform(rng, prev, width), np.zeros(width), "relu"))
        prev = width
    W = xavier_uniform(rng, prev, n_latent) * float(out_scale)
    layers.append(DenseLayer(W, np.zeros(n_latent), "identity"))
    return Network(layers, head)


def build_pdednn(n_in, hidden, rb_layer: RbOutputLayer, seed=0, out_scale=1.0):
    return build_network(n_in, hidden, rb_layer, rb_layer.s, seed, out_scale)


BASELINE_KINDS = ("mlp", "mlp_mu", "mlp_out")


def baseline_head_size(kind, n_out, n_params):
    return {"mlp_mu": n_params, "mlp_out": n_out, "mlp": n_out + n_params}[kind]


def build_baseline(kind, n_in, hidden, n_out, n_params, seed=0):
    """Plain MLP with a sigmoid output perceptron.

    ``mlp_mu`` predicts the parameters, ``mlp_out`` the output sensors and
    ``mlp`` both (outputs first); targets must be scaled to [0, 1].
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline {kind!r}")
    return build_network(n_in, hidden, ActivationHead("sigmoid"),
                         baseline_head_size(kind, n_out, n_params), seed)


# ----------------------------------------------------------------- loss / Adam


def mse_loss(Y, Y_pred):
    """Batch-mean of squared errors summed over outputs, and its gradient."""
    Y = np.asarray(Y, dtype=np.float64)
    Y_pred = np.asarray(Y_pred, dtype=np.float64)
    if Y.shape != Y_pred.shape:
        raise DimensionError(f"target shape {Y.shape} vs prediction shape {Y_pred.shape}")
    nb = Y.shape[0]
    diff = Y_pred - Y
    return float(np.sum(diff * diff) / nb), (2.0 / nb) * diff


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3):
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("parameter, gradient and state lists differ in length")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} vs parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_mae: float
    val_mae: float
    train_loss_sum: float
    n_shifted: int


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "train_mae", "val_mae", "train_loss_sum", "n_shifted")


def _evaluate(model, X, Y, batch_size=4096):
    if X.shape[0] == 0:
        return float("nan"), float("nan"), float("nan")
    P = model.predict(X, batch_size)
    d = P - Y
    sq = float(np.sum(d * d))
    return sq / X.shape[0], float(np.mean(np.abs(d))), sq


def cosine_lr(epoch: int, epochs: int, lr: float, lr_min=None) -> float:
    """Step size for 0-based ``epoch``; constant when ``lr_min`` is None."""
    if lr_min is None or epochs <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + np.cos(np.pi * epoch / (epochs - 1)))


def train(model: Network, X, Y, X_val=None, Y_val=None, epochs=500, batch_size=64,
          seed=0, lr=1e-3, max_shift_fraction=0.01, callback=None, lr_min=None):
    """Minibatch Adam on the batch-mean MSE.

    ``batch_size=None`` selects full-batch training.  Each epoch reshuffles the
    training rows with a PCG64 stream seeded by ``seed``.  With ``lr_min`` set,
    the step size follows a per-epoch cosine from ``lr`` down to ``lr_min``;
    otherwise it is constant.

    Returns
    -------
    list of EpochRecord
        One record per epoch with train/validation loss (batch-mean), mean
        absolute error and the summed squared error over the training set.

    Raises
    ------
    TrainingAbort
        If more than ``max_shift_fraction`` of the reduced solves in an epoch
        needed a regularizing shift.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if X_val is None:
        X_val = np.empty((0, X.shape[1]))
        Y_val = np.empty((0, Y.shape[1]))
    rng = np.random.default_rng(seed)
    state = AdamState.for_params(model.params(), lr)
    n = X.shape[0]
    bs = n if batch_size is None else int(batch_size)
    history = []
    for epoch in range(epochs):
        state.lr = cosine_lr(epoch, epochs, lr, lr_min)
        order = rng.permutation(n)
        shifted = 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            pred, cache = model.forward(X[idx])
            shifted += getattr(model.head, "n_shifted", 0)
            _, dy = mse_loss(Y[idx], pred)
            grads, _ = model.backward(cache, dy)
            adam_step(state, model.params(), grads)
        if shifted > max_shift_fraction * n:
            raise TrainingAbort(
                f"epoch {epoch + 1}: {shifted} of {n} reduced solves needed a regularizing shift"
            )
        tl, tm, ts = _evaluate(model, X, Y)
        vl, vm, _ = _evaluate(model, X_val, Y_val)
        rec = EpochRecord(epoch + 1, tl, vl, tm, vm, ts, shifted)
        history.append(rec)
        if callback is not None:
            callback(rec)
    return history


# -------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict
    n_checked: int
    n_flagged: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_errors(analytic, numeric, floor_frac=1e-3):
    """Componentwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_frac`` times the largest analytic magnitude in the
    group, which keeps near-zero components from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64)
    d = np.asarray(numeric, dtype=np.float64)
    scale = np.max(np.abs(a)) if a.size else 0.0
    floor = max(floor_frac * scale, 1e-300)
    return np.abs(a - d) / np.maximum(np.maximum(np.abs(a), np.abs(d)), floor)


def _masks(model, x):
    _, cache = mlp_forward(model, x)
    return [z > 0 for z in cache["pre"][:-1]]


def gradient_check(model: Network, x, y, step=1e-5, tolerance=1e-5, max_per_group=None,
                   seed=0, floor_frac=1e-3):
    """Central finite differences of the MSE of one sample.

    Every parameter group and the input are checked (``max_per_group`` caps the
    number of randomly chosen components per group).  Components whose
    perturbation moves a ReLU pre-activation across zero, or that feed a unit
    whose pre-activation is within ``10 * step`` of zero, are flagged and
    excluded.
    """
    if not 1e-8 < step < 1e-3:
        raise ValueError("step must lie in (1e-8, 1e-3)")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    rng = np.random.default_rng(seed)

    def loss_at():
        pred, _ = model.forward(x)
        return mse_loss(y, pred)[0]

    pred, cache = model.forward(x)
    _, dy = mse_loss(y, pred)
    grads, dx = model.backward(cache, dy)
    base_pre = cache["pre"]
    base_masks = [z > 0 for z in base_pre[:-1]]
    n_hidden = len(model.layers) - 1

    groups = list(zip(model.param_names(), model.params(), grads))
    per_group = {}
    n_checked = n_flagged = 0
    worst = 0.0

    def near_kink(layer_idx, unit):
        if layer_idx >= n_hidden:
            return False
        return bool(np.any(np.abs(base_pre[layer_idx][:, unit]) < 10 * step))

    for gi, (name, p, g) in enumerate(groups):
        layer_idx = gi // 2
        flat = p.reshape(-1)
        comps = np.arange(flat.size)
        if max_per_group is not None and flat.size > max_per_group:
            comps = np.sort(rng.choice(flat.size, max_per_group, replace=False))
        an, fd = [], []
        for c in comps:
            unit = c // p.shape[1] if p.ndim == 2 else c
            old = flat[c]
            flat[c] = old + step
            lp = loss_at()
            mp = _masks(model, x)
            flat[c] = old - step
            lm = loss_at()
            mm = _masks(model, x)
            flat[c] = old
            crossed = any(np.any(a != b) for a, b in zip(mp, mm)) or any(
                np.any(a != b) for a, b in zip(mp, base_masks))
            if crossed or near_kink(layer_idx, unit):
                n_flagged += 1
                continue
            an.append(g.reshape(-1)[c])
            fd.append((lp - lm) / (2 * step))
        if an:
            err = float(np.max(relative_errors(an, fd, floor_frac)))
            per_group[name] = err
            worst = max(worst, err)
            n_checked += len(an)

    # input sensitivity
    an, fd = [], []
    comps = np.arange(x.shape[1])
    if max_per_group is not None and comps.size > max_per_group:
        comps = np.sort(rng.choice(comps.size, max_per_group, replace=False))
    for c in comps:
        old = x[0, c]
        x[0, c] = old + step
        lp = loss_at()
        mp = _masks(model, x)
        x[0, c] = old - step
        lm = loss_at()
        mm = _masks(model, x)
        x[0, c] = old
        if any(np.any(a != b) for a, b in zip(mp, mm)):
            n_flagged += 1
            continue
        an.append(dx[0, c])
        fd.append((lp - lm) / (2 * step))
    if an:
        err = float(np.max(relative_errors(an, fd, floor_frac)))
        per_group["input"] = err
        worst = max(worst, err)
        n_checked += len(an)
    return GradCheckReport(worst, per_group, n_checked, n_flagged, tolerance)
