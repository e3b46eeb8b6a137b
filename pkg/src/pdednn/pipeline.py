"""Experiment orchestration: offline build, training, evaluation and baselines.

Directory layout of one experiment root::

    <root>/offline/            manifest.json + arrays of the offline stage
    <root>/checkpoints/<tag>/  network parameters
    <root>/reports/            histories and evaluation summaries (CSV)

Random streams are PCG64 generators (``numpy.random.default_rng``) seeded
with ``[seed, k]`` where ``k`` names the consumer, so stages draw from
independent, reproducible sequences.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels, storage
from .errors import ConfigError, MissingArtifactError, NumericalError, PdeDnnError
from .fem import (
    AdvectionDiffusionProblem,
    NonaffineDiffusionProblem,
    assemble_mass,
    assemble_stiffness,
    build_mesh,
    h1_error,
)
from .neural import (
    THETA_MAPS,
    ActivationHead,
    DenseLayer,
    Network,
    RbOutputLayer,
    build_baseline,
    build_pdednn,
    gradient_check,
    mlp_forward,
    train,
    HISTORY_FIELDS,
)
from .numerics import as_csr
from .rom import AffineOperatorSet, DeimModel, deim_offline, mdeim_offline, pod, widen_ranges

log = logging.getLogger(__name__)

VARIANTS = ("advdiff", "nonaffine")
MODES = ("physical-parameters", "affine-coefficients")
FOM, RB_AUGMENTED = 0, 1

# stream identifiers for [seed, k] seeding
_S_TRAIN_MU, _S_EXTRA_MU, _S_TEST_MU, _S_SENSORS = 1, 2, 3, 4
_S_INIT, _S_SPLIT, _S_SHUFFLE, _S_GRADCHECK = 11, 12, 13, 14


# ------------------------------------------------------------------ config


@dataclass
class ExperimentConfig:
    """All knobs of one experiment.  ``defaults(variant)`` gives desk-scale values."""

    variant: str = "advdiff"
    nx: int = 50
    ny: int = 50
    pod_tol: float = 1e-5
    augment_pod_tol: float = 1e-7
    n_snapshots: int = 200
    n_samples: int = 2000
    n_test: int = 200
    n_in: int = 20
    n_out: int = 20
    autoencoder: bool = False
    q_a: int = 3
    q_f: int = 3
    q_a_list: list = field(default_factory=lambda: [3])
    deim_snapshots: int = 200
    mode: str = "physical-parameters"
    hidden: list = field(default_factory=lambda: [256, 256, 256, 256])
    epochs: int = 500
    batch_size: int | None = 64
    lr: float = 1e-3
    lr_min: float | None = 1e-5
    out_init_scale: float = 1.0
    seed: int = 0
    val_fraction: float = 0.2
    advection_magnitude: float | None = None
    fom_tol: float = 1e-10
    workers: int = 1

    @classmethod
    def defaults(cls, variant="advdiff", **overrides):
        if variant == "advdiff":
            cfg = cls()
        elif variant == "nonaffine":
            cfg = cls(variant="nonaffine", nx=100, ny=100, pod_tol=1e-4, n_snapshots=400,
                      n_samples=4000, n_in=40, n_out=100, q_a=5, q_f=10,
                      q_a_list=[1, 2, 3, 4, 5, 10, 20, 40], mode="affine-coefficients", epochs=500,
                      out_init_scale=0.1)
        else:
            raise ConfigError(f"unknown problem variant {variant!r}; expected one of {VARIANTS}")
        for k, v in overrides.items():
            if k not in {f.name for f in fields(cls)}:
                raise ConfigError(f"unknown config field {k!r}")
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, data: dict):
        data = dict(data)
        variant = data.pop("variant", "advdiff")
        return cls.defaults(variant, **data)

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_a_list"] = list(d["q_a_list"])
        d["hidden"] = list(d["hidden"])
        return d

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown problem variant {self.variant!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.variant == "nonaffine" and self.mode != "affine-coefficients":
            raise ConfigError("the nonaffine variant only supports affine-coefficient mode")
        if min(self.nx, self.ny) < 2:
            raise ConfigError("mesh needs at least 2 cells per direction")
        for name in ("pod_tol", "augment_pod_tol"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.n_snapshots < 1 or self.n_samples < self.n_snapshots:
            raise ConfigError("need 1 <= n_snapshots <= n_samples")
        if self.n_test < 1:
            raise ConfigError("the test set must not be empty")
        if self.n_in < 1 or self.n_out < 1:
            raise ConfigError("sensor counts must be positive")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden architecture must be a nonempty list of positive widths")
        if self.epochs < 0 or (self.batch_size is not None and self.batch_size < 1):
            raise ConfigError("epochs must be >= 0 and batch_size >= 1 (or null)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.variant == "advdiff":
            if self.q_a != 3 or self.q_f != 3:
                raise ConfigError("the affine variant has exactly 3 matrix and 3 vector terms")
        else:
            qmax = max([self.q_a, *self.q_a_list])
            if min([self.q_a, *self.q_a_list]) < 1 or self.q_f < 1:
                raise ConfigError("Q_a and Q_f must be positive")
            if qmax > self.deim_snapshots or self.q_f > self.deim_snapshots:
                raise ConfigError("more (M)DEIM terms requested than DEIM snapshots")
            if self.deim_snapshots > self.n_snapshots:
                raise ConfigError("deim_snapshots cannot exceed n_snapshots")
        if self.lr <= 0 or (self.lr_min is not None and not 0 < self.lr_min <= self.lr):
            raise ConfigError("need lr > 0 and, if given, 0 < lr_min <= lr")
        if self.out_init_scale <= 0:
            raise ConfigError("out_init_scale must be positive")
        return self

    @property
    def q_a_max(self) -> int:
        return max([self.q_a, *self.q_a_list])


def make_problem(cfg: ExperimentConfig):
    mesh = build_mesh(cfg.nx, cfg.ny)
    if cfg.variant == "advdiff":
        return AdvectionDiffusionProblem(mesh, magnitude=cfg.advection_magnitude)
    return NonaffineDiffusionProblem(mesh)


def _rng(seed, stream):
    return np.random.default_rng([int(seed), int(stream)])


@contextmanager
def _stage(name):
    try:
        yield
    except PdeDnnError as e:
        e.stage = name
        raise


# ------------------------------------------------------------- sampling / data


def sample_parameters(lower, upper, count, rng):
    """``count`` i.i.d. uniform draws in the box ``[lower, upper]``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return lower + (upper - lower) * rng.random((count, lower.size))


def _solve_one(args):
    problem, mu, tol = args
    try:
        return problem.system(mu).solve(tol=tol)
    except NumericalError as e:
        raise NumericalError(f"FOM solve failed at mu={np.asarray(mu).tolist()}: {e}") from e


def generate_snapshots(problem, mus, tol=1e-10, workers=1):
    """Snapshot matrix with column ``i`` the FOM solution at ``mus[i]``."""
    mus = np.atleast_2d(np.asarray(mus, dtype=np.float64))
    for mu in mus:
        problem.check(mu)
    jobs = [(problem, mu, tol) for mu in mus]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            cols = list(ex.map(_solve_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        cols = [_solve_one(j) for j in jobs]
    return np.column_stack(cols)


@dataclass
class SensorSet:
    inputs: np.ndarray
    outputs: np.ndarray
    coords_in: np.ndarray
    coords_out: np.ndarray


def eligible_sensors(problem, variant):
    """Candidate input and output nodes (in-region, non-Dirichlet)."""
    xy = problem.mesh.coords
    free = np.zeros(problem.n_dofs, dtype=bool)
    free[problem.free_nodes] = True
    tol = 1e-12
    if variant == "advdiff":
        cin = free & (xy[:, 1] <= 0.5 + tol)
        cout = free & (xy[:, 1] > 0.5 + tol)
    else:
        cin = free & (np.abs(xy[:, 1] - 1.0) < tol)
        cout = free & (xy[:, 0] <= 0.5 + tol) & (xy[:, 1] >= 0.5 - tol)
    return np.flatnonzero(cin), np.flatnonzero(cout)


def sample_sensors(problem, cfg: ExperimentConfig, rng) -> SensorSet:
    cin, cout = eligible_sensors(problem, cfg.variant)
    if cfg.n_in > cin.size:
        raise ConfigError(f"{cfg.n_in} input sensors requested but only {cin.size} eligible nodes")
    pin = np.sort(rng.choice(cin, cfg.n_in, replace=False))
    if cfg.autoencoder:
        pout = pin.copy()
    else:
        if cfg.n_out > cout.size:
            raise ConfigError(f"{cfg.n_out} output sensors requested but only {cout.size} eligible nodes")
        pout = np.sort(rng.choice(cout, cfg.n_out, replace=False))
    xy = problem.mesh.coords
    return SensorSet(pin.astype(np.int64), pout.astype(np.int64), xy[pin], xy[pout])


# ------------------------------------------------------------------ RB glue


class ReducedModel:
    """POD basis on the free nodes plus the lift of the Dirichlet data."""

    def __init__(self, problem, basis_free):
        self.problem = problem
        self.free = problem.free_nodes
        self.vf = np.ascontiguousarray(basis_free)
        self.lift = problem.lift

    @property
    def n(self) -> int:
        return self.vf.shape[1]

    def full_basis(self):
        v = np.zeros((self.problem.n_dofs, self.n))
        v[self.free] = self.vf
        return v

    def fields(self, u_n):
        """Full fields (N_h, B) from reduced coefficients (B, N)."""
        u = np.repeat(self.lift[:, None], u_n.shape[0], axis=1)
        u[self.free] += self.vf @ u_n.T
        return u

    def free_block(self, mu):
        a = self.problem.operator(mu)
        f = self.problem.lifted_rhs(mu, a)
        return as_csr(a[self.free][:, self.free]), f[self.free]

    def galerkin_solve(self, mu):
        """RB solution with the exactly projected operator (no hyper-reduction)."""
        a, f = self.free_block(mu)
        an = self.vf.T @ (a @ self.vf)
        return np.linalg.solve(an, self.vf.T @ f)


def _homogeneous(problem, snapshots):
    return snapshots[problem.free_nodes] - problem.lift[problem.free_nodes, None]


def affine_terms_free(problem):
    mats, vecs = problem.affine_components()
    fr = problem.free_nodes
    return [as_csr(a[fr][:, fr]) for a in mats], [f[fr] for f in vecs]


def project_terms(vf, mats, vecs):
    return (np.stack([vf.T @ (a @ vf) for a in mats]), np.stack([vf.T @ f for f in vecs]))


def batch_rb_solve(a_n, f_n, theta, q_a):
    """Reduced solutions (B, N) for coefficient rows theta (B, Q_a + Q_f)."""
    n = a_n.shape[1]
    mats = (theta[:, :q_a] @ a_n[:q_a].reshape(q_a, n * n)).reshape(-1, n, n)
    rhs = theta[:, q_a:] @ f_n
    u, _, shifted = kernels.factor_solve(mats, rhs)
    return u, shifted


def augment_dataset_with_rb(rb: ReducedModel, sensors: SensorSet, mus, solver):
    """Sensor rows of RB solutions at extra parameters.

    ``solver(mu)`` returns reduced coefficients.  Failing solves are skipped;
    the count is returned.
    """
    mus = np.atleast_2d(np.asarray(mus, dtype=np.float64)).reshape(-1, rb.problem.n_params)
    rows_in, rows_out, kept, skipped = [], [], [], 0
    for i, mu in enumerate(mus):
        try:
            u_n = solver(mu)
            if not np.all(np.isfinite(u_n)):
                raise NumericalError("non-finite reduced solution")
        except (NumericalError, np.linalg.LinAlgError) as e:
            log.warning("RB augmentation skipped mu=%s: %s", mu.tolist(), e)
            skipped += 1
            continue
        u = rb.fields(u_n[None, :])[:, 0]
        rows_in.append(u[sensors.inputs])
        rows_out.append(u[sensors.outputs])
        kept.append(i)
    n_in, n_out = sensors.inputs.size, sensors.outputs.size
    X = np.array(rows_in).reshape(-1, n_in)
    Y = np.array(rows_out).reshape(-1, n_out)
    return X, Y, mus[kept], skipped


def normalized_errors(Y, Y_pred):
    """Per-row ``||y - y_hat|| / ||y||``."""
    Y = np.atleast_2d(Y)
    Y_pred = np.atleast_2d(Y_pred)
    return np.linalg.norm(Y - Y_pred, axis=1) / np.linalg.norm(Y, axis=1)


# -------------------------------------------------------------------- offline


def offline_dir(root) -> Path:
    return Path(root) / "offline"


def run_offline(cfg: ExperimentConfig, root):
    """Build and persist every offline artifact; returns the in-memory arrays."""
    cfg.validate()
    problem = make_problem(cfg)
    p = problem.n_params
    with _stage("sampling"):
        mu_train = sample_parameters(problem.lower, problem.upper, cfg.n_snapshots, _rng(cfg.seed, _S_TRAIN_MU))
        n_extra = cfg.n_samples - cfg.n_snapshots
        mu_extra = (sample_parameters(problem.lower, problem.upper, n_extra, _rng(cfg.seed, _S_EXTRA_MU))
                    if n_extra else np.empty((0, p)))
        mu_test = sample_parameters(problem.lower, problem.upper, cfg.n_test, _rng(cfg.seed, _S_TEST_MU))
        seen = {tuple(m) for m in np.vstack([mu_train, mu_extra])}
        if any(tuple(m) in seen for m in mu_test):
            raise NumericalError("test parameters overlap the training parameters")
        sensors = sample_sensors(problem, cfg, _rng(cfg.seed, _S_SENSORS))
    with _stage("snapshots"):
        snaps = generate_snapshots(problem, mu_train, cfg.fom_tol, cfg.workers)
        test_fields = generate_snapshots(problem, mu_test, cfg.fom_tol, cfg.workers)
    with _stage("pod"):
        hom = _homogeneous(problem, snaps)
        basis = pod(hom, cfg.pod_tol)
        rb = ReducedModel(problem, basis.basis)
        aug_basis = pod(hom, cfg.augment_pod_tol)
        rb_aug = ReducedModel(problem, aug_basis.basis)

    arrays = {
        "mu_train": mu_train, "mu_extra": mu_extra, "mu_test": mu_test,
        "sensors_in": sensors.inputs, "sensors_out": sensors.outputs,
        "basis": rb.full_basis(), "singular_values": basis.singular_values,
        "lift": problem.lift, "free_nodes": problem.free_nodes,
        "test_fields": test_fields,
    }
    meta = {"n_rb": rb.n, "n_rb_augment": rb_aug.n}

    if cfg.variant == "advdiff":
        with _stage("projection"):
            mats, vecs = affine_terms_free(problem)
            a_n, f_n = project_terms(rb.vf, mats, vecs)
            a_aug, f_aug = project_terms(rb_aug.vf, mats, vecs)
            th_train = np.vstack([np.tile(problem.theta(m), 2) for m in mu_train])
            lo, hi = widen_ranges(th_train, positive=[True, False, False, True, False, False])
            arrays.update({"A_N": a_n, "f_N": f_n, "theta_lo_qa3": lo, "theta_hi_qa3": hi})

            def aug_solver(mu):
                th = np.tile(problem.theta(mu), 2)
                return np.linalg.solve(np.tensordot(th[:3], a_aug, 1), th[3:] @ f_aug)
    else:
        with _stage("mdeim"):
            m_snap = [rb.free_block(mu) for mu in mu_train[: cfg.deim_snapshots]]
            mdeim = mdeim_offline([a for a, _ in m_snap], cfg.q_a_max)
            deim = deim_offline(np.column_stack([f for _, f in m_snap]), cfg.q_f)
            del m_snap
        with _stage("projection"):
            mats = [mdeim.term(q) for q in range(mdeim.size)]
            vecs = [deim.term(q) for q in range(deim.size)]
            a_n, f_n = project_terms(rb.vf, mats, vecs)
            probes_a, probes_f = [], []
            for mu in mu_train:
                a, f = rb.free_block(mu)
                probes_a.append(mdeim.probe(a))
                probes_f.append(deim.probe(f))
            th_f = np.array([deim.coefficients(pf) for pf in probes_f])
            for q in sorted(set([cfg.q_a, *cfg.q_a_list])):
                mq = mdeim.truncate(q)
                th_a = np.array([mq.coefficients(pa[:q]) for pa in probes_a])
                lo, hi = widen_ranges(np.hstack([th_a, th_f]))
                arrays[f"theta_lo_qa{q}"] = lo
                arrays[f"theta_hi_qa{q}"] = hi
            arrays.update({
                "A_N": a_n, "f_N": f_n,
                "mdeim_basis": mdeim.basis, "mdeim_indices": mdeim.indices,
                "mdeim_indptr": mdeim.pattern[0], "mdeim_colind": mdeim.pattern[1],
                "deim_basis": deim.basis, "deim_indices": deim.indices,
            })
            aug_solver = rb_aug.galerkin_solve

    with _stage("dataset"):
        X = snaps[sensors.inputs].T
        Y = snaps[sensors.outputs].T
        Xa, Ya, mu_kept, skipped = augment_dataset_with_rb(rb_aug, sensors, mu_extra, aug_solver)
        # RB-consistency audit at a few FOM parameters
        n_chk = min(10, cfg.n_snapshots)
        Xc, Yc, _, _ = augment_dataset_with_rb(rb_aug, sensors, mu_train[:n_chk], aug_solver)
        chk = normalized_errors(np.hstack([X[:n_chk], Y[:n_chk]]), np.hstack([Xc, Yc]))
        arrays.update({
            "X": np.vstack([X, Xa]), "Y": np.vstack([Y, Ya]),
            "mu": np.vstack([mu_train, mu_kept]),
            "provenance": np.concatenate([np.full(len(X), FOM), np.full(len(Xa), RB_AUGMENTED)]),
            "X_test": test_fields[sensors.inputs].T, "Y_test": test_fields[sensors.outputs].T,
        })
        meta.update({"augment_skipped": int(skipped), "augment_check_max": float(np.max(chk))})
        if skipped:
            log.warning("%d RB augmentation solves skipped", skipped)

    meta.update({"config": cfg.to_dict(), "stage": "offline", "variant": cfg.variant,
                 "param_names": list(problem.param_names),
                 "param_lower": problem.lower.tolist(), "param_upper": problem.upper.tolist()})
    storage.save_arrays(offline_dir(root), arrays, meta)
    return arrays, meta


def load_offline(root):
    d = offline_dir(root)
    if not (d / "manifest.json").exists():
        raise MissingArtifactError(f"no offline artifacts under {d}; run the offline stage first")
    return storage.load_arrays(d)


def export_dataset_csv(root, path=None):
    arrays, _ = load_offline(root)
    X, Y, mu, prov = arrays["X"], arrays["Y"], arrays["mu"], arrays["provenance"]
    header = ([f"x{i}" for i in range(X.shape[1])] + [f"y{i}" for i in range(Y.shape[1])]
              + [f"mu{i}" for i in range(mu.shape[1])] + ["provenance"])
    names = np.where(prov == FOM, "fom", "rb-augmented")
    rows = [list(map(float, np.concatenate([X[i], Y[i], mu[i]]))) + [names[i]] for i in range(len(X))]
    path = Path(path) if path else offline_dir(root) / "dataset.csv"
    storage.write_csv(path, header, rows)
    return path


# ------------------------------------------------------------ model plumbing


def rb_layer_from_artifacts(cfg: ExperimentConfig, arrays, q_a=None):
    if cfg.variant == "advdiff":
        q_a = 3
    q_a = cfg.q_a if q_a is None else int(q_a)
    key = f"theta_lo_qa{q_a}"
    if key not in arrays:
        raise MissingArtifactError(f"no affine set for Q_a={q_a} in the offline artifacts")
    ops = AffineOperatorSet(arrays["A_N"][:q_a].copy(), arrays["f_N"].copy(), arrays[key],
                            arrays[f"theta_hi_qa{q_a}"],
                            "exact-affine" if cfg.variant == "advdiff" else "mdeim")
    basis = arrays["basis"]
    out = arrays["sensors_out"]
    if cfg.mode == "physical-parameters":
        tm = THETA_MAPS[cfg.variant]()
        mu = arrays["mu"][arrays["provenance"] == FOM]
        lo, hi = widen_ranges(mu, positive=[True, False])
        return RbOutputLayer(ops, basis[out], cfg.mode, lo, hi, tm, arrays["lift"][out])
    return RbOutputLayer(ops, basis[out], cfg.mode, offset=arrays["lift"][out])


def split_indices(n, val_fraction, seed):
    order = _rng(seed, _S_SPLIT).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def run_tag(cfg, kind="pdednn", q_a=None, seed=None):
    seed = cfg.seed if seed is None else seed
    parts = [kind]
    if cfg.variant == "nonaffine" and kind == "pdednn":
        parts.append(f"qa{cfg.q_a if q_a is None else q_a}")
    parts.append(f"s{seed}")
    return "_".join(parts)


def save_checkpoint(path, model: Network, meta: dict):
    arrays = {}
    for name, prm in zip(model.param_names(), model.params()):
        arrays[name] = prm
    head = model.head
    info = {
        "layers": [{"shape": list(l.W.shape), "activation": l.activation} for l in model.layers],
        "stage": "checkpoint",
    }
    if isinstance(head, RbOutputLayer):
        info.update({"head": "rb", "mode": head.mode, "scaler_lo": head.lo.tolist(),
                     "scaler_hi": head.hi.tolist(), "q_a": head.ops.q_a, "q_f": head.ops.q_f,
                     "theta_map": getattr(head.theta_map, "name", None)})
    else:
        info.update({"head": head.activation})
    info.update(meta)
    storage.save_arrays(path, arrays, info)


def load_checkpoint(path, head=None):
    arrays, manifest = storage.load_arrays(path)
    layers = []
    for i, spec in enumerate(manifest["layers"]):
        W, b = arrays[f"W{i + 1}"], arrays[f"b{i + 1}"].reshape(-1)
        if list(W.shape) != spec["shape"]:
            raise MissingArtifactError(f"checkpoint tensor W{i + 1} has shape {W.shape}, manifest says {spec['shape']}")
        layers.append(DenseLayer(W, b, spec["activation"]))
    if head is None:
        if manifest["head"] == "rb":
            raise ValueError("an RB checkpoint needs its output layer rebuilt from the offline artifacts")
        head = ActivationHead(manifest["head"])
    elif isinstance(head, RbOutputLayer):
        head.lo = np.asarray(manifest["scaler_lo"])
        head.hi = np.asarray(manifest["scaler_hi"])
    return Network(layers, head), manifest


def checkpoint_dir(root, tag):
    return Path(root) / "checkpoints" / tag


def reports_dir(root):
    return Path(root) / "reports"


def _write_history(path, history):
    storage.write_csv(path, HISTORY_FIELDS, [[getattr(r, f) for f in HISTORY_FIELDS] for r in history])


# ------------------------------------------------------------------- training


def run_train(cfg: ExperimentConfig, root, q_a=None, seed=None, epochs=None, callback=None):
    """Train a PDE-DNN on the offline dataset; returns ``(model, history, tag)``."""
    arrays, _ = load_offline(root)
    seed = cfg.seed if seed is None else int(seed)
    epochs = cfg.epochs if epochs is None else int(epochs)
    rb_layer = rb_layer_from_artifacts(cfg, arrays, q_a)
    X, Y = arrays["X"], arrays["Y"]
    tr, va = split_indices(len(X), cfg.val_fraction, seed)
    model = build_pdednn(X.shape[1], [int(h) for h in cfg.hidden], rb_layer, seed=[seed, _S_INIT],
                         out_scale=cfg.out_init_scale)
    history = train(model, X[tr], Y[tr], X[va], Y[va], epochs=epochs, batch_size=cfg.batch_size,
                    seed=[seed, _S_SHUFFLE], lr=cfg.lr, callback=callback, lr_min=cfg.lr_min)
    tag = run_tag(cfg, "pdednn", rb_layer.ops.q_a, seed)
    save_checkpoint(checkpoint_dir(root, tag), model,
                    {"kind": "pdednn", "seed": seed, "epochs": epochs, "config": cfg.to_dict()})
    _write_history(reports_dir(root) / f"history_{tag}.csv", history)
    return model, history, tag


# ----------------------------------------------------------------- evaluation


@dataclass
class EvaluationReport:
    tag: str
    n_test: int
    output_error_mean: float
    output_error_median: float
    param_error_mean: dict = field(default_factory=dict)
    param_error_median: dict = field(default_factory=dict)
    h1_error_mean: float | None = None
    h1_error_median: float | None = None
    rb_h1_error_mean: float | None = None
    rb_h1_error_median: float | None = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        out = [("n_test", self.n_test), ("output_error_mean", self.output_error_mean),
               ("output_error_median", self.output_error_median)]
        for k in self.param_error_mean:
            out.append((f"param_error_mean_{k}", self.param_error_mean[k]))
            out.append((f"param_error_median_{k}", self.param_error_median[k]))
        for k in ("h1_error_mean", "h1_error_median", "rb_h1_error_mean", "rb_h1_error_median"):
            v = getattr(self, k)
            if v is not None:
                out.append((k, v))
        out.extend(sorted(self.extra.items()))
        return out

    def write(self, path):
        storage.write_csv(path, ["metric", "value"], self.rows())


def _param_errors(mu_hat, mu, lower, upper, names):
    err = np.abs(mu_hat - mu) / (np.asarray(upper) - np.asarray(lower))
    return ({n: float(np.mean(err[:, i])) for i, n in enumerate(names)},
            {n: float(np.median(err[:, i])) for i, n in enumerate(names)})


def _h1_errors(problem, fields_hat, fields_ref):
    k = assemble_stiffness(problem.mesh, 1.0)
    m = assemble_mass(problem.mesh)
    return np.array([h1_error(fields_hat[:, i], fields_ref[:, i], k, m) for i in range(fields_ref.shape[1])])


def evaluate_model(cfg, model, arrays, meta, tag="model"):
    """Evaluation of a PDE-DNN on the stored test set."""
    Xt, Yt = arrays["X_test"], arrays["Y_test"]
    if len(Xt) == 0:
        raise ValueError("empty test set")
    head = model.head
    pred = model.predict(Xt)
    err = normalized_errors(Yt, pred)
    rep = EvaluationReport(tag, len(Xt), float(np.mean(err)), float(np.median(err)))
    rep.extra["n_shifted"] = int(head.n_shifted)
    if head.mode == "physical-parameters":
        mu_hat = model.latent(Xt)
        rep.param_error_mean, rep.param_error_median = _param_errors(
            mu_hat, arrays["mu_test"], meta["param_lower"], meta["param_upper"], meta["param_names"])
    if cfg.autoencoder:
        problem = make_problem(cfg)
        rb = ReducedModel(problem, arrays["basis"][problem.free_nodes])
        z, _ = mlp_forward(model, Xt)
        _, _, theta, _ = head.coefficients(z)
        u_n, _, _ = head.forward_theta(theta)
        h1 = _h1_errors(problem, rb.fields(u_n), arrays["test_fields"])
        rep.h1_error_mean, rep.h1_error_median = float(np.mean(h1)), float(np.median(h1))
        ref = pure_rb_h1(cfg, arrays, problem, rb)
        rep.rb_h1_error_mean, rep.rb_h1_error_median = float(np.mean(ref)), float(np.median(ref))
    return rep


def pure_rb_h1(cfg, arrays, problem, rb):
    """H1 errors of the RB solution at the true test parameters (affine variant)."""
    th = np.vstack([np.tile(problem.theta(m), 2) for m in arrays["mu_test"]])
    u_n, _ = batch_rb_solve(arrays["A_N"], arrays["f_N"], th, 3)
    return _h1_errors(problem, rb.fields(u_n), arrays["test_fields"])


def run_eval(cfg: ExperimentConfig, root, q_a=None, seed=None):
    arrays, meta = load_offline(root)
    tag = run_tag(cfg, "pdednn", q_a if cfg.variant == "nonaffine" else None, seed)
    path = checkpoint_dir(root, tag)
    if not (path / "manifest.json").exists():
        raise MissingArtifactError(f"no checkpoint {tag} under {path.parent}; run train first")
    model, _ = load_checkpoint(path, rb_layer_from_artifacts(cfg, arrays, q_a))
    rep = evaluate_model(cfg, model, arrays, meta, tag)
    rep.write(reports_dir(root) / f"eval_{tag}.csv")
    return rep


# ------------------------------------------------------------------ baselines


def _deim_from_arrays(arrays, n_free):
    pattern = (arrays["mdeim_indptr"], arrays["mdeim_colind"], (n_free, n_free))
    if arrays["mdeim_basis"].shape[0] != pattern[1].size:
        raise MissingArtifactError("stored MDEIM basis does not match its sparsity pattern")
    mdeim = DeimModel(arrays["mdeim_basis"], arrays["mdeim_indices"], np.empty(0), "matrix", pattern)
    deim = DeimModel(arrays["deim_basis"], arrays["deim_indices"], np.empty(0), "vector")
    return mdeim, deim


def run_rb_baseline(cfg: ExperimentConfig, root, q_values=None):
    """Standalone RB + (M)DEIM errors at the test sensors for each ``Q_a``."""
    if cfg.variant != "nonaffine":
        raise ConfigError("the RB + MDEIM baseline applies to the nonaffine variant")
    arrays, _ = load_offline(root)
    problem = make_problem(cfg)
    rb = ReducedModel(problem, arrays["basis"][problem.free_nodes])
    mdeim, deim = _deim_from_arrays(arrays, problem.free_nodes.size)
    q_values = sorted(set(cfg.q_a_list if q_values is None else q_values))
    probes_a, th_f = [], []
    for mu in arrays["mu_test"]:
        a, f = rb.free_block(mu)
        probes_a.append(mdeim.probe(a))
        th_f.append(deim.coefficients(deim.probe(f)))
    th_f = np.array(th_f)
    out = arrays["sensors_out"]
    results = {}
    for q in q_values:
        mq = mdeim.truncate(q)
        th_a = np.array([mq.coefficients(pa[:q]) for pa in probes_a])
        u_n, shifted = batch_rb_solve(arrays["A_N"], arrays["f_N"], np.hstack([th_a, th_f]), q)
        pred = rb.fields(u_n)[out].T
        err = normalized_errors(arrays["Y_test"], pred)
        results[q] = {"mean": float(np.mean(err)), "median": float(np.median(err)),
                      "n_shifted": int(np.count_nonzero(shifted))}
    storage.write_csv(reports_dir(root) / "rb_baseline.csv", ["q_a", "error_mean", "error_median", "n_shifted"],
                      [[q, r["mean"], r["median"], r["n_shifted"]] for q, r in results.items()])
    return results


class MinMaxScaler:
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        span = np.asarray(hi, dtype=np.float64) - self.lo
        self.span = np.where(span > 0, span, 1.0)

    @classmethod
    def fit(cls, data):
        return cls(data.min(axis=0), data.max(axis=0))

    def transform(self, v):
        return (v - self.lo) / self.span

    def inverse(self, s):
        return self.lo + s * self.span


def baseline_targets(kind, Y, mu):
    if kind == "mlp_mu":
        return mu
    if kind == "mlp_out":
        return Y
    return np.hstack([Y, mu])


def run_baselines_mlp(cfg: ExperimentConfig, root, kinds=("mlp", "mlp_mu", "mlp_out"), seed=None, epochs=None):
    """Plain-MLP comparators trained on min-max scaled targets."""
    arrays, meta = load_offline(root)
    seed = cfg.seed if seed is None else int(seed)
    epochs = cfg.epochs if epochs is None else int(epochs)
    X, Y, mu = arrays["X"], arrays["Y"], arrays["mu"]
    tr, va = split_indices(len(X), cfg.val_fraction, seed)
    n_out = Y.shape[1]
    reports = {}
    for kind in kinds:
        T = baseline_targets(kind, Y, mu)
        scaler = MinMaxScaler.fit(T[tr])
        Ts = scaler.transform(T)
        model = build_baseline(kind, X.shape[1], [int(h) for h in cfg.hidden], n_out, mu.shape[1],
                               seed=[seed, _S_INIT])
        history = train(model, X[tr], Ts[tr], X[va], Ts[va], epochs=epochs, batch_size=cfg.batch_size,
                        seed=[seed, _S_SHUFFLE], lr=cfg.lr, lr_min=cfg.lr_min)
        tag = run_tag(cfg, kind, None, seed)
        save_checkpoint(checkpoint_dir(root, tag), model,
                        {"kind": kind, "seed": seed, "epochs": epochs, "config": cfg.to_dict(),
                         "target_lo": scaler.lo.tolist(), "target_span": scaler.span.tolist()})
        _write_history(reports_dir(root) / f"history_{tag}.csv", history)
        pred = scaler.inverse(model.predict(arrays["X_test"]))
        rep = EvaluationReport(tag, len(pred), float("nan"), float("nan"))
        if kind in ("mlp", "mlp_out"):
            err = normalized_errors(arrays["Y_test"], pred[:, :n_out])
            rep.output_error_mean, rep.output_error_median = float(np.mean(err)), float(np.median(err))
        if kind in ("mlp", "mlp_mu"):
            mu_hat = pred[:, -mu.shape[1]:]
            rep.param_error_mean, rep.param_error_median = _param_errors(
                mu_hat, arrays["mu_test"], meta["param_lower"], meta["param_upper"], meta["param_names"])
        rep.write(reports_dir(root) / f"eval_{tag}.csv")
        reports[kind] = rep
    return reports


# ---------------------------------------------------------------- diagnostics


def run_gradcheck(cfg: ExperimentConfig, root, q_a=None, seed=None, step=1e-5, tolerance=1e-5,
                  max_per_group=20):
    arrays, _ = load_offline(root)
    seed = cfg.seed if seed is None else int(seed)
    rb_layer = rb_layer_from_artifacts(cfg, arrays, q_a)
    X, Y = arrays["X"], arrays["Y"]
    model = build_pdednn(X.shape[1], [int(h) for h in cfg.hidden], rb_layer, seed=[seed, _S_INIT],
                         out_scale=cfg.out_init_scale)
    i = int(_rng(seed, _S_GRADCHECK).integers(len(X)))
    return gradient_check(model, X[i:i + 1].copy(), Y[i:i + 1], step=step, tolerance=tolerance,
                          max_per_group=max_per_group, seed=seed)


def run_fom_solve(cfg: ExperimentConfig, mu, out):
    problem = make_problem(cfg)
    mu = problem.check(np.asarray(mu, dtype=np.float64))
    system = problem.system(mu)
    u = system.solve(tol=cfg.fom_tol)
    meta = {"stage": "fom-solve", "config": cfg.to_dict(), "mu": mu.tolist(),
            "residual": system.residual(u)}
    storage.save_arrays(out, {"u": u, "coords": problem.mesh.coords}, meta)
    return u, meta
