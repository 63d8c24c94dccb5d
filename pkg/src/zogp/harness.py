"""Hanging-chain experiments: OCP construction, data generation, closed loop, timing.

Numeric output is CSV with ``#``-prefixed metadata lines (git revision,
seed, config digest); plots are SVG.
"""

import csv
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import ChainConfig, ChainOde, DiscreteModel, resting_state
from .errors import InvalidArgumentError, ZogpError
from .gp import FeatureMap, GpDataset, KernelHyperparams, fit_gp, optimize_hyperparams, prior_model
from .sqp import (
    ChanceConstraint,
    OcpSpec,
    SolverOptions,
    SolverStats,
    initial_guess,
    naive_iteration,
    solve_naive,
    solve_zero_order,
    zero_order_iteration,
)

log = logging.getLogger(__name__)

MODES = ("nominal", "zero_order", "naive")


@dataclass
class ExperimentConfig:
    """All knobs of the chain experiments; loadable from a TOML file."""

    chain: ChainConfig = field(default_factory=ChainConfig)
    horizon: int = 10
    n_mass_sweep: tuple = (3, 4, 5, 6, 7)
    data_sizes: tuple = (0, 150)
    modes: tuple = ("zero_order", "naive")
    n_x0: int = 10
    seed: int = 0
    prob: float = 0.95
    tightening: str = "gaussian"
    output_dir: str = "results"
    workers: tuple = (1,)
    q_pos: float = 1.0
    q_vel: float = 0.1
    r_input: float = 0.1
    u_max: float = 1.0
    closed_loop_steps: int = 60
    excitation: tuple = (1.0, 1.0, 1.0)
    excitation_steps: int = 5
    init_perturbation: float = 0.01
    plant_noise: float = 0.0
    w_cov: float = 1e-6
    gp_signal_variance: float = 1e-4
    gp_noise_variance: float = 1e-6
    gp_lengthscale_pos: float = 0.03
    gp_lengthscale_vel: float = 0.5
    gp_optimize: bool = False
    gp_optimize_rows: int = 150
    gp_optimize_iterations: int = 200
    scaling_iterations: int = 20
    scaling_warmup: int = 3
    scaling_horizon: int = 5
    naive_budget: float = 60.0
    max_sqp_iter: int = 50

    def __post_init__(self):
        if isinstance(self.chain, dict):
            self.chain = ChainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.chain.items()})
        for name in ("n_mass_sweep", "data_sizes", "modes", "workers", "excitation"):
            setattr(self, name, tuple(getattr(self, name)))
        if not self.n_mass_sweep or not self.data_sizes or not self.modes or not self.workers:
            raise InvalidArgumentError("sweep lists must be non-empty")
        if min(self.n_mass_sweep) < 3:
            raise InvalidArgumentError("n_mass must be at least 3")
        for m in self.modes:
            if m not in MODES:
                raise InvalidArgumentError(f"unknown mode {m!r}")
        if self.horizon < 1 or self.n_x0 < 1 or self.scaling_horizon < 1:
            raise InvalidArgumentError("horizons and n_x0 must be positive")
        if not 0.0 < self.prob <= 1.0:
            raise InvalidArgumentError("prob must lie in (0, 1]")
        if min(self.workers) < 1:
            raise InvalidArgumentError("worker counts must be positive")

    def chain_for(self, n_mass):
        return dataclasses.replace(self.chain, n_mass=int(n_mass))

    def digest(self):
        return hashlib.sha256(json.dumps(config_to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    return json.loads(json.dumps(d, default=list))


def load_config(path):
    """Read an :class:`ExperimentConfig` from TOML; unknown keys are rejected."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
    if "chain" in raw:
        ck = {f.name for f in dataclasses.fields(ChainConfig)}
        bad = set(raw["chain"]) - ck
        if bad:
            raise InvalidArgumentError(f"unknown chain keys: {sorted(bad)}")
    return ExperimentConfig(**raw)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def chain_feature_map(chain):
    """GP inputs: x-position and x-velocity of every free mass."""
    idx = []
    for j in range(chain.n_free):
        idx += [chain.pos_index(j).start, chain.vel_index(j).start]
    return FeatureMap(idx, chain.n_x, chain.n_u)


def default_hyperparams(cfg, chain):
    n_free = chain.n_free
    ls = np.tile([cfg.gp_lengthscale_pos, cfg.gp_lengthscale_vel], n_free)
    return KernelHyperparams(ls, cfg.gp_signal_variance, cfg.gp_noise_variance)


def nominal_model(chain):
    return DiscreteModel(ChainOde(chain, alpha_lat=0.0), chain.ts)


def plant_model(chain):
    return DiscreteModel(ChainOde(chain), chain.ts)


def build_chain_ocp(cfg, n_mass, gp_model=None, x_current=None, mode="zero_order"):
    """Tracking OCP that steers the chain back to rest while avoiding the wall.

    ``mode == 'nominal'`` drops all uncertainty (zero GP variance and
    process noise), so no constraint is tightened.
    """
    if n_mass < 3:
        raise InvalidArgumentError("n_mass must be at least 3")
    chain = cfg.chain_for(n_mass)
    nx, nu, nw = chain.n_x, chain.n_u, chain.n_w
    fmap = chain_feature_map(chain)
    hp = default_hyperparams(cfg, chain)
    if gp_model is None or mode == "nominal":
        hp_use = hp if mode != "nominal" else KernelHyperparams(hp.lengthscales, 0.0, 0.0)
        gp_model = prior_model([hp_use] * nw)
    x_rest = resting_state(chain)
    w = np.full(nx, cfg.q_vel)
    for axis in range(3):
        w[chain.position_rows(axis)] = cfg.q_pos
    q = np.diag(w)
    cons = []
    for r in chain.position_rows(1):
        c = np.zeros(nx)
        c[r] = -1.0
        cons.append(ChanceConstraint(c, chain.y_wall, cfg.prob, cfg.tightening))
    return OcpSpec(
        model=nominal_model(chain),
        gp=gp_model,
        feature_map=fmap,
        b_mat=chain.noise_matrix(),
        w_cov=np.zeros(nw) if mode == "nominal" else np.full(nw, cfg.w_cov),
        q_mat=q,
        r_mat=cfg.r_input * np.eye(nu),
        q_terminal=q,
        x_ref=x_rest,
        u_ref=np.zeros(nu),
        x_current=x_rest if x_current is None else x_current,
        horizon=cfg.horizon,
        constraints=cons,
        u_lb=-cfg.u_max * np.ones(nu),
        u_ub=cfg.u_max * np.ones(nu),
    )


def excited_state(cfg, n_mass, rng=None):
    """Resting chain (free positions optionally perturbed) after the excitation phase."""
    chain = cfg.chain_for(n_mass)
    x = resting_state(chain)
    if rng is not None and cfg.init_perturbation > 0:
        for j in range(chain.n_free):
            x[chain.pos_index(j)] += rng.normal(0.0, cfg.init_perturbation, 3)
    plant = plant_model(chain)
    u = np.asarray(cfg.excitation, dtype=float)
    for _ in range(cfg.excitation_steps):
        x = plant.batch(x, u, sensitivities=False)[0][0]
    return x


def _solve(spec, mode, init, cfg, workers=1):
    opts = SolverOptions(max_iter=cfg.max_sqp_iter, mode="naive" if mode == "naive" else "zero_order",
                         workers=workers)
    if mode == "naive":
        return solve_naive(spec, init, opts)
    return solve_zero_order(spec, init, opts)


# ---------------------------------------------------------------------------
# data generation and closed loop
# ---------------------------------------------------------------------------


def generate_training_data(cfg, n_mass, seed=None):
    """Model-mismatch samples from nominal MPC closed loops on the true plant.

    Each of ``n_x0`` perturbed, excited starts contributes 15 rows
    ``(z, B^T (x_next - psi(x, u)))``. Starts whose controller fails are
    skipped and logged.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    chain = cfg.chain_for(n_mass)
    plant = plant_model(chain)
    nominal = nominal_model(chain)
    fmap = chain_feature_map(chain)
    b = chain.noise_matrix()
    zs, ds = [], []
    skipped = 0
    for _ in range(cfg.n_x0):
        x = excited_state(cfg, n_mass, rng)
        rows_z, rows_d = [], []
        it = None
        try:
            for _k in range(15):
                spec = build_chain_ocp(cfg, n_mass, None, x, mode="nominal")
                init = it.shifted(spec) if it is not None else None
                it, stats = _solve(spec, "nominal", init, cfg)
                u = it.us[0]
                x_next = plant.batch(x, u, sensitivities=False)[0][0]
                if cfg.plant_noise > 0:
                    x_next = x_next + b @ rng.normal(0.0, cfg.plant_noise, chain.n_w)
                psi = nominal.batch(x, u, sensitivities=False)[0][0]
                rows_z.append(fmap(x, u)[0])
                rows_d.append(b.T @ (x_next - psi))
                x = x_next
        except ZogpError as exc:
            skipped += 1
            log.warning("training start skipped: %s", exc)
            continue
        zs += rows_z
        ds += rows_d
    meta = {"n_mass": n_mass, "seed": seed, "starts": cfg.n_x0, "skipped": skipped}
    return GpDataset(np.array(zs).reshape(-1, fmap.n_z), np.array(ds).reshape(-1, chain.n_w), meta)


def fit_chain_gp(cfg, data, n_mass):
    """Per-output hyperparameters (optionally optimized on a leading subset), then exact GP."""
    chain = cfg.chain_for(n_mass)
    hp0 = default_hyperparams(cfg, chain)
    if len(data) == 0:
        return prior_model([hp0] * chain.n_w)
    hps = []
    if cfg.gp_optimize:
        sub = data.subset(np.arange(min(len(data), cfg.gp_optimize_rows)))
        for j in range(data.n_w):
            hps.append(optimize_hyperparams(sub, hp0, output_index=j, iterations=cfg.gp_optimize_iterations))
    else:
        hps = [hp0] * data.n_w
    return fit_gp(data, hps)


@dataclass
class ClosedLoopLog:
    inputs: np.ndarray
    states: np.ndarray
    margins: np.ndarray  # (steps, n_walls): p_y - y_wall
    iterations: list
    solve_seconds: list
    failures: int

    @property
    def min_margin(self):
        return float(np.min(self.margins))

    @property
    def violations(self):
        return int(np.sum(np.min(self.margins, axis=1) < 0))

    def __len__(self):
        return self.inputs.shape[0]


def run_closed_loop(cfg, mode, gp_model=None, steps=None, seed=None, n_mass=None):
    """Excite the true plant, then close the loop with the chosen controller.

    A failed solve keeps the previous input (logged as a failure).
    """
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    n_mass = cfg.chain.n_mass if n_mass is None else n_mass
    steps = cfg.closed_loop_steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    chain = cfg.chain_for(n_mass)
    plant = plant_model(chain)
    b = chain.noise_matrix()
    rows = chain.position_rows(1)
    x = excited_state(cfg, n_mass)
    u_prev = np.zeros(chain.n_u)
    it = None
    us, xs, margins, iters, secs = [], [], [], [], []
    failures = 0
    for _ in range(steps):
        spec = build_chain_ocp(cfg, n_mass, gp_model, x, mode=mode)
        init = it.shifted(spec) if it is not None else None
        t0 = time.perf_counter()
        try:
            it, stats = _solve(spec, mode, init, cfg, workers=max(cfg.workers))
            u = it.us[0]
            iters.append(stats.iterations)
        except ZogpError as exc:
            log.warning("closed-loop solve failed: %s", exc)
            failures += 1
            u = u_prev
            it = None
            iters.append(-1)
        secs.append(time.perf_counter() - t0)
        x = plant.batch(x, u, sensitivities=False)[0][0]
        if cfg.plant_noise > 0:
            x = x + b @ rng.normal(0.0, cfg.plant_noise, chain.n_w)
        us.append(u)
        xs.append(x)
        margins.append(x[rows] - chain.y_wall)
        u_prev = u
    return ClosedLoopLog(np.array(us), np.array(xs), np.array(margins), iters, secs, failures)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def git_revision():
    """Short hash of the checked-out revision, or ``unknown`` outside a repository."""
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_csv(path, header, rows, cfg, extra=None):
    """CSV with ``#`` metadata lines: git revision, seed, config digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# git: {git_revision()}\n# seed: {cfg.seed}\n# config: {cfg.digest()}\n")
        for k, v in (extra or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv` as dicts (metadata lines skipped)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# timing experiments
# ---------------------------------------------------------------------------


@dataclass
class ScalingRow:
    n_mass: int
    n_x: int
    mode: str
    data_size: int
    workers: int
    seconds: float  # median per SQP iteration, nan when timed out
    timed: int
    timed_out: bool

    def as_row(self):
        return [self.n_mass, self.n_x, self.mode, self.data_size, self.workers,
                f"{self.seconds:.6e}", self.timed, int(self.timed_out)]


SCALING_HEADER = ["n_mass", "n_x", "mode", "data_size", "workers", "seconds_per_iteration", "timed",
                  "timed_out"]


def time_iterations(spec, mode, warmup=3, count=20, budget=None, workers=1, stats=None):
    """Median wall time of ``count`` SQP iterations after ``warmup`` untimed ones.

    The iterations continue from each other (starting at the roll-in), so
    late ones are taken at or near the converged point. Returns ``None`` if
    the first iteration exceeds ``budget`` seconds.
    """
    naive = mode == "naive"
    step = naive_iteration if naive else zero_order_iteration
    opts = SolverOptions(mode="naive" if naive else "zero_order", workers=workers)
    it = initial_guess(spec)
    ws = {}
    times = []
    for k in range(warmup + count):
        t = time.perf_counter()
        it = step(spec, it, opts, stats if k >= warmup else None, ws)
        dt = time.perf_counter() - t
        if k == 0 and budget is not None and dt > budget:
            return None
        if k >= warmup:
            times.append(dt)
    return float(np.median(times))


def _gp_cache(cfg):
    cache = {}

    def get(n_mass, data_size):
        key = (n_mass, data_size)
        if key not in cache:
            if data_size == 0:
                cache[key] = None
            else:
                sub = dataclasses.replace(cfg, n_x0=max(1, -(-data_size // 15)))
                cache[key] = fit_chain_gp(sub, generate_training_data(sub, n_mass), n_mass)
        return cache[key]

    return get


def run_scaling_experiment(cfg, out_dir=None, horizon=None, n_mass_sweep=None, progress=None):
    """Per-iteration timings over the chain sizes for every mode and data size.

    The covariance-augmented mode only supports D = 0 and is dropped for the
    remaining sizes once one iteration exceeds ``cfg.naive_budget``. With
    ``out_dir`` set, ``scaling.csv`` and ``scaling.svg`` are written.
    """
    horizon = cfg.scaling_horizon if horizon is None else horizon
    sweep = tuple(cfg.n_mass_sweep if n_mass_sweep is None else n_mass_sweep)
    hcfg = dataclasses.replace(cfg, horizon=horizon)
    gps = _gp_cache(hcfg)
    rows = []
    naive_dead = False
    for n_mass in sorted(sweep):
        x0 = excited_state(hcfg, n_mass)
        for mode in hcfg.modes:
            for d_size in hcfg.data_sizes:
                if mode == "naive" and d_size > 0:
                    continue
                for workers in hcfg.workers:
                    spec = build_chain_ocp(hcfg, n_mass, gps(n_mass, d_size), x0, mode=mode)
                    n_x = spec.n_x
                    if mode == "naive" and naive_dead:
                        rows.append(ScalingRow(n_mass, n_x, mode, d_size, workers, float("nan"), 0, True))
                        continue
                    budget = hcfg.naive_budget if mode == "naive" else None
                    sec = time_iterations(spec, mode, hcfg.scaling_warmup, hcfg.scaling_iterations, budget,
                                          workers)
                    if sec is None:
                        naive_dead = True
                        rows.append(ScalingRow(n_mass, n_x, mode, d_size, workers, float("nan"), 0, True))
                    else:
                        rows.append(ScalingRow(n_mass, n_x, mode, d_size, workers, sec,
                                               hcfg.scaling_iterations, False))
                    if progress is not None:
                        progress(rows[-1])
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "scaling.csv", SCALING_HEADER, [r.as_row() for r in rows], cfg,
                  {"horizon": horizon})
        plot_scaling(rows, out / "scaling.svg")
    return rows


def loglog_slope(n_x, seconds):
    """Least-squares slope of log(seconds) against log(n_x)."""
    n_x = np.asarray(n_x, dtype=float)
    seconds = np.asarray(seconds, dtype=float)
    ok = np.isfinite(seconds) & (seconds > 0)
    if np.count_nonzero(ok) < 2:
        raise InvalidArgumentError("need at least two finite timings for a slope")
    return float(np.polyfit(np.log(n_x[ok]), np.log(seconds[ok]), 1)[0])


def scaling_summary(rows, data_size=0, workers=None):
    """Slopes per mode and the speed-up at the largest n_x both modes completed."""
    sel = [r for r in rows if r.data_size == data_size and (workers is None or r.workers == workers)]
    by_mode = {}
    for r in sel:
        if not r.timed_out:
            by_mode.setdefault(r.mode, {})[r.n_x] = r.seconds
    slopes = {m: loglog_slope(list(v), list(v.values())) for m, v in by_mode.items() if len(v) >= 2}
    speedup, at = None, None
    if "naive" in by_mode and "zero_order" in by_mode:
        common = set(by_mode["naive"]) & set(by_mode["zero_order"])
        if common:
            at = max(common)
            speedup = by_mode["naive"][at] / by_mode["zero_order"][at]
    return {"slopes": slopes, "speedup": speedup, "speedup_n_x": at}


def plot_scaling(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups = {}
    for r in rows:
        if not r.timed_out:
            groups.setdefault((r.mode, r.data_size, r.workers), []).append((r.n_x, r.seconds))
    for (mode, d_size, workers), pts in sorted(groups.items()):
        pts.sort()
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"{mode} D={d_size} w={workers}")
    ax.set_xlabel("n_x")
    ax.set_ylabel("seconds per SQP iteration")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


PROFILE_HEADER = ["mode", "data_size", "workers", "category", "seconds", "share"]


def run_profile_experiment(cfg, out_dir=None, n_mass=None, progress=None):
    """Zero-order timing profile per category for every data size and worker count.

    Returns ``{(data_size, workers): {category: (seconds, share)}}``.
    """
    n_mass = max(cfg.n_mass_sweep) if n_mass is None else n_mass
    gps = _gp_cache(cfg)
    x0 = excited_state(cfg, n_mass)
    out = {}
    rows = []
    for d_size in cfg.data_sizes:
        gp = gps(n_mass, d_size)
        for workers in cfg.workers:
            spec = build_chain_ocp(cfg, n_mass, gp, x0)
            stats = SolverStats()
            time_iterations(spec, "zero_order", cfg.scaling_warmup, cfg.scaling_iterations, None, workers, stats)
            shares = stats.shares()
            out[(d_size, workers)] = {c: (stats.times[c], shares[c]) for c in stats.times}
            for c in stats.times:
                rows.append(["zero_order", d_size, workers, c, f"{stats.times[c]:.6e}", f"{shares[c]:.4f}"])
            if progress is not None:
                progress(d_size, workers, shares)
    if out_dir is not None:
        write_csv(Path(out_dir) / "profile.csv", PROFILE_HEADER, rows, cfg, {"n_mass": n_mass})
    return out


# ---------------------------------------------------------------------------
# covariance-heuristic demonstration on a pendulum
# ---------------------------------------------------------------------------


def pendulum_ocp(horizon=20, ts=0.1, theta_ref=1.0, theta_max=1.1, w_var=0.02, signal_variance=1e-3,
                 prob=0.95, u_max=10.0):
    """Pendulum at rest asked to swing to ``theta_ref`` below a chance-constrained angle bound.

    Process noise and the GP prior act on the angular velocity. Because the
    linearization depends strongly on the angle, covariances propagated along
    the resting trajectory differ markedly from those along the swung-up one.
    """
    from .dynamics import PendulumOde
    from .gp import FeatureMap, KernelHyperparams

    model = DiscreteModel(PendulumOde(), ts)
    hp = KernelHyperparams(np.ones(2), signal_variance, 0.0)
    c = np.array([1.0, 0.0])
    return OcpSpec(
        model=model,
        gp=prior_model([hp]),
        feature_map=FeatureMap([0, 1], 2, 1),
        b_mat=np.array([[0.0], [1.0]]),
        w_cov=np.array([w_var]),
        q_mat=np.diag([10.0, 0.1]),
        r_mat=np.array([[0.01]]),
        q_terminal=np.diag([10.0, 0.1]),
        x_ref=np.array([theta_ref, 0.0]),
        u_ref=np.zeros(1),
        x_current=np.zeros(2),
        horizon=horizon,
        constraints=[ChanceConstraint(c, -theta_max, prob)],
        u_lb=np.array([-u_max]),
        u_ub=np.array([u_max]),
    )
