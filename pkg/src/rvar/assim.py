"""Reduced-space strong-constraint 4D-Var through the surrogate.

The control variable is the surrogate's normalized input window ``z``
(T_in x k). For a candidate ``z`` the cost is::

    J(z) = 1/2 * b0 * |z - z_b|^2
         + 1/2 * r * s * sum_i sum_obs (H(reconstruct(h(z))_i) - y_i)^2

with ``s = 1 / (m * T_out)`` when misfit normalization is on and 1
otherwise. Gradients come from the autodiff tape.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import container
from .net import SurrogateModel, _norm_of, forecast, forward_graph, param_vars, reduce_window
from .pod import FieldSeries, PodBasis, reconstruct

log = logging.getLogger(__name__)


class AssimilationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObservationSet:
    """Point observations on a fixed set of grid locations.

    ``values[j, l]`` observes location ``(rows[l], cols[l])`` at forecast
    step ``times[j]`` (1-based lead day).
    """

    rows: np.ndarray
    cols: np.ndarray
    times: np.ndarray
    values: np.ndarray
    grid_dims: tuple[int, int]
    noise_std: float = 0.0

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        h, w = self.grid_dims
        if rows.shape != cols.shape or rows.ndim != 1 or rows.size < 1:
            raise ValueError("need m >= 1 locations with matching row/col arrays")
        if rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w:
            raise ValueError("observation location outside the grid")
        if np.unique(rows * w + cols).size != rows.size:
            raise ValueError("duplicate observation locations")
        if values.shape != (times.size, rows.size):
            raise ValueError(f"values shape {values.shape} != ({times.size}, {rows.size})")
        if times.min() < 1:
            raise ValueError("observation times are 1-based forecast steps")
        if not np.all(np.isfinite(values)):
            raise ValueError("observation values must be finite")
        for name, arr in (("rows", rows), ("cols", cols), ("times", times), ("values", values)):
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "grid_dims", (int(h), int(w)))

    @property
    def m(self) -> int:
        return self.rows.size

    @property
    def flat_index(self) -> np.ndarray:
        return self.rows * self.grid_dims[1] + self.cols

    def save(self, path) -> None:
        container.save(path, {
            "loc_rows": self.rows, "loc_cols": self.cols, "times": self.times,
            "values": self.values, "grid": np.asarray(self.grid_dims, float),
            "noise_std": np.asarray([self.noise_std]),
        })

    @classmethod
    def load(cls, path) -> "ObservationSet":
        b = container.load(path)
        container.require(b, "loc_rows", "loc_cols", "times", "values", "grid")
        noise = float(b["noise_std"][0]) if "noise_std" in b else 0.0
        return cls(b["loc_rows"], b["loc_cols"], b["times"], b["values"],
                   tuple(int(g) for g in b["grid"]), noise)


def observe(truth, n_locations: int, noise_std: float = 0.0, seed=0) -> ObservationSet:
    """Sample ``n_locations`` grid points (one draw for all steps) plus Gaussian noise.

    ``truth`` is the (T_out, H, W) true field over the forecast window.
    """
    if isinstance(truth, FieldSeries):
        truth = truth.data
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim != 3:
        raise ValueError("truth must be (T_out, H, W)")
    t_out, h, w = truth.shape
    n = h * w
    if not 1 <= n_locations <= n:
        raise ValueError(f"n_locations must be in [1, {n}], got {n_locations}")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=n_locations, replace=False))
    values = truth.reshape(t_out, n)[:, idx]
    if noise_std > 0:
        values = values + rng.normal(0.0, noise_std, size=values.shape)
    return ObservationSet(idx // w, idx % w, np.arange(1, t_out + 1), values, (h, w), noise_std)


@dataclass(frozen=True)
class DaConfig:
    b0_inv_scale: float = 1e-2
    r_inv_scale: float = 1.0
    misfit_normalization: bool = True
    max_iters: int = 200
    grad_tol: float = 1e-6
    step_tol: float = 1e-9
    memory: int = 10

    def __post_init__(self):
        if self.b0_inv_scale < 0 or self.r_inv_scale < 0:
            raise ValueError("covariance scales must be non-negative")
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 0 or self.memory < 1:
            raise ValueError("max_iters must be >= 0 and memory >= 1")


@dataclass
class DaProblem:
    model: SurrogateModel
    basis: PodBasis
    background: np.ndarray  # (T_in, k) raw POD coefficients of the background input window
    observations: ObservationSet
    config: DaConfig = field(default_factory=DaConfig)

    def __post_init__(self):
        if self.model.k != self.basis.k:
            raise ValueError(f"model k={self.model.k} != basis k={self.basis.k}")
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.background.shape != (self.model.t_in, self.model.k):
            raise ValueError(f"background shape {self.background.shape} != "
                             f"({self.model.t_in}, {self.model.k})")
        if self.observations.times.max() > self.model.t_out:
            raise ValueError("observation time beyond the forecast window")
        if self.basis.grid_dims is not None and \
                tuple(self.basis.grid_dims) != self.observations.grid_dims:
            raise ValueError("observation grid does not match the basis grid")
        obs = self.observations
        self._phi_obs_t = np.ascontiguousarray(self.basis.modes[obs.flat_index].T)  # (k, m)
        self._mean_obs = self.basis.temporal_mean[obs.flat_index]
        self._rows = None if np.array_equal(obs.times, np.arange(1, self.model.t_out + 1)) \
            else obs.times - 1
        norm = _norm_of(self.model)
        self._norm = norm
        self.background_z = norm.apply(self.background)

    @property
    def data_weight(self) -> float:
        c = self.config
        w = c.r_inv_scale
        if c.misfit_normalization:
            w /= self.observations.m * self.observations.times.size
        return w

    def to_z(self, coeffs) -> np.ndarray:
        return self._norm.apply(coeffs)

    def from_z(self, z) -> np.ndarray:
        return self._norm.invert(z)


def _record(problem: DaProblem, candidate) -> tuple[ad.Tape, ad.Var, ad.Var]:
    cand = np.asarray(candidate, dtype=np.float64)
    if cand.shape != problem.background_z.shape:
        raise ValueError(f"candidate shape {cand.shape} != {problem.background_z.shape}")
    cfg = problem.config
    tape = ad.Tape()
    z = tape.variable(cand)
    j_bg = ad.sum_sq(z - problem.background_z) * (0.5 * cfg.b0_inv_scale)
    if problem.data_weight == 0.0:
        return tape, z, j_bg
    pv = param_vars(tape, problem.model, trainable=False)
    z_out = forward_graph(problem.model, pv, ad.reshape(z, (1,) + cand.shape))[0]
    coeffs = z_out * problem._norm.std + problem._norm.mean
    if problem._rows is not None:
        coeffs = ad.stack([coeffs[int(r)] for r in problem._rows], axis=0)
    pred = coeffs @ problem._phi_obs_t + problem._mean_obs
    j_obs = ad.sum_sq(pred - problem.observations.values) * (0.5 * problem.data_weight)
    return tape, z, j_bg + j_obs


def objective(problem: DaProblem, candidate) -> float:
    """Cost J at a normalized candidate window."""
    _, _, j = _record(problem, candidate)
    return float(j.value)


def value_and_gradient(problem: DaProblem, candidate) -> tuple[float, np.ndarray]:
    tape, z, j = _record(problem, candidate)
    g = tape.backward(j, wrt=[z])[z]
    return float(j.value), g


def gradient(problem: DaProblem, candidate) -> np.ndarray:
    """Reverse-mode gradient of J w.r.t. the normalized candidate window."""
    return value_and_gradient(problem, candidate)[1]


@dataclass
class DaResult:
    analysis_window: np.ndarray      # (T_in, k) raw coefficients
    analysis_z: np.ndarray           # (T_in, k) normalized control variable
    corrected_forecast: np.ndarray   # (T_out, N)
    objective_trace: list
    converged: bool
    iterations: int
    wall_time: float
    message: str = ""

    @property
    def j_initial(self) -> float:
        return self.objective_trace[0]

    @property
    def j_final(self) -> float:
        return self.objective_trace[-1]


def lbfgs(fun_grad, x0: np.ndarray, memory: int = 10, max_iters: int = 200,
          grad_tol: float = 1e-6, step_tol: float = 1e-9, c1: float = 1e-4,
          max_backtracks: int = 40):
    """L-BFGS with Armijo backtracking.

    Returns ``(x, trace, converged, iterations, message)``. Every accepted
    iterate lowers the objective, so ``trace`` is non-increasing.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    shape = x.shape
    x = x.ravel()
    wrap = lambda v: fun_grad(v.reshape(shape))
    f, g = wrap(x)
    g = g.ravel()
    if not np.isfinite(f):
        raise AssimilationError("objective is not finite at the starting point")
    trace = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    it = 0
    while True:
        if np.max(np.abs(g)) < grad_tol:
            return x.reshape(shape), trace, True, it, "gradient tolerance reached"
        if it >= max_iters:
            return x.reshape(shape), trace, False, it, "iteration limit reached"

        d = _two_loop(g, s_hist, y_hist)
        if not s_hist:  # unit-length first step keeps the iterates scale invariant
            d /= np.linalg.norm(g)
        slope = float(g @ d)
        if slope >= 0:  # not a descent direction: restart from steepest descent
            s_hist.clear(), y_hist.clear()
            d = -g / np.linalg.norm(g)
            slope = float(g @ d)

        t = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + t * d
            f_new, g_new = wrap(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if s_hist:
                s_hist.clear(), y_hist.clear()
                continue
            return x.reshape(shape), trace, False, it, "line search failed"

        g_new = g_new.ravel()
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0), y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        it += 1
        if np.linalg.norm(s) < step_tol:
            return x.reshape(shape), trace, True, it, "step tolerance reached"


def _two_loop(g, s_hist, y_hist) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        a = (s @ q) / (y @ s)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = (y @ q) / (y @ s)
        q += (a - b) * s
    return -q


def minimize(problem: DaProblem) -> DaResult:
    """Minimize J from the background window and forecast from the analysis."""
    cfg = problem.config
    t0 = time.perf_counter()
    z, trace, converged, iters, msg = lbfgs(
        lambda v: value_and_gradient(problem, v), problem.background_z,
        memory=cfg.memory, max_iters=cfg.max_iters,
        grad_tol=cfg.grad_tol, step_tol=cfg.step_tol)
    analysis = problem.from_z(z)
    fc = forecast(problem.model, problem.basis, analysis)
    return DaResult(analysis, z, fc.full, trace, converged, iters,
                    time.perf_counter() - t0, msg)


# -- campaigns ------------------------------------------------------------------

@dataclass(frozen=True)
class ObsSettings:
    n_locations: int = 790
    noise_std: float = 0.0
    seed: int = 0


@dataclass
class WindowRecord:
    origin_day: int
    iterations: int
    j_initial: float
    j_final: float
    wall_time: float
    converged: bool
    error: str = ""


@dataclass
class CampaignResult:
    records: list
    origins: np.ndarray
    corrected: np.ndarray    # (W, T_out, N)
    uncorrected: np.ndarray  # (W, T_out, N)
    truth: np.ndarray        # (W, T_out, N)
    inputs_last: np.ndarray  # (W, N) last input-day state, for persistence
    t_in: int = 0
    grid_dims: tuple | None = None

    def mae_by_lead(self, which: str = "corrected") -> np.ndarray:
        pred = getattr(self, which)
        return np.abs(pred - self.truth).mean(axis=(0, 2))

    def summary(self) -> dict:
        c, u = self.mae_by_lead("corrected"), self.mae_by_lead("uncorrected")
        return {"windows": len(self.origins), "mae_corrected": c, "mae_uncorrected": u,
                "mean_corrected": float(c.mean()), "mean_uncorrected": float(u.mean()),
                "failures": sum(1 for r in self.records if r.error)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["origin_day", "iterations", "J_initial", "J_final", "wall_time",
                        "converged", "error"])
            for r in self.records:
                w.writerow([r.origin_day, r.iterations, repr(r.j_initial), repr(r.j_final),
                            f"{r.wall_time:.6f}", int(r.converged), r.error])

    def save(self, path) -> None:
        container.save(path, {
            "origin_day": self.origins, "corrected": self.corrected,
            "uncorrected": self.uncorrected, "truth": self.truth,
            "inputs_last": self.inputs_last,
            "meta": np.array([self.t_in, self.truth.shape[1]] + list(self.grid_dims or ())),
        })

    @classmethod
    def load(cls, path) -> "CampaignResult":
        """Forecast tensors only; per-window records live in the CSV."""
        b = container.load(path)
        container.require(b, "origin_day", "corrected", "uncorrected", "truth", "inputs_last")
        meta = b.get("meta", np.zeros(2, dtype=np.int64))
        grid = tuple(int(g) for g in meta[2:4]) if meta.size >= 4 else None
        return cls([], b["origin_day"], b["corrected"], b["uncorrected"], b["truth"],
                    b["inputs_last"], int(meta[0]), grid)


def _assimilate_window(args):
    model, basis, series_data, grid, j, obs, cfg = args
    t_in, t_out = model.t_in, model.t_out
    inp = series_data[j:j + t_in]
    truth = series_data[j + t_in:j + t_in + t_out]
    background = reduce_window(model, basis, inp)
    plain = forecast(model, basis, background).full
    if obs.n_locations == 0:
        return plain, plain, WindowRecord(0, 0, 0.0, 0.0, 0.0, True)
    observations = observe(truth.reshape((t_out,) + grid), obs.n_locations, obs.noise_std, seed=(obs.seed, j))
    try:
        res = minimize(DaProblem(model, basis, background, observations, cfg))
    except (AssimilationError, FloatingPointError, ValueError) as exc:
        return plain, plain, WindowRecord(0, 0, np.nan, np.nan, 0.0, False, str(exc))
    rec = WindowRecord(0, res.iterations, res.j_initial, res.j_final, res.wall_time,
                       res.converged, "" if res.converged or "limit" in res.message else res.message)
    return res.corrected_forecast, plain, rec


def run_campaign(model: SurrogateModel, basis: PodBasis, series: FieldSeries,
                 obs: ObsSettings = ObsSettings(), config: DaConfig = DaConfig(),
                 stride: int = 1, workers: int = 1, max_windows: int | None = None
                 ) -> CampaignResult:
    """Assimilate every window origin of ``series`` (daily by default).

    Input days ``[j, j + T_in)`` give the background; observations are drawn
    from the truth on the following ``T_out`` days. A failing window keeps
    its uncorrected forecast and records the error.
    """
    t_in, t_out = model.t_in, model.t_out
    n_win = len(series) - t_in - t_out + 1
    if n_win < 1:
        raise ValueError("series too short for a single window")
    origins = np.arange(0, n_win, stride)
    if max_windows is not None:
        origins = origins[:max_windows]
    flat = series.flat()
    jobs = [(model, basis, flat, series.grid_dims, int(j), obs, config) for j in origins]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_assimilate_window, jobs))
    else:
        outs = [_assimilate_window(job) for job in jobs]

    records = []
    for j, (_, _, rec) in zip(origins, outs):
        records.append(replace(rec, origin_day=int(series.day_index[j])))
        if rec.error:
            log.warning("window at day %d: %s", series.day_index[j], rec.error)
    corrected = np.stack([o[0] for o in outs])
    uncorrected = np.stack([o[1] for o in outs])
    truth = np.stack([flat[j + t_in:j + t_in + t_out] for j in origins])
    last = np.stack([flat[j + t_in - 1] for j in origins])
    return CampaignResult(records, series.day_index[origins], corrected, uncorrected, truth, last,
                          t_in, series.grid_dims)
