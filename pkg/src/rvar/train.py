"""Supervised training of the surrogate on sliding coefficient windows."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .net import SurrogateModel, forward_graph, forecast_batch, init_model, param_vars
from .pod import normalize_coeffs

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.5
    lr_patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 500
    early_stop_patience: int = 20
    seed: int = 0
    split_fraction: float = 0.7
    split_mode: str = "random"  # or "block": contiguous origins, leakage-free
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.split_mode not in ("random", "block"):
            raise ValueError("split_mode must be 'random' or 'block'")


@dataclass
class WindowDataset:
    inputs: np.ndarray   # (S, T_in, k)
    targets: np.ndarray  # (S, T_out, k)
    origins: np.ndarray  # (S,) day index of each window's first input day

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowDataset":
        return WindowDataset(self.inputs[idx], self.targets[idx], self.origins[idx])

    @property
    def t_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def t_out(self) -> int:
        return self.targets.shape[1]


def make_windows(coeffs, t_in: int, t_out: int = 20, day_index=None) -> WindowDataset:
    """Every stride-1 (input, target) pair of a (T, k) coefficient series."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = coeffs.shape[0]
    if t_in < 1 or t_out < 1:
        raise ValueError("window lengths must be positive")
    if n < t_in + t_out:
        raise ValueError(f"series of length {n} is shorter than T_in + T_out = {t_in + t_out}")
    count = n - t_in - t_out + 1
    view = np.lib.stride_tricks.sliding_window_view(coeffs, t_in + t_out, axis=0)
    view = np.moveaxis(view[:count], -1, 1)  # (S, T_in + T_out, k)
    days = np.arange(n) if day_index is None else np.asarray(day_index)
    return WindowDataset(view[:, :t_in].copy(), view[:, t_in:].copy(), days[:count].copy())


def mse_loss(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


def split_dataset(ds: WindowDataset, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Train and validation sample indices.

    ``random`` draws windows at random (overlapping days may leak between the
    sets); ``block`` uses the earliest windows for training and drops the
    windows overlapping the boundary so no day is shared.
    """
    n = len(ds)
    n_train = int(round(cfg.split_fraction * n))
    if cfg.split_mode == "random":
        perm = np.random.default_rng(cfg.seed).permutation(n)
        tr, va = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    else:
        span = ds.t_in + ds.t_out
        order = np.argsort(ds.origins, kind="stable")
        tr = order[:n_train]
        last = ds.origins[tr].max() if n_train else -np.inf
        rest = order[n_train:]
        va = rest[ds.origins[rest] >= last + span]
    if len(tr) == 0 or len(va) == 0:
        raise TrainingError(f"empty split: {len(tr)} train / {len(va)} validation windows")
    return tr, va


def _batch_loss_and_grads(model: SurrogateModel, x: np.ndarray, y: np.ndarray):
    tape = ad.Tape()
    pv = param_vars(tape, model, trainable=True)
    pred = forward_graph(model, pv, tape.constant(x))
    loss = ad.sum_sq(pred - y) * (1.0 / y.size)
    grads = tape.backward(loss, wrt=list(pv.values()))
    return float(loss.value), {name: grads[v] for name, v in pv.items()}


def _clip(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def evaluate(model: SurrogateModel, ds: WindowDataset, chunk: int = 1024) -> float:
    total = 0.0
    for s in range(0, len(ds), chunk):
        pred = forecast_batch(model, ds.inputs[s:s + chunk])
        total += float(np.sum((pred - ds.targets[s:s + chunk]) ** 2))
    return total / ds.targets.size


@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def append(self, epoch, train_mse, val_mse, lr):
        self.epoch.append(epoch)
        self.train_mse.append(train_mse)
        self.val_mse.append(val_mse)
        self.lr.append(lr)

    @property
    def best_val(self) -> float:
        return min(self.val_mse) if self.val_mse else float("inf")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse", "lr"])
            for row in zip(self.epoch, self.train_mse, self.val_mse, self.lr):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def train(model: SurrogateModel, dataset: WindowDataset,
          cfg: TrainConfig = TrainConfig()) -> tuple[SurrogateModel, History]:
    """Adam on minibatch MSE with plateau LR decay and early stopping.

    Returns the parameters from the epoch with the lowest validation loss.
    """
    if dataset.t_in != model.t_in or dataset.t_out != model.t_out:
        raise TrainingError("dataset window lengths do not match the model")
    tr_idx, va_idx = split_dataset(dataset, cfg)
    train_ds, val_ds = dataset.subset(tr_idx), dataset.subset(va_idx)
    rng = np.random.default_rng([cfg.seed, 1])

    params = model.params()
    state = AdamState.zeros_like(params)
    lr = cfg.lr0
    best_val, best_params = np.inf, params
    plateau = stale = 0
    hist = History()

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(train_ds))
        running = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            cur = model.with_params(params)
            loss, grads = _batch_loss_and_grads(cur, train_ds.inputs[idx], train_ds.targets[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {s // cfg.batch_size}")
            params, state = adam_step(params, _clip(grads, cfg.clip_norm), state, lr,
                                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            running += loss * len(idx)
        val = evaluate(model.with_params(params), val_ds)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        hist.append(epoch, running / len(train_ds), val, lr)
        log.debug("epoch %d train %.5g val %.5g lr %.3g", epoch, running / len(train_ds), val, lr)

        if val < best_val:
            best_val, best_params = val, params
            plateau = stale = 0
        else:
            plateau += 1
            stale += 1
            if plateau >= cfg.lr_patience:
                lr *= cfg.lr_decay
                plateau = 0
            if stale >= cfg.early_stop_patience:
                break
    return model.with_params(best_params), hist


@dataclass
class GridResult:
    t_in: int
    k: int
    seed: int
    best_val_mse: float
    model: SurrogateModel | None = None
    history: History | None = None
    error: str | None = None
    checkpoint: str = ""


def _grid_cell(args) -> GridResult:
    coeffs, t_in, t_out, u, day_index, cfg = args
    k = coeffs.shape[1]
    try:
        z, norm = normalize_coeffs(coeffs)
        ds = make_windows(z, t_in, t_out, day_index)
        model = init_model(k, t_in, t_out, u=u, seed=cfg.seed, norm=norm)
        model, hist = train(model, ds, cfg)
        return GridResult(t_in, k, cfg.seed, hist.best_val, model, hist)
    except (TrainingError, ValueError) as exc:
        log.warning("grid cell T_in=%d k=%d failed: %s", t_in, k, exc)
        return GridResult(t_in, k, cfg.seed, np.inf, error=str(exc))


def grid_search(coeffs, t_ins=(7, 14, 28, 42), ks=(5, 10, 15), cfg: TrainConfig = TrainConfig(),
                t_out: int = 20, u: int = 20, day_index=None,
                out_dir=None, workers: int = 1) -> list[GridResult]:
    """Train every (T_in, k) combination on leading columns of ``coeffs``.

    ``coeffs`` holds raw POD coefficients (T, k_max) of the training years.
    Cells that fail are reported with ``best_val_mse = inf`` instead of
    aborting the sweep. Results come back sorted by validation loss; cells
    are independent, so ``workers > 1`` trains them in a process pool with
    identical results.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if not t_ins or not ks:
        raise ValueError("grids must be nonempty")
    jobs, results = [], []
    for k in ks:
        if k > coeffs.shape[1]:
            results.append(GridResult(-1, k, cfg.seed, np.inf, error=f"k={k} exceeds available modes"))
            continue
        jobs.extend((coeffs[:, :k], t_in, t_out, u, day_index, cfg) for t_in in t_ins)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results.extend(pool.map(_grid_cell, jobs))
    else:
        results.extend(_grid_cell(job) for job in jobs)
    results.sort(key=lambda r: r.best_val_mse)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        best = results[0]
        if best.model is not None:
            best.checkpoint = str(out / f"model_tin{best.t_in}_k{best.k}.rvar")
            best.model.save(best.checkpoint)
        write_grid_csv(results, out / "grid_search.csv")
    return results


def write_grid_csv(results: list[GridResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T_in", "k", "seed", "best_val_mse", "checkpoint"])
        for r in results:
            w.writerow([r.t_in, r.k, r.seed, repr(r.best_val_mse), r.checkpoint])
