"""Command-line pipeline: generate, pod, train, grid-search, forecast, assimilate, evaluate.

Settings come from a ``key = value`` config file (values are Python
literals; bare words are strings) and from per-key flags such as
``--t-in 7``. A flag beats the config file, which beats the default.

Every stage records its parameters and the sha256 of each input and
output in ``<out>/manifest.json``; re-running a stage whose inputs and
parameters are unchanged is skipped unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import ast
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, assim, data, metrics, net, train
from .container import ContainerError, save
from .pod import FieldSeries, PodBasis, compute_pod, normalize_coeffs, project

log = logging.getLogger("rvar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# observed share of the grid in the reference experiment (5000 of 12138 points)
OBS_FRACTION = (5000, 12138)

_TC, _DC = train.TrainConfig(), assim.DaConfig()

# name -> (default, help)
PARAMS = {
    # synthetic data
    "grid_h": (40, "grid rows"),
    "grid_w": (48, "grid columns"),
    "n_days": (2920, "days to generate"),
    "waves": (None, "wave components as (amp, wavenumber, width, speed[, center]) tuples"),
    "base": (0.0, "constant background level"),
    "seasonal_amplitude": (3.0, "seasonal cycle amplitude"),
    "seasonal_period": (365.0, "seasonal cycle period in days"),
    "noise_std": (0.1, "i.i.d. field noise"),
    "phase_noise": (0.3, "random-walk phase noise, rad/sqrt(day)"),
    "seed": (0, "generator seed"),
    # year split
    "train_years": (6, "training years"),
    "gap_years": (1, "skipped years between training and test"),
    "test_years": (1, "test years"),
    # basis and network
    "k": (5, "POD modes"),
    "t_in": (14, "input window length"),
    "t_out": (20, "forecast length"),
    "u": (20, "LSTM hidden units"),
    "n_layers": (2, "stacked LSTM cells in encoder and decoder"),
    "forget_bias": (1.0, "initial forget-gate bias"),
    # training
    "lr0": (_TC.lr0, "initial Adam learning rate"),
    "lr_decay": (_TC.lr_decay, "plateau decay factor"),
    "lr_patience": (_TC.lr_patience, "epochs without improvement before decay"),
    "batch_size": (_TC.batch_size, "minibatch size"),
    "max_epochs": (_TC.max_epochs, "epoch limit"),
    "early_stop_patience": (_TC.early_stop_patience, "epochs without improvement before stopping"),
    "split_fraction": (_TC.split_fraction, "training share of windows"),
    "split_mode": (_TC.split_mode, "random or block"),
    "clip_norm": (_TC.clip_norm, "global gradient-norm clip (None disables)"),
    "train_seed": (0, "initialization and shuffling seed"),
    "t_ins": ((7, 14, 28, 42), "grid-search input lengths"),
    "ks": ((5, 10, 15), "grid-search mode counts"),
    # forecasting and assimilation
    "origin": (None, "first input day of the forecast (default: first test day)"),
    "n_locations": (None, "observed grid points (default: floor(5000/12138 * N))"),
    "obs_noise_std": (0.0, "observation noise std"),
    "obs_seed": (0, "observation sampling seed"),
    "b0_inv_scale": (_DC.b0_inv_scale, "background weight"),
    "r_inv_scale": (_DC.r_inv_scale, "observation weight"),
    "misfit_normalization": (_DC.misfit_normalization, "divide misfit by m * T_out"),
    "max_iters": (_DC.max_iters, "L-BFGS iteration limit"),
    "grad_tol": (_DC.grad_tol, "max-norm gradient tolerance"),
    "step_tol": (_DC.step_tol, "step-norm tolerance"),
    "memory": (_DC.memory, "L-BFGS memory"),
    "stride": (1, "days between window origins"),
    "max_windows": (None, "cap on assimilated windows"),
    # evaluation
    "baselines": (True, "include climatology and persistence"),
    "map_lead": (None, "lead day for maps (default: all leads)"),
    "workers": (1, "worker processes"),
}

SPLIT = ("train_years", "gap_years", "test_years")
NET = ("k", "t_in", "t_out", "u", "n_layers", "forget_bias")
TRAIN = ("lr0", "lr_decay", "lr_patience", "batch_size", "max_epochs", "early_stop_patience",
         "split_fraction", "split_mode", "clip_norm", "train_seed")
DA = ("b0_inv_scale", "r_inv_scale", "misfit_normalization", "max_iters", "grad_tol",
      "step_tol", "memory")

STAGE_KEYS = {
    "generate": ("grid_h", "grid_w", "n_days", "waves", "base", "seasonal_amplitude",
                 "seasonal_period", "noise_std", "phase_noise", "seed"),
    "pod": SPLIT + ("k",),
    "train": SPLIT + NET + TRAIN,
    "grid-search": SPLIT + ("t_ins", "ks", "t_out", "u", "n_layers", "forget_bias") + TRAIN
    + ("workers",),
    "forecast": SPLIT + ("origin",),
    "assimilate": SPLIT + ("n_locations", "obs_noise_std", "obs_seed", "stride", "max_windows",
                           "workers") + DA,
    "evaluate": SPLIT + ("baselines", "map_lead"),
}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# -- configuration ----------------------------------------------------------------

def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


# optional integer settings (default None)
OPTIONAL_INT = {"origin", "n_locations", "max_windows", "map_lead"}


def _coerce(key: str, value):
    default = PARAMS[key][0]
    if key in OPTIONAL_INT and value is not None:
        default = 0
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "yes", "on", "1"):
                    return True
                if value.lower() in ("false", "no", "off", "0"):
                    return False
                raise ValueError
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            value = (value,) if np.isscalar(value) else value
            return tuple(int(v) for v in value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"invalid value {value!r} for config key {key!r}")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in PARAMS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, _literal(value))
    return out


def resolve(stage: str, args) -> dict:
    """Settings for ``stage``: flag > config file > default."""
    file_values = read_config(args.config) if args.config else {}
    settings = {}
    for key in STAGE_KEYS[stage]:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = _coerce(key, _literal(flag))
        elif key in file_values:
            settings[key] = file_values[key]
        else:
            settings[key] = PARAMS[key][0]
    return settings


def _build(cls, **kw):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _train_config(s) -> train.TrainConfig:
    return _build(train.TrainConfig, lr0=s["lr0"], lr_decay=s["lr_decay"],
                  lr_patience=s["lr_patience"], batch_size=s["batch_size"],
                  max_epochs=s["max_epochs"], early_stop_patience=s["early_stop_patience"],
                  seed=s["train_seed"], split_fraction=s["split_fraction"],
                  split_mode=s["split_mode"], clip_norm=s["clip_norm"])


def _da_config(s) -> assim.DaConfig:
    return _build(assim.DaConfig, **{k: s[k] for k in DA})


# -- manifest ----------------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, out_dir: Path, config_path):
        self.path = out_dir / "manifest.json"
        self.doc = {"tool": "rvar", "version": __version__, "output_dir": str(out_dir),
                    "config": str(config_path) if config_path else None, "stages": {}}
        if self.path.exists():
            try:
                old = json.loads(self.path.read_text())
                self.doc["stages"] = old.get("stages", {})
            except json.JSONDecodeError:
                log.warning("ignoring unreadable manifest %s", self.path)

    @staticmethod
    def _hashes(paths) -> dict:
        return {str(p): sha256(p) for p in paths}

    def up_to_date(self, stage: str, params: dict, inputs) -> bool:
        entry = self.doc["stages"].get(stage)
        if not entry or entry.get("params") != _jsonable(params):
            return False
        if entry.get("inputs") != self._hashes(inputs):
            return False
        outs = entry.get("outputs", {})
        return bool(outs) and all(Path(p).exists() and sha256(p) == h for p, h in outs.items())

    def record(self, stage: str, params: dict, inputs, outputs, notes=None) -> None:
        self.doc["stages"][stage] = {
            "params": _jsonable(params), "inputs": self._hashes(inputs),
            "outputs": self._hashes(outputs), "notes": _jsonable(notes or {}),
        }
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist")
                                 else list(o) if isinstance(o, tuple) else str(o)))


# -- helpers ------------------------------------------------------------------------

def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise DataError(f"{what} file not found: {path}")
    return path


def _load_field(path: Path) -> FieldSeries:
    return FieldSeries.load(_need(path, "field"))


def _split(series: FieldSeries, s, t_in: int):
    try:
        return data.split_years(series, s["train_years"], s["gap_years"], s["test_years"],
                                t_in=t_in)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _basis_for(args, train_series: FieldSeries, k: int):
    """Load ``--basis`` truncated to ``k`` modes, or fit one on the training years."""
    if args.basis:
        basis, _ = PodBasis.load(_need(Path(args.basis), "basis"))
        if basis.k < k:
            raise ConfigError(f"basis holds {basis.k} modes, k={k} requested")
        return basis.truncate(k), [Path(args.basis)]
    return compute_pod(train_series, k), []


def _lead_rows(methods: dict[str, np.ndarray]):
    for name, per_lead in methods.items():
        for lead, v in enumerate(per_lead, 1):
            yield [lead, name, repr(float(v))]


# -- commands -----------------------------------------------------------------------

def cmd_generate(args, s, out: Path, manifest: Manifest) -> int:
    target = out / "field.rvar"
    if not args.force and manifest.up_to_date("generate", s, []):
        print(f"generate: up to date ({target})")
        return EXIT_OK
    kw = dict(grid=(s["grid_h"], s["grid_w"]), n_days=s["n_days"], base=s["base"],
              seasonal_amplitude=s["seasonal_amplitude"], seasonal_period=s["seasonal_period"],
              noise_std=s["noise_std"], phase_noise=s["phase_noise"], seed=s["seed"])
    if s["waves"] is not None:
        kw["waves"] = tuple(s["waves"])
    series = data.generate(_build(data.SyntheticConfig, **kw))
    series.save(target)
    means = out / "spatial_means.csv"
    means.write_text(data.spatial_means_csv(series))
    manifest.record("generate", s, [], [target, means])
    print(f"generate: wrote {target} with dims {series.data.shape}")
    return EXIT_OK


def cmd_pod(args, s, out: Path, manifest: Manifest) -> int:
    field_path = _need(Path(args.field or out / "field.rvar"), "field")
    target, table = out / "basis.rvar", out / "pod_energy.csv"
    if not args.force and manifest.up_to_date("pod", s, [field_path]):
        print(f"pod: up to date ({target})")
        return EXIT_OK
    train_series, _ = _split(_load_field(field_path), s, 0)
    if not 1 <= s["k"] <= min(len(train_series), train_series.n_points):
        raise ConfigError(f"k={s['k']} out of range for the training data")
    basis = compute_pod(train_series, s["k"])
    _, norm = normalize_coeffs(project(basis, train_series))
    basis.save(target, norm)
    sig2 = basis.singular_values ** 2
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "sigma", "cumulative_energy"])
        for i, (sv, cum) in enumerate(zip(basis.singular_values, np.cumsum(sig2) / sig2.sum()), 1):
            w.writerow([i, repr(float(sv)), repr(float(cum))])
    manifest.record("pod", s, [field_path], [target, table],
                    {"energy_fraction": basis.energy_fraction()})
    print(f"pod: k={basis.k} modes capture {basis.energy_fraction():.4f} of the variance")
    return EXIT_OK


def cmd_train(args, s, out: Path, manifest: Manifest) -> int:
    field_path = _need(Path(args.field or out / "field.rvar"), "field")
    cfg = _train_config(s)
    model_path, basis_path, hist_path = out / "model.rvar", out / "basis.rvar", out / "history.csv"
    inputs = [field_path] + ([Path(args.basis)] if args.basis else [])
    if not args.force and manifest.up_to_date("train", s, inputs):
        print(f"train: up to date ({model_path})")
        return EXIT_OK
    train_series, _ = _split(_load_field(field_path), s, s["t_in"])
    basis, _ = _basis_for(args, train_series, s["k"])
    z, norm = normalize_coeffs(project(basis, train_series))
    ds = train.make_windows(z, s["t_in"], s["t_out"], train_series.day_index)
    model = net.init_model(s["k"], s["t_in"], s["t_out"], u=s["u"], seed=s["train_seed"],
                           n_layers=s["n_layers"], forget_bias=s["forget_bias"], norm=norm)
    model, hist = train.train(model, ds, cfg)
    model.save(model_path)
    basis.save(basis_path, norm)
    hist.to_csv(hist_path)
    notes = {"activation": "relu", "init": "glorot_uniform", "optimizer": "adam",
             "epochs": len(hist.epoch), "best_val_mse": hist.best_val,
             "target_variance": float(ds.targets.var())}
    manifest.record("train", s, inputs, [model_path, basis_path, hist_path], notes)
    print(f"train: best validation MSE {hist.best_val:.6g} after {len(hist.epoch)} epochs")
    return EXIT_OK


def cmd_grid_search(args, s, out: Path, manifest: Manifest) -> int:
    field_path = _need(Path(args.field or out / "field.rvar"), "field")
    cfg = _train_config(s)
    grid_dir = out / "grid"
    inputs = [field_path] + ([Path(args.basis)] if args.basis else [])
    if not args.force and manifest.up_to_date("grid-search", s, inputs):
        print(f"grid-search: up to date ({grid_dir})")
        return EXIT_OK
    if not s["t_ins"] or not s["ks"]:
        raise ConfigError("t_ins and ks must be nonempty")
    train_series, _ = _split(_load_field(field_path), s, max(s["t_ins"]))
    basis, _ = _basis_for(args, train_series, max(s["ks"]))
    coeffs = project(basis, train_series)
    results = train.grid_search(coeffs, s["t_ins"], s["ks"], cfg, s["t_out"], s["u"],
                                train_series.day_index, grid_dir, workers=s["workers"])
    best = results[0]
    if best.model is None:
        raise NumericalError("every grid cell failed")
    outputs = [grid_dir / "grid_search.csv", Path(best.checkpoint)]
    best_basis = grid_dir / f"basis_k{best.k}.rvar"
    basis.truncate(best.k).save(best_basis, best.model.norm)
    outputs.append(best_basis)
    for r in results:
        if r.history is not None:
            p = grid_dir / f"history_tin{r.t_in}_k{r.k}.csv"
            r.history.to_csv(p)
            outputs.append(p)
    manifest.record("grid-search", s, inputs, outputs,
                    {"best": {"t_in": best.t_in, "k": best.k, "val_mse": best.best_val_mse}})
    for r in results:
        print(f"grid-search: T_in={r.t_in} k={r.k} val_mse={r.best_val_mse:.6g}"
              + (f" ({r.error})" if r.error else ""))
    return EXIT_OK


def _load_model_basis(args, out: Path):
    model = net.SurrogateModel.load(_need(Path(args.model or out / "model.rvar"), "model"))
    basis, _ = PodBasis.load(_need(Path(args.basis or out / "basis.rvar"), "basis"))
    if basis.k < model.k:
        raise DataError(f"basis holds {basis.k} modes but the model needs {model.k}")
    return model, basis.truncate(model.k)


def cmd_forecast(args, s, out: Path, manifest: Manifest) -> int:
    field_path = _need(Path(args.field or out / "field.rvar"), "field")
    model, basis = _load_model_basis(args, out)
    series = _load_field(field_path)
    origin = s["origin"]
    if origin is None:
        _, test = _split(series, s, model.t_in)
        origin = int(test.day_index[0])
    pos = np.flatnonzero(series.day_index == origin)
    if pos.size == 0 or pos[0] + model.t_in > len(series):
        raise DataError(f"origin day {origin} has no full input window in {field_path}")
    j = int(pos[0])
    fc = net.forecast(model, basis, series.flat()[j:j + model.t_in])
    blocks = {"forecast": fc.full.reshape((model.t_out,) + series.grid_dims),
              "reduced": fc.reduced, "origin_day": np.array([origin])}
    end = j + model.t_in + model.t_out
    if end <= len(series):
        truth = series.data[j + model.t_in:end]
        blocks["truth"] = truth
        per_lead, overall = metrics.mae(blocks["forecast"].reshape(model.t_out, -1),
                                        truth.reshape(model.t_out, -1))
        print(f"forecast: MAE over {model.t_out} leads {overall:.6g} "
              f"(lead 1 {per_lead[0]:.4g}, lead {model.t_out} {per_lead[-1]:.4g})")
    target = out / "forecast.rvar"
    save(target, blocks)
    manifest.record("forecast", s | {"origin": origin}, [field_path], [target])
    print(f"forecast: wrote {target}")
    return EXIT_OK


def default_n_locations(n_points: int) -> int:
    return n_points * OBS_FRACTION[0] // OBS_FRACTION[1]


def cmd_assimilate(args, s, out: Path, manifest: Manifest) -> int:
    field_path = _need(Path(args.field or out / "field.rvar"), "field")
    model_path = _need(Path(args.model or out / "model.rvar"), "model")
    basis_path = _need(Path(args.basis or out / "basis.rvar"), "basis")
    inputs = [field_path, model_path, basis_path]
    target, table = out / "campaign.rvar", out / "campaign.csv"
    if not args.force and manifest.up_to_date("assimilate", s, inputs):
        print(f"assimilate: up to date ({target})")
        return EXIT_OK
    model, basis = _load_model_basis(args, out)
    series = _load_field(field_path)
    _, test = _split(series, s, model.t_in)
    n_loc = s["n_locations"]
    rule = "configured"
    if n_loc is None:
        n_loc, rule = default_n_locations(series.n_points), "floor(5000 / 12138 * N)"
    if not 0 <= n_loc <= series.n_points:
        raise ConfigError(f"n_locations={n_loc} outside [0, {series.n_points}]")
    if n_loc == 0:
        log.warning("n_locations=0: no observations, corrected forecasts equal the emulator's")
    obs = assim.ObsSettings(n_loc, s["obs_noise_std"], s["obs_seed"])
    if s["stride"] < 1 or s["workers"] < 1:
        raise ConfigError("stride and workers must be >= 1")
    res = assim.run_campaign(model, basis, test, obs, _da_config(s), stride=s["stride"],
                             workers=s["workers"], max_windows=s["max_windows"])
    summary = res.summary()
    if res.records and summary["failures"] == len(res.records) and n_loc > 0:
        raise NumericalError("assimilation failed in every window")
    res.save(target)
    res.write_csv(table)
    manifest.record("assimilate", s, inputs, [target, table],
                    {"n_locations": n_loc, "n_locations_rule": rule,
                     "windows": summary["windows"], "failures": summary["failures"],
                     "mean_mae_corrected": summary["mean_corrected"],
                     "mean_mae_uncorrected": summary["mean_uncorrected"]})
    print(f"assimilate: {summary['windows']} windows, {n_loc} observed points, "
          f"mean MAE {summary['mean_uncorrected']:.4g} -> {summary['mean_corrected']:.4g}")
    return EXIT_OK


def cmd_evaluate(args, s, out: Path, manifest: Manifest) -> int:
    paths = [Path(p) for p in (args.campaign or [out / "campaign.rvar"])]
    members = []
    for p in paths:
        try:
            members.append(assim.CampaignResult.load(_need(p, "campaign")))
        except ContainerError as exc:
            raise DataError(f"{p}: {exc}") from exc
    first = members[0]
    for m in members[1:]:
        if not (np.array_equal(m.origins, first.origins) and np.array_equal(m.truth, first.truth)):
            raise DataError("ensemble members disagree on origins or truth")
    n_win, t_out, n_pts = first.truth.shape
    grid = first.grid_dims
    inputs = list(paths)
    field_path = None
    if s["baselines"]:
        field_path = _need(Path(args.field or out / "field.rvar"), "field")
        inputs.append(field_path)
    if grid is None or grid[0] * grid[1] != n_pts:
        raise DataError("campaign file lacks a usable grid description")

    lead = s["map_lead"]
    if lead is not None and not 1 <= lead <= t_out:
        raise ConfigError(f"map_lead must be in [1, {t_out}]")
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    methods = {"emulator": [m.uncorrected for m in members],
               "emulator+DA": [m.corrected for m in members]}
    clim = None
    if s["baselines"]:
        train_series, _ = _split(_load_field(field_path), s, first.t_in)
        table = data.climatology_table(train_series)
        days = first.origins[:, None] + first.t_in + np.arange(t_out)[None, :]
        clim = table[days % data.YEAR].reshape(n_win, t_out, n_pts)
        methods["climatology"] = [clim]
        methods["persistence"] = [np.repeat(first.inputs_last[:, None, :], t_out, axis=1)]

    outputs = []
    lead_path = eval_dir / "mae_by_lead.csv"
    with open(lead_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lead_day", "method", "mae", "lo", "hi"])
        for name, preds in methods.items():
            per = np.array([metrics.mae(p, first.truth)[0] for p in preds])
            for i in range(t_out):
                w.writerow([i + 1, name, repr(float(per[:, i].mean())),
                            repr(float(per[:, i].min())), repr(float(per[:, i].max()))])
    outputs.append(lead_path)

    maps = {}
    tag = "all" if lead is None else f"lead{lead}"
    for name, preds in methods.items():
        key = name.replace("+", "_")
        mae_f = np.mean([metrics.mae_map(p, first.truth, lead) for p in preds], axis=0)
        maps[f"mae_{key}"] = mae_f.reshape(grid)
        if name == "climatology":
            # zero anomaly everywhere: similarity undefined, scored as no skill
            maps[f"cos_{key}"] = np.zeros(grid)
        elif clim is not None:
            maps[f"cos_{key}"] = np.mean([metrics.cosine_map(p, first.truth, clim, lead)
                                          for p in preds], axis=0).reshape(grid)
    if clim is not None:
        for name in methods:
            key = name.replace("+", "_")
            if name == "climatology":
                continue
            maps[f"improve_mae_{key}"] = metrics.improvement_map(
                maps[f"mae_{key}"], maps["mae_climatology"], "mae")
            maps[f"improve_cos_{key}"] = metrics.improvement_map(
                maps[f"cos_{key}"], maps["cos_climatology"], "similarity")
    maps_path = eval_dir / f"maps_{tag}.rvar"
    save(maps_path, maps)
    outputs.append(maps_path)
    for name, field2d in maps.items():
        p = eval_dir / f"{name}_{tag}.csv"
        metrics.write_field_csv(p, field2d)
        outputs.append(p)

    regions = metrics.default_regions(grid)
    rows = {}
    for name, preds in methods.items():
        fields = np.stack([np.abs(p - first.truth).mean(axis=0).reshape((t_out,) + grid)
                           for p in preds])
        rows[name] = metrics.regional_summary(fields, regions)
    summary_path = eval_dir / "regional_mae.csv"
    metrics.write_summary_csv(summary_path, rows)
    outputs.append(summary_path)

    manifest.record("evaluate", s, inputs, outputs, {"members": len(members),
                                                     "methods": list(methods)})
    for name, preds in methods.items():
        per = np.mean([metrics.mae(p, first.truth)[0] for p in preds], axis=0)
        print(f"evaluate: {name:12s} MAE lead 1 {per[0]:.4g}  lead {t_out} {per[-1]:.4g}  "
              f"mean {per.mean():.4g}")
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic field series"),
    "pod": (cmd_pod, "fit a POD basis on the training years"),
    "train": (cmd_train, "fit the basis and train one surrogate"),
    "grid-search": (cmd_grid_search, "train every (T_in, k) combination"),
    "forecast": (cmd_forecast, "forecast from one input window"),
    "assimilate": (cmd_assimilate, "run a daily assimilation campaign over the test years"),
    "evaluate": (cmd_evaluate, "MAE, similarity and improvement maps against baselines"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rvar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rvar {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("--force", action="store_true", help="rerun even if up to date")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "generate":
            p.add_argument("--field", help="field file (default: <out>/field.rvar)")
        if name in ("train", "grid-search", "forecast", "assimilate"):
            p.add_argument("--basis", help="basis file")
        if name in ("forecast", "assimilate"):
            p.add_argument("--model", help="model checkpoint (default: <out>/model.rvar)")
        if name == "evaluate":
            p.add_argument("--campaign", nargs="+",
                           help="campaign file(s); several are treated as an ensemble")
        for key in STAGE_KEYS[name]:
            default, help_text = PARAMS[key]
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           metavar="V", help=f"{help_text} (default: {default!r})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        settings = resolve(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(out, args.config)
        return func(args, settings, out, manifest)
    except ConfigError as exc:
        print(f"rvar: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContainerError, FileNotFoundError) as exc:
        print(f"rvar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, train.TrainingError, assim.AssimilationError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"rvar: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"rvar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
