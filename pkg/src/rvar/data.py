"""Synthetic traveling-wave fields, year splits and baseline forecasts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pod import FieldSeries

YEAR = 365


@dataclass(frozen=True)
class WaveComponent:
    amplitude: float
    wavenumber: int      # zonal wavenumber over the domain width
    width: float         # meridional Gaussian e-folding half-width, in rows
    speed: float         # eastward phase speed, cells per day
    center: float = 0.5  # envelope center as a fraction of the grid height


def _default_waves():
    return (
        WaveComponent(4.0, 2, 7.0, 1.5, 0.55),
        WaveComponent(2.0, 3, 6.0, 2.5, 0.65),
        WaveComponent(0.3, 5, 5.0, 4.0, 0.45),
    )


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic field generator.

    ``phase_noise`` is the std (radians per sqrt(day)) of a random walk added
    to each wave's phase; zero gives strictly periodic waves.
    """

    grid: tuple[int, int] = (40, 48)
    n_days: int = 8 * YEAR
    waves: tuple = field(default_factory=_default_waves)
    base: float = 0.0
    seasonal_amplitude: float = 3.0
    seasonal_period: float = YEAR
    noise_std: float = 0.1
    phase_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        h, w = self.grid
        if h < 8 or w < 8:
            raise ValueError("grid dimensions must be at least 8")
        if self.n_days < 20 + 7 + YEAR:
            raise ValueError("n_days too short for one window plus a year")
        waves = tuple(c if isinstance(c, WaveComponent) else WaveComponent(*c)
                      for c in self.waves)
        for c in waves:
            if not np.isfinite([c.amplitude, c.speed, c.width]).all() or c.width <= 0:
                raise ValueError(f"invalid wave component {c}")
        if self.noise_std < 0 or self.phase_noise < 0:
            raise ValueError("noise levels must be non-negative")
        object.__setattr__(self, "grid", (int(h), int(w)))
        object.__setattr__(self, "waves", waves)


def seasonal(cfg: SyntheticConfig, t) -> np.ndarray:
    return cfg.seasonal_amplitude * np.cos(2 * np.pi * np.asarray(t, float) / cfg.seasonal_period)


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> FieldSeries:
    """Daily fields ``base + seasonal(t) + sum of enveloped traveling sinusoids + noise``."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.grid
    t = np.arange(cfg.n_days, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    phases0 = rng.uniform(0.0, 2 * np.pi, size=len(cfg.waves))

    data = np.empty((cfg.n_days, h, w))
    data[:] = (cfg.base + seasonal(cfg, t))[:, None, None]
    for c, phi in zip(cfg.waves, phases0):
        envelope = np.exp(-0.5 * ((rows - c.center * (h - 1)) / c.width) ** 2)
        drift = np.zeros(cfg.n_days)
        if cfg.phase_noise > 0:
            steps = rng.normal(0.0, cfg.phase_noise, size=cfg.n_days)
            steps[0] = 0.0
            drift = np.cumsum(steps)
        arg = (2 * np.pi * c.wavenumber / w) * (cols[None, :] - c.speed * t[:, None]) \
            + (phi + drift)[:, None]
        data += c.amplitude * envelope[None, :, None] * np.sin(arg)[:, None, :]
    if cfg.noise_std > 0:
        data += rng.normal(0.0, cfg.noise_std, size=data.shape)
    return FieldSeries(data, np.arange(cfg.n_days, dtype=np.int64))


def split_years(series: FieldSeries, train_years: int = 6, gap_years: int = 1,
                test_years: int = 1, t_in: int = 42) -> tuple[FieldSeries, FieldSeries]:
    """Contiguous train and test year blocks separated by a gap of ``gap_years``.

    The gap must cover at least ``t_in`` days so that no test input window
    reaches back into training days.
    """
    if gap_years * YEAR < t_in:
        raise ValueError(f"gap of {gap_years * YEAR} days is shorter than input window {t_in}")
    need = (train_years + gap_years + test_years) * YEAR
    if len(series) < need or train_years < 1 or test_years < 1:
        raise ValueError(f"series of {len(series)} days cannot hold a {need}-day split")
    train_end = train_years * YEAR
    test_start = (train_years + gap_years) * YEAR
    return (series.slice_days(0, train_end),
            series.slice_days(test_start, test_start + test_years * YEAR))


def climatology(train: FieldSeries, day_of_year: int) -> np.ndarray:
    """Pointwise mean over training years of one calendar day, shape (H, W)."""
    if not 0 <= day_of_year < YEAR:
        raise ValueError(f"day_of_year must be in [0, {YEAR})")
    mask = (train.day_index % YEAR) == day_of_year
    if mask.sum() < 2:
        raise ValueError(f"training data holds fewer than two instances of day {day_of_year}")
    return train.data[mask].mean(axis=0)


def climatology_table(train: FieldSeries) -> np.ndarray:
    """Climatology for every calendar day, shape (365, H, W)."""
    return np.stack([climatology(train, d) for d in range(YEAR)])


def persistence(window, t_out: int = 20) -> np.ndarray:
    """Repeat the window's last state for every lead day."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[0] == 0:
        raise ValueError("empty input window")
    last = window[-1]
    return np.broadcast_to(last, (t_out,) + last.shape).copy()


def spatial_means_csv(series: FieldSeries) -> str:
    lines = ["day,mean"]
    for day, snap in zip(series.day_index, series.data):
        lines.append(f"{day},{snap.mean():.10g}")
    return "\n".join(lines) + "\n"
