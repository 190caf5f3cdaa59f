"""Forecast metrics, improvement maps and regional aggregation.

Forecast stacks are shaped ``(windows, lead, N)``; single forecasts
``(lead, N)`` are accepted wherever a stack is.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def _pair(pred, truth):
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return pred, truth


def mae(pred, truth) -> tuple[np.ndarray, float]:
    """Mean absolute error per lead day (axis -2) and overall."""
    pred, truth = _pair(pred, truth)
    err = np.abs(pred - truth)
    if err.ndim < 2:
        return np.atleast_1d(err.mean()), float(err.mean())
    axes = tuple(a for a in range(err.ndim) if a != err.ndim - 2)
    per_lead = err.mean(axis=axes)
    return per_lead, float(err.mean())


def cosine_similarity(u, v) -> float:
    """``u.v / (|u||v|)``; NaN when either vector has zero norm."""
    u, v = _pair(np.ravel(u), np.ravel(v))
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return float("nan")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _select(stack: np.ndarray, lead: int | None) -> np.ndarray:
    stack = np.asarray(stack, float)
    if stack.ndim == 2:
        stack = stack[None]
    if lead is None:
        return stack.reshape(-1, stack.shape[-1])
    return stack[:, lead - 1, :]


def cosine_map(pred, truth, reference, lead: int | None = None) -> np.ndarray:
    """Per-point cosine similarity of anomaly series.

    Anomalies are taken against ``reference`` (the training climatology for
    the same days). With ``lead`` set the series runs over windows at that
    1-based lead day; otherwise over all windows and leads.
    """
    p, t, r = (_select(a, lead) for a in (pred, truth, reference))
    if not p.shape == t.shape == r.shape:
        raise ValueError("pred, truth and reference shapes differ")
    a, b = p - r, t - r
    num = np.einsum("sn,sn->n", a, b)
    den = np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(out, -1.0, 1.0)


def mae_map(pred, truth, lead: int | None = None) -> np.ndarray:
    """Per-point MAE at one lead day or over all leads."""
    p, t = _pair(_select(pred, lead), _select(truth, lead))
    return np.abs(p - t).mean(axis=0)


def improvement_map(method, climatology, mode: str = "mae") -> np.ndarray:
    """Positive where the method beats climatology.

    ``similarity``: method - climatology; ``mae``: climatology - method.
    """
    method, climatology = _pair(method, climatology)
    if mode == "similarity":
        return method - climatology
    if mode == "mae":
        return climatology - method
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class Region:
    name: str
    rows: tuple[int, int]  # half-open [start, stop)
    cols: tuple[int, int]

    def check(self, grid_dims) -> None:
        h, w = grid_dims
        (r0, r1), (c0, c1) = self.rows, self.cols
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise ValueError(f"region {self.name!r} is empty or outside the {h}x{w} grid")


def default_regions(grid_dims) -> list[Region]:
    """Seven rectangles tiling the grid: three northern, four southern."""
    h, w = grid_dims
    mid = h // 2
    out = []
    north = np.linspace(0, w, 4).astype(int)
    south = np.linspace(0, w, 5).astype(int)
    for i in range(3):
        out.append(Region(f"north{i + 1}", (0, mid), (int(north[i]), int(north[i + 1]))))
    for i in range(4):
        out.append(Region(f"south{i + 1}", (mid, h), (int(south[i]), int(south[i + 1]))))
    return out


def regional_summary(fields, regions: list[Region]) -> list[dict]:
    """Region means of a per-point metric across an ensemble.

    ``fields`` is (members, H, W) or (members, lead, H, W). Each row holds the
    ensemble mean and the min/max band of the member region means.
    """
    fields = np.asarray(fields, float)
    if fields.ndim == 3:
        fields = fields[:, None]
    if fields.ndim != 4 or fields.shape[0] < 1:
        raise ValueError("fields must be (members, [lead,] H, W) with at least one member")
    if not regions:
        raise ValueError("need at least one region")
    rows = []
    for reg in regions:
        reg.check(fields.shape[-2:])
        (r0, r1), (c0, c1) = reg.rows, reg.cols
        per_member = np.nanmean(fields[:, :, r0:r1, c0:c1], axis=(2, 3))  # (members, lead)
        for li in range(per_member.shape[1]):
            col = per_member[:, li]
            rows.append({"region": reg.name, "lead_day": li + 1, "mean": float(col.mean()),
                         "lo": float(col.min()), "hi": float(col.max())})
    return rows


def write_field_csv(path, field2d) -> None:
    field2d = np.asarray(field2d, float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for (r, c), v in np.ndenumerate(field2d):
            w.writerow([r, c, repr(float(v))])


def write_summary_csv(path, rows_by_method: dict[str, list[dict]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "lead_day", "method", "mean", "lo", "hi"])
        for method, rows in rows_by_method.items():
            for r in rows:
                w.writerow([r["region"], r["lead_day"], method,
                            repr(r["mean"]), repr(r["lo"]), repr(r["hi"])])
