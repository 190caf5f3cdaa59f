"""Encoder-decoder LSTM surrogate over reduced POD coefficients.

Gate packing in every LSTM weight matrix is (input, forget, candidate,
output) along the first axis, and the matrix acts on ``[x; h]``. The
output head is ``relu(h @ W1 + b1) @ W2 + b2`` with weights stored
input-major.

Everything runs through :mod:`rvar.autodiff`, so forecasting and
differentiation share one code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import container, kernels
from .pod import NormStats, PodBasis, project, reconstruct

N_LAYERS = 2


@dataclass(frozen=True)
class LstmCellParams:
    w: np.ndarray  # (4u, d_in + u)
    b: np.ndarray  # (4u,)

    @property
    def u(self) -> int:
        return self.b.shape[0] // 4

    @property
    def d_in(self) -> int:
        return self.w.shape[1] - self.u


@dataclass
class LatentState:
    """Per-layer hidden and cell vectors, each of shape (u,) or (B, u)."""

    h: list
    c: list

    @property
    def top(self) -> np.ndarray:
        return self.h[-1]


def zeros_state(u: int, n_layers: int = N_LAYERS, batch: int | None = None) -> LatentState:
    shape = (u,) if batch is None else (batch, u)
    return LatentState([np.zeros(shape) for _ in range(n_layers)],
                       [np.zeros(shape) for _ in range(n_layers)])


def cell_step(params: LstmCellParams, x, state: tuple) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update for a single input vector; ``state`` is ``(h, c)``."""
    h, c = (np.asarray(s, dtype=np.float64) for s in state)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,) or h.shape != (params.u,) or c.shape != (params.u,):
        raise ValueError("cell_step shape mismatch")
    h2, c2, _, _ = kernels.lstm_forward(x[None, :], h[None, :], c[None, :],
                                        np.ascontiguousarray(params.w), params.b)
    return h2[0], c2[0]


@dataclass
class SurrogateModel:
    encoder: list[LstmCellParams]
    decoder: list[LstmCellParams]
    w1: np.ndarray  # (u, u)
    b1: np.ndarray
    w2: np.ndarray  # (u, k)
    b2: np.ndarray
    t_in: int
    t_out: int = 20
    norm: NormStats | None = field(default=None)

    @property
    def k(self) -> int:
        return self.w2.shape[1]

    @property
    def u(self) -> int:
        return self.w1.shape[0]

    # -- parameter plumbing -------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for tag, cells in (("enc", self.encoder), ("dec", self.decoder)):
            for i, cell in enumerate(cells):
                out[f"{tag}{i}_w"] = cell.w
                out[f"{tag}{i}_b"] = cell.b
        out.update(out1_w=self.w1, out1_b=self.b1, out2_w=self.w2, out2_b=self.b2)
        return out

    def with_params(self, p: dict[str, np.ndarray]) -> "SurrogateModel":
        n = sum(1 for name in p if name.startswith("enc") and name.endswith("_w"))
        return SurrogateModel(
            encoder=[LstmCellParams(p[f"enc{i}_w"], p[f"enc{i}_b"]) for i in range(n)],
            decoder=[LstmCellParams(p[f"dec{i}_w"], p[f"dec{i}_b"]) for i in range(n)],
            w1=p["out1_w"], b1=p["out1_b"], w2=p["out2_w"], b2=p["out2_b"],
            t_in=self.t_in, t_out=self.t_out, norm=self.norm,
        )

    def with_norm(self, norm: NormStats) -> "SurrogateModel":
        m = self.with_params(self.params())
        m.norm = norm
        return m

    # -- serialization -------------------------------------------------------
    def save(self, path) -> None:
        blocks = {"meta": np.array([self.t_in, self.t_out, self.k, self.u, len(self.encoder)])}
        blocks.update(self.params())
        if self.norm is not None:
            blocks["norm_mu"] = self.norm.mean
            blocks["norm_sd"] = self.norm.std
        container.save(path, blocks)

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        blocks = container.load(path)
        container.require(blocks, "meta")
        t_in, t_out, k, u, n = (int(v) for v in blocks["meta"])
        names = [f"{tag}{i}_{p}" for tag in ("enc", "dec") for i in range(n) for p in "wb"]
        container.require(blocks, *names, "out1_w", "out1_b", "out2_w", "out2_b")
        norm = None
        if "norm_mu" in blocks:
            norm = NormStats(blocks["norm_mu"], blocks["norm_sd"])
        skeleton = cls([], [], blocks["out1_w"], blocks["out1_b"],
                       blocks["out2_w"], blocks["out2_b"], t_in, t_out, norm)
        model = skeleton.with_params({name: blocks[name] for name in names}
                                     | {n_: blocks[n_] for n_ in ("out1_w", "out1_b", "out2_w", "out2_b")})
        if model.k != k or model.u != u:
            raise container.ContainerError("model metadata disagrees with weight shapes")
        return model


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_model(k: int, t_in: int, t_out: int = 20, u: int = 20, seed: int = 0,
               n_layers: int = N_LAYERS, forget_bias: float = 1.0,
               norm: NormStats | None = None) -> SurrogateModel:
    """Glorot-uniform weights, zero biases plus ``forget_bias`` on forget gates."""
    rng = np.random.default_rng(seed)

    def cell(d_in):
        b = np.zeros(4 * u)
        b[u:2 * u] = forget_bias
        return LstmCellParams(_glorot(rng, 4 * u, d_in + u), b)

    encoder = [cell(k if i == 0 else u) for i in range(n_layers)]
    decoder = [cell(u) for _ in range(n_layers)]
    w1 = _glorot(rng, u, u).T.copy()
    w2 = _glorot(rng, k, u).T.copy()
    return SurrogateModel(encoder, decoder, w1, np.zeros(u), w2, np.zeros(k), t_in, t_out, norm)


# -- tape-level graph ---------------------------------------------------------

def param_vars(tape: ad.Tape, model: SurrogateModel, trainable: bool) -> dict[str, ad.Var]:
    make = tape.variable if trainable else tape.constant
    return {name: make(v) for name, v in model.params().items()}


def encode_graph(pv: dict, window: ad.Var, n_layers: int, u: int):
    """Run the stacked encoder over ``window`` (B, T_in, k); returns (hs, cs)."""
    batch, t_in = window.shape[0], window.shape[1]
    hs = [np.zeros((batch, u)) for _ in range(n_layers)]
    cs = [np.zeros((batch, u)) for _ in range(n_layers)]
    for t in range(t_in):
        inp = window[:, t, :]
        for layer in range(n_layers):
            hs[layer], cs[layer] = ad.lstm_cell(inp, hs[layer], cs[layer],
                                                pv[f"enc{layer}_w"], pv[f"enc{layer}_b"])
            inp = hs[layer]
    return hs, cs


def decode_graph(pv: dict, latent, t_out: int, n_layers: int, u: int) -> ad.Var:
    """Decoder fed the latent vector (B, u) at every step; returns (B, T_out, k)."""
    tape = ad._tape_of(latent, *pv.values())
    latent = tape.lift(latent)
    batch = latent.shape[0]
    hs = [np.zeros((batch, u)) for _ in range(n_layers)]
    cs = [np.zeros((batch, u)) for _ in range(n_layers)]
    tops = []
    for _ in range(t_out):
        inp = latent
        for layer in range(n_layers):
            hs[layer], cs[layer] = ad.lstm_cell(inp, hs[layer], cs[layer],
                                                pv[f"dec{layer}_w"], pv[f"dec{layer}_b"])
            inp = hs[layer]
        tops.append(inp)
    seq = ad.stack(tops, axis=1)
    hidden = ad.relu(seq @ pv["out1_w"] + pv["out1_b"])
    return hidden @ pv["out2_w"] + pv["out2_b"]


def forward_graph(model: SurrogateModel, pv: dict, window: ad.Var) -> ad.Var:
    """Normalized window (B, T_in, k) -> normalized forecast (B, T_out, k)."""
    n = len(model.encoder)
    hs, _ = encode_graph(pv, window, n, model.u)
    return decode_graph(pv, hs[-1], model.t_out, n, model.u)


# -- numpy-facing operations -------------------------------------------------

def _check_window(model: SurrogateModel, window) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.t_in, model.k):
        raise ValueError(f"window shape {window.shape} != ({model.t_in}, {model.k})")
    return window


def encode(model: SurrogateModel, window) -> LatentState:
    """Final stacked encoder state for a normalized (T_in, k) window."""
    window = _check_window(model, window)
    tape = ad.Tape()
    pv = param_vars(tape, model, trainable=False)
    hs, cs = encode_graph(pv, tape.constant(window[None]), len(model.encoder), model.u)
    val = lambda v: (v.value if isinstance(v, ad.Var) else v)[0].copy()
    return LatentState([val(h) for h in hs], [val(c) for c in cs])


def decode(model: SurrogateModel, latent: LatentState, t_out: int | None = None) -> np.ndarray:
    """Normalized (T_out, k) forecast from the latent state's top hidden vector."""
    t_out = model.t_out if t_out is None else t_out
    top = np.asarray(latent.top, dtype=np.float64)
    if top.shape != (model.u,):
        raise ValueError(f"latent hidden vector must have length {model.u}")
    tape = ad.Tape()
    pv = param_vars(tape, model, trainable=False)
    out = decode_graph(pv, tape.constant(top[None]), t_out, len(model.decoder), model.u)
    return out.value[0].copy()


@dataclass
class Forecast:
    reduced: np.ndarray  # (T_out, k) raw POD coefficients
    full: np.ndarray     # (T_out, N)


def _norm_of(model: SurrogateModel) -> NormStats:
    if model.norm is not None:
        return model.norm
    return NormStats(np.zeros(model.k), np.ones(model.k))


def reduce_window(model: SurrogateModel, basis: PodBasis, window) -> np.ndarray:
    """Raw (T_in, k) coefficients from full states or pass-through coefficients."""
    window = np.asarray(window, dtype=np.float64)
    if model.k != basis.k:
        raise ValueError(f"model k={model.k} does not match basis k={basis.k}")
    if window.ndim == 2 and window.shape[1] == basis.k and basis.n_points != basis.k:
        coeffs = window
    else:
        coeffs = project(basis, window)
    if coeffs.shape[0] != model.t_in:
        raise ValueError(f"window length {coeffs.shape[0]} != T_in {model.t_in}")
    return coeffs


def forecast(model: SurrogateModel, basis: PodBasis, window) -> Forecast:
    """Project (if needed), normalize, encode, decode, denormalize, reconstruct."""
    coeffs = reduce_window(model, basis, window)
    norm = _norm_of(model)
    z_out = decode(model, encode(model, norm.apply(coeffs)))
    reduced = norm.invert(z_out)
    return Forecast(reduced, reconstruct(basis, reduced))


def forecast_batch(model: SurrogateModel, z_windows: np.ndarray) -> np.ndarray:
    """Normalized forecasts for a stack of normalized windows (B, T_in, k)."""
    tape = ad.Tape()
    pv = param_vars(tape, model, trainable=False)
    return forward_graph(model, pv, tape.constant(z_windows)).value


Objective = Callable[[ad.Tape, ad.Var], ad.Var]


def grad_wrt_input(model: SurrogateModel, basis: PodBasis, window,
                   objective: Objective) -> tuple[float, np.ndarray]:
    """Value and gradient of ``objective`` w.r.t. the normalized input window.

    ``objective(tape, coeffs)`` receives the denormalized reduced forecast
    as a (T_out, k) Var and must return a scalar Var.
    """
    coeffs = reduce_window(model, basis, window)
    norm = _norm_of(model)
    tape = ad.Tape()
    z = tape.variable(norm.apply(coeffs)[None])
    pv = param_vars(tape, model, trainable=False)
    z_out = forward_graph(model, pv, z)[0]
    j = objective(tape, z_out * norm.std + norm.mean)
    if not isinstance(j, ad.Var):
        j = tape.constant(j)
    grads = tape.backward(j, wrt=[z])
    return float(j.value), grads[z][0]
