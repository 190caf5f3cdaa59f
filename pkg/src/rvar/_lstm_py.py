"""Pure numpy LSTM cell kernels (fallback when the extension is absent)."""
import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(x, h, c, w, b):
    u = h.shape[1]
    z = np.concatenate([x, h], axis=1) @ w.T + b
    gates = np.empty_like(z)
    gates[:, :2 * u] = _sigmoid(z[:, :2 * u])
    gates[:, 2 * u:3 * u] = np.tanh(z[:, 2 * u:3 * u])
    gates[:, 3 * u:] = _sigmoid(z[:, 3 * u:])
    i, f, g, o = gates[:, :u], gates[:, u:2 * u], gates[:, 2 * u:3 * u], gates[:, 3 * u:]
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, gates, tc


def lstm_backward(dh, dc, x, h, c, w, gates, tc):
    u = h.shape[1]
    d = x.shape[1]
    i, f, g, o = gates[:, :u], gates[:, u:2 * u], gates[:, 2 * u:3 * u], gates[:, 3 * u:]
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.empty_like(gates)
    dz[:, :u] = dct * g * i * (1.0 - i)
    dz[:, u:2 * u] = dct * c * f * (1.0 - f)
    dz[:, 2 * u:3 * u] = dct * i * (1.0 - g * g)
    dz[:, 3 * u:] = dh * tc * o * (1.0 - o)
    xh = np.concatenate([x, h], axis=1)
    dw = dz.T @ xh
    db = dz.sum(axis=0)
    dxh = dz @ w
    return dxh[:, :d], dxh[:, d:], dct * f, dw, db
