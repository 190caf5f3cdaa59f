import numpy as np
import pytest

from rvar import data
from rvar.data import SyntheticConfig, WaveComponent
from rvar.pod import FieldSeries, compute_pod


def small(**kw):
    base = dict(grid=(10, 16), n_days=400, noise_std=0.0, phase_noise=0.0, seed=1)
    base.update(kw)
    return SyntheticConfig(**base)


def test_zero_amplitudes_give_base_plus_seasonal():
    cfg = small(waves=(WaveComponent(0.0, 2, 3.0, 1.0),), base=5.0)
    s = data.generate(cfg)
    expected = 5.0 + cfg.seasonal_amplitude * np.cos(2 * np.pi * np.arange(400) / 365)
    np.testing.assert_allclose(s.data, np.broadcast_to(expected[:, None, None], s.data.shape),
                               atol=1e-12)


def test_single_component_is_periodic_after_removing_seasonal():
    c = WaveComponent(2.0, 2, 3.0, 2.0)  # W / s = 8 days
    cfg = small(waves=(c,))
    s = data.generate(cfg)
    anom = s.data - data.seasonal(cfg, np.arange(400))[:, None, None]
    period = 16 // 2
    np.testing.assert_allclose(anom[period:], anom[:-period], atol=1e-10)


def test_phase_noise_breaks_periodicity():
    c = WaveComponent(2.0, 2, 3.0, 2.0)
    cfg = small(waves=(c,), phase_noise=0.2)
    s = data.generate(cfg)
    anom = s.data - data.seasonal(cfg, np.arange(400))[:, None, None]
    assert np.abs(anom[8:] - anom[:-8]).max() > 0.1


def test_default_config_dims_and_five_mode_energy():
    cfg = SyntheticConfig()
    s = data.generate(cfg)
    assert s.data.shape == (2920, 40, 48)
    train, _ = data.split_years(s)
    basis = compute_pod(train, 5)
    assert basis.energy_fraction() >= 0.95


def test_generate_is_bit_reproducible():
    a, b = data.generate(small(noise_std=0.3, phase_noise=0.1)), data.generate(small(noise_std=0.3, phase_noise=0.1))
    assert a.data.tobytes() == b.data.tobytes()
    c = data.generate(small(noise_std=0.3, phase_noise=0.1, seed=2))
    assert c.data.tobytes() != a.data.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(grid=(4, 48))
    with pytest.raises(ValueError):
        SyntheticConfig(n_days=100)
    with pytest.raises(ValueError):
        SyntheticConfig(waves=((1.0, 2, 0.0, 1.0),))


def test_split_years_arithmetic():
    s = FieldSeries(np.zeros((2920, 2, 2)))
    train, test = data.split_years(s, 6, 1, 1)
    assert (train.day_index[0], train.day_index[-1] + 1) == (0, 2190)
    assert (test.day_index[0], test.day_index[-1] + 1) == (2555, 2920)
    assert train.day_index[0] % 365 == 0 and (test.day_index[0]) % 365 == 0
    assert len(train) % 365 == 0 and len(test) % 365 == 0
    assert test.day_index[0] - train.day_index[-1] - 1 >= 42


def test_split_years_guards():
    s = FieldSeries(np.zeros((2920, 2, 2)))
    with pytest.raises(ValueError):
        data.split_years(s, 6, 0, 1, t_in=14)
    with pytest.raises(ValueError):
        data.split_years(s, 7, 1, 1)


def test_climatology_examples():
    const = FieldSeries(np.full((730, 2, 3), 4.0))
    np.testing.assert_array_equal(data.climatology(const, 100), 4.0)
    rng = np.random.default_rng(0)
    f = rng.normal(size=(730, 2, 3))
    s = FieldSeries(f)
    np.testing.assert_allclose(data.climatology(s, 17), (f[17] + f[365 + 17]) / 2)
    with pytest.raises(ValueError):
        data.climatology(s, 365)
    with pytest.raises(ValueError):
        data.climatology(FieldSeries(f[:365]), 3)


def test_climatology_exact_for_pure_seasonal_data():
    cfg = SyntheticConfig(grid=(8, 8), waves=(), noise_std=0.0, phase_noise=0.0)
    s = data.generate(cfg)
    train, test = data.split_years(s)
    table = data.climatology_table(train)
    err = np.abs(table[test.day_index % 365] - test.data).max()
    assert err < 1e-10


def test_climatology_linearity():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(1095, 2, 2))
    a = data.climatology(FieldSeries(3.5 * f), 40)
    np.testing.assert_allclose(a, 3.5 * data.climatology(FieldSeries(f), 40), rtol=1e-14)


def test_persistence():
    window = np.random.default_rng(2).normal(size=(5, 6))
    fc = data.persistence(window, 4)
    assert fc.shape == (4, 6)
    np.testing.assert_array_equal(fc, np.tile(window[-1], (4, 1)))
    const = np.ones((3, 4))
    assert np.abs(data.persistence(const, 20) - 1.0).max() == 0


def test_persistence_error_grows_for_shifting_wave():
    w = 40
    x = np.arange(w)
    truth = np.stack([np.sin(2 * np.pi * (x - t) / w) for t in range(30)])  # 1 cell/day
    window, future = truth[:10], truth[10:30]
    fc = data.persistence(window, 20)
    mae = np.abs(fc - future).mean(axis=1)
    lead = np.arange(1, 21)
    oracle = [sum(abs(np.sin(2 * np.pi * (j - L) / w) - np.sin(2 * np.pi * j / w)) for j in range(w)) / w
              for L in lead]
    np.testing.assert_allclose(mae, oracle, atol=1e-12)
    # continuous-average limit (4/pi) sin(pi L / W) holds to grid resolution
    np.testing.assert_allclose(mae, 4 / np.pi * np.sin(np.pi * lead / w), atol=5e-3)
    assert np.all(np.diff(mae) >= -1e-12)
    assert mae[0] <= mae[-1]


def test_default_data_persistence_lead1_below_lead20():
    s = data.generate(SyntheticConfig())
    _, test = data.split_years(s)
    flat = test.flat()
    t_in, t_out = 14, 20
    errs = []
    for j in range(0, len(flat) - t_in - t_out + 1, 5):
        fc = data.persistence(flat[j:j + t_in], t_out)
        errs.append(np.abs(fc - flat[j + t_in:j + t_in + t_out]).mean(axis=1))
    per_lead = np.mean(errs, axis=0)
    assert per_lead[0] <= per_lead[-1]
