import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from paracool import dsp


def boxcar_3db_oracle(n, fs):
    """Independent route: root of the DTFT magnitude of an n-tap mean filter."""
    def h(f):
        w = 2 * math.pi * f / fs
        return abs(np.sum(np.exp(-1j * w * np.arange(n))) / n) - 1 / math.sqrt(2)
    return optimize.brentq(h, 1e-9 * fs, fs / n)


@pytest.mark.parametrize("n", [5, 17, 143])
def test_boxcar_3db_points(n):
    fs = 125e6
    f3 = dsp.boxcar_3db_frequency(n, fs)
    assert f3 == pytest.approx(boxcar_3db_oracle(n, fs), rel=1e-9)
    assert f3 == pytest.approx(0.4425 * fs / n, rel=0.02)


def test_prefilter_length_for_3p2_mhz():
    assert dsp.prefilter_length_for_bandwidth(3.2e6, 125e6) == 17
    assert dsp.boxcar_3db_frequency(17, 125e6) == pytest.approx(3.25e6, rel=0.01)


def test_prefilter_dc_and_impulse():
    cfg = dsp.ControllerConfig(f_pfb=7e3, prefilter_len=17)
    state = dsp.ControllerState.initial(cfg)
    out = [dsp.prefilter(1 if k == 0 else 0, state) for k in range(40)]
    np.testing.assert_allclose(out[:17], 1 / 17, rtol=1e-12)
    np.testing.assert_allclose(out[17:], 0.0, atol=1e-15)
    state = dsp.ControllerState.initial(cfg)
    out = [dsp.prefilter(3, state) for _ in range(40)]
    assert out[-1] == pytest.approx(3.0)


def _rbw_of_stream(samples, f_pfb, tick, n):
    cfg = dsp.ControllerConfig(f_pfb=f_pfb, tick=tick, n_periods=n, prefilter_len=1)
    state = dsp.ControllerState.initial(cfg)
    z = 0
    for k, x in enumerate(samples):
        z = dsp.rbw_integrate(dsp.demodulate(x, k, f_pfb, tick), state)
    return z, cfg


@pytest.mark.parametrize("amp,theta", [(1.0, 0.3), (0.25, -2.0), (2.0, 3.0)])
def test_tone_recovery_integer_periods(amp, theta):
    f_pfb, tick = 10e3, 1e-6      # exactly 100 ticks per period
    k = np.arange(400)
    x = amp * np.sin(2 * math.pi * f_pfb * k * tick + theta)
    z, _ = _rbw_of_stream(x, f_pfb, tick, 2)
    assert abs(z) == pytest.approx(amp, rel=1e-6)
    assert dsp.wrap_phase(np.angle(z) - (theta - math.pi / 2)) == pytest.approx(0, abs=1e-6)


def test_tone_recovery_non_commensurate():
    # 7 kHz at 1 us: 142.857 ticks per period, tau rounded to 143 ticks
    f_pfb, tick = 7e3, 1e-6
    k = np.arange(1000)
    x = 0.8 * np.sin(2 * math.pi * f_pfb * k * tick + 1.1)
    z, cfg = _rbw_of_stream(x, f_pfb, tick, 1)
    assert cfg.rbw_len == 143
    assert cfg.tau == pytest.approx(142.9e-6, abs=0.2e-6)
    assert abs(z) == pytest.approx(0.8, rel=0.01)
    assert dsp.wrap_phase(np.angle(z) - (1.1 - math.pi / 2)) == pytest.approx(0, abs=0.02)


def test_dc_and_second_harmonic_rejected():
    f_pfb, tick = 10e3, 1e-6
    k = np.arange(300)
    z, _ = _rbw_of_stream(np.full(k.size, 5.0), f_pfb, tick, 1)
    assert abs(z) < 1e-9
    z, _ = _rbw_of_stream(np.sin(2 * math.pi * 2 * f_pfb * k * tick + 0.4), f_pfb, tick, 1)
    assert abs(z) < 1e-9


def test_rbw_nulls_at_multiples_of_inverse_tau():
    f_pfb, tick, n = 10e3, 1e-6, 10
    tau = n / f_pfb
    freqs = np.fft.rfftfreq(4096, tick)
    k = np.arange(4096)
    for m in (1, 2, 3, 4, 5):
        for side in (-1, 1):
            f = f_pfb + side * m / tau
            x = np.sin(2 * math.pi * f * k * tick)
            z, _ = _rbw_of_stream(x, f_pfb, tick, n)
            assert abs(z) < 1e-6, (m, side)
    # the measured response has its nulls within one frequency bin of m/tau
    df = freqs[1]
    offs = np.linspace(0.5 / tau, 5.5 / tau, 101)
    resp = []
    for off in offs:
        x = np.sin(2 * math.pi * (f_pfb + off) * k[:2000] * tick)
        resp.append(abs(_rbw_of_stream(x, f_pfb, tick, n)[0]))
    resp = np.array(resp)
    minima = [offs[i] for i in range(1, len(offs) - 1) if resp[i] <= resp[i - 1] and resp[i] <= resp[i + 1]]
    for m in (1, 2, 3, 4, 5):
        assert min(abs(v - m / tau) for v in minima) <= df


def test_rbw_bandwidth_property():
    cfg = dsp.ControllerConfig(f_pfb=7e3, tick=1e-6, n_periods=2)
    assert cfg.rbw_bandwidth == pytest.approx(0.4425 * 7e3 / 2, rel=0.01)


def test_lock_and_schedule():
    cfg = dsp.ControllerConfig(f_pfb=7e3)
    state = dsp.ControllerState.initial(cfg)
    assert dsp.lock_lo(1.0, state, 1.0) == pytest.approx(1.0)
    assert dsp.lock_lo(3.0, state, 0.5) == pytest.approx(2.0)
    # wrap-aware: the short way round from 3.0 to -3.0 crosses pi
    state.f[dsp.F_LO] = 3.0
    assert dsp.lock_lo(-3.0, state, 0.5) == pytest.approx(dsp.wrap_phase(3.0 + (2 * math.pi - 6.0) / 2))
    assert dsp.schedule_gain(0.0, 0.11, 0.5) == 0.0
    assert dsp.schedule_gain(0.25, 0.11, 0.5) == pytest.approx(0.055)
    assert dsp.schedule_gain(5.0, 0.11, 0.5) == pytest.approx(0.11)
    with pytest.raises(ValueError):
        dsp.lock_lo(0.0, state, 0.0)


@given(st.floats(-1e3, 1e3))
def test_wrap_phase_range(x):
    y = dsp.wrap_phase(x)
    assert -math.pi < y <= math.pi
    assert math.isclose(math.cos(y), math.cos(x), abs_tol=1e-9)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=400), st.floats(0, 2 * math.pi))
def test_drive_bounded_and_lo_wrapped(counts, phi):
    cfg = dsp.ControllerConfig(f_pfb=7e3, tick=1e-6, prefilter_len=1, phi_pfb=phi, mag_ref=0.01)
    tr = dsp.run_pipeline(counts, cfg)
    assert np.all(np.abs(tr.drive) <= cfg.mod_max + 1e-15)
    assert np.all((tr.lo_phase > -math.pi) & (tr.lo_phase <= math.pi))


def test_pipeline_locks_to_tone():
    # noiseless "count" tone: LO settles on the tone's sine phase, drive = m sin(lo + phi)
    f_pfb, tick = 10e3, 1e-6
    k = np.arange(3000)
    theta = 0.7
    x = 1.0 + 0.5 * np.sin(2 * math.pi * f_pfb * k * tick + theta)
    cfg = dsp.ControllerConfig(f_pfb=f_pfb, tick=tick, prefilter_len=1, phi_pfb=0.4, mag_ref=0.5,
                               mod_max=0.2)
    tr = dsp.run_pipeline(x, cfg)
    tone_phase = dsp.wrap_phase(2 * math.pi * f_pfb * k[-1] * tick + theta)
    assert dsp.wrap_phase(tr.lo_phase[-1] - tone_phase) == pytest.approx(0, abs=1e-6)
    assert tr.magnitude[-1] == pytest.approx(0.5, rel=1e-6)
    assert tr.drive[-1] == pytest.approx(0.2 * math.sin(tone_phase + 0.4), abs=1e-6)
    assert abs(tr.phase_error[-1]) < 1e-6


def test_process_tick_matches_run_pipeline():
    rng = np.random.default_rng(3)
    counts = rng.poisson(0.02, 2000)
    cfg = dsp.ControllerConfig(f_pfb=7e3, tick=1e-6, prefilter_len=1, mag_ref=0.01, phi_pfb=1.0)
    tr = dsp.run_pipeline(counts, cfg)
    state = dsp.ControllerState.initial(cfg)
    drive = [dsp.process_tick(c, state, cfg).modulation for c in counts]
    np.testing.assert_array_equal(drive, tr.drive)
    assert state.tick_index == counts.size
    assert state.lo_phase == tr.lo_phase[-1]


def test_resumable_state():
    rng = np.random.default_rng(4)
    counts = rng.poisson(0.05, 1000)
    cfg = dsp.ControllerConfig(f_pfb=5.5e3, tick=1e-6, prefilter_len=3, mag_ref=0.01)
    whole = dsp.run_pipeline(counts, cfg)
    state = dsp.ControllerState.initial(cfg)
    a = dsp.run_pipeline(counts[:377], cfg, state)
    b = dsp.run_pipeline(counts[377:], cfg, state)
    np.testing.assert_array_equal(np.concatenate([a.drive, b.drive]), whole.drive)


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_stream_round_trip(tmp_path, suffix):
    counts = np.array([0, 1, 0, 0, 3, 2, 0])
    p = dsp.write_stream(tmp_path / f"c{suffix}", counts)
    np.testing.assert_array_equal(dsp.read_stream(p), counts)
    drive = np.array([0.0, 0.1, -0.05, 1e-12])
    p = dsp.write_stream(tmp_path / f"d{suffix}", drive, header="modulation")
    np.testing.assert_array_equal(dsp.read_stream(p, header="modulation"), drive)


@pytest.mark.parametrize("kw", [dict(f_pfb=-1.0), dict(f_pfb=7e3, mod_max=1.0), dict(f_pfb=7e3, lock_gain=0.0),
                                dict(f_pfb=7e3, n_periods=0), dict(f_pfb=7e3, prefilter_len=0),
                                dict(f_pfb=7e3, tick=1e-3)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        dsp.ControllerConfig(**kw)


def test_for_detection_reference():
    cfg = dsp.ControllerConfig.for_detection(7e3, 5e6, tick=1e-6, reference_swing=0.004)
    assert cfg.mag_ref == pytest.approx(0.5 * 0.004 * 5e6 * 1e-6)
    with pytest.raises(ValueError):
        dsp.ControllerConfig.for_detection(7e3, 5e6, reference_swing=0.0)
