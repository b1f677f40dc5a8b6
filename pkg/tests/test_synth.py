import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitta import fileformat
from bitta.synth import (
    DomainShift,
    StreamParams,
    apply_domain_shift,
    generate_stream,
    hr_random_walk,
    read_stream,
    shift_stream,
    write_stream,
)


def test_constant_hr_spectrum_peaks_at_one_hertz():
    params = StreamParams(duration_frames=600, hr_constant=60.0, noise_sigma=0.0)
    _, data = generate_stream(params, seed=4)
    freqs = np.fft.rfftfreq(600, d=1 / 30.0)
    bin_width = freqs[1]
    for h in range(data.shape[1]):
        for c in range(data.shape[2]):
            x = data[:, h, c] - data[:, h, c].mean()
            peak = freqs[np.argmax(np.abs(np.fft.rfft(x)))]
            assert abs(peak - 1.0) <= bin_width


def test_same_seed_bitwise_identical():
    params = StreamParams(duration_frames=400, noise_sigma=0.2)
    m1, d1 = generate_stream(params, 11)
    m2, d2 = generate_stream(params, 11)
    assert d1.tobytes() == d2.tobytes()
    assert m1 == m2
    _, d3 = generate_stream(params, 12)
    assert d1.tobytes() != d3.tobytes()


def test_random_walk_stays_in_range():
    m, _ = generate_stream(StreamParams(duration_frames=20000, hr_init=245.0, hr_step_sigma=2.0, regions=2), 0)
    assert m.hr_trace.min() >= 40 and m.hr_trace.max() <= 250


@settings(max_examples=30, deadline=None)
@given(start=st.floats(40, 250), sigma=st.floats(0, 30), seed=st.integers(0, 2**32))
def test_reflection_never_leaves_bounds(start, sigma, seed):
    walk = hr_random_walk(500, start, sigma, np.random.default_rng(seed))
    assert walk.min() >= 40 and walk.max() <= 250


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        generate_stream(StreamParams(duration_frames=0), 0)
    with pytest.raises(ValueError):
        generate_stream(StreamParams(hr_constant=300.0), 0)
    with pytest.raises(ValueError):
        DomainShift(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        DomainShift(spike_prob=1.5)


@pytest.fixture
def stream():
    return generate_stream(StreamParams(duration_frames=300, regions=6, noise_sigma=0.05), 3)


def test_identity_shift_is_exact(stream):
    _, data = stream
    out = apply_domain_shift(data, DomainShift.identity(3), seed=1)
    assert out.tobytes() == data.tobytes()


def test_gain_doubles_channel_zero(stream):
    _, data = stream
    out = apply_domain_shift(data, DomainShift(gain=(2.0, 1.0, 1.0)), seed=1)
    np.testing.assert_array_equal(out[..., 0], 2.0 * data[..., 0])
    np.testing.assert_array_equal(out[..., 1:], data[..., 1:])


def test_noise_increases_row_variance(stream):
    _, data = stream
    clean = apply_domain_shift(data, DomainShift(noise_sigma=0.0), seed=5)
    noisy = apply_domain_shift(data, DomainShift(noise_sigma=0.1), seed=5)
    assert np.all(noisy.var(axis=0) > clean.var(axis=0))


def test_shift_is_pure(stream):
    _, data = stream
    shift = DomainShift(noise_sigma=0.3, drift_amplitude=1.0, drift_frequency=0.2, spike_prob=0.1,
                        spike_region_fraction=0.5, spike_amplitude=2.0, phase_jitter_sigma=1.5)
    a = apply_domain_shift(data, shift, seed=9)
    b = apply_domain_shift(data, shift, seed=9)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a))


def test_roundtrip(tmp_path, stream):
    m, d = stream
    m, d = shift_stream(m, d, DomainShift(noise_sigma=0.2, spike_prob=0.05, spike_region_fraction=0.3,
                                          spike_amplitude=1.0), 2)
    path = tmp_path / "s.bin"
    write_stream(path, m, d)
    m2, d2 = read_stream(path)
    assert m2 == m
    assert d2.tobytes() == d.tobytes()
    # read(write(x)) is idempotent
    write_stream(tmp_path / "t.bin", m2, d2)
    assert (tmp_path / "t.bin").read_bytes() == path.read_bytes()


def test_truncated_payload(tmp_path, stream):
    path = tmp_path / "s.bin"
    write_stream(path, *stream)
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(fileformat.LengthMismatchError, match="length mismatch"):
        read_stream(path)


def test_unknown_version(tmp_path, stream):
    path = tmp_path / "s.bin"
    write_stream(path, *stream)
    raw = path.read_bytes().replace(b"bitta-stream/1", b"bitta-stream/9", 1)
    path.write_bytes(raw)
    with pytest.raises(fileformat.UnsupportedVersionError, match="unsupported version"):
        read_stream(path)


def test_corrupt_header(tmp_path):
    path = tmp_path / "s.bin"
    path.write_bytes(b"{not json\n\n\x00\x00")
    with pytest.raises(fileformat.CorruptHeaderError):
        read_stream(path)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_stream(tmp_path / "absent.bin")
