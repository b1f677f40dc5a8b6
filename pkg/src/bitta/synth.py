"""Synthetic rPPG recordings and parameterised domain shifts.

A recording is an array ``traces[frame, region, channel]`` of raw colour
intensities. Each (region, channel) trace is a baseline plus a sinusoidal
pulse whose instantaneous frequency follows a heart-rate random walk.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .fileformat import CorruptHeaderError, LengthMismatchError, read_container, write_container

STREAM_FORMAT = "bitta-stream/1"
HR_MIN, HR_MAX = 40.0, 250.0


@dataclass(frozen=True)
class DomainShift:
    """Corruptions applied to a clean recording.

    Order of application: phase jitter, gain, offset, illumination drift,
    motion spikes, additive noise.
    """

    gain: tuple[float, ...] = (1.0, 1.0, 1.0)
    offset: tuple[float, ...] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    drift_amplitude: float = 0.0
    drift_frequency: float = 0.0
    spike_prob: float = 0.0
    spike_region_fraction: float = 0.0
    spike_amplitude: float = 0.0
    phase_jitter_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gain", tuple(float(g) for g in self.gain))
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))
        if len(self.gain) != len(self.offset):
            raise ValueError("gain and offset need one entry per channel")
        for name in ("noise_sigma", "drift_amplitude", "drift_frequency", "spike_prob",
                     "spike_region_fraction", "spike_amplitude", "phase_jitter_sigma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if self.spike_prob > 1 or self.spike_region_fraction > 1:
            raise ValueError("probabilities must be <= 1")

    @classmethod
    def identity(cls, channels: int = 3) -> "DomainShift":
        return cls(gain=(1.0,) * channels, offset=(0.0,) * channels)

    def is_identity(self) -> bool:
        return (
            all(g == 1.0 for g in self.gain)
            and all(o == 0.0 for o in self.offset)
            and self.noise_sigma == 0
            and self.drift_amplitude == 0
            and (self.spike_prob == 0 or self.spike_amplitude == 0 or self.spike_region_fraction == 0)
            and self.phase_jitter_sigma == 0
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain"], d["offset"] = list(self.gain), list(self.offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainShift":
        return cls(**d)


@dataclass(frozen=True)
class StreamParams:
    """Generation knobs. ``hr_constant`` pins the heart rate when set."""

    duration_frames: int = 3000
    fps: float = 30.0
    regions: int = 25
    channels: int = 3
    hr_init: float | None = None
    hr_constant: float | None = None
    hr_step_sigma: float = 0.2
    noise_sigma: float = 0.0
    phase_spread: float = 0.3

    def validate(self):
        if self.duration_frames < 1 or self.regions < 1 or self.channels < 1:
            raise ValueError("duration_frames, regions and channels must be >= 1")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.hr_step_sigma < 0 or self.noise_sigma < 0 or self.phase_spread < 0:
            raise ValueError("sigmas must be >= 0")
        for v in (self.hr_init, self.hr_constant):
            if v is not None and not HR_MIN <= v <= HR_MAX:
                raise ValueError(f"heart rate {v} outside [{HR_MIN}, {HR_MAX}]")


@dataclass
class StreamManifest:
    seed: int
    fps: float
    duration_frames: int
    regions: int
    channels: int
    hr_trace: np.ndarray
    shift: DomainShift | None = None
    shift_seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hr_trace = np.asarray(self.hr_trace, dtype=np.float64)
        if self.hr_trace.shape != (self.duration_frames,):
            raise ValueError("hr_trace length must equal duration_frames")
        if self.hr_trace.min() < HR_MIN or self.hr_trace.max() > HR_MAX:
            raise ValueError("hr_trace leaves the physiological range")

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "fps": float(self.fps),
            "duration_frames": int(self.duration_frames),
            "regions": int(self.regions),
            "channels": int(self.channels),
            "hr_trace": [float(v) for v in self.hr_trace],
            "shift": None if self.shift is None else self.shift.to_dict(),
            "shift_seed": self.shift_seed,
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StreamManifest":
        d = dict(d)
        if d.get("shift") is not None:
            d["shift"] = DomainShift.from_dict(d["shift"])
        return cls(**d)

    def __eq__(self, other):
        return isinstance(other, StreamManifest) and self.to_dict() == other.to_dict()


def _as_f32(x: np.ndarray) -> np.ndarray:
    # keep float64 arrays but only float32-representable values, so files roundtrip exactly
    return x.astype(np.float32).astype(np.float64)


def hr_random_walk(n: int, start: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian random walk reflected at the physiological bounds."""
    steps = rng.normal(0.0, sigma, size=n - 1)
    out = np.empty(n)
    out[0] = start
    x = start
    for i, s in enumerate(steps, start=1):
        x += s
        if x > HR_MAX:
            x = 2 * HR_MAX - x
        if x < HR_MIN:
            x = 2 * HR_MIN - x
        x = min(max(x, HR_MIN), HR_MAX)
        out[i] = x
    return out


def generate_stream(params: StreamParams, seed: int) -> tuple[StreamManifest, np.ndarray]:
    """Draw a clean recording. Pure function of ``(params, seed)``."""
    params.validate()
    rng = np.random.default_rng(seed)
    n, h, c = params.duration_frames, params.regions, params.channels
    if params.hr_constant is not None:
        hr = np.full(n, float(params.hr_constant))
    else:
        start = params.hr_init if params.hr_init is not None else rng.uniform(55.0, 110.0)
        hr = hr_random_walk(n, float(start), params.hr_step_sigma, rng)

    # phase at frame t integrates hr over frames [0, t)
    cycles = np.concatenate([[0.0], np.cumsum(hr[:-1])]) / 60.0 / params.fps
    phase = 2 * np.pi * cycles

    baseline = rng.uniform(80.0, 200.0, size=(h, c))
    channel_weight = np.resize(np.array([0.6, 1.0, 0.5]), c)
    amplitude = channel_weight * rng.uniform(0.6, 1.4, size=(h, c))
    region_phase = rng.normal(0.0, params.phase_spread, size=h) if params.phase_spread else np.zeros(h)

    pulse = np.sin(phase[:, None] + region_phase[None, :])
    traces = baseline[None] + amplitude[None] * pulse[:, :, None]
    if params.noise_sigma > 0:
        traces = traces + rng.normal(0.0, params.noise_sigma, size=traces.shape)

    manifest = StreamManifest(
        seed=int(seed),
        fps=params.fps,
        duration_frames=n,
        regions=h,
        channels=c,
        hr_trace=hr,
        shift=None,
        params=asdict(params),
    )
    return manifest, _as_f32(traces)


def _fractional_delay(traces: np.ndarray, delays: np.ndarray) -> np.ndarray:
    n = traces.shape[0]
    t = np.arange(n, dtype=np.float64)
    out = np.empty_like(traces)
    for r, d in enumerate(delays):
        src = np.clip(t - d, 0, n - 1)
        for ch in range(traces.shape[2]):
            out[:, r, ch] = np.interp(src, t, traces[:, r, ch])
    return out


def apply_domain_shift(data: np.ndarray, shift: DomainShift, seed: int, fps: float = 30.0) -> np.ndarray:
    """Corrupt ``data`` (frames x regions x channels); identity returns it unchanged."""
    if shift.is_identity():
        return data.copy()
    n, h, c = data.shape
    if len(shift.gain) != c:
        raise ValueError(f"shift has {len(shift.gain)} channels, data has {c}")
    rng = np.random.default_rng(seed)
    out = np.array(data, dtype=np.float64)

    if shift.phase_jitter_sigma > 0:
        out = _fractional_delay(out, rng.normal(0.0, shift.phase_jitter_sigma, size=h))
    out = out * np.asarray(shift.gain)[None, None, :]
    out = out + np.asarray(shift.offset)[None, None, :]
    if shift.drift_amplitude > 0:
        t = np.arange(n) / fps
        drift = shift.drift_amplitude * np.sin(2 * np.pi * shift.drift_frequency * t + rng.uniform(0, 2 * np.pi))
        out = out + drift[:, None, None]
    if shift.spike_prob > 0 and shift.spike_amplitude > 0 and shift.spike_region_fraction > 0:
        hit_frames = rng.random(n) < shift.spike_prob
        hit_regions = rng.random((n, h)) < shift.spike_region_fraction
        signs = rng.choice([-1.0, 1.0], size=(n, h))
        spikes = shift.spike_amplitude * signs * (hit_frames[:, None] & hit_regions)
        out = out + spikes[:, :, None]
    if shift.noise_sigma > 0:
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("domain shift produced non-finite values")
    return _as_f32(out)


def shift_stream(manifest: StreamManifest, data: np.ndarray, shift: DomainShift, seed: int):
    """Apply ``shift`` and record it in a copy of the manifest."""
    shifted = apply_domain_shift(data, shift, seed, fps=manifest.fps)
    return replace(manifest, shift=shift, shift_seed=int(seed)), shifted


def write_stream(path, manifest: StreamManifest, data: np.ndarray) -> None:
    expected = (manifest.duration_frames, manifest.regions, manifest.channels)
    if data.shape != expected:
        raise ValueError(f"data shape {data.shape} does not match manifest {expected}")
    header = {"format": STREAM_FORMAT, "manifest": manifest.to_dict(), "shape": list(expected)}
    write_container(path, header, data.reshape(-1), "f4")


def read_stream(path) -> tuple[StreamManifest, np.ndarray]:
    header, payload = read_container(path, STREAM_FORMAT)
    try:
        manifest = StreamManifest.from_dict(header["manifest"])
        shape = tuple(header["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: bad manifest ({exc})") from None
    if int(np.prod(shape)) != payload.size:
        raise LengthMismatchError(f"{path}: length mismatch, shape {shape} vs {payload.size} values")
    return manifest, payload.astype(np.float64).reshape(shape)
