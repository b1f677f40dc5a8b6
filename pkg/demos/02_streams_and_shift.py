"""
Synthetic pulse streams and domain shift
========================================

A stream is a (frames, regions, channels) array of skin-colour traces that
pulse at a known heart rate. Domain shifts corrupt it the way a new camera,
new lighting or a moving subject would.
"""
import numpy as np

from bitta.synth import DomainShift, StreamParams, generate_stream, shift_stream

manifest, clean = generate_stream(StreamParams(duration_frames=900, hr_constant=72.0, noise_sigma=0.02), seed=1)
print("stream", clean.shape, "at", manifest.fps, "fps")

# the dominant frequency of any trace sits at the heart rate
trace = clean[:, 0, 1] - clean[:, 0, 1].mean()
freqs = np.fft.rfftfreq(trace.size, d=1 / manifest.fps)
print("spectral peak: %.1f bpm (truth 72)" % (60 * freqs[np.argmax(np.abs(np.fft.rfft(trace)))]))

shifts = {
    "gain": DomainShift(gain=(1.5, 0.8, 1.0)),
    "drift": DomainShift(drift_amplitude=1.0, drift_frequency=0.1),
    "spikes": DomainShift(spike_prob=0.02, spike_region_fraction=0.4, spike_amplitude=3.0),
    "noise": DomainShift(noise_sigma=0.3),
}
for name, shift in shifts.items():
    _, shifted = shift_stream(manifest, clean, shift, seed=7)
    delta = shifted - clean
    print(f"{name:7s} mean change {delta.mean():+.3f}  rms change {np.sqrt((delta ** 2).mean()):.3f}")
