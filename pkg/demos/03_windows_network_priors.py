"""
From stream to heart rate, and the two consistency priors
=========================================================

A window of W frames is resized to H regions and min-max normalised per row
to give a spatial-temporal map. The network turns it into a length-W heart
rate vector plus four feature maps. The priors need no labels: neighbouring
windows should agree on heart rate, and neighbouring regions should have
similar features.
"""
import numpy as np

from bitta import net
from bitta.priors import PriorConfig, prior_loss_grad
from bitta.stmap import shifted_pair
from bitta.synth import StreamParams, generate_stream

manifest, data = generate_stream(StreamParams(duration_frames=400, noise_sigma=0.05), seed=2)
window, shifted, delta = shifted_pair(data, 100, 128, 16, 59, np.random.default_rng(0), manifest.hr_trace)
print("window", window.values.shape, "ground truth %.1f bpm" % window.gt_hr, "partner shifted by", delta, "frames")

cfg = net.NetworkConfig()
print("parameters", cfg.n_params(), "feature maps", cfg.feature_shapes())

w = net.flatten(net.init_params(cfg, seed=0))
loss, grad, info = prior_loss_grad((window, shifted), PriorConfig(), cfg)(w)
print("untrained prediction %.1f bpm" % info["hr_mean"])
print("L_t %.3f  L_s %.3f  L_p %.4f  |grad| %.3f" % (info["L_t"], info["L_s"], loss, np.linalg.norm(grad)))
