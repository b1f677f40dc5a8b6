"""Source pre-training, streaming predict-then-adapt evaluation, ablations."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, AdapterState, adapt_step
from .net import NetworkConfig, as_tensors, flatten, forward, init_params, load_checkpoint, save_checkpoint, unflatten
from .priors import PriorConfig, prior_loss_grad
from .stmap import build_window, shifted_pair
from .synth import read_stream

MODES = {
    "no-adapt": None,
    "priors": (False, False),
    "priors+pa": (True, False),
    "priors+rs": (False, True),
    "bi-tta": (True, True),
}
TRAILING_FRACTION = 0.25


@dataclass
class PretrainConfig:
    epochs: int = 2
    lr: float = 3e-5
    momentum: float = 0.9
    stride: int = 16
    seed: int = 0
    init_seed: int = 0
    clip: float = 100.0  # max gradient norm; 0 disables


@dataclass
class RunConfig:
    mode: str = "bi-tta"
    source_streams: list[str] = field(default_factory=list)
    target_stream: str = ""
    checkpoint: str = ""
    output_dir: str = "runs"
    window: int = 128
    spatial: int = 16
    stride: int | None = None  # default window // 4
    seed: int = 0
    net: NetworkConfig = field(default_factory=NetworkConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")
        if isinstance(self.net, dict):
            self.net = NetworkConfig.from_dict(self.net)
        if isinstance(self.prior, dict):
            self.prior = PriorConfig(**self.prior)
        if isinstance(self.adapter, dict):
            self.adapter = AdapterConfig(**self.adapter)
        if isinstance(self.pretrain, dict):
            self.pretrain = PretrainConfig(**self.pretrain)

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else max(1, self.window // 4)

    def adapter_for_mode(self) -> AdapterConfig | None:
        flags = MODES[self.mode]
        if flags is None:
            return None
        return replace(self.adapter, use_pa=flags[0], use_rs=flags[1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    mae: float
    rmse: float
    r: float | None  # None when either input has zero variance

    def as_row(self):
        return {"mae": self.mae, "rmse": self.rmse, "r": "undefined" if self.r is None else self.r}


def metrics(preds, gts) -> Metrics:
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one value")
    err = p - g
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    pc, gc = p - p.mean(), g - g.mean()
    denom = math.sqrt(float(pc @ pc) * float(gc @ gc))
    r = None if denom == 0 else float(pc @ gc) / denom
    return Metrics(mae, rmse, r)


def rolling_mae(preds, gts, span: int = 100) -> np.ndarray:
    err = np.abs(np.asarray(preds) - np.asarray(gts))
    c = np.concatenate([[0.0], np.cumsum(err)])
    idx = np.arange(1, err.size + 1)
    lo = np.maximum(0, idx - span)
    return (c[idx] - c[lo]) / (idx - lo)


RECORD_FIELDS = ["t", "t0", "pred_hr", "gt_hr", "L_p", "L_t", "L_s", "branch", "grad_norm", "final_norm"]


@dataclass
class MetricsTimeline:
    mode: str
    records: list[dict] = field(default_factory=list)

    @property
    def preds(self):
        return np.array([r["pred_hr"] for r in self.records])

    @property
    def gts(self):
        return np.array([r["gt_hr"] for r in self.records])

    def overall(self) -> Metrics:
        return metrics(self.preds, self.gts)

    def trailing(self, fraction: float = TRAILING_FRACTION) -> Metrics:
        n = len(self.records)
        start = n - max(1, int(round(n * fraction)))
        return metrics(self.preds[start:], self.gts[start:])

    def summary(self) -> dict:
        o, tr = self.overall(), self.trailing()
        out = {"mode": self.mode, "instances": len(self.records)}
        out.update({f"overall_{k}": v for k, v in o.as_row().items()})
        out.update({f"trailing_{k}": v for k, v in tr.as_row().items()})
        branches = [r["branch"] for r in self.records]
        for b in sorted(set(branches)):
            out[f"branch_{b}"] = branches.count(b)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RECORD_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, mode: str = "") -> "MetricsTimeline":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append({
                k: (r[k] if k == "branch" else int(r[k]) if k in ("t", "t0") else float(r[k]))
                for k in RECORD_FIELDS
            })
        return cls(mode, rows)


def format_summary(summary: dict) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in summary.items())


def parse_summary(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            try:
                out[k] = json.loads(v)
            except json.JSONDecodeError:
                out[k] = v
    return out


# ---------------------------------------------------------------------------
# pre-training


def _window_starts(n_frames: int, window: int, stride: int, first: int = 0) -> list[int]:
    return list(range(first, n_frames - window + 1, stride))


def pretrain_on(streams, net_config: NetworkConfig, cfg: PretrainConfig, window: int = 128, spatial: int = 16):
    """Supervised MSE fit of the HR vector to the window's mean ground truth.

    ``streams`` is a list of ``(manifest, data)``. Returns ``(params, report)``.
    """
    if not streams:
        raise ValueError("pre-training needs at least one source stream")
    samples = [
        (i, t0) for i, (m, _) in enumerate(streams) for t0 in _window_starts(m.duration_frames, window, cfg.stride)
    ]
    if not samples:
        raise ValueError("source streams are shorter than one window")
    rng = np.random.default_rng(cfg.seed)
    w = flatten(init_params(net_config, cfg.init_seed))
    buf = np.zeros_like(w)
    abs_err = []
    for _ in range(cfg.epochs):
        for j in rng.permutation(len(samples)):
            i, t0 = samples[j]
            m, data = streams[i]
            win = build_window(data, t0, window, spatial, m.hr_trace)
            with T.record() as rec:
                params = as_tensors(unflatten(w, net_config))
                hr, _ = forward(params, win, net_config)
                diff = hr - T.Tensor(np.full(hr.shape, win.gt_hr))
                loss = T.mean(T.multiply(diff, diff))
                grads = T.grad(loss, list(params.values()), rec)
            g = np.concatenate([x.reshape(-1) for x in grads])
            abs_err.append(abs(float(hr.data.mean()) - win.gt_hr))
            norm = np.linalg.norm(g)
            if cfg.clip and norm > cfg.clip:
                g = g * (cfg.clip / norm)
            buf = cfg.momentum * buf + g
            w = w - cfg.lr * buf
    k = min(100, len(abs_err))
    report = {
        "steps": len(abs_err),
        "first_mae": float(np.mean(abs_err[:k])),
        "last_mae": float(np.mean(abs_err[-k:])),
    }
    return unflatten(w, net_config), report


def pretrain(config: RunConfig):
    """Pre-train on ``config.source_streams`` and write ``config.checkpoint``."""
    streams = [read_stream(p) for p in config.source_streams]
    params, report = pretrain_on(streams, config.net, config.pretrain, config.window, config.spatial)
    note = json.dumps({"pretrain": asdict(config.pretrain), "sources": list(config.source_streams), **report},
                      sort_keys=True)
    if config.checkpoint:
        Path(config.checkpoint).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(config.checkpoint, params, config.net, note)
    return params, report


# ---------------------------------------------------------------------------
# streaming adaptation


def predict(params: dict, window, net_config: NetworkConfig) -> float:
    with T.record():
        hr, _ = forward({k: T.Tensor(v) for k, v in params.items()}, window, net_config)
    return float(hr.data.mean())


def run_tta_on(params: dict, net_config: NetworkConfig, manifest, data, config: RunConfig, progress=None):
    """Predict-then-adapt over the target stream; returns ``(timeline, final params)``."""
    if net_config.input_shape != (config.window, config.spatial, manifest.channels):
        raise ValueError(
            f"checkpoint expects input {net_config.input_shape}, run provides "
            f"{(config.window, config.spatial, manifest.channels)}"
        )
    delta_max = config.prior.delta_max
    starts = _window_starts(manifest.duration_frames, config.window, config.effective_stride, first=delta_max)
    if not starts:
        raise ValueError("target stream yields no instances")
    rng = np.random.default_rng(config.seed)
    acfg = config.adapter_for_mode()
    w = flatten(params)
    state = AdapterState.fresh(w.size, acfg) if acfg else None
    timeline = MetricsTimeline(config.mode)
    for n, t0 in enumerate(starts):
        pair = shifted_pair(data, t0, config.window, config.spatial, delta_max, rng, manifest.hr_trace)
        rec = {"t": n, "t0": t0, "gt_hr": pair[0].gt_hr, "L_p": 0.0, "L_t": 0.0, "L_s": 0.0,
               "branch": "none", "grad_norm": 0.0, "final_norm": 0.0}
        if state is None:
            rec["pred_hr"] = predict(unflatten(w, net_config), pair[0], net_config)
        else:
            w_next, state, info = adapt_step(state, w, prior_loss_grad(pair, config.prior, net_config))
            # the loss pass ran on the pre-update weights, so its HR mean is the prediction
            pred = info.extra.get("hr_mean")
            rec["pred_hr"] = pred if pred is not None else predict(unflatten(w, net_config), pair[0], net_config)
            rec.update(L_p=info.loss, L_t=info.extra.get("L_t", 0.0), L_s=info.extra.get("L_s", 0.0),
                       branch=info.branch, grad_norm=info.grad_norm, final_norm=info.final_norm)
            w = w_next
        timeline.records.append({k: rec[k] for k in RECORD_FIELDS})
        if progress is not None:
            progress(n, len(starts))
    return timeline, unflatten(w, net_config)


def write_outputs(timeline: MetricsTimeline, out_dir, config: RunConfig | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(timeline.to_csv())
    summary = timeline.summary()
    (out / "summary.txt").write_text(format_summary(summary))
    if config is not None:
        (out / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")
    plot_curves({timeline.mode: timeline}, out / "rolling_mae.svg")
    return summary


def run_tta(config: RunConfig, checkpoint=None, target=None):
    """File-level entry: load checkpoint and target stream, run, write outputs."""
    params, net_config = load_checkpoint(checkpoint or config.checkpoint)
    manifest, data = read_stream(target or config.target_stream)
    timeline, _ = run_tta_on(params, net_config, manifest, data, config)
    if config.output_dir:
        write_outputs(timeline, Path(config.output_dir), config)
    return timeline


# ---------------------------------------------------------------------------
# ablation


def plot_curves(timelines: dict, path, span: int = 100) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "bitta", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4))
        for mode, tl in timelines.items():
            ax.plot(rolling_mae(tl.preds, tl.gts, span), label=mode, lw=1.2)
        ax.set_xlabel("instance")
        ax.set_ylabel(f"rolling MAE (bpm, {span} instances)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def ablate_on(params, net_config, manifest, data, config: RunConfig, modes=tuple(MODES), workers: int = 1):
    """Run every mode on the same checkpoint and stream; returns {mode: timeline}."""

    def one(mode):
        return mode, run_tta_on(params, net_config, manifest, data, replace(config, mode=mode))[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return dict(ex.map(one, modes))
    return dict(one(m) for m in modes)


def ablation_table(timelines: dict) -> str:
    rows = [tl.summary() for tl in timelines.values()]
    cols = ["mode", "instances", "overall_mae", "overall_rmse", "overall_r", "trailing_mae", "trailing_rmse", "trailing_r"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def ablate(config: RunConfig, workers: int = 1):
    params, net_config = load_checkpoint(config.checkpoint)
    manifest, data = read_stream(config.target_stream)
    timelines = ablate_on(params, net_config, manifest, data, config, workers=workers)
    out = Path(config.output_dir)
    for mode, tl in timelines.items():
        write_outputs(tl, out / mode.replace("+", "_"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation_table(timelines))
    (out / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")
    plot_curves(timelines, out / "rolling_mae.svg")
    return timelines
