"""Small convolutional HR regressor with one latent map exposed per block.

Layout is channels-last throughout: a window is (W, H', C), block ``i``
emits a map of shape (W_i, H_i, C_i).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .fileformat import CountMismatchError, CorruptHeaderError, LengthMismatchError, read_container, write_container

CKPT_FORMAT = "bitta-ckpt/1"


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple[int, int, int] = (128, 16, 3)
    stem_channels: int = 8
    channels: tuple[int, ...] = (8, 16, 32, 32)
    pool: tuple[tuple[int, int], ...] = ((2, 2),) * 4
    kernel: int = 3
    head_scale: float = 50.0  # bpm per unit of head activation
    hr_offset: float = 80.0  # initial head bias, bpm
    norm: bool = True  # per-channel standardisation after each block conv

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "pool", tuple(tuple(int(v) for v in p) for p in self.pool))
        if len(self.channels) < 1:
            raise ValueError("need at least one block")
        if len(self.pool) != len(self.channels):
            raise ValueError("one pooling factor pair per block")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.feature_shapes()  # validates pooling

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    @property
    def head_length(self) -> int:
        return self.input_shape[0]

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        w, h, _ = self.input_shape
        shapes = []
        for (pw, ph), c in zip(self.pool, self.channels):
            pw, ph = (pw if w > 1 else 1), (ph if h > 1 else 1)
            if w % pw or h % ph:
                raise ValueError(f"pooling ({pw}, {ph}) does not divide map ({w}, {h})")
            w, h = w // pw, h // ph
            shapes.append((w, h, c))
        return shapes

    def effective_pool(self) -> list[tuple[int, int]]:
        w, h, _ = self.input_shape
        out = []
        for pw, ph in self.pool:
            pw, ph = (pw if w > 1 else 1), (ph if h > 1 else 1)
            out.append((pw, ph))
            w, h = w // pw, h // ph
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        cin = self.input_shape[2]
        shapes = {"stem.k": (k, k, cin, self.stem_channels), "stem.b": (self.stem_channels,)}
        cin = self.stem_channels
        for i, c in enumerate(self.channels):
            shapes[f"block{i}.k"] = (k, k, cin, c)
            shapes[f"block{i}.b"] = (c,)
            cin = c
        w_last, h_last, c_last = self.feature_shapes()[-1]
        shapes["head.w"] = (h_last * c_last, 1)
        shapes["head.b"] = (1, 1)
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["channels"] = list(self.channels)
        d["pool"] = [list(p) for p in self.pool]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in params.values()])


def unflatten(flat: np.ndarray, config: NetworkConfig) -> dict[str, np.ndarray]:
    shapes = config.param_shapes()
    n = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != n:
        raise CountMismatchError(f"count mismatch: config needs {n} parameters, got {flat.size}")
    out, pos = {}, 0
    for name, s in shapes.items():
        size = int(np.prod(s))
        out[name] = flat[pos : pos + size].reshape(s)
        pos += size
    return out


def init_params(config: NetworkConfig, seed: int) -> dict[str, np.ndarray]:
    """He-style uniform weights scaled by fan-in; zero biases except the head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name == "head.b":
            params[name] = np.full(shape, config.hr_offset)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in) if name != "head.w" else np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def forward(params: dict[str, T.Tensor], window: np.ndarray, config: NetworkConfig):
    """Return ``(hr_vector, features)``; hr_vector has length W, in bpm."""
    values = window.values if hasattr(window, "values") else window
    if tuple(values.shape) != config.input_shape:
        raise T.ShapeError("forward", values.shape, config.input_shape)
    pad = config.kernel // 2
    x = T.Tensor(values)
    h = T.relu(T.conv2d(x, params["stem.k"], params["stem.b"], pad=pad))
    features = []
    for i, factors in enumerate(config.effective_pool()):
        h = T.conv2d(h, params[f"block{i}.k"], params[f"block{i}.b"], pad=pad)
        if config.norm:
            h = T.instnorm(h)
        h = T.relu(h)
        if factors != (1, 1):
            h = T.avgpool(h, factors)
        features.append(h)
    w_last, h_last, c_last = h.shape
    per_step = T.reshape(h, (w_last, h_last * c_last)) @ params["head.w"]
    bias = T.Tensor(np.ones((w_last, 1))) @ params["head.b"]
    out = T.scale(per_step, config.head_scale) + bias
    hr = T.reshape(T.interp1d(out, config.head_length), (config.head_length,))
    return hr, features


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}


def save_checkpoint(path, params: dict[str, np.ndarray], config: NetworkConfig, note: str = "") -> None:
    flat = flatten(params)
    if flat.size != config.n_params():
        raise CountMismatchError(f"count mismatch: {flat.size} values for {config.n_params()} parameters")
    header = {
        "format": CKPT_FORMAT,
        "config": config.to_dict(),
        "segments": [[k, list(v)] for k, v in config.param_shapes().items()],
        "n_params": config.n_params(),
        "provenance": note,
    }
    write_container(path, header, flat, "f8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], NetworkConfig]:
    try:
        header, flat = read_container(path, CKPT_FORMAT)
    except LengthMismatchError as exc:
        raise CountMismatchError(f"count mismatch: {exc}") from None
    try:
        config = NetworkConfig.from_dict(header["config"])
        declared = int(header["n_params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: bad checkpoint header ({exc})") from None
    if declared != config.n_params() or flat.size != config.n_params():
        raise CountMismatchError(
            f"count mismatch: config implies {config.n_params()} parameters, "
            f"header declares {declared}, payload holds {flat.size}"
        )
    return unflatten(flat, config), config

