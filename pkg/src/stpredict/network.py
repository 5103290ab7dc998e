"""Stacked predictive model, rollouts, ablation variants and complexity counters."""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cells
from .autodiff import Tensor, add, conv2d, flop_counter, mul, no_grad
from .cells import LayerState

BASES = ("convlstm", "stlstm", "calstm")
BASE_LABELS = {"convlstm": "ConvLSTM", "stlstm": "ST-ConvLSTM", "calstm": "CA-ConvLSTM"}
FULL_CHANNELS = (128, 64, 64, 64)
FULL_GHU_CHANNELS = 128


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass(frozen=True)
class VariantSpec:
    base: str = "calstm"
    ta: bool = False
    sta: bool = False
    ghu: bool = False
    channels: tuple = FULL_CHANNELS
    ghu_channels: int = FULL_GHU_CHANNELS
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self):
        if self.base not in BASES:
            raise ConfigError(f"unknown base cell {self.base!r}; expected one of {BASES}")
        if self.base != "calstm" and (self.ta or self.sta or self.ghu):
            raise ConfigError(f"attention contexts and the gradient highway need base 'calstm', got {self.base!r}")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be a non-empty list of positive widths, got {list(self.channels)}")
        if self.ghu and len(self.channels) < 2:
            raise ConfigError("the gradient highway sits between layers 1 and 2; need at least 2 layers")
        if self.ghu_channels < 1:
            raise ConfigError(f"ghu_channels must be positive, got {self.ghu_channels}")
        if self.kernel not in (1, 3, 5, 7):
            raise ConfigError(f"kernel must be an odd size in (1, 3, 5, 7), got {self.kernel}")

    @property
    def name(self):
        label = BASE_LABELS[self.base]
        if self.ta and self.sta:
            label += "+CC.Atten"
        elif self.ta:
            label += "+T.Atten"
        elif self.sta:
            label += "+S.T.Atten"
        if self.ghu:
            label += "+GHU"
        return label

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def table_variants(channels=FULL_CHANNELS, ghu_channels=FULL_GHU_CHANNELS, kernel=3):
    """The seven ablation rows, from the ConvLSTM baseline to the full model."""
    kw = dict(channels=tuple(channels), ghu_channels=ghu_channels, kernel=kernel)
    return [
        VariantSpec("convlstm", **kw),
        VariantSpec("stlstm", **kw),
        VariantSpec("calstm", **kw),
        VariantSpec("calstm", ta=True, **kw),
        VariantSpec("calstm", sta=True, **kw),
        VariantSpec("calstm", ta=True, sta=True, **kw),
        VariantSpec("calstm", ta=True, sta=True, ghu=True, **kw),
    ]


@dataclass
class ModelState:
    layers: list
    m: Tensor = None
    z: Tensor = None


class Model:
    """Input projection, recurrent stack (plus optional highway), output projection.

    ``params`` is a flat, ordered name -> Tensor registry; per-layer views in
    ``layer_params`` share the same Tensor objects.
    """

    def __init__(self, variant, input_channels, spatial, seed=0, dtype=np.float32):
        if input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {input_channels}")
        if spatial < 1 or spatial % 2:
            raise ConfigError(f"spatial extent must be even, got {spatial}")
        self.variant = variant
        self.input_channels = int(input_channels)
        self.spatial = int(spatial)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.layer_params = []
        self.ghu_params = None
        self._build(np.random.default_rng(self.seed))

    @property
    def mem_channels(self):
        return self.variant.channels[0]

    def _register(self, prefix, group):
        for k, v in group.items():
            if isinstance(v, dict):
                self._register(f"{prefix}.{k}", v)
            else:
                self.params[f"{prefix}.{k}"] = v

    def _build(self, rng):
        v, dt = self.variant, self.dtype
        ch, k, cm = v.channels, v.kernel, self.mem_channels
        w, b = cells.conv_params(rng, self.input_channels, ch[0], 1, dt)
        self.params["input.w"], self.params["input.b"] = w, b
        for i, hidden in enumerate(ch):
            if i == 0:
                in_ch = ch[0]
            elif i == 1 and v.ghu:
                in_ch = v.ghu_channels
            else:
                in_ch = ch[i - 1]
            if v.base == "convlstm":
                p = cells.init_convlstm(rng, in_ch, hidden, k, dt)
            elif v.base == "stlstm":
                p = cells.init_st_lstm(rng, in_ch, hidden, cm, k, dt)
            else:
                p = cells.init_causal_lstm(rng, in_ch, hidden, cm, k, dt)
                if v.ta:
                    p["ta"] = cells.init_temporal_attention(rng, hidden, k, dt)
                if v.sta:
                    p["sta"] = cells.init_sta(rng, cm, dt)
            self._register(f"layer{i}", p)
            self.layer_params.append(p)
        if v.ghu:
            self.ghu_params = cells.init_ghu(rng, ch[0], v.ghu_channels, k, dt)
            self._register("ghu", self.ghu_params)
        w, b = cells.conv_params(rng, ch[-1], self.input_channels, 1, dt)
        self.params["output.w"], self.params["output.b"] = w, b

    # -- recurrence ----------------------------------------------------
    def parameters(self):
        return list(self.params.values())

    def init_state(self, batch):
        S, dt = self.spatial, self.dtype

        def z(c):
            return Tensor(np.zeros((batch, c, S, S), dtype=dt), dtype=dt)
        layers = [LayerState(z(c), z(c)) for c in self.variant.channels]
        m = z(self.mem_channels) if self.variant.base != "convlstm" else None
        zz = z(self.variant.ghu_channels) if self.variant.ghu else None
        return ModelState(layers, m, zz)

    def step(self, frame, state):
        """Advance one time step; returns ``(prediction, new_state)``."""
        v = self.variant
        inp = conv2d(frame, self.params["input.w"], self.params["input.b"])
        m, z = state.m, state.z
        layers = []
        for i, (st, p) in enumerate(zip(state.layers, self.layer_params)):
            if v.base == "convlstm":
                st = cells.convlstm_forward(inp, st, p)
            elif v.base == "stlstm":
                st, m = cells.st_lstm_forward(inp, st, m, p)
            else:
                st, m = cells.causal_lstm_forward(inp, *cells.context_memory_update(st, m, p.get("ta"), p.get("sta")), p)
            layers.append(st)
            inp = st.h
            if i == 0 and v.ghu:
                z = cells.ghu_forward(st.h, z, self.ghu_params)
                inp = z
        pred = conv2d(layers[-1].h, self.params["output.w"], self.params["output.b"])
        return pred, ModelState(layers, m, z)


def build_model(variant, input_channels, spatial, seed=0, dtype=np.float32):
    return Model(variant, input_channels, spatial, seed=seed, dtype=dtype)


@dataclass
class Rollout:
    """Predictions for targets ``t = 2 .. J+K`` (list index ``t - 2``)."""
    predictions: list
    J: int
    K: int
    mode: str = "train"

    def __len__(self):
        return len(self.predictions)

    def numpy(self):
        """Stacked predictions, shape ``[L-1, B, D, S, S]``."""
        return np.stack([p.data for p in self.predictions])

    @property
    def forecast(self):
        return self.predictions[self.J - 1:]


def rollout(model, frames, J, K, mode="train"):
    """Run the recurrence over a batch of sequences ``[B, L, D, S, S]``.

    Steps ``1 .. J`` consume ground truth; later steps consume the model's
    previous output. Frames beyond ``J`` are never read.
    """
    if J < 1 or K < 0:
        raise ValueError(f"need J >= 1 and K >= 0, got J={J}, K={K}")
    frames = np.asarray(frames)
    if frames.ndim != 5:
        raise ValueError(f"frames must be [B, L, D, S, S], got shape {frames.shape}")
    if frames.shape[1] < J:
        raise ValueError(f"sequence length {frames.shape[1]} is shorter than J={J}")
    dt = getattr(model, "dtype", np.float32)
    state = model.init_state(frames.shape[0])
    preds, prev = [], None
    for s in range(1, J + K):
        x = Tensor(frames[:, s - 1], dtype=dt) if s <= J else prev
        prev, state = model.step(x, state)
        preds.append(prev)
    return Rollout(preds, J, K, mode)


def predict(model, frames, J, K):
    """Gradient-free rollout returning the stacked ``[L-1, B, ...]`` array."""
    with no_grad():
        return rollout(model, frames, J, K, mode="eval").numpy()


def count_params(model):
    return int(sum(p.data.size for p in model.params.values()))


def count_flops(model, input_shape=None, L=20):
    """Analytic FLOPs of one batch-1 rollout over an ``L``-frame sequence.

    Multiply-adds count 2, activations and elementwise ops 1 per element.
    """
    if input_shape is None:
        input_shape = (model.input_channels, model.spatial, model.spatial)
    frames = np.zeros((1, L) + tuple(input_shape), dtype=model.dtype)
    with flop_counter() as tally, no_grad():
        rollout(model, frames, J=L, K=0)
    return tally[0]


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"STCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path):
    """Header (magic, version, JSON manifest) followed by raw little-endian f32 blobs."""
    manifest = {
        "variant": model.variant.to_dict(),
        "input_channels": model.input_channels,
        "spatial": model.spatial,
        "seed": model.seed,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    if len(raw) < 9:
        raise CheckpointError(f"{path}: truncated header at byte {len(raw)}")
    version, hlen = struct.unpack_from("<BI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte 4")
    if len(raw) < 9 + hlen:
        raise CheckpointError(f"{path}: header needs {hlen} bytes, file has {len(raw) - 9} after byte 9")
    manifest = json.loads(raw[9:9 + hlen].decode("utf-8"))
    return manifest, raw, 9 + hlen


def load_checkpoint(path, expect_variant=None):
    manifest, raw, off = read_checkpoint_header(path)
    variant = VariantSpec.from_dict(manifest["variant"])
    if expect_variant is not None and expect_variant != variant:
        raise ConfigError(f"checkpoint variant {variant.to_dict()} does not match requested {expect_variant.to_dict()}")
    model = Model(variant, manifest["input_channels"], manifest["spatial"], seed=manifest.get("seed", 0))
    names = [p["name"] for p in manifest["params"]]
    if names != list(model.params):
        raise CheckpointError(f"{path}: parameter manifest does not match the rebuilt model")
    for entry in manifest["params"]:
        t = model.params[entry["name"]]
        n = int(np.prod(entry["shape"])) * 4
        if off + n > len(raw):
            raise CheckpointError(f"{path}: blob {entry['name']} needs {n} bytes at byte {off}, file ends at {len(raw)}")
        t.data[...] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=off).reshape(entry["shape"])
        off += n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after byte {off}")
    return model


class LinearPredictor:
    """Two-parameter next-frame model ``x_{t+1} = a * x_t + b``; a test bed for the meta step."""

    def __init__(self, a=0.0, b=0.0, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params = {
            "a": Tensor(np.full((1, 1, 1, 1), a, dtype=dtype), requires_grad=True, dtype=dtype),
            "b": Tensor(np.full((1, 1, 1, 1), b, dtype=dtype), requires_grad=True, dtype=dtype),
        }

    def parameters(self):
        return list(self.params.values())

    def init_state(self, batch):
        return None

    def step(self, frame, state):
        return add(mul(frame, self.params["a"]), self.params["b"]), state
