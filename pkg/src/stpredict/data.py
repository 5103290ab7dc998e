"""Synthetic V2V CSI generation, preprocessing, splits and on-disk formats."""
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

MAX_DOPPLER_HZ = 806.0
WINDOW = 20


class DataError(ValueError):
    """Bad dataset contents or configuration."""


class FormatError(DataError):
    """Malformed tensor or dataset file."""


# Per-scenario defaults. Doppler values are per-burst rotation rates and stay
# below the 10 Hz Nyquist rate of 50 ms bursts; see README for the rationale.
SCENARIOS = {
    "S1_city_campus": dict(max_doppler_hz=2.0, n_paths=8, path_lifetime=80, tx_drift=0.05, rx_drift=0.05),
    "S2_static_rx": dict(max_doppler_hz=3.0, n_paths=6, path_lifetime=80, tx_drift=0.10, rx_drift=0.0),
    "S3_highway": dict(max_doppler_hz=4.0, n_paths=3, path_lifetime=50, tx_drift=0.15, rx_drift=0.15),
}
SCENARIO_ALIASES = {"S1": "S1_city_campus", "S2": "S2_static_rx", "S3": "S3_highway"}


@dataclass
class ScenarioConfig:
    """Generator settings. ``None`` fields take the scenario's preset."""
    scenario: str = "S1_city_campus"
    bursts: int = 2000
    delay_taps: int = 61
    n_antennas: int = 8
    carrier_hz: float = 5.9e9
    burst_interval_s: float = 0.05
    max_doppler_hz: float = None
    n_paths: int = None
    stationary_segments: list = field(default_factory=list)
    seed: int = 0
    path_lifetime: float = None   # mean bursts a path lives; 0 keeps paths forever
    fade_bursts: int = 5          # raised-cosine ramp at birth and death
    tx_drift: float = None        # max angular drift, rad/s
    rx_drift: float = None
    rolloff: float = 0.25         # raised-cosine tap envelope
    delay_decay: float = 0.3      # power-delay profile decay, fraction of D

    def __post_init__(self):
        self.scenario = SCENARIO_ALIASES.get(self.scenario, self.scenario)
        if self.scenario not in SCENARIOS:
            raise DataError(f"unknown scenario {self.scenario!r}; expected one of {sorted(SCENARIOS)}")
        for k, v in SCENARIOS[self.scenario].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        self.stationary_segments = [tuple(int(x) for x in s) for s in self.stationary_segments]
        self.validate()

    def validate(self):
        if self.bursts < 1 or self.delay_taps < 1 or self.n_antennas < 1 or self.n_paths < 1:
            raise DataError("bursts, delay_taps, n_antennas and n_paths must all be >= 1")
        if not 0 <= self.max_doppler_hz <= MAX_DOPPLER_HZ:
            raise DataError(f"max_doppler_hz must lie in [0, {MAX_DOPPLER_HZ}], got {self.max_doppler_hz}")
        if self.burst_interval_s <= 0 or self.carrier_hz <= 0:
            raise DataError("burst_interval_s and carrier_hz must be positive")
        if self.path_lifetime < 0 or self.fade_bursts < 0:
            raise DataError("path_lifetime and fade_bursts must be non-negative")
        if not 0 <= self.rolloff <= 1 or self.delay_decay <= 0:
            raise DataError("rolloff must lie in [0, 1] and delay_decay must be positive")
        if self.scenario == "S2_static_rx" and self.rx_drift != 0:
            raise DataError("S2_static_rx keeps receive-side angular phases static; rx_drift must be 0")
        for s in self.stationary_segments:
            if len(s) != 2 or s[0] < 0 or s[1] < 0:
                raise DataError(f"stationary segment {s} must be a (start, length) pair of non-negative ints")

    def to_dict(self):
        d = asdict(self)
        d["stationary_segments"] = [list(s) for s in self.stationary_segments]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown scenario keys {unknown}")
        return cls(**d)


# -- generator -----------------------------------------------------------------

@dataclass
class PathDraws:
    """Per-path random quantities, one row per path instance.

    Instances occupy ``n_paths`` slots; each slot is refilled when its path dies.
    """
    slot: np.ndarray
    birth: np.ndarray
    death: np.ndarray       # exclusive; ``bursts`` for paths alive to the end
    gain: np.ndarray        # complex
    delay: np.ndarray       # in taps
    doppler: np.ndarray     # Hz
    tx_angle: np.ndarray
    rx_angle: np.ndarray
    tx_rate: np.ndarray     # rad/s
    rx_rate: np.ndarray
    phase0: np.ndarray


def draw_paths(cfg):
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for slot in range(cfg.n_paths):
        t = 0
        first = True
        while t < cfg.bursts:
            if cfg.path_lifetime > 0:
                life = max(int(round(rng.exponential(cfg.path_lifetime))), 2 * cfg.fade_bursts + 1)
            else:
                life = cfg.bursts
            birth = t if first else t - cfg.fade_bursts  # overlap fades so power stays smooth
            death = min(t + life, cfg.bursts)
            delay = rng.uniform(0, max(cfg.delay_taps - 1, 0))
            power = math.exp(-delay / (cfg.delay_decay * cfg.delay_taps))
            gain = np.sqrt(power / 2) * (rng.standard_normal() + 1j * rng.standard_normal())
            rows.append((slot, max(birth, 0), death, gain, delay,
                         rng.uniform(-cfg.max_doppler_hz, cfg.max_doppler_hz),
                         rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi),
                         rng.uniform(-cfg.tx_drift, cfg.tx_drift),
                         rng.uniform(-cfg.rx_drift, cfg.rx_drift) if cfg.rx_drift else 0.0,
                         rng.uniform(0, 2 * np.pi)))
            t = death
            first = False
    cols = list(zip(*rows))
    kinds = [np.int64, np.int64, np.int64, np.complex128] + [np.float64] * 7
    return PathDraws(*(np.asarray(c, dtype=k) for c, k in zip(cols, kinds)))


def raised_cosine(x, beta):
    """Raised-cosine pulse, unit peak at 0."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sinc(x) * np.cos(np.pi * beta * x)
    den = 1 - (2 * beta * x) ** 2
    sing = np.isclose(den, 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sing, np.pi / 4 * np.sinc(1 / (2 * beta)) if beta else 0.0, out / np.where(sing, 1, den))
    return out


def uca_phase(angle, n):
    """Phases across a uniform circular array with half-wavelength element spacing."""
    if n == 1:
        return np.zeros(np.shape(angle) + (1,))
    radius = 0.5 / (2 * math.sin(math.pi / n))  # in wavelengths
    elem = 2 * np.pi * np.arange(n) / n
    return 2 * np.pi * radius * np.cos(np.asarray(angle)[..., None] - elem)


def moving_mask(cfg):
    """1 for bursts whose phases advance, 0 inside stationary segments."""
    mask = np.ones(cfg.bursts)
    for start, length in cfg.stationary_segments:
        mask[start:start + length] = 0
    return mask


def _envelope(birth, death, bursts, fade, first, last):
    t = np.arange(bursts)
    env = ((t >= birth) & (t < death)).astype(np.float64)
    if fade > 0:
        if not first:
            up = (t - birth + 0.5) / fade
            env *= np.where(up < 1, 0.5 - 0.5 * np.cos(np.pi * np.clip(up, 0, 1)), 1)
        if not last:
            down = (death - t - 0.5) / fade
            env *= np.where(down < 1, 0.5 - 0.5 * np.cos(np.pi * np.clip(down, 0, 1)), 1)
    return env


def generate_synthetic(cfg, paths=None):
    """Sum-of-paths CSI, complex64 of shape ``[T, D, N, N]`` (time, tap, TX, RX)."""
    if paths is None:
        paths = draw_paths(cfg)
    T, D, N, dt = cfg.bursts, cfg.delay_taps, cfg.n_antennas, cfg.burst_interval_s
    # elapsed "moving" time per burst; frozen inside stationary segments
    clock = np.concatenate([[0.0], np.cumsum(moving_mask(cfg)[1:])]) * dt
    taps = np.arange(D)
    H = np.zeros((T, D, N, N), dtype=np.complex128)
    for p in range(len(paths.slot)):
        slot = paths.slot
        first = p == 0 or slot[p - 1] != slot[p]
        last = paths.death[p] >= T
        env = _envelope(paths.birth[p], paths.death[p], T, cfg.fade_bursts, first, last)
        live = env > 0
        if not live.any():
            continue
        tc = clock[live]
        rot = env[live] * np.exp(1j * (paths.phase0[p] + 2 * np.pi * paths.doppler[p] * tc))
        g = raised_cosine(taps - paths.delay[p], cfg.rolloff)
        tx = uca_phase(paths.tx_angle[p] + paths.tx_rate[p] * tc, N)   # [t, N]
        rx = uca_phase(paths.rx_angle[p] + paths.rx_rate[p] * tc, N)
        steer = np.exp(1j * (tx[:, :, None] + rx[:, None, :]))
        H[live] += paths.gain[p] * rot[:, None, None, None] * g[None, :, None, None] * steer[:, None]
    return H.astype(np.complex64)


# -- preprocessing -------------------------------------------------------------

def complex_to_real(H):
    """Map each trailing ``N×N`` complex matrix to ``[[Re, -Im], [Im, Re]]``."""
    H = np.asarray(H)
    re, im = H.real.astype(np.float32), H.imag.astype(np.float32)
    top = np.concatenate([re, -im], axis=-1)
    bot = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def real_to_complex(X):
    n = X.shape[-1] // 2
    return (X[..., n:, :n] * 1j + X[..., :n, :n]).astype(np.complex64)


def pair_scales(frames):
    """Per antenna-pair RMS of the complex magnitude, shape ``[N, N]``."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[-1] // 2
    re, im = frames[..., :n, :n], frames[..., n:, :n]
    power = (re ** 2 + im ** 2).reshape(-1, n, n).mean(axis=0)
    return np.sqrt(power)


def apply_scales(frames, scales):
    frames = np.asarray(frames)
    if frames.size == 0:
        return frames.astype(np.float32)
    tiled = np.tile(np.asarray(scales, dtype=np.float64), (2, 2))
    return (frames / tiled).astype(np.float32)


def antennawise_normalize(train, *others):
    """Scale every split by training-set per-pair RMS.

    Returns ``([train', *others'], scales)``.
    """
    train = np.asarray(train)
    if train.size == 0:
        raise DataError("antenna-wise normalization needs a non-empty training split")
    scales = pair_scales(train)
    zero = np.argwhere(~(scales > 0))
    if len(zero):
        i, j = zero[0]
        raise DataError(f"antenna pair (tx={i}, rx={j}) has zero energy in the training split")
    return [apply_scales(s, scales) for s in (train, *others)], scales.astype(np.float32)


def window_slices(seq, width=WINDOW, stride=WINDOW):
    """Non-overlapping (by default) windows over the leading axis; the tail is dropped."""
    T = len(seq)
    if T < width:
        return []
    return [seq[s:s + width] for s in range(0, T - width + 1, stride)]


def split_sizes(n, ratios=(7, 1, 2)):
    """Largest-remainder apportionment of ``n`` items."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise DataError(f"ratios must be three non-negative numbers with a positive sum, got {ratios}")
    exact = [n * r / sum(ratios) for r in ratios]
    sizes = [int(math.floor(e)) for e in exact]
    order = sorted(range(3), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[:n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split_indices(n, ratios=(7, 1, 2), seed=0):
    if n < 10:
        raise DataError(f"need at least 10 windows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b, _ = split_sizes(n, ratios)
    return sorted(perm[:a].tolist()), sorted(perm[a:a + b].tolist()), sorted(perm[a + b:].tolist())


def split_dataset(windows, ratios=(7, 1, 2), seed=0):
    idx = split_indices(len(windows), ratios, seed)
    return tuple([windows[i] for i in part] for part in idx)


# -- CSIT tensor files -----------------------------------------------------------

CSIT_MAGIC = b"CSIT"
CSIT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<c8")}


def write_tensor(path, arr):
    """Write a float32 or complex64 array; complex is stored as interleaved f32."""
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        code, arr = 1, arr.astype("<c8")
    else:
        code, arr = 0, arr.astype("<f4")
    if arr.ndim > 255:
        raise FormatError(f"{arr.ndim} dimensions exceed the format limit of 255")
    with open(path, "wb") as fh:
        fh.write(CSIT_MAGIC + struct.pack("<BBB", CSIT_VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def decode_tensor(raw, name="<bytes>"):
    if len(raw) < 7:
        raise FormatError(f"{name}: truncated header, {len(raw)} bytes before byte 7")
    if raw[:4] != CSIT_MAGIC:
        raise FormatError(f"{name}: bad magic {bytes(raw[:4])!r} at byte 0")
    version, code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != CSIT_VERSION:
        raise FormatError(f"{name}: unsupported version {version} at byte 4")
    if code not in _DTYPES:
        raise FormatError(f"{name}: unknown dtype code {code} at byte 5")
    head = 7 + 8 * ndim
    if len(raw) < head:
        raise FormatError(f"{name}: truncated dims at byte {len(raw)}, expected {head} header bytes")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 7)
    dt = _DTYPES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    have = len(raw) - head
    if have != need:
        what = "truncated" if have < need else "oversized"
        raise FormatError(f"{name}: {what} payload at byte {head}: expected {need} bytes, got {have}")
    return np.frombuffer(raw, dtype=dt, offset=head).reshape(shape).copy()


def read_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), str(path))


# -- dataset directories -----------------------------------------------------------

def git_blob_sha1(data):
    """Content hash in git's blob convention."""
    h = hashlib.sha1(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def hash_files(paths):
    """Combined hash over ``(name, blob-hash)`` pairs in sorted name order."""
    h = hashlib.sha1()
    for p in sorted(paths, key=lambda q: os.path.basename(q)):
        with open(p, "rb") as fh:
            h.update(f"{os.path.basename(p)} {git_blob_sha1(fh.read())}\n".encode())
    return h.hexdigest()


@dataclass
class Dataset:
    train: np.ndarray   # [n, L, D, 2N, 2N] float32
    val: np.ndarray
    test: np.ndarray
    scales: np.ndarray
    config: ScenarioConfig = None
    splits: dict = None

    @property
    def frame_shape(self):
        return self.train.shape[2:]


def build_dataset(cfg, ratios=(7, 1, 2), split_seed=None, width=WINDOW):
    """Generate, convert, window, split, then normalize with training statistics."""
    frames = complex_to_real(generate_synthetic(cfg))
    windows = window_slices(frames, width, width)
    seed = cfg.seed if split_seed is None else split_seed
    parts = split_indices(len(windows), ratios, seed)
    stacked = [np.stack([windows[i] for i in p]) if p else np.zeros((0, width) + frames.shape[1:], np.float32)
               for p in parts]
    (train, val, test), scales = antennawise_normalize(*stacked)
    return Dataset(train, val, test, scales, cfg, dict(zip(("train", "val", "test"), parts)))


SPLITS = ("train", "val", "test")


def save_dataset(ds, out_dir, extra=None):
    """Write ``<split>.csit``, ``scales.csit`` and ``manifest.json``; return the dataset hash."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name in SPLITS:
        p = os.path.join(out_dir, f"{name}.csit")
        write_tensor(p, getattr(ds, name))
        paths.append(p)
    p = os.path.join(out_dir, "scales.csit")
    write_tensor(p, ds.scales)
    paths.append(p)
    digest = hash_files(paths)
    manifest = {
        "format": "stpredict-dataset/1",
        "config": ds.config.to_dict() if ds.config else None,
        "splits": {k: {"file": f"{k}.csit", "windows": ds.splits[k] if ds.splits else None,
                       "count": int(len(getattr(ds, k)))} for k in SPLITS},
        "scales": {"file": "scales.csit", "values": ds.scales.tolist()},
        "frame_shape": list(ds.train.shape[1:]),
        "dataset_hash": digest,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def load_dataset(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.isfile(mpath):
        raise DataError(f"no manifest.json in {path!r}")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    arrays = {}
    for name in SPLITS:
        arrays[name] = read_tensor(os.path.join(path, manifest["splits"][name]["file"]))
    scales = read_tensor(os.path.join(path, manifest["scales"]["file"]))
    cfg = ScenarioConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    splits = {k: manifest["splits"][k].get("windows") for k in SPLITS}
    return Dataset(arrays["train"], arrays["val"], arrays["test"], scales, cfg, splits)


def dataset_hash(path):
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    files = [os.path.join(path, manifest["splits"][k]["file"]) for k in SPLITS]
    files.append(os.path.join(path, manifest["scales"]["file"]))
    return hash_files(files)


def desk_config(scenario, seed=0, **overrides):
    """Small configuration used by the desk-scale experiments: D=4, 8×8 frames."""
    base = dict(scenario=scenario, bursts=1200, delay_taps=4, n_antennas=4, seed=seed)
    base.update(overrides)
    return ScenarioConfig(**base)


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)
