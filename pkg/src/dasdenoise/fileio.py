"""On-disk formats: DGRID binary grids, CSV grids, PGM previews, and the
key=value run configuration."""

from __future__ import annotations

import configparser
import os
import struct
from pathlib import Path

import numpy as np

from .cpunet import atomic_write

DGRID_MAGIC = b"DASG"
DGRID_VERSION = 1
_HEADER = struct.Struct("<4sBIIB")  # magic, version, rows, cols, dtype code
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- DGRID ------------------------------------------------------------------


def dgrid_bytes(grid, dtype="float32") -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"DGRID stores 2-D grids, got shape {grid.shape}")
    code = {"float32": 0, "float64": 1}[np.dtype(dtype).name]
    payload = np.ascontiguousarray(grid, dtype=DTYPE_CODES[code]).tobytes()
    return _HEADER.pack(DGRID_MAGIC, DGRID_VERSION, grid.shape[0], grid.shape[1], code) + payload


def write_dgrid(path, grid, dtype="float32"):
    atomic_write(path, dgrid_bytes(grid, dtype))


def read_dgrid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, rows, cols, code = _HEADER.unpack_from(raw)
    if magic != DGRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DGRID_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    payload = raw[_HEADER.size:]
    if len(payload) != rows * cols * dt.itemsize:
        raise FormatError(
            f"{path}: payload length mismatch ({len(payload)} bytes for {rows}x{cols} {dt.name})"
        )
    return np.frombuffer(payload, dtype=dt).reshape(rows, cols).astype(dt.newbyteorder("="))


def read_grid(path) -> np.ndarray:
    """DGRID, or comma-separated text when the suffix is ``.csv``."""
    if str(path).lower().endswith(".csv"):
        return np.loadtxt(path, delimiter=",", ndmin=2)
    return read_dgrid(path)


def write_grid(path, grid, dtype="float32"):
    if str(path).lower().endswith(".csv"):
        grid = np.asarray(grid)
        lines = [",".join(repr(float(v)) for v in row) for row in grid]
        atomic_write(path, ("\n".join(lines) + "\n").encode())
    else:
        write_dgrid(path, grid, dtype)


def load_noise_pool(directory) -> list[np.ndarray]:
    files = sorted(Path(directory).glob("*.dgrid"))
    if not files:
        raise FileNotFoundError(f"no .dgrid noise records in {directory}")
    return [read_dgrid(f).astype(np.float64) for f in files]


# -- plotting ---------------------------------------------------------------


def heatmap_bytes(grid, lo_pct=2.0, hi_pct=98.0) -> bytes:
    """Binary PGM (P5). Amplitudes are clipped to the percentile window and
    mapped linearly onto 0..255."""
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValueError("cannot plot a grid with non-finite values")
    lo, hi = np.percentile(grid, [lo_pct, hi_pct])
    if hi > lo:
        img = np.round((np.clip(grid, lo, hi) - lo) / (hi - lo) * 255.0)
    else:
        img = np.full(grid.shape, 128.0)
    rows, cols = grid.shape
    return f"P5\n{cols} {rows}\n255\n".encode() + img.astype(np.uint8).tobytes()


def plot_heatmap(grid, path):
    atomic_write(path, heatmap_bytes(grid))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    cols, rows = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: rows * cols], dtype=np.uint8).reshape(rows, cols)


# -- run configuration --------------------------------------------------------

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0},
    "model": {"kind": "cpunet", "preset": "synthetic", "dropout": 0.0, "slope": 0.2},
    "training": {"epochs": 100, "batch_size": 32, "alpha": 1.2, "lr": 1e-3, "overlap": 40},
    "patching": {"size": 48, "overlap": 24},
    "simulation": {
        "nx": 256, "nz": 512, "dx": 1.0, "nt": 1000, "dt": 0.001, "f0": 50.0,
        "source_x": 128, "source_z": 2, "recording": "strain-rate",
    },
    "noise": {
        "target_snr": 0.5, "synthetic_fraction": 0.85, "erratic_scale": 5.0,
        "trace_prob": 0.1, "corner": 0.0,
    },
    "baselines": {"f_lo": 10.0, "f_hi": 120.0, "taper": 5.0, "median_time": 1, "median_channels": 5},
}


def _coerce(section, key, value):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return str(value)


def _choice(*options):
    return lambda v: v in options, f"one of {', '.join(options)}"


_POSITIVE = (lambda v: v > 0, "> 0")
_NONNEG = (lambda v: v >= 0, ">= 0")
_FRACTION = (lambda v: 0 <= v <= 1, "in [0, 1]")

# cheap range checks at load time; the modules re-validate on use
CHECKS = {
    "model.kind": _choice("cpunet", "plain"),
    "model.preset": _choice("synthetic", "field"),
    "model.dropout": (lambda v: 0 <= v < 1, "in [0, 1)"),
    "model.slope": _NONNEG,
    "training.epochs": _NONNEG,
    "training.batch_size": _POSITIVE,
    "training.alpha": _POSITIVE,
    "training.lr": _POSITIVE,
    "training.overlap": _NONNEG,
    "patching.size": _POSITIVE,
    "patching.overlap": _NONNEG,
    "simulation.nx": _POSITIVE,
    "simulation.nz": _POSITIVE,
    "simulation.dx": _POSITIVE,
    "simulation.nt": _POSITIVE,
    "simulation.dt": _POSITIVE,
    "simulation.f0": _POSITIVE,
    "simulation.recording": _choice("strain-rate", "particle-velocity"),
    "noise.synthetic_fraction": _FRACTION,
    "noise.trace_prob": _FRACTION,
    "noise.erratic_scale": _NONNEG,
    "noise.corner": _NONNEG,
    "baselines.taper": _NONNEG,
    "baselines.median_time": _POSITIVE,
    "baselines.median_channels": _POSITIVE,
}


class RunConfig:
    """Layered settings: built-in defaults, then a config file, then
    explicit overrides (CLI flags)."""

    def __init__(self, path=None, overrides=None, env=None):
        self.values = {s: dict(v) for s, v in DEFAULTS.items()}
        env = os.environ if env is None else env
        if env.get("DASDENOISE_SEED"):
            self.set("run", "seed", env["DASDENOISE_SEED"])
        if path is not None:
            self.load(path)
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            section, key = dotted.split(".", 1)
            self.set(section, key, value)

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        value = _coerce(section, key, value)
        check = CHECKS.get(f"{section}.{key}")
        if check is not None and not check[0](value):
            raise ConfigError(f"{section}.{key} = {value!r} must be {check[1]}")
        self.values[section][key] = value

    def load(self, path):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, value in parser.items(section):
                self.set(section, key, value)

    def __getitem__(self, section):
        return self.values[section]

    def get(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]
