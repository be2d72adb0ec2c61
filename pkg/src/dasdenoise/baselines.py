"""Reference denoisers: zero-phase band-pass, median filter, and a plain dense
autoencoder (CP-UNet without pyramid branches or skip modules)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cpunet import Block, CPUNetConfig, PatchNet, TrainConfig, denoise_record, fit_record
from .nn_core import DTYPE, Dense, DenseLayer, ShapeError
from .patching import PatchConfig


class FilterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BandpassConfig:
    f_lo: float = 10.0
    f_hi: float = 120.0
    taper: float = 5.0
    fs: float = 1000.0

    def __post_init__(self):
        nyq = self.fs / 2
        if not (0 <= self.f_lo < self.f_hi < nyq):
            raise FilterConfigError(
                f"band [{self.f_lo}, {self.f_hi}] Hz must satisfy 0 <= f_lo < f_hi < Nyquist ({nyq} Hz)"
            )
        if self.taper < 0:
            raise FilterConfigError("taper width must be non-negative")


@dataclass(frozen=True)
class MedianConfig:
    window: tuple = (1, 5)  # (time samples, channels)

    def __post_init__(self):
        if len(self.window) != 2 or any(int(w) != w or w < 1 or w % 2 == 0 for w in self.window):
            raise FilterConfigError(f"median window sides must be odd integers >= 1, got {self.window}")


def bandpass_response(freqs, cfg: BandpassConfig) -> np.ndarray:
    """Unity on [f_lo, f_hi], raised-cosine shoulders of width ``taper``."""
    f = np.abs(np.asarray(freqs, dtype=float))
    h = ((f >= cfg.f_lo) & (f <= cfg.f_hi)).astype(float)
    if cfg.taper > 0:
        lo = (f < cfg.f_lo) & (f > cfg.f_lo - cfg.taper)
        h[lo] = 0.5 * (1 + np.cos(np.pi * (cfg.f_lo - f[lo]) / cfg.taper))
        hi = (f > cfg.f_hi) & (f < cfg.f_hi + cfg.taper)
        h[hi] = 0.5 * (1 + np.cos(np.pi * (f[hi] - cfg.f_hi) / cfg.taper))
    return h


def bandpass(data, cfg: BandpassConfig = BandpassConfig()) -> np.ndarray:
    """Zero-phase band-pass along axis 0 (time) of each trace."""
    data = np.asarray(data, dtype=DTYPE)
    n = data.shape[0]
    h = bandpass_response(np.fft.rfftfreq(n, d=1.0 / cfg.fs), cfg)
    spec = np.fft.rfft(data, axis=0)
    return np.fft.irfft(spec * h.reshape((-1,) + (1,) * (data.ndim - 1)), n=n, axis=0)


def median_filter(data, cfg: MedianConfig = MedianConfig()) -> np.ndarray:
    data = np.asarray(data, dtype=DTYPE)
    return ndimage.median_filter(data, size=tuple(int(w) for w in cfg.window), mode="reflect")


class PlainAutoencoder(PatchNet):
    """Stacked Dense+LN+LeakyReLU+Dropout stages with the CP-UNet widths but
    no pyramid branches and no skips."""

    kind = "plain"

    def __init__(self, config: CPUNetConfig = CPUNetConfig()):
        config.validate()
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        kw = dict(slope=config.slope, dropout=config.dropout, ln_eps=config.ln_eps)
        self.stages = []
        prev = config.input_dim
        for i, d in enumerate(config.encoder_dims + config.decoder_dims):
            self.stages.append(Block(prev, d, rng, seed=config.seed * 1000 + 10 * i, **kw))
            prev = d
        self.head = Dense(DenseLayer.init(prev, config.input_dim, rng))

    def children(self):
        return [(f"stage{i}", s) for i, s in enumerate(self.stages)] + [("head", self.head)]

    def forward(self, y):
        y = np.asarray(y, dtype=DTYPE)
        if y.shape[-1] != self.config.input_dim:
            raise ShapeError(f"autoencoder expects {self.config.input_dim} inputs, got {y.shape[-1]}")
        h = y
        for s in self.stages:
            h = s.forward(h)
        return self.head.forward(h)

    def backward(self, grad):
        g = self.head.backward(grad)
        for s in reversed(self.stages):
            g = s.backward(g)
        return g


def plain_autoencoder_denoise(data, config: CPUNetConfig = CPUNetConfig(),
                              patch_cfg: PatchConfig = PatchConfig(),
                              train_patch_cfg: PatchConfig | None = None,
                              train_cfg: TrainConfig | None = None):
    """Train the plain autoencoder on ``data`` itself and return
    ``(denoised, loss_history)``."""
    net = PlainAutoencoder(config)
    _, history = fit_record(net, data, train_patch_cfg or patch_cfg, train_cfg)
    return denoise_record(net, data, patch_cfg), history
