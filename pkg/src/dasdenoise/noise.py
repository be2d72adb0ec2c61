"""Random and erratic noise generators and S/N-calibrated mixing.

Grids are (time samples, channels).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RandomNoiseConfig:
    seed: int = 0
    corner: float | None = None  # low-pass corner (Hz); None = white
    order: int = 4
    fs: float = 1000.0

    def __post_init__(self):
        if self.corner is not None and self.corner <= 0:
            raise ValueError("low-pass corner must be positive")


@dataclass(frozen=True)
class ErraticConfig:
    trace_prob: float = 0.1
    burst_prob: float = 0.3  # per window of `window` samples on a selected trace
    window: int = 250
    min_len: int = 20
    max_len: int = 200
    scale: float = 5.0  # minimum burst peak, in units of clean RMS
    tail: float = 2.0  # Pareto shape of the excess peak amplitude
    seed: int = 0

    def __post_init__(self):
        for name in ("trace_prob", "burst_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if not self.scale > 1:
            raise ValueError("erratic scale must exceed 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


@dataclass
class NoiseMix:
    synthetic: float = 0.85
    external: float = 0.15
    pool: list = field(default_factory=list)  # user-supplied noise records

    def __post_init__(self):
        if min(self.synthetic, self.external) < 0 or abs(self.synthetic + self.external - 1) > 1e-9:
            raise ValueError("noise fractions must be non-negative and sum to 1")


def lowpass_response(freqs, corner, order=4):
    return 1.0 / np.sqrt(1.0 + (np.abs(freqs) / corner) ** (2 * order))


def gen_random_noise(dims, cfg: RandomNoiseConfig = RandomNoiseConfig()) -> np.ndarray:
    """Unit-variance Gaussian noise, optionally low-pass shaped along time."""
    rng = np.random.default_rng(cfg.seed)
    noise = rng.standard_normal(dims)
    if cfg.corner is None:
        return noise
    n = dims[0]
    h = lowpass_response(np.fft.rfftfreq(n, 1.0 / cfg.fs), cfg.corner, cfg.order)
    shaped = np.fft.irfft(np.fft.rfft(noise, axis=0) * h[:, None], n=n, axis=0)
    return shaped / shaped.std()


def gen_erratic_noise(dims, clean_rms: float, cfg: ErraticConfig = ErraticConfig()) -> np.ndarray:
    """Sparse high-amplitude bursts on randomly selected traces.

    Each selected trace carries at least one burst. A burst is tapered white
    noise normalised to peak ``scale * clean_rms * (1 + Pareto(tail))``.
    """
    if not clean_rms > 0:
        raise ValueError("clean_rms must be positive")
    nt, nch = dims
    rng = np.random.default_rng(cfg.seed)
    out = np.zeros(dims)
    traces = np.flatnonzero(rng.random(nch) < cfg.trace_prob)
    n_win = max(1, nt // cfg.window)
    for tr in traces:
        fire = np.flatnonzero(rng.random(n_win) < cfg.burst_prob)
        if fire.size == 0:
            fire = rng.integers(0, n_win, size=1)
        for w in fire:
            length = min(int(rng.integers(cfg.min_len, cfg.max_len + 1)), nt)
            lo = w * cfg.window
            hi = min(nt, lo + cfg.window)
            start = int(rng.integers(lo, max(lo, hi - length) + 1))
            start = min(start, nt - length)
            wave = rng.standard_normal(length) * np.hanning(length + 2)[1:-1]
            wave /= np.abs(wave).max()
            peak = cfg.scale * clean_rms * (1.0 + rng.pareto(cfg.tail))
            out[start : start + length, tr] += rng.choice((-1.0, 1.0)) * peak * wave
    return out


def noise_scale_for_snr(clean, noise, target_db: float) -> float:
    c = np.linalg.norm(clean)
    n = np.linalg.norm(noise)
    if n == 0:
        raise ValueError("noise is identically zero")
    return float(c / (n * 10.0 ** (target_db / 20.0)))


def mix_to_snr(clean, noise, target_db: float):
    """Return ``(clean + s * noise, s)`` with S/N exactly ``target_db``."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noise.shape}")
    s = noise_scale_for_snr(clean, noise, target_db)
    return clean + s * noise, s


def _unit_energy(x):
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def _draw_from_pool(dims, pool, rng):
    nt, nch = dims
    usable = [np.asarray(p) for p in pool if p.shape[0] >= nt and p.shape[1] >= nch]
    if not usable:
        raise ValueError(f"no external noise record is at least {nt}x{nch}")
    rec = usable[int(rng.integers(len(usable)))]
    r0 = int(rng.integers(0, rec.shape[0] - nt + 1))
    c0 = int(rng.integers(0, rec.shape[1] - nch + 1))
    return rec[r0 : r0 + nt, c0 : c0 + nch].astype(np.float64)


def compose_noise(dims, mix: NoiseMix = None, random_cfg: RandomNoiseConfig = RandomNoiseConfig(),
                  erratic_cfg: ErraticConfig = ErraticConfig(), clean_rms: float = 1.0,
                  seed: int = 0) -> np.ndarray:
    """Blend synthetic (Gaussian + erratic) noise with external noise so that
    their energies split as ``mix.synthetic : mix.external``.

    Without an external pool the external share is an independent erratic
    draw.
    """
    mix = mix or NoiseMix()
    synthetic = gen_random_noise(dims, random_cfg) * clean_rms + gen_erratic_noise(dims, clean_rms, erratic_cfg)
    total = np.sqrt(mix.synthetic) * _unit_energy(synthetic)
    if mix.external > 0:
        rng = np.random.default_rng([seed, 15])
        if mix.pool:
            external = _draw_from_pool(dims, mix.pool, rng)
        else:
            log.info("no external noise pool supplied; using an erratic surrogate")
            surrogate_cfg = ErraticConfig(**{**erratic_cfg.__dict__, "seed": int(rng.integers(2**31))})
            external = gen_erratic_noise(dims, clean_rms, surrogate_cfg)
        total = total + np.sqrt(mix.external) * _unit_energy(external)
    return total


def corrupt(clean, target_snr: float, seed: int = 0, mix: NoiseMix = None, corner: float | None = None,
            erratic: ErraticConfig | None = None):
    """Benchmark corruption: composed noise scaled so the record sits at
    ``target_snr`` dB. Returns ``(noisy, noise_scale)``."""
    clean = np.asarray(clean, dtype=np.float64)
    rms = float(np.sqrt(np.mean(clean**2))) or 1.0
    ecfg = erratic or ErraticConfig()
    ecfg = ErraticConfig(**{**ecfg.__dict__, "seed": seed + 100})
    n = compose_noise(clean.shape, mix, RandomNoiseConfig(seed=seed, corner=corner), ecfg, rms, seed)
    return mix_to_snr(clean, n, target_snr)
