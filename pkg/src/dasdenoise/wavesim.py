"""2-D P-SV elastic finite-difference modelling of DAS shot gathers.

Staggered velocity-stress grid, 2nd order in time and 4th order in space
(2nd order in the ring next to the edges). Free surface on top via stress
imaging, exponential sponge on the sides and bottom.

Grid layout (row = depth z, column = x)::

    sxx, szz : (i, j)          vx : (i, j+1/2)
    sxz      : (i+1/2, j+1/2)  vz : (i+1/2, j)

Arrays are indexed ``[z, x]``. Output gathers are ``[time, channel]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

VP_RANGE = (1500.0, 4000.0)
RHO_RANGE = (1900.0, 2300.0)
F0_RANGE = (30.0, 75.0)

C1, C2 = 9.0 / 8.0, 1.0 / 24.0


class ModelValidationError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass
class VelocityModel:
    vp: np.ndarray
    vs: np.ndarray
    rho: np.ndarray
    dx: float = 1.0

    def __post_init__(self):
        self.vp = np.asarray(self.vp, dtype=float)
        self.vs = np.asarray(self.vs, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if not (self.vp.shape == self.vs.shape == self.rho.shape) or self.vp.ndim != 2:
            raise ModelValidationError("vp, vs and rho must be 2-D grids of one shape")
        lo, hi = VP_RANGE
        if self.vp.min() < lo or self.vp.max() > hi:
            raise ModelValidationError(f"vp outside the {lo:g}-{hi:g} m/s modelling range")
        lo, hi = RHO_RANGE
        if self.rho.min() < lo or self.rho.max() > hi:
            raise ModelValidationError(f"density outside the {lo:g}-{hi:g} kg/m^3 modelling range")
        if np.any(self.vs <= 0) or np.any(self.vs >= self.vp):
            raise ModelValidationError("need 0 < vs < vp everywhere")

    @property
    def shape(self):
        return self.vp.shape


@dataclass(frozen=True)
class SourceConfig:
    f0: float = 50.0
    x: int = 128  # grid column
    z: int = 2  # grid row
    t0: float | None = None  # defaults to 1.5 / f0
    amplitude: float = 1.0

    @property
    def delay(self) -> float:
        return 1.5 / self.f0 if self.t0 is None else self.t0


@dataclass(frozen=True)
class SimConfig:
    dt_out: float = 1e-3
    nt_out: int = 1000
    courant: float = 0.9  # fraction of the CFL bound
    sponge: int = 20
    sponge_decay: float = 0.015
    recording: str = "strain-rate"  # or "particle-velocity"
    receiver_z: int = 0

    def __post_init__(self):
        if self.recording not in ("strain-rate", "particle-velocity"):
            raise ValueError(f"unknown recording mode {self.recording!r}")


@dataclass
class ShotGather:
    data: np.ndarray  # (nt_out, channels)
    dt: float
    dx: float = 1.0
    energy: np.ndarray = field(default=None, repr=False)  # total energy per output sample


@dataclass
class Layer:
    """One layer below an interface. ``geometry``: flat | inclined | concave.

    ``depth`` is the interface depth (cells) at the model centre; ``slope`` is
    rows per column for inclined interfaces; ``curvature`` is the sag (cells)
    of a concave interface at the centre relative to its edges.
    """

    vp: float
    rho: float
    vs: float | None = None
    depth: float = 0.0
    geometry: str = "flat"
    slope: float = 0.0
    curvature: float = 0.0


def ricker(f0, t, t0=0.0):
    if f0 <= 0:
        raise ValueError("dominant frequency must be positive")
    a = (np.pi * f0 * (np.asarray(t, dtype=float) - t0)) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def interface_rows(layer: Layer, nx: int) -> np.ndarray:
    x = np.arange(nx, dtype=float)
    xc = (nx - 1) / 2.0
    if layer.geometry == "flat":
        return np.full(nx, float(layer.depth))
    if layer.geometry == "inclined":
        return layer.depth + layer.slope * (x - xc)
    if layer.geometry == "concave":
        # parabolic arc, deepest at the centre
        return layer.depth - layer.curvature * (((x - xc) / xc) ** 2 - 1.0) - layer.curvature
    raise ModelValidationError(f"unknown interface geometry {layer.geometry!r}")


def build_layered_model(layers, nx: int = 256, nz: int = 512, dx: float = 1.0) -> VelocityModel:
    """Rasterize layers (ordered top to bottom) onto an ``nz x nx`` grid.

    Cell (i, j) belongs to the deepest layer whose interface row is <= i.
    Missing vs defaults to vp / sqrt(3).
    """
    if not layers:
        raise ModelValidationError("at least one layer is required")
    for k, lay in enumerate(layers):
        if not VP_RANGE[0] <= lay.vp <= VP_RANGE[1]:
            raise ModelValidationError(
                f"layer {k}: vp={lay.vp} outside {VP_RANGE[0]:g}-{VP_RANGE[1]:g} m/s"
            )
        if not RHO_RANGE[0] <= lay.rho <= RHO_RANGE[1]:
            raise ModelValidationError(
                f"layer {k}: rho={lay.rho} outside {RHO_RANGE[0]:g}-{RHO_RANGE[1]:g} kg/m^3"
            )
    rows = np.arange(nz, dtype=float)[:, None]
    vp = np.full((nz, nx), layers[0].vp)
    rho = np.full((nz, nx), layers[0].rho)
    vs = np.full((nz, nx), layers[0].vs or layers[0].vp / math.sqrt(3.0))
    for lay in layers[1:]:
        below = rows >= np.round(interface_rows(lay, nx))[None, :]
        vp[below] = lay.vp
        rho[below] = lay.rho
        vs[below] = lay.vs or lay.vp / math.sqrt(3.0)
    return VelocityModel(vp, vs, rho, dx)


def benchmark_layers() -> list[Layer]:
    """Flat, inclined and concave interfaces within the modelling ranges."""
    return [
        Layer(vp=1500.0, rho=1900.0),
        Layer(vp=2000.0, rho=2000.0, depth=90, geometry="flat"),
        Layer(vp=2600.0, rho=2100.0, depth=200, geometry="inclined", slope=0.25),
        Layer(vp=3200.0, rho=2200.0, depth=330, geometry="concave", curvature=40),
        Layer(vp=4000.0, rho=2300.0, depth=450, geometry="flat"),
    ]


# sum of |coefficients| of the 4th-order staggered first derivative; the
# plain sqrt(2) bound is only sufficient for the 2nd-order stencil
STENCIL_GAIN = 9.0 / 8.0 + 1.0 / 24.0


def stable_substeps(model: VelocityModel, cfg: SimConfig) -> int:
    """Smallest number of internal steps per output sample that keeps
    dt_sim <= courant * dx / (vp_max * sqrt(2) * STENCIL_GAIN), which is
    stricter than courant * dx / (vp_max * sqrt(2))."""
    limit = cfg.courant * model.dx / (model.vp.max() * math.sqrt(2.0) * STENCIL_GAIN)
    return max(1, math.ceil(cfg.dt_out / limit - 1e-12))


# -- stencil kernels ----------------------------------------------------------
# 4th-order staggered differences where the stencil fits, 2nd order in the
# ring next to an edge. Fields outside the grid are zero except above the free
# surface, where sxz is imaged antisymmetrically.


@njit(cache=True)
def _velocity_step(vx, vz, sxx, szz, sxz, bx, bz):
    nz, nx = vx.shape
    for i in range(nz):
        for j in range(nx):
            # d(sxx)/dx at (i, j+1/2)
            if 1 <= j <= nx - 3:
                a = C1 * (sxx[i, j + 1] - sxx[i, j]) - C2 * (sxx[i, j + 2] - sxx[i, j - 1])
            elif j <= nx - 2:
                a = sxx[i, j + 1] - sxx[i, j]
            else:
                a = 0.0
            # d(sxz)/dz at (i, j+1/2)
            if i == 0:
                b = 2.0 * sxz[0, j]
            elif 2 <= i <= nz - 2:
                b = C1 * (sxz[i, j] - sxz[i - 1, j]) - C2 * (sxz[i + 1, j] - sxz[i - 2, j])
            else:
                b = sxz[i, j] - sxz[i - 1, j]
            vx[i, j] += bx[i, j] * (a + b)
            # d(sxz)/dx at (i+1/2, j)
            if j == 0:
                a = sxz[i, 0]
            elif 2 <= j <= nx - 2:
                a = C1 * (sxz[i, j] - sxz[i, j - 1]) - C2 * (sxz[i, j + 1] - sxz[i, j - 2])
            else:
                a = sxz[i, j] - sxz[i, j - 1]
            # d(szz)/dz at (i+1/2, j)
            if 1 <= i <= nz - 3:
                b = C1 * (szz[i + 1, j] - szz[i, j]) - C2 * (szz[i + 2, j] - szz[i - 1, j])
            elif i <= nz - 2:
                b = szz[i + 1, j] - szz[i, j]
            else:
                b = 0.0
            vz[i, j] += bz[i, j] * (a + b)


@njit(cache=True)
def _stress_step(vx, vz, sxx, szz, sxz, lam, lam2mu, mu_xz, lam2mu_top, k):
    nz, nx = vx.shape
    for i in range(nz):
        for j in range(nx):
            # d(vx)/dx at (i, j)
            if j == 0:
                exx = vx[i, 0]
            elif 2 <= j <= nx - 2:
                exx = C1 * (vx[i, j] - vx[i, j - 1]) - C2 * (vx[i, j + 1] - vx[i, j - 2])
            else:
                exx = vx[i, j] - vx[i, j - 1]
            if i == 0:
                # free surface: szz = 0, sxx from horizontal strain alone
                sxx[0, j] += k * lam2mu_top[j] * exx
                szz[0, j] = 0.0
            else:
                if 2 <= i <= nz - 2:
                    ezz = C1 * (vz[i, j] - vz[i - 1, j]) - C2 * (vz[i + 1, j] - vz[i - 2, j])
                else:
                    ezz = vz[i, j] - vz[i - 1, j]
                sxx[i, j] += k * (lam2mu[i, j] * exx + lam[i, j] * ezz)
                szz[i, j] += k * (lam[i, j] * exx + lam2mu[i, j] * ezz)
            # d(vx)/dz + d(vz)/dx at (i+1/2, j+1/2)
            if 1 <= i <= nz - 3:
                a = C1 * (vx[i + 1, j] - vx[i, j]) - C2 * (vx[i + 2, j] - vx[i - 1, j])
            elif i <= nz - 2:
                a = vx[i + 1, j] - vx[i, j]
            else:
                a = 0.0
            if 1 <= j <= nx - 3:
                b = C1 * (vz[i, j + 1] - vz[i, j]) - C2 * (vz[i, j + 2] - vz[i, j - 1])
            elif j <= nx - 2:
                b = vz[i, j + 1] - vz[i, j]
            else:
                b = 0.0
            sxz[i, j] += k * mu_xz[i, j] * (a + b)


@njit(cache=True)
def _damp(damp, vx, vz, sxx, szz, sxz):
    nz, nx = vx.shape
    for i in range(nz):
        for j in range(nx):
            d = damp[i, j]
            if d != 1.0:
                vx[i, j] *= d
                vz[i, j] *= d
                sxx[i, j] *= d
                szz[i, j] *= d
                sxz[i, j] *= d


def _sponge_profile(nz, nx, width, decay):
    """Per-step multiplicative damping: 1 inside, Cerjan taper in the
    ``width`` cells next to the left, right and bottom edges."""
    edge = np.exp(-((decay * (width - np.arange(width))) ** 2))
    fx = np.ones(nx)
    fx[:width] = edge
    fx[nx - width:] = edge[::-1]
    fz = np.ones(nz)
    fz[nz - width:] = edge[::-1]
    return np.outer(fz, fx)


def simulate_shot(model: VelocityModel, source: SourceConfig, cfg: SimConfig = SimConfig(),
                  energy: bool = False) -> ShotGather:
    """Run the elastic simulation and record along the surface.

    The model grid is padded by ``cfg.sponge`` cells left, right and below;
    receivers sit on every surface column of the unpadded model.
    """
    nz0, nx0 = model.shape
    if not (0 <= source.x < nx0 and 0 <= source.z < nz0):
        raise ValueError(f"source {(source.z, source.x)} outside the {nz0}x{nx0} model")
    if not F0_RANGE[0] <= source.f0 <= F0_RANGE[1]:
        raise ModelValidationError(f"f0={source.f0} Hz outside {F0_RANGE[0]:g}-{F0_RANGE[1]:g} Hz")
    w = cfg.sponge
    pad = ((0, w), (w, w))
    vp = np.pad(model.vp, pad, mode="edge")
    vs = np.pad(model.vs, pad, mode="edge")
    rho = np.pad(model.rho, pad, mode="edge")
    nz, nx = vp.shape
    h = model.dx

    nsub = stable_substeps(model, cfg)
    dt = cfg.dt_out / nsub
    if dt > model.dx / (vp.max() * math.sqrt(2.0)):
        raise SimulationError("no stable internal step could be selected")

    mu = rho * vs**2
    lam = rho * vp**2 - 2.0 * mu
    lam2mu = lam + 2.0 * mu
    # effective media on the staggered nodes
    rho_x = rho.copy()
    rho_x[:, :-1] = 0.5 * (rho[:, 1:] + rho[:, :-1])
    rho_z = rho.copy()
    rho_z[:-1, :] = 0.5 * (rho[1:, :] + rho[:-1, :])
    mu_xz = mu.copy()
    inv = 1.0 / mu
    mu_xz[:-1, :-1] = 4.0 / (inv[:-1, :-1] + inv[1:, :-1] + inv[:-1, 1:] + inv[1:, 1:])
    bx = dt / (rho_x * h)
    bz = dt / (rho_z * h)
    # free-surface row: szz = 0, sxx driven by the horizontal strain only
    lam2mu_top = lam2mu[0] - lam[0] ** 2 / lam2mu[0]

    damp = _sponge_profile(nz, nx, w, cfg.sponge_decay)

    vx = np.zeros((nz, nx))
    vz = np.zeros((nz, nx))
    sxx = np.zeros((nz, nx))
    szz = np.zeros((nz, nx))
    sxz = np.zeros((nz, nx))

    sz, sx = source.z, source.x + w
    # body force on the vz node at (sz+1/2, sx); normalised per cell volume
    src_gain = source.amplitude * dt / (rho_z[sz, sx] * h * h)
    rz, cols = cfg.receiver_z, slice(w, w + nx0)

    nt = cfg.nt_out
    rec_vx = np.zeros((nt, nx0))
    rec_vz = np.zeros((nt, nx0))
    energies = np.zeros(nt) if energy else None
    t0 = source.delay

    for it in range(nt * nsub):
        t = it * dt
        _velocity_step(vx, vz, sxx, szz, sxz, bx, bz)
        vz[sz, sx] += src_gain * ricker(source.f0, t + 0.5 * dt, t0)
        _stress_step(vx, vz, sxx, szz, sxz, lam, lam2mu, mu_xz, lam2mu_top, dt / h)
        _damp(damp, vx, vz, sxx, szz, sxz)

        if (it + 1) % nsub == 0:
            k = (it + 1) // nsub - 1
            rec_vx[k] = vx[rz, cols]
            rec_vz[k] = vz[rz, cols]
            if energy:
                energies[k] = _energy(vx, vz, sxx, szz, sxz, rho_x, rho_z, lam, mu, mu_xz)
            if not np.isfinite(rec_vz[k]).all() or not np.isfinite(vx).all():
                raise SimulationError(f"wavefield became non-finite at time step {it + 1}")

    if cfg.recording == "particle-velocity":
        data = record_das(rec_vz, "particle-velocity", model.dx)
    else:
        data = record_das(rec_vx, "strain-rate", model.dx)
    return ShotGather(data, cfg.dt_out, model.dx, energies)


def _energy(vx, vz, sxx, szz, sxz, rho_x, rho_z, lam, mu, mu_xz):
    kinetic = 0.5 * (rho_x * vx**2 + rho_z * vz**2)
    # strain energy from stresses via the isotropic compliance
    two_mu_lam = 2.0 * mu * (lam + mu)
    e_norm = ((lam + 2 * mu) * (sxx**2 + szz**2) - 2.0 * lam * sxx * szz) / (4.0 * two_mu_lam)
    e_shear = sxz**2 / (2.0 * mu_xz)
    return float(kinetic.sum() + e_norm.sum() + e_shear.sum())


def record_das(surface, mode: str = "strain-rate", dx: float = 1.0) -> np.ndarray:
    """Turn a recorded surface velocity history (time x channels) into the
    DAS quantity: vertical particle velocity, or along-fibre strain rate
    (centred difference of v_x between neighbouring channels)."""
    surface = np.asarray(surface, dtype=float)
    if mode == "particle-velocity":
        return surface.copy()
    if mode != "strain-rate":
        raise ValueError(f"unknown recording mode {mode!r}")
    if surface.shape[1] < 3:
        raise ValueError("strain-rate recording needs at least 3 channels")
    return np.gradient(surface, dx, axis=1)


def synthesize_gather(layers=None, source: SourceConfig | None = None, cfg: SimConfig = SimConfig(),
                      nx: int = 256, nz: int = 512, dx: float = 1.0) -> ShotGather:
    model = build_layered_model(layers or benchmark_layers(), nx, nz, dx)
    return simulate_shot(model, source or SourceConfig(x=nx // 2), cfg)


def load_model_spec(path):
    """Read a layered model description.

    INI-style text: an optional ``[grid]`` section (nx, nz, dx) and one
    section per layer, top to bottom, with keys vp, rho and optionally vs,
    depth, geometry, slope, curvature. Returns ``(layers, grid_kwargs)``.
    """
    import configparser

    parser = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        parser.read_file(fh)
    grid = {}
    if parser.has_section("grid"):
        for key, value in parser.items("grid"):
            if key not in ("nx", "nz", "dx"):
                raise ModelValidationError(f"unknown grid key {key!r}")
            grid[key] = float(value) if key == "dx" else int(value)
    layers = []
    fields = {"vp": float, "rho": float, "vs": float, "depth": float, "geometry": str,
              "slope": float, "curvature": float}
    for section in parser.sections():
        if section == "grid":
            continue
        kw = {}
        for key, value in parser.items(section):
            if key not in fields:
                raise ModelValidationError(f"[{section}]: unknown key {key!r}")
            kw[key] = fields[key](value)
        if "vp" not in kw or "rho" not in kw:
            raise ModelValidationError(f"[{section}]: vp and rho are required")
        layers.append(Layer(**kw))
    if not layers:
        raise ModelValidationError(f"{path}: no layer sections")
    return layers, grid
