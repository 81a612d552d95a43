"""Pseudo-spectral 2D incompressible Navier-Stokes data generation.

Vorticity form on the unit torus:

    dw/dt + u . grad w = nu Lap w + f,      div u = 0,

with u recovered from w through the streamfunction (-Lap psi = w,
u = (psi_y, -psi_x)) and forcing

    f(x, y) = 0.1 (sin(2 pi (x+y)) + cos(2 pi (x+y))).

Time stepping treats the viscous term with Crank-Nicolson and the
advection explicitly; the advection product is formed in physical space
from 2/3-rule truncated inputs, so no aliased energy enters the retained
band and the zero mode (mean vorticity) is conserved to round-off under
the zero-mean forcing.

Initial vorticity is a mean-zero Gaussian random field with spectral
amplitudes proportional to (4 pi^2 |xi|^2 + tau^2)^(-alpha/2), matching
the covariance family commonly used for this benchmark (tau = 7,
alpha = 2.5); samples are deterministic per seed.

Dataset layout: one binary field file per trajectory with axes ordered
(t, x, y) and the two velocity components as channels, plus a
``manifest.json`` recording the configuration, per-sample seeds, and
divergence certificates (the measured spectral divergence of each stored
trajectory, before and after mean pooling).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .fieldio import save_field
from .grids import Field, PeriodicGrid, make_periodic_grid
from .skewdiv import divergence_ratio
from .spectral import build_spectral_plan


@dataclass(frozen=True)
class GrfSpec:
    """Covariance parameters of the random initial vorticity."""

    tau: float = 7.0
    alpha: float = 2.5
    amplitude: float | None = None  # default tau**(alpha - 1) in 2D

    def scale(self) -> float:
        if self.amplitude is not None:
            return self.amplitude
        return self.tau ** (self.alpha - 1.0)


@dataclass(frozen=True)
class NsConfig:
    """Solver and recording configuration; defaults are the desk scale."""

    grid_size: int = 64
    viscosity: float = 1e-4
    dt: float = 1e-4
    record_interval: float = 0.1
    horizon: float = 3.0
    forcing: bool = True
    seed: int = 0
    pool: int = 2                       # spatial mean-pool factor for storage
    grf: GrfSpec = dataclass_field(default_factory=GrfSpec)

    def __post_init__(self):
        if self.grid_size % 2 or self.grid_size < 4:
            raise ValueError("grid_size must be even and at least 4")
        if min(self.viscosity, self.dt, self.record_interval, self.horizon) <= 0:
            raise ValueError("viscosity, dt, record_interval, horizon must be positive")
        if self.pool < 1 or self.grid_size % self.pool:
            raise ValueError("pool must divide grid_size")
        if self.n_frames() % 2:
            raise ValueError(
                "horizon/record_interval must give an even number of frames "
                "(the trajectory file's time axis reuses the grid container)"
            )
        # Explicit advection needs dt below the advective CFL scale; the
        # viscous term is implicit so nu only enters through accuracy.
        if self.dt * self.grid_size > 0.5:
            import warnings

            warnings.warn(
                f"dt={self.dt} is large for N={self.grid_size}; "
                "the explicit advection step may be unstable",
                stacklevel=2,
            )

    def fine_grid(self) -> PeriodicGrid:
        return make_periodic_grid(2, [1.0, 1.0], [self.grid_size, self.grid_size])

    def stored_grid(self) -> PeriodicGrid:
        n = self.grid_size // self.pool
        return make_periodic_grid(2, [1.0, 1.0], [n, n])

    def n_frames(self) -> int:
        return int(round(self.horizon / self.record_interval))

    def steps_per_frame(self) -> int:
        steps = self.record_interval / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("record_interval must be an integer multiple of dt")
        return int(round(steps))


@dataclass
class NsState:
    w_hat: np.ndarray     # spectral vorticity, (N, N) complex
    time: float
    step: int


class _SolverTables:
    """Wavenumber arrays shared by every step on one configuration."""

    def __init__(self, config: NsConfig):
        n = config.grid_size
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n)
        self.kx = k[:, None]
        self.ky = k[None, :]
        self.k_sq = self.kx**2 + self.ky**2
        inv = np.zeros_like(self.k_sq)
        nonzero = self.k_sq > 0
        inv[nonzero] = 1.0 / self.k_sq[nonzero]
        self.inv_k_sq = inv
        cutoff = n // 3
        xi = np.fft.fftfreq(n, d=1.0 / n)
        self.dealias = (np.abs(xi[:, None]) <= cutoff) & (np.abs(xi[None, :]) <= cutoff)
        half = 0.5 * config.dt * config.viscosity * self.k_sq
        self.cn_num = 1.0 - half
        self.cn_den = 1.0 + half
        if config.forcing:
            grid = config.fine_grid()
            x = grid.axis_coords(0)[:, None]
            y = grid.axis_coords(1)[None, :]
            f = 0.1 * (np.sin(2 * np.pi * (x + y)) + np.cos(2 * np.pi * (x + y)))
            self.f_hat = np.fft.fft2(f)
            self.f_hat[0, 0] = 0.0  # analytically zero mean; pin the round-off
        else:
            self.f_hat = None


@lru_cache(maxsize=8)
def _tables(config: NsConfig) -> _SolverTables:
    return _SolverTables(config)


def sample_initial_vorticity(grf: GrfSpec, grid: PeriodicGrid, seed: int) -> Field:
    """Mean-zero Gaussian random vorticity field, deterministic per seed."""
    if grid.dim != 2 or grid.counts[0] != grid.counts[1]:
        raise ValueError("initial vorticity sampling expects a square 2D grid")
    n = grid.counts[0]
    rng = np.random.default_rng(seed)
    xi = np.fft.fftfreq(n, d=1.0 / n)
    k_sq = xi[:, None] ** 2 + xi[None, :] ** 2
    amp = (4.0 * np.pi**2 * k_sq + grf.tau**2) ** (-grf.alpha / 2.0)
    amp *= grf.scale() * np.sqrt(2.0) * n * n
    amp[0, 0] = 0.0
    coeffs = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    w = np.fft.ifft2(coeffs * amp).real
    return Field(grid, w.reshape(-1, 1))


def velocity_from_vorticity(w: Field) -> Field:
    """Streamfunction solve: psi_hat = w_hat / |k|^2, u = (psi_y, -psi_x)."""
    grid = w.grid
    if not isinstance(grid, PeriodicGrid) or grid.dim != 2:
        raise ValueError("velocity recovery expects a 2D periodic grid")
    n0, n1 = grid.counts
    w_grid = w.values[:, 0].reshape(n0, n1)
    mean = float(np.abs(np.mean(w_grid)))
    if mean > 1e-10:
        raise ValueError(
            f"vorticity must have zero mean for the streamfunction solve "
            f"(got mean {mean:.3e})"
        )
    w_hat = np.fft.fft2(w_grid)
    kx = 2.0 * np.pi / grid.lengths[0] * np.fft.fftfreq(n0, d=1.0 / n0)[:, None]
    ky = 2.0 * np.pi / grid.lengths[1] * np.fft.fftfreq(n1, d=1.0 / n1)[None, :]
    k_sq = kx**2 + ky**2
    psi_hat = np.zeros_like(w_hat)
    nonzero = k_sq > 0
    psi_hat[nonzero] = w_hat[nonzero] / k_sq[nonzero]
    ux = np.fft.ifft2(1j * ky * psi_hat).real
    uy = np.fft.ifft2(-1j * kx * psi_hat).real
    return Field(grid, np.stack([ux.reshape(-1), uy.reshape(-1)], axis=1))


def _velocity_hat(w_hat: np.ndarray, tables: _SolverTables):
    psi_hat = w_hat * tables.inv_k_sq
    return 1j * tables.ky * psi_hat, -1j * tables.kx * psi_hat


def initial_state(config: NsConfig, seed: int | None = None) -> NsState:
    w0 = sample_initial_vorticity(
        config.grf, config.fine_grid(), config.seed if seed is None else seed
    )
    n = config.grid_size
    return NsState(np.fft.fft2(w0.values[:, 0].reshape(n, n)), 0.0, 0)


def ns_step(state: NsState, config: NsConfig) -> NsState:
    """One semi-implicit step: explicit dealiased advection, CN diffusion."""
    t = _tables(config)
    w_hat = state.w_hat
    ux_hat, uy_hat = _velocity_hat(w_hat * t.dealias, t)
    wx_hat = 1j * t.kx * w_hat * t.dealias
    wy_hat = 1j * t.ky * w_hat * t.dealias
    ux = np.fft.ifft2(ux_hat).real
    uy = np.fft.ifft2(uy_hat).real
    wx = np.fft.ifft2(wx_hat).real
    wy = np.fft.ifft2(wy_hat).real
    advection_hat = np.fft.fft2(ux * wx + uy * wy) * t.dealias
    rhs = w_hat * t.cn_num - config.dt * advection_hat
    if t.f_hat is not None:
        rhs = rhs + config.dt * t.f_hat
    w_next = rhs / t.cn_den
    if not np.all(np.isfinite(w_next)):
        raise FloatingPointError(
            f"solver produced non-finite vorticity at step {state.step + 1} "
            f"(t = {state.time + config.dt:.6g})"
        )
    return NsState(w_next, state.time + config.dt, state.step + 1)


def vorticity_field(state: NsState, config: NsConfig) -> Field:
    w = np.fft.ifft2(state.w_hat).real
    return Field(config.fine_grid(), w.reshape(-1, 1))


def simulate_velocity_frames(config: NsConfig, seed: int) -> np.ndarray:
    """Velocity frames (n_frames, N, N, 2) at the fine resolution."""
    state = initial_state(config, seed)
    n = config.grid_size
    frames = np.empty((config.n_frames(), n, n, 2))
    per_frame = config.steps_per_frame()
    t = _tables(config)
    for frame in range(config.n_frames()):
        for _ in range(per_frame):
            state = ns_step(state, config)
        ux_hat, uy_hat = _velocity_hat(state.w_hat, t)
        frames[frame, :, :, 0] = np.fft.ifft2(ux_hat).real
        frames[frame, :, :, 1] = np.fft.ifft2(uy_hat).real
    return frames


def mean_pool(frames: np.ndarray, pool: int) -> np.ndarray:
    """2x2-style block averaging of (T, N, N, c) frames."""
    if pool == 1:
        return frames
    t, n, _, c = frames.shape
    m = n // pool
    return frames.reshape(t, m, pool, m, pool, c).mean(axis=(2, 4))


def _max_divergence_ratio(frames: np.ndarray, grid: PeriodicGrid) -> float:
    worst = 0.0
    for frame in frames:
        field = Field(grid, frame.reshape(-1, 2))
        worst = max(worst, divergence_ratio(field))
    return worst


def generate_dataset(config: NsConfig, n_samples: int, out_dir) -> Path:
    """Simulate, pool, store trajectories plus manifest with certificates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fine_grid = config.fine_grid()
    stored_grid = config.stored_grid()
    traj_grid = make_periodic_grid(
        3,
        [config.horizon, 1.0, 1.0],
        [config.n_frames(), *stored_grid.counts],
    )
    samples = []
    for k in range(n_samples):
        seed = config.seed + k
        frames = simulate_velocity_frames(config, seed)
        pooled = mean_pool(frames, config.pool)
        cert_fine = _max_divergence_ratio(frames, fine_grid)
        cert_stored = _max_divergence_ratio(pooled, stored_grid)
        name = f"sample_{k:04d}.field"
        save_field(Field(traj_grid, pooled.reshape(-1, 2)), out / name)
        samples.append(
            {
                "file": name,
                "seed": seed,
                "divergence_fine": cert_fine,
                "divergence_stored": cert_stored,
            }
        )
    manifest = {
        "config": {
            "grid_size": config.grid_size,
            "viscosity": config.viscosity,
            "dt": config.dt,
            "record_interval": config.record_interval,
            "horizon": config.horizon,
            "forcing": config.forcing,
            "seed": config.seed,
            "pool": config.pool,
            "grf_tau": config.grf.tau,
            "grf_alpha": config.grf.alpha,
        },
        "axes": ["t", "x", "y"],
        "channels": ["ux", "uy"],
        "n_frames": config.n_frames(),
        "stored_resolution": stored_grid.counts[0],
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_dataset(path):
    """Manifest dict plus trajectories (n, T, N, N, 2) from a dataset dir."""
    from .fieldio import load_field

    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    n_frames = manifest["n_frames"]
    res = manifest["stored_resolution"]
    trajectories = []
    for entry in manifest["samples"]:
        field = load_field(root / entry["file"])
        cube = field.values.reshape(*field.grid.counts, 2)
        trajectories.append(cube[:n_frames].reshape(n_frames, res, res, 2))
    return manifest, np.stack(trajectories)
