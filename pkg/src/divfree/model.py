"""Fourier operator model with a fixed divergence-free output layer.

Architecture: a pointwise affine lift into H latent channels, L spectral
convolution layers

    h  <-  gelu(W h + IFFT[ A . FFT[h] ] + c),

a pointwise two-layer projection head, and (in the divergence-free
variant) the skew-divergence layer mapping the projected p(p-1)/2 skew
channels to a p-channel vector field.  The final layer holds no trainable
parameters and its adjoint is applied analytically, so conservation is a
property of the architecture, not of training.

Mode retention keeps, per axis, the ``modes`` integer frequencies lowest
in magnitude; the complex mixing tensor A acts on that retained set and
the real part of the inverse transform supplies the conjugate-symmetric
completion, so outputs are exactly real.  Retained frequencies are fixed
integers, which makes the layer resolution independent: evaluating the
same weights on a finer grid reuses the same continuous Fourier modes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grids import Field, PeriodicGrid
from .skewdiv import DiffBackend, DivFreeField, skew_channel_count
from .spectral import SpectralPlan

CHECKPOINT_MAGIC = b"DIVFREEC"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; everything a checkpoint must pin down."""

    dim: int                     # spatial dimension p
    input_channels: int          # data channels before coordinate encoding
    width: int                   # latent dimension H
    depth: int                   # number of spectral layers L
    modes: tuple[int, ...]       # retained frequencies per axis
    proj_width: int = 128        # projection hidden width
    extra_channels: int = 0      # pass-through (non-conserved) outputs
    divergence_free: bool = True

    def __post_init__(self):
        if len(self.modes) != self.dim:
            raise ValueError("need one mode count per spatial axis")
        if min(self.modes) < 1 or self.width < 1 or self.depth < 1:
            raise ValueError("modes, width and depth must be positive")

    @property
    def lifted_channels(self) -> int:
        # Cartesian coordinate encoding appends one channel per axis.
        return self.input_channels + self.dim

    @property
    def raw_output_channels(self) -> int:
        head = skew_channel_count(self.dim) if self.divergence_free else self.dim
        return head + self.extra_channels

    @property
    def output_channels(self) -> int:
        return self.dim + self.extra_channels


def _axis_mode_freqs(m: int) -> list[int]:
    """The m integer frequencies lowest in magnitude, fftfreq-ordered."""
    return list(range((m + 1) // 2)) + list(range(-(m // 2), 0))


class _ModeSelection:
    """Index bookkeeping for one (modes, grid counts) combination."""

    def __init__(self, modes: tuple[int, ...], counts: tuple[int, ...]):
        for m, n in zip(modes, counts):
            if m > n:
                raise ValueError(
                    f"mode truncation {m} exceeds grid axis of {n} points"
                )
        self.counts = counts
        self.m_total = int(np.prod(counts))
        idx = [np.array([f % n for f in _axis_mode_freqs(m)])
               for m, n in zip(modes, counts)]
        self.gather = np.ix_(*idx)
        self.k_total = int(np.prod([len(i) for i in idx]))


def spectral_mix(h: Tensor, a_re: Tensor, a_im: Tensor, sel: _ModeSelection) -> Tensor:
    """IFFT[ A . FFT[h] ] on the retained modes, real part taken.

    h is (M, H) over an axis-major grid; A = a_re + i a_im is (K, H, H)
    with K the retained mode count.  Gradients for h and A are the
    analytic adjoints (conjugate multiplier pattern), not a taped FFT.
    """
    grid_shape = sel.counts
    spatial_axes = tuple(range(len(grid_shape)))
    width = h.value.shape[-1]

    def to_modes(arr2d: np.ndarray) -> np.ndarray:
        cube = arr2d.reshape(*grid_shape, width)
        spec = np.fft.fftn(cube, axes=spatial_axes)
        return spec[sel.gather].reshape(sel.k_total, width)

    def from_modes(modes: np.ndarray) -> np.ndarray:
        spec = np.zeros((*grid_shape, width), dtype=np.complex128)
        spec[sel.gather] = modes.reshape(spec[sel.gather].shape)
        out = np.fft.ifftn(spec, axes=spatial_axes).real
        return out.reshape(sel.m_total, width)

    a_val = a_re.value + 1j * a_im.value
    f_sel = to_modes(h.value)
    value = from_modes(np.einsum("kij,kj->ki", a_val, f_sel))

    def vjp(g):
        b = to_modes(g)
        grad_h = from_modes(np.einsum("kij,ki->kj", a_val.conj(), b))
        c = np.einsum("ki,kj->kij", b.conj(), f_sel) / sel.m_total
        return grad_h, c.real, -c.imag

    return ad.make_node(value, (h, a_re, a_im), vjp)


def skew_divergence_node(raw: Tensor, backend: DiffBackend, dim: int,
                         extra: int) -> Tensor:
    """Fixed claw layer on the tape: skew block to div-free field, rest copied.

    The adjoint is assembled from the backends' analytic transposes (for
    the spectral multipliers simply the negated derivative).
    """
    n_skew = skew_channel_count(dim)
    vals = raw.value

    def entry(i, j):
        if i < j:
            return vals[:, i * dim - i * (i + 1) // 2 + (j - i - 1)]
        return -vals[:, j * dim - j * (j + 1) // 2 + (i - j - 1)]

    out = np.zeros((vals.shape[0], dim + extra))
    for j in range(dim):
        for k in range(dim):
            if k != j:
                out[:, j] += backend.partial(entry(j, k), k)
    if extra:
        out[:, dim:] = vals[:, n_skew:]

    def vjp(g):
        grad = np.zeros_like(vals)
        col = 0
        for i in range(dim):
            for j in range(i + 1, dim):
                grad[:, col] = backend.partial_adjoint(g[:, i], j) \
                    - backend.partial_adjoint(g[:, j], i)
                col += 1
        if extra:
            grad[:, n_skew:] = g[:, dim:]
        return (grad,)

    return ad.make_node(out, (raw,), vjp)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class DivFreeFno:
    """The operator model; ``divergence_free=False`` gives the ablation.

    Parameters live in a name -> Tensor table in declaration order (the
    checkpoint blob order).  One instance serves any periodic grid whose
    axes can host the retained modes; per-grid plans are cached.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        h = spec.width
        p_f = spec.lifted_channels

        def param(name, value):
            t = Tensor(value, requires_grad=True)
            self.params[name] = t
            return t

        param("lift.weight", _uniform(rng, 1 / np.sqrt(p_f), (p_f, h)))
        param("lift.bias", _uniform(rng, 1 / np.sqrt(p_f), (h,)))
        k_total = int(np.prod(spec.modes))
        for layer in range(spec.depth):
            mix_scale = 1.0 / (h * h)
            param(f"layer{layer}.a_re", mix_scale * rng.uniform(0, 1, (k_total, h, h)))
            param(f"layer{layer}.a_im", mix_scale * rng.uniform(0, 1, (k_total, h, h)))
            param(f"layer{layer}.w", _uniform(rng, 1 / np.sqrt(h), (h, h)))
            param(f"layer{layer}.bias", _uniform(rng, 1 / np.sqrt(h), (h,)))
        param("proj.w1", _uniform(rng, 1 / np.sqrt(h), (h, spec.proj_width)))
        param("proj.b1", _uniform(rng, 1 / np.sqrt(h), (spec.proj_width,)))
        bound2 = 1 / np.sqrt(spec.proj_width)
        param("proj.w2", _uniform(rng, bound2, (spec.proj_width, spec.raw_output_channels)))
        param("proj.b2", _uniform(rng, bound2, (spec.raw_output_channels,)))

        self._selections: dict[tuple, _ModeSelection] = {}
        self._backends: dict[tuple, SpectralPlan] = {}

    # -- per-grid plan caches -------------------------------------------
    def _selection(self, grid: PeriodicGrid) -> _ModeSelection:
        key = grid.counts
        if key not in self._selections:
            self._selections[key] = _ModeSelection(self.spec.modes, grid.counts)
        return self._selections[key]

    def backend_for(self, grid: PeriodicGrid) -> SpectralPlan:
        key = (grid.lengths, grid.counts)
        if key not in self._backends:
            self._backends[key] = SpectralPlan(grid)
        return self._backends[key]

    # -- forward pieces ---------------------------------------------------
    def lift(self, encoded: np.ndarray) -> Tensor:
        if encoded.shape[1] != self.spec.lifted_channels:
            raise ValueError(
                f"lift expects {self.spec.lifted_channels} channels "
                f"(data plus coordinates), got {encoded.shape[1]}"
            )
        return Tensor(encoded) @ self.params["lift.weight"] + self.params["lift.bias"]

    def fourier_layer(self, h: Tensor, layer: int, sel: _ModeSelection) -> Tensor:
        local = h @ self.params[f"layer{layer}.w"]
        mixed = spectral_mix(
            h, self.params[f"layer{layer}.a_re"], self.params[f"layer{layer}.a_im"], sel
        )
        return ad.gelu(local + mixed + self.params[f"layer{layer}.bias"])

    def project(self, h: Tensor) -> Tensor:
        hidden = ad.gelu(h @ self.params["proj.w1"] + self.params["proj.b1"])
        return hidden @ self.params["proj.w2"] + self.params["proj.b2"]

    def forward_node(self, values: np.ndarray, grid: PeriodicGrid,
                     backend: DiffBackend | None = None) -> Tensor:
        """Full composition on the tape; returns the (M, p + n2) output node."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (grid.npoints, self.spec.input_channels):
            raise ValueError(
                f"expected input of shape ({grid.npoints}, "
                f"{self.spec.input_channels}), got {values.shape}"
            )
        sel = self._selection(grid)
        encoded = np.hstack([values, grid.coords()])
        h = self.lift(encoded)
        for layer in range(self.spec.depth):
            h = self.fourier_layer(h, layer, sel)
        raw = self.project(h)
        if not self.spec.divergence_free:
            return raw
        if backend is None:
            backend = self.backend_for(grid)
        return skew_divergence_node(raw, backend, self.spec.dim, self.spec.extra_channels)

    def forward(self, values: np.ndarray, grid: PeriodicGrid) -> DivFreeField:
        node = self.forward_node(values, grid)
        return DivFreeField(
            Field(grid, node.value),
            "spectral" if self.spec.divergence_free else "none",
        )

    # -- bookkeeping ------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(t.value.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != t.value.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.value = np.array(arrays[name], dtype=np.float64)

    def ablated_twin(self, seed: int = 0) -> "DivFreeFno":
        """Same architecture with the divergence-free head removed."""
        return DivFreeFno(replace(self.spec, divergence_free=False), seed=seed)


def relative_l2_loss(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Squared-norm ratio ||pred - truth||^2 / ||truth||^2 for one sample."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != pred.value.shape:
        raise ValueError(f"shape mismatch: pred {pred.value.shape}, truth {truth.shape}")
    denom = float(np.sum(truth * truth))
    if denom == 0.0:
        raise ValueError("truth sample has zero norm; relative error undefined")
    diff = pred - Tensor(truth)
    return ad.square(diff).sum() * (1.0 / denom)


def relative_l2(pred: np.ndarray, truth: np.ndarray) -> float:
    """Plain-array root ratio ||pred - truth|| / ||truth|| (reporting metric)."""
    truth = np.asarray(truth, dtype=np.float64)
    denom = float(np.linalg.norm(truth))
    if denom == 0.0:
        raise ValueError("truth sample has zero norm; relative error undefined")
    return float(np.linalg.norm(np.asarray(pred) - truth)) / denom


def backward(loss: Tensor) -> None:
    """Reverse-mode gradients for every trainable tensor reachable from loss."""
    ad.backward(loss)


# -- checkpoint container --------------------------------------------------

def save_checkpoint(path, header: dict, blobs: dict[str, np.ndarray]) -> None:
    """Text header, named float64 blobs in insertion order, sha256 trailer."""
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    text = json.dumps(header, sort_keys=True).encode() + b"\n\n"
    payload += struct.pack("<Q", len(text)) + text
    payload += struct.pack("<Q", len(blobs))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode()
        payload += struct.pack("<I", len(name_b)) + name_b
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        payload += arr.tobytes()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError("checkpoint checksum mismatch; file corrupted or truncated")
    if payload[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    off = 8
    (text_len,) = struct.unpack_from("<Q", payload, off)
    off += 8
    header = json.loads(payload[off:off + text_len].decode())
    off += text_len
    (n_blobs,) = struct.unpack_from("<Q", payload, off)
    off += 8
    blobs: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<I", payload, off)
        off += 4
        name = payload[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", payload, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", payload, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
        off += 8 * count
        blobs[name] = arr.reshape(shape).copy()
    return header, blobs
