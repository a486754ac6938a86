"""Single-coil MRI measurement model on synthetic phantom data.

Covers the centered orthonormal 2-D Fourier transforms, Cartesian
undersampling masks, complex Gaussian noise injection, the conjugate
gradient solve of the regularized data-consistency subproblem, phantom
generation, and a flat binary container for phantom datasets.

All functions are pure in their inputs plus explicit seeds.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FRPH"
CONTAINER_VERSION = 1

PATTERNS = ("1D_RANDOM", "1D_UNIFORM", "2D_RANDOM")


class UnsupportedSizeError(ValueError):
    """Raised for non-power-of-two image dimensions."""


class MaskConfigError(ValueError):
    """Raised when a mask specification cannot meet its target rate."""


def _check_pow2(h, w):
    for n in (h, w):
        if n < 2 or (n & (n - 1)) != 0:
            raise UnsupportedSizeError(
                f"image dimensions must be powers of two >= 2, got {h}x{w}"
            )


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D FFT (image space -> k-space)."""
    x = np.asarray(x, dtype=np.complex128)
    _check_pow2(x.shape[-2], x.shape[-1])
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=(-2, -1)), norm="ortho"), axes=(-2, -1)
    )


def ifft2c(y: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D inverse FFT (k-space -> image space)."""
    y = np.asarray(y, dtype=np.complex128)
    _check_pow2(y.shape[-2], y.shape[-1])
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(y, axes=(-2, -1)), norm="ortho"), axes=(-2, -1)
    )


# ---------------------------------------------------------------------------
# sampling masks


@dataclass(frozen=True)
class SamplingMask:
    """Binary Cartesian undersampling pattern.

    ``grid`` entries are exactly 0.0 or 1.0; the central low-frequency
    region is always fully kept.
    """

    pattern: str
    acceleration: int
    center_fraction: float
    seed: int
    grid: np.ndarray

    @property
    def sampled_fraction(self) -> float:
        return float(self.grid.mean())


def make_mask(
    height: int,
    width: int,
    pattern: str,
    acceleration: int,
    center_fraction: float = 0.08,
    seed: int = 0,
) -> SamplingMask:
    """Generate a deterministic undersampling mask.

    1-D patterns select whole phase-encode columns; 2D_RANDOM selects
    individual points.  The sampled fraction is targeted at exactly
    1/acceleration (within rounding).
    """
    if pattern not in PATTERNS:
        raise MaskConfigError(f"unknown mask pattern {pattern!r}")
    if acceleration < 1:
        raise MaskConfigError(f"acceleration must be >= 1, got {acceleration}")
    if acceleration > 1 and center_fraction >= 1.0 / acceleration:
        raise MaskConfigError(
            f"center fraction {center_fraction} cannot meet acceleration "
            f"{acceleration} (>= 1/R)"
        )
    rng = np.random.default_rng(seed)
    grid = np.zeros((height, width))

    if acceleration == 1:
        grid[:] = 1.0
    elif pattern in ("1D_RANDOM", "1D_UNIFORM"):
        n_cols = int(round(width / acceleration))
        n_center = max(int(round(center_fraction * width)), 1)
        lo = (width - n_center) // 2
        center = np.arange(lo, lo + n_center)
        outside = np.setdiff1d(np.arange(width), center)
        n_extra = max(n_cols - n_center, 0)
        if pattern == "1D_RANDOM":
            extra = rng.choice(outside, size=n_extra, replace=False)
        else:
            offset = rng.integers(0, max(len(outside) // max(n_extra, 1), 1))
            picks = (
                np.floor(np.arange(n_extra) * len(outside) / n_extra).astype(int)
                + offset
            ) % len(outside)
            extra = outside[picks]
        grid[:, np.concatenate([center, extra])] = 1.0
    else:  # 2D_RANDOM
        n_points = int(round(height * width / acceleration))
        ch = max(int(round(center_fraction * height)), 1)
        cw = max(int(round(center_fraction * width)), 1)
        top, left = (height - ch) // 2, (width - cw) // 2
        grid[top : top + ch, left : left + cw] = 1.0
        flat = grid.ravel()
        outside = np.flatnonzero(flat == 0.0)
        n_extra = max(n_points - int(flat.sum()), 0)
        flat[rng.choice(outside, size=n_extra, replace=False)] = 1.0

    return SamplingMask(pattern, acceleration, center_fraction, seed, grid)


# ---------------------------------------------------------------------------
# forward model


def forward_op(m: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """A(m) = P . F(m): masked k-space of an image."""
    if m.shape[-2:] != mask.grid.shape:
        raise ValueError(f"image shape {m.shape} does not match mask {mask.grid.shape}")
    return mask.grid * fft2c(m)


def adjoint_op(b: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """A^H(b) = F^H(P . b): zero-filled reconstruction."""
    if b.shape[-2:] != mask.grid.shape:
        raise ValueError(f"k-space shape {b.shape} does not match mask {mask.grid.shape}")
    return ifft2c(mask.grid * b)


def add_noise(
    b: np.ndarray, mask: SamplingMask, variance: float, seed: int
) -> np.ndarray:
    """Add complex white Gaussian noise at the sampled k-space positions.

    The total complex variance is ``variance`` (split evenly between the
    independent real and imaginary components).
    """
    if variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    if variance == 0:
        return b.copy()
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(variance / 2.0)
    noise = sigma * (
        rng.standard_normal(b.shape) + 1j * rng.standard_normal(b.shape)
    )
    return b + mask.grid * noise


# ---------------------------------------------------------------------------
# conjugate gradient data-consistency solve


@dataclass
class CGResult:
    image: np.ndarray
    residuals: list[float]

    @property
    def final_residual(self) -> float:
        return self.residuals[-1]

    @property
    def iterations(self) -> int:
        return len(self.residuals) - 1


def cg_solve(
    rhs: np.ndarray,
    mask: SamplingMask,
    lam: float,
    max_iters: int = 10,
    tol: float = 1e-6,
) -> CGResult:
    """Solve (A^H A + lam I) m = rhs by conjugate gradients.

    The normal operator is Hermitian positive definite for lam > 0.
    Residual norms (relative to ||rhs||) are recorded per iteration.
    """
    if lam <= 0:
        raise ValueError(f"cg_solve requires lam > 0, got {lam}")
    if not np.all(np.isfinite(rhs)):
        raise ValueError("cg_solve rhs contains non-finite values")

    def normal_op(x):
        return ifft2c(mask.grid * fft2c(x)) + lam * x

    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0:
        return CGResult(np.zeros_like(rhs), [0.0])

    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = np.vdot(r, r).real
    residuals = [1.0]
    for _ in range(max_iters):
        ap = normal_op(p)
        alpha = rs / np.vdot(p, ap).real
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = np.vdot(r, r).real
        residuals.append(float(np.sqrt(rs_new) / rhs_norm))
        if residuals[-1] <= tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CGResult(x, residuals)


# ---------------------------------------------------------------------------
# phantom generation


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one client's synthetic image distribution.

    ``contrast`` controls per-client heterogeneity: ``gamma`` warps the
    intensity histogram, ``brightness`` scales it, ``ellipses`` sets the
    structure count.  Magnitudes are normalized to [0, 1].
    """

    kind: str = "ellipse-phantom"
    size: int = 64
    contrast: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ellipse-phantom", "textured-phantom"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")


def _random_ellipse_image(rng, n, n_ellipses):
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")
    img = np.zeros((n, n))
    # enclosing skull-like ellipse plus random internal structures
    img[(xx / 0.9) ** 2 + (yy / 0.92) ** 2 <= 1.0] = 0.25
    for _ in range(n_ellipses):
        x0, y0 = rng.uniform(-0.55, 0.55, size=2)
        a = rng.uniform(0.08, 0.45)
        b = rng.uniform(0.08, 0.45)
        theta = rng.uniform(0, np.pi)
        value = rng.uniform(-0.4, 0.8)
        xr = (xx - x0) * np.cos(theta) + (yy - y0) * np.sin(theta)
        yr = -(xx - x0) * np.sin(theta) + (yy - y0) * np.cos(theta)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += value
    return np.clip(img, 0.0, None)


def _random_texture_image(rng, n, n_ellipses):
    base = _random_ellipse_image(rng, n, max(n_ellipses // 2, 2))
    noise = rng.standard_normal((n, n))
    spectrum = fft2c(noise.astype(complex))
    yy, xx = np.meshgrid(
        np.arange(n) - n // 2, np.arange(n) - n // 2, indexing="ij"
    )
    lowpass = np.exp(-(xx**2 + yy**2) / (2.0 * (n / 12.0) ** 2))
    texture = ifft2c(spectrum * lowpass).real
    texture = (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    return base * (0.6 + 0.4 * texture)


def _smooth_phase(rng, n):
    coeffs = rng.uniform(-1.0, 1.0, size=6)
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")
    return np.pi * (
        coeffs[0] * xx
        + coeffs[1] * yy
        + coeffs[2] * xx * yy
        + coeffs[3] * xx**2
        + coeffs[4] * yy**2
        + coeffs[5]
    ) * 0.3


def make_phantom_image(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """One complex phantom with smooth synthetic phase, magnitude in [0, 1]."""
    n = spec.size
    gamma = spec.contrast.get("gamma", 1.0)
    brightness = spec.contrast.get("brightness", 1.0)
    n_ellipses = spec.contrast.get("ellipses", 6)
    if spec.kind == "ellipse-phantom":
        mag = _random_ellipse_image(rng, n, n_ellipses)
    else:
        mag = _random_texture_image(rng, n, n_ellipses)
    mag = mag / (mag.max() + 1e-12)
    mag = np.clip(brightness * mag**gamma, 0.0, 1.0)
    return mag * np.exp(1j * _smooth_phase(rng, n))


@dataclass
class Sample:
    """One training example: ground truth, its masked k-space, and the mask."""

    image: np.ndarray
    kspace: np.ndarray
    mask: SamplingMask


def make_phantoms(
    spec: PhantomSpec,
    count: int,
    mask: SamplingMask,
    noise_variance: float = 0.0,
) -> list[Sample]:
    """Generate ``count`` (ground truth, measurement, mask) triples.

    Measurements are the exact forward model of the ground truth, with
    optional complex Gaussian noise added at the sampled positions.
    Deterministic for a fixed spec seed.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(spec.seed)
    samples = []
    for i in range(count):
        img = make_phantom_image(spec, rng)
        b = forward_op(img, mask)
        if noise_variance > 0:
            b = add_noise(b, mask, noise_variance, seed=int(rng.integers(2**31)))
        samples.append(Sample(img, b, mask))
    return samples


# ---------------------------------------------------------------------------
# dataset container


def save_dataset(path, images: list[np.ndarray], metadata: dict) -> None:
    """Write complex images to a flat binary container plus a JSON sidecar.

    Header: magic, version, count, height, width (little-endian u32);
    payload: little-endian doubles, interleaved real/imag per pixel.
    """
    path = Path(path)
    h, w = images[0].shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III I", CONTAINER_VERSION, len(images), h, w))
        for img in images:
            if img.shape != (h, w):
                raise ValueError("all images in a container must share one shape")
            inter = np.empty((h, w, 2))
            inter[..., 0] = img.real
            inter[..., 1] = img.imag
            f.write(inter.astype("<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(metadata, indent=2, sort_keys=True))


def load_dataset(path) -> tuple[list[np.ndarray], dict]:
    """Read a container written by :func:`save_dataset`."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a phantom dataset container")
    version, count, h, w = struct.unpack("<IIII", raw[4:20])
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    payload = np.frombuffer(raw[20:], dtype="<f8").reshape(count, h, w, 2)
    images = [payload[i, ..., 0] + 1j * payload[i, ..., 1] for i in range(count)]
    sidecar = path.with_suffix(path.suffix + ".json")
    metadata = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return images, metadata
