"""Unrolled reconstruction model: attention-based denoiser blocks
alternating with conjugate-gradient data-consistency solves.

The denoiser is a residual block of four conv-conv-relu units, a combined
channel/spatial attention stage, and a final convolution with a jump
connection.  One denoiser is shared across all unroll steps; the
regularization weight is learned through a softplus reparameterization so
it stays positive.  The data-consistency solve runs a fixed number of CG
iterations built from differentiable ops, so end-to-end gradients flow
through the solver.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, PartitionTag, Tensor
from .mri import SamplingMask, adjoint_op

DILATION_SCALES = (3, 5, 7)


class ConfigError(ValueError):
    pass


def _he_init(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class SlamParams:
    """Weights of the combined channel/spatial attention stage."""

    spatial_kernel: Parameter  # (1, 2, 7, 7)
    spatial_bias: Parameter  # (1,)
    avg_pyramid: list[Parameter]  # three (Cr, C, 3, 3) kernels, dilations 3/5/7
    max_pyramid: list[Parameter]
    avg_fuse_kernel: Parameter  # (C, 3*Cr, 3, 3)
    avg_fuse_bias: Parameter  # (C,)
    max_fuse_kernel: Parameter
    max_fuse_bias: Parameter

    def parameters(self):
        return (
            [self.spatial_kernel, self.spatial_bias]
            + self.avg_pyramid
            + self.max_pyramid
            + [
                self.avg_fuse_kernel,
                self.avg_fuse_bias,
                self.max_fuse_kernel,
                self.max_fuse_bias,
            ]
        )


@dataclass
class RslamParams:
    """Weights of one residual denoiser block (shared across unroll steps)."""

    conv_kernels: list[Parameter]  # eight kernels: four conv-conv-relu units
    conv_biases: list[Parameter]
    slam: SlamParams
    final_kernel: Parameter  # (2, W_h, 3, 3)
    final_bias: Parameter  # (2,)

    def parameters(self):
        out = []
        for k, b in zip(self.conv_kernels, self.conv_biases):
            out += [k, b]
        out += self.slam.parameters()
        out += [self.final_kernel, self.final_bias]
        return out


def make_slam_params(channels, rng, prefix="slam"):
    cr = max(channels // 4, 1)
    avg_pyr, max_pyr = [], []
    for branch, store in (("avg", avg_pyr), ("max", max_pyr)):
        for scale in DILATION_SCALES:
            store.append(
                Parameter(
                    _he_init(rng, (cr, channels, 3, 3)),
                    f"{prefix}.{branch}_pyramid.d{scale}.kernel",
                )
            )
    return SlamParams(
        spatial_kernel=Parameter(_he_init(rng, (1, 2, 7, 7)), f"{prefix}.spatial.kernel"),
        spatial_bias=Parameter(np.zeros(1), f"{prefix}.spatial.bias"),
        avg_pyramid=avg_pyr,
        max_pyramid=max_pyr,
        avg_fuse_kernel=Parameter(
            _he_init(rng, (channels, 3 * cr, 3, 3)), f"{prefix}.avg_fuse.kernel"
        ),
        avg_fuse_bias=Parameter(np.zeros(channels), f"{prefix}.avg_fuse.bias"),
        max_fuse_kernel=Parameter(
            _he_init(rng, (channels, 3 * cr, 3, 3)), f"{prefix}.max_fuse.kernel"
        ),
        max_fuse_bias=Parameter(np.zeros(channels), f"{prefix}.max_fuse.bias"),
    )


def make_rslam_params(hidden, rng, final_scale=1e-2):
    kernels, biases = [], []
    c_in = 2
    for unit in range(4):
        for half in range(2):
            c_out = hidden
            kernels.append(
                Parameter(
                    _he_init(rng, (c_out, c_in, 3, 3)),
                    f"body.unit{unit}.conv{half}.kernel",
                )
            )
            biases.append(
                Parameter(np.zeros(c_out), f"body.unit{unit}.conv{half}.bias")
            )
            c_in = hidden
    # a small final conv keeps the residual branch near zero at init,
    # so the untrained block is close to the identity
    return RslamParams(
        conv_kernels=kernels,
        conv_biases=biases,
        slam=make_slam_params(hidden, rng),
        final_kernel=Parameter(
            final_scale * _he_init(rng, (2, hidden, 3, 3)), "final_conv.kernel"
        ),
        final_bias=Parameter(np.zeros(2), "final_conv.bias"),
    )


# ---------------------------------------------------------------------------
# attention ops


def spatial_attention(f: Tensor, params: SlamParams) -> Tensor:
    """Per-pixel gate in (0, 1): sigmoid of a 7x7 conv over the
    channel-avg/channel-max pooled maps."""
    pooled = ad.concat(
        [ad.channel_pool(f, "avg"), ad.channel_pool(f, "max")], axis=-3
    )
    return ad.sigmoid(
        ad.conv2d(pooled, params.spatial_kernel, bias=params.spatial_bias)
    )


def laplacian_attention(f: Tensor, params: SlamParams) -> Tensor:
    """Per-channel gate in (0, 1) from dilated-conv pyramids over the
    globally pooled descriptors."""

    def pyramid(g, kernels):
        return ad.concat(
            [
                ad.relu(ad.conv2d(g, k, dilation=d))
                for k, d in zip(kernels, DILATION_SCALES)
            ],
            axis=-3,
        )

    g_avg = pyramid(ad.global_pool(f, "avg"), params.avg_pyramid)
    g_max = pyramid(ad.global_pool(f, "max"), params.max_pyramid)
    fused = ad.add(
        ad.conv2d(g_avg, params.avg_fuse_kernel, bias=params.avg_fuse_bias),
        ad.conv2d(g_max, params.max_fuse_kernel, bias=params.max_fuse_bias),
    )
    return ad.sigmoid(fused)


def slam(f: Tensor, params: SlamParams) -> Tensor:
    """Channel gate first, then a spatial gate of the gated features."""
    gated = ad.mul(laplacian_attention(f, params), f)
    return ad.mul(spatial_attention(gated, params), gated)


def rslam(x: Tensor, params: RslamParams) -> Tensor:
    """Residual denoiser on a (..., 2, H, W) real/imag stack."""
    h = x
    for unit in range(4):
        k0, b0 = params.conv_kernels[2 * unit], params.conv_biases[2 * unit]
        k1, b1 = params.conv_kernels[2 * unit + 1], params.conv_biases[2 * unit + 1]
        h = ad.relu(ad.conv2d(ad.conv2d(h, k0, bias=b0), k1, bias=b1))
    h = slam(h, params.slam)
    return ad.add(x, ad.conv2d(h, params.final_kernel, bias=params.final_bias))


# ---------------------------------------------------------------------------
# differentiable data-consistency solve


def dc_solve(
    rhs: Tensor, mask: SamplingMask, lam: Tensor, max_iters: int = 10, tol: float = 1e-6
) -> Tensor:
    """Conjugate-gradient solve of (A^H A + lam I) x = rhs, unrolled.

    ``rhs`` is a (N, 2, H, W) real/imag stack; each sample gets its own
    CG coefficients.  The iteration is a fixed differentiable procedure:
    gradients flow through every CG step, including through ``lam``.
    """
    mask_t = Tensor(mask.grid[None, None])
    axes = (-3, -2, -1)

    def normal_op(x):
        return ad.add(
            ad.ifft2c_pair(ad.mul(mask_t, ad.fft2c_pair(x))), ad.mul(lam, x)
        )

    rhs_norms = np.sqrt(np.sum(rhs.data**2, axis=(-3, -2, -1)))
    x = Tensor(np.zeros_like(rhs.data))
    r = rhs
    p = r
    rs = ad.tsum(ad.mul(r, r), axis=axes, keepdims=True)
    for _ in range(max_iters):
        ap = normal_op(p)
        denom = ad.add(ad.tsum(ad.mul(p, ap), axis=axes, keepdims=True), 1e-300)
        alpha = ad.div(rs, denom)
        x = ad.add(x, ad.mul(alpha, p))
        r = ad.sub(r, ad.mul(alpha, ap))
        rs_new = ad.tsum(ad.mul(r, r), axis=axes, keepdims=True)
        if not np.all(np.isfinite(rs_new.data)):
            raise FloatingPointError("data-consistency CG diverged (NaN residual)")
        rel = np.sqrt(rs_new.data.reshape(-1)) / (rhs_norms.reshape(-1) + 1e-300)
        if np.all(rel <= tol):
            x_final = x
            break
        beta = ad.div(rs_new, ad.add(rs, 1e-300))
        p = ad.add(r, ad.mul(beta, p))
        rs = rs_new
        x_final = x
    return x_final


# ---------------------------------------------------------------------------
# unrolled model


class UnrolledModel:
    """Alternating denoiser / data-consistency reconstruction network.

    One denoiser weight set is reused at every unroll step.  The
    regularization weight is ``softplus(rho)`` with ``rho`` trainable.
    """

    def __init__(self, hidden=16, unroll_steps=2, cg_iters=10, cg_tol=1e-6, seed=0,
                 lam_init=0.05):
        if unroll_steps < 1:
            raise ConfigError(f"unroll depth must be >= 1, got {unroll_steps}")
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.unroll_steps = unroll_steps
        self.cg_iters = cg_iters
        self.cg_tol = cg_tol
        self.seed = seed
        self.rslam = make_rslam_params(hidden, rng)
        # inverse softplus so that softplus(rho) == lam_init
        rho0 = np.log(np.expm1(lam_init))
        self.rho = Parameter(np.asarray(rho0), "dc.rho")

    def parameters(self) -> list[Parameter]:
        return self.rslam.parameters() + [self.rho]

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def lam(self) -> Tensor:
        return ad.softplus(self.rho)

    def forward(self, b: np.ndarray, mask: SamplingMask) -> Tensor:
        """Reconstruct from masked k-space ``b`` ((H, W) or (N, H, W)).

        Returns the (N, 2, H, W) real/imag stack of the reconstruction.
        """
        b = np.asarray(b, dtype=np.complex128)
        if b.ndim == 2:
            b = b[None]
        ahb = adjoint_op(b, mask)
        ahb_t = Tensor(np.stack([ahb.real, ahb.imag], axis=1))
        lam = self.lam()
        m = ahb_t
        for _ in range(self.unroll_steps):
            r = rslam(m, self.rslam)
            rhs = ad.add(ahb_t, ad.mul(lam, r))
            m = dc_solve(rhs, mask, lam, self.cg_iters, self.cg_tol)
        return m

    def reconstruct(self, b: np.ndarray, mask: SamplingMask) -> np.ndarray:
        """Complex-valued reconstruction with no gradient recording."""
        with ad.no_grad():
            out = self.forward(b, mask).data
        return out[:, 0] + 1j * out[:, 1]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(named) != set(state):
            missing = set(named) ^ set(state)
            raise ConfigError(f"parameter name mismatch: {sorted(missing)}")
        for name, p in named.items():
            p.data = np.array(state[name], dtype=np.float64).reshape(p.data.shape)

    def clone(self) -> "UnrolledModel":
        out = UnrolledModel(
            self.hidden, self.unroll_steps, self.cg_iters, self.cg_tol, self.seed
        )
        out.load_state_dict(self.state_dict())
        for name, p in out.named_parameters().items():
            p.tag = self.named_parameters()[name].tag
        return out


# ---------------------------------------------------------------------------
# parameter partitioning


PARTITION_SCHEMES = ("ALL_GLOBAL", "SLAM_LOCAL", "CUSTOM")


def partition_params(
    model: UnrolledModel, scheme: str, custom_local: list[str] | None = None
) -> tuple[list[Parameter], list[Parameter]]:
    """Split parameters into (global-shared, local-personalized) sets.

    ``ALL_GLOBAL`` shares everything; ``SLAM_LOCAL`` keeps the attention
    stage and the final conv personalized while the conv body and the
    regularization weight stay shared; ``CUSTOM`` personalizes exactly the
    named tensors.  Tags are written onto the parameters.
    """
    named = model.named_parameters()
    if scheme == "ALL_GLOBAL":
        local_names = set()
    elif scheme == "SLAM_LOCAL":
        local_names = {
            n for n in named if n.startswith("slam.") or n.startswith("final_conv.")
        }
    elif scheme == "CUSTOM":
        local_names = set(custom_local or [])
        unknown = local_names - set(named)
        if unknown:
            raise ConfigError(f"unknown parameter names in CUSTOM scheme: {sorted(unknown)}")
    else:
        raise ConfigError(f"unknown partition scheme {scheme!r}")

    global_set, local_set = [], []
    for name, p in named.items():
        if name in local_names:
            p.tag = PartitionTag.LOCAL_PERSONALIZED
            local_set.append(p)
        else:
            p.tag = PartitionTag.GLOBAL_SHARED
            global_set.append(p)
    return global_set, local_set


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: UnrolledModel) -> None:
    """Named-tensor archive: one little-endian float64 blob per parameter
    plus a manifest with per-tensor checksums and the model hyperparameters."""
    path = Path(path)
    entries = []
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, p in model.named_parameters().items():
            blob = p.data.astype("<f8").tobytes()
            zf.writestr(name + ".bin", blob)
            entries.append(
                {
                    "name": name,
                    "partition": p.tag.value,
                    "shape": list(p.data.shape),
                    "sha256": hashlib.sha256(blob).hexdigest(),
                }
            )
        manifest = {
            "format": "fedrecon-checkpoint",
            "version": 1,
            "model": {
                "hidden": model.hidden,
                "unroll_steps": model.unroll_steps,
                "cg_iters": model.cg_iters,
                "cg_tol": model.cg_tol,
            },
            "tensors": entries,
            "checksum": hashlib.sha256(
                "".join(e["sha256"] for e in entries).encode()
            ).hexdigest(),
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> UnrolledModel:
    """Rebuild a model from an archive, verifying every checksum."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        cfg = manifest["model"]
        model = UnrolledModel(
            hidden=cfg["hidden"],
            unroll_steps=cfg["unroll_steps"],
            cg_iters=cfg["cg_iters"],
            cg_tol=cfg["cg_tol"],
        )
        state = {}
        named = model.named_parameters()
        for entry in manifest["tensors"]:
            blob = zf.read(entry["name"] + ".bin")
            if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise ValueError(f"checksum mismatch for tensor {entry['name']!r}")
            state[entry["name"]] = np.frombuffer(blob, dtype="<f8").reshape(
                entry["shape"]
            )
            named[entry["name"]].tag = PartitionTag(entry["partition"])
        model.load_state_dict(state)
    return model
