"""Finite-difference gradient checks and independent oracles.

Shared by the test suite and the ``gradcheck``/``selftest`` CLI
subcommands.  Every oracle here is deliberately a straight-line or
brute-force computation, independent of the implementation it checks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mri import SamplingMask, fft2c, ifft2c
from .network import UnrolledModel


def rel_error(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_difference(fn, tensor, indices, step=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. selected
    entries of ``tensor.data`` (mutated in place and restored)."""
    out = np.zeros(len(indices))
    flat = tensor.data.reshape(-1)
    for n, i in enumerate(indices):
        keep = flat[i]
        flat[i] = keep + step
        up = fn()
        flat[i] = keep - step
        down = fn()
        flat[i] = keep
        out[n] = (up - down) / (2.0 * step)
    return out


def check_gradients(loss_fn, tensors, n_probe=4, step=1e-5, seed=0):
    """Max relative error between analytic and central-difference
    gradients over ``n_probe`` random entries of each tensor.

    ``loss_fn`` builds the scalar loss graph from scratch on every call.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    grads = ad.backward(loss, tensors)
    worst = 0.0
    for t in tensors:
        k = min(n_probe, t.size)
        indices = rng.choice(t.size, size=k, replace=False)
        fd = finite_difference(lambda: loss_fn().item(), t, indices, step)
        analytic = grads[t].reshape(-1)[indices]
        worst = max(worst, rel_error(analytic, fd, floor=1e-6))
    return worst


# ---------------------------------------------------------------------------
# independent oracles


def conv2d_oracle(x, k, dilation=1):
    """Direct nested-loop same-padding cross-correlation."""
    ci, h, w = x.shape
    co, _, kh, kw = k.shape
    ph = dilation * (kh - 1) // 2
    pw = dilation * (kw - 1) // 2
    out = np.zeros((co, h, w))
    for o in range(co):
        for y in range(h):
            for xx in range(w):
                acc = 0.0
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            yy = y + i * dilation - ph
                            xj = xx + j * dilation - pw
                            if 0 <= yy < h and 0 <= xj < w:
                                acc += k[o, c, i, j] * x[c, yy, xj]
                out[o, y, xx] = acc
    return out


def tikhonov_oracle(rhs, mask: SamplingMask, lam):
    """Closed-form solve of (A^H A + lam I) m = rhs.

    Valid because A^H A is diagonalized by the Fourier transform with
    per-frequency eigenvalue mask; the solution is
    F^H[(mask + lam)^-1 (F rhs)].
    """
    return ifft2c(fft2c(rhs) / (mask.grid + lam))


def softmax_oracle(losses):
    """High-precision softmax via python floats (math.exp, Fraction-free)."""
    import math

    exps = [math.exp(float(x)) for x in losses]
    total = math.fsum(exps)
    return np.array([e / total for e in exps])


def ssim_oracle(x, y, config):
    """Per-window straight-line evaluation of the similarity index."""
    from .metrics import gaussian_window

    c1 = (config.k1 * config.data_range) ** 2
    c2 = (config.k2 * config.data_range) ** 2
    w = gaussian_window(config.window_size, config.sigma)
    r = config.window_size
    vals = []
    for i in range(x.shape[0] - r + 1):
        for j in range(x.shape[1] - r + 1):
            px = x[i : i + r, j : j + r]
            py = y[i : i + r, j : j + r]
            mx = float((w * px).sum())
            my = float((w * py).sum())
            vx = float((w * px * px).sum()) - mx * mx
            vy = float((w * py * py).sum()) - my * my
            cov = float((w * px * py).sum()) - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(vals))


def adamw_oracle(theta, grad, lr, betas, eps, weight_decay, steps=1):
    """Hand-computed scalar AdamW reference trajectory."""
    import math

    m = v = 0.0
    for t in range(1, steps + 1):
        m = betas[0] * m + (1 - betas[0]) * grad
        v = betas[1] * v + (1 - betas[1]) * grad * grad
        mhat = m / (1 - betas[0] ** t)
        vhat = v / (1 - betas[1] ** t)
        theta = theta - lr * (mhat / (math.sqrt(vhat) + eps) + weight_decay * theta)
    return theta


# ---------------------------------------------------------------------------
# suites (used by the CLI; the pytest suite asserts the same quantities)


def gradient_suite(verbose=True):
    """Finite-difference checks for every differentiable op and the full
    unrolled model on small inputs.  Returns a list of (name, max rel
    error, bound) triples."""
    from .mri import make_mask
    from .network import rslam

    rng = np.random.default_rng(7)
    results = []

    def record(name, err, bound):
        results.append((name, err, bound))
        if verbose:
            status = "ok" if err < bound else "FAIL"
            print(f"  {name:<28s} max rel err {err:9.3e}  (< {bound:g})  {status}")

    x = Tensor(rng.standard_normal((3, 6, 6)), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    record(
        "conv2d",
        check_gradients(
            lambda: ad.tsum(ad.mul(ad.conv2d(x, k, bias=b), 0.1)), [x, k, b]
        ),
        1e-4,
    )
    record(
        "conv2d dilated",
        check_gradients(lambda: ad.tsum(ad.conv2d(x, k, dilation=2)), [x, k]),
        1e-4,
    )
    y = Tensor(rng.standard_normal((3, 4, 4)) * 2.0, requires_grad=True)
    record("relu", check_gradients(lambda: ad.tsum(ad.square(ad.relu(y))), [y]), 1e-4)
    record("sigmoid", check_gradients(lambda: ad.tsum(ad.square(ad.sigmoid(y))), [y]), 1e-4)
    record("softplus", check_gradients(lambda: ad.tsum(ad.square(ad.softplus(y))), [y]), 1e-4)
    record(
        "channel_pool avg/max",
        check_gradients(
            lambda: ad.tsum(
                ad.mul(ad.channel_pool(y, "avg"), ad.channel_pool(y, "max"))
            ),
            [y],
        ),
        1e-4,
    )
    record(
        "global_pool avg/max",
        check_gradients(
            lambda: ad.tsum(ad.mul(ad.global_pool(y, "avg"), ad.global_pool(y, "max"))),
            [y],
        ),
        1e-4,
    )
    z = Tensor(rng.standard_normal((2, 8, 8)), requires_grad=True)
    record(
        "fft2c/ifft2c pair",
        check_gradients(
            lambda: ad.tsum(ad.square(ad.ifft2c_pair(ad.fft2c_pair(ad.square(z))))),
            [z],
        ),
        1e-4,
    )

    model = UnrolledModel(hidden=6, unroll_steps=2, seed=3)
    xin = Tensor(rng.standard_normal((2, 8, 8)) * 0.5, requires_grad=True)
    record(
        "rslam block",
        check_gradients(
            lambda: ad.tsum(ad.square(rslam(xin, model.rslam))),
            model.rslam.parameters() + [xin],
            n_probe=3,
        ),
        1e-4,
    )

    mask = make_mask(8, 8, "1D_RANDOM", 2, center_fraction=0.25, seed=5)
    img = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    b_meas = mask.grid * fft2c(img)
    target = Tensor(np.stack([img.real, img.imag])[None])

    def full_loss():
        pred = model.forward(b_meas, mask)
        diff = ad.sub(pred, target)
        return ad.sqrt(ad.tsum(ad.mul(diff, diff)))

    record(
        "unrolled model end-to-end",
        check_gradients(full_loss, model.parameters(), n_probe=2, step=1e-5),
        1e-3,
    )
    return results


def oracle_suite(verbose=True):
    """Quick oracle agreement checks (conv, CG, softmax, SSIM, AdamW)."""
    from .metrics import MetricConfig, ssim
    from .mri import cg_solve, make_mask
    from .federation import adaptive_weights
    from .optim import AdamW
    from .autodiff import Parameter

    rng = np.random.default_rng(11)
    results = []

    def record(name, err, bound):
        results.append((name, err, bound))
        if verbose:
            status = "ok" if err < bound else "FAIL"
            print(f"  {name:<28s} err {err:9.3e}  (< {bound:g})  {status}")

    x = rng.standard_normal((3, 5, 5))
    k = rng.standard_normal((2, 3, 3, 3))
    fast = ad.conv2d(Tensor(x), Tensor(k)).data
    record("conv2d vs nested loop", rel_error(fast, conv2d_oracle(x, k)), 1e-12)

    mask = make_mask(32, 32, "2D_RANDOM", 4, seed=3)
    rhs = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    got = cg_solve(rhs, mask, lam=0.1, max_iters=50, tol=1e-12).image
    want = tikhonov_oracle(rhs, mask, 0.1)
    record(
        "cg_solve vs diagonal oracle",
        float(np.linalg.norm(got - want) / np.linalg.norm(want)),
        1e-8,
    )

    losses = [1.0, 2.0, 3.0]
    record(
        "adaptive weights vs softmax",
        rel_error(adaptive_weights(losses), softmax_oracle(losses)),
        1e-12,
    )

    cfg = MetricConfig()
    a = rng.random((24, 24))
    bb = rng.random((24, 24))
    record("ssim vs windowed oracle", abs(ssim(a, bb, cfg) - ssim_oracle(a, bb, cfg)), 1e-10)

    p = Parameter(np.array(0.5), "theta")
    opt = AdamW(lr=0.1, weight_decay=0.01)
    opt.step([p], {p: np.array(0.3)})
    want = adamw_oracle(0.5, 0.3, 0.1, (0.9, 0.999), 1e-8, 0.01)
    record("adamw vs hand-computed", abs(float(p.data) - want), 1e-12)
    return results
