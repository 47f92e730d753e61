"""Finite-difference gradient suite over every differentiable operation.

Each entry draws several random instances and compares reverse-mode
gradients with central differences.  Inputs are drawn away from the
non-differentiable points of relu, max-pool ties and bilinear pixel
boundaries, where a central difference is not a valid oracle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import GradcheckReport, Tensor, conv2d, dense, finite_diff_gradcheck, maxpool2d, no_grad, record_branches, relu, softmax
from .losses import cross_entropy, localization_loss, one_hot
from .networks import (
    COMPACT,
    InceptionSpec,
    build_classifier,
    build_localizer,
    inception_block,
    inception_params,
    localizer_forward,
    stn_forward,
)
from .stn import CropGeometry, affine_grid, bilinear_sample, extract_scales, make_ground_truth_theta, rotation_theta, spatial_transform

EPS = 1e-5
TOL = 1e-4
INSTANCES = 5


@dataclass
class OpResult:
    name: str
    reports: List[GradcheckReport]
    seconds: float

    @property
    def passed(self) -> bool:
        return len(self.reports) >= INSTANCES and all(r.passed for r in self.reports)

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.reports)

    @property
    def checked(self) -> int:
        return sum(r.checked for r in self.reports)

    @property
    def rejected(self) -> int:
        return sum(r.rejected for r in self.reports)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.uniform(-1.0, 1.0, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def _distinct(rng, shape):
    """Values in ``[-0.5, 0.5)`` at least ``1 / (2 n)`` apart, so max-pool has no near ties."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) + rng.uniform(0, 0.5, size=n)) / n - 0.5).reshape(shape)


def _projection(rng, shape):
    # A random linear read-out turns any output into a scalar with non-trivial gradients.
    return rng.standard_normal(shape)


def _off_pixel_grid(rng, h_out, w_out, h_in, w_in, margin=1e-3, tries=200):
    """Random affine grid whose sample points avoid pixel-centre lines by ``margin`` pixels."""
    for _ in range(tries):
        theta = rotation_theta(rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 1.1), *rng.uniform(-0.3, 0.3, size=2))
        theta = theta + rng.uniform(-0.05, 0.05, size=(2, 3))
        grid = affine_grid(theta, h_out, w_out).values
        px = (grid[..., 0] + 1) * w_in / 2 - 0.5
        py = (grid[..., 1] + 1) * h_in / 2 - 0.5
        pos = np.concatenate([px.ravel(), py.ravel()])
        if np.abs(pos - np.round(pos)).min() > margin:
            return theta, grid
    raise RuntimeError("could not draw an off-grid instance")


def check_conv2d(rng) -> GradcheckReport:
    c_in, c_out, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
    h, w = rng.integers(k, k + 4, size=2)
    stride = int(rng.choice([1, 2]))
    padding = str(rng.choice(["same", "valid"]))
    x = rng.standard_normal((2, c_in, h, w))
    kern = rng.standard_normal((c_out, c_in, k, k))
    bias = rng.standard_normal(c_out)
    shape = conv2d(Tensor(x), Tensor(kern), Tensor(bias), padding=padding, stride=stride).shape
    proj = _projection(rng, shape)
    return finite_diff_gradcheck(
        lambda a, b, c: (conv2d(a, b, c, padding=padding, stride=stride) * proj).sum(),
        [x, kern, bias], EPS, TOL,
    )


def check_maxpool2d(rng) -> GradcheckReport:
    window, stride, padding = [(2, 2, "valid"), (3, 1, "same"), (2, 2, "valid")][int(rng.integers(3))]
    h, w = 2 * rng.integers(2, 5, size=2)
    x = _distinct(rng, (2, h, w))
    proj = _projection(rng, maxpool2d(Tensor(x), window, stride, padding).shape)
    return finite_diff_gradcheck(lambda a: (maxpool2d(a, window, stride, padding) * proj).sum(), [x], EPS, TOL)


def check_dense(rng) -> GradcheckReport:
    n, m = rng.integers(2, 8, size=2)
    x, wt, b = rng.standard_normal((3, n)), rng.standard_normal((m, n)), rng.standard_normal(m)
    proj = _projection(rng, (3, m))
    return finite_diff_gradcheck(lambda a, b_, c: (dense(a, b_, c) * proj).sum(), [x, wt, b], EPS, TOL)


def check_relu(rng) -> GradcheckReport:
    x = _away_from_zero(rng, (4, 6))
    proj = _projection(rng, x.shape)
    return finite_diff_gradcheck(lambda a: (relu(a) * proj).sum(), [x], EPS, TOL)


def check_softmax(rng) -> GradcheckReport:
    x = 3 * rng.standard_normal((4, 5))
    proj = _projection(rng, x.shape)
    return finite_diff_gradcheck(lambda a: (softmax(a) * proj).sum(), [x], EPS, TOL)


def check_bilinear(rng) -> GradcheckReport:
    h, w = rng.integers(5, 9, size=2)
    ho, wo = rng.integers(3, 6, size=2)
    theta, grid = _off_pixel_grid(rng, ho, wo, h, w)
    img = rng.uniform(0, 1, size=(2, h, w))
    proj = _projection(rng, (2, ho, wo))
    return finite_diff_gradcheck(lambda a, g: (bilinear_sample(a, g) * proj).sum(), [img, grid], EPS, TOL)


def check_bilinear_theta(rng) -> GradcheckReport:
    h, w = rng.integers(6, 10, size=2)
    ho, wo = rng.integers(3, 6, size=2)
    theta, _ = _off_pixel_grid(rng, ho, wo, h, w, margin=1e-2)
    img = rng.uniform(0, 1, size=(2, h, w))
    proj = _projection(rng, (2, ho, wo))
    return finite_diff_gradcheck(
        lambda a, t: (spatial_transform(a, t, int(ho), int(wo)) * proj).sum(), [img, theta], EPS, TOL
    )


def check_extract_scales(rng) -> GradcheckReport:
    theta = rotation_theta(rng.uniform(0, 2 * np.pi), rng.uniform(0.3, 1.5)) + rng.uniform(-0.2, 0.2, size=(2, 3))
    a, b = rng.standard_normal(2)

    def f(t):
        s_x, s_y = extract_scales(t)
        return s_x * a + s_y * b

    return finite_diff_gradcheck(f, [theta], EPS, TOL)


def check_localization_loss(rng) -> GradcheckReport:
    geom = CropGeometry()
    gt = np.stack([make_ground_truth_theta(geom, *rng.integers(-32, 33, size=2)) for _ in range(3)])
    hat = gt + rng.uniform(-0.3, 0.3, size=gt.shape)
    return finite_diff_gradcheck(lambda t: localization_loss(t, gt), [hat], EPS, TOL)


def check_cross_entropy(rng) -> GradcheckReport:
    logits = 2 * rng.standard_normal((4, 3))
    target = one_hot(rng.integers(0, 3, size=4))
    return finite_diff_gradcheck(lambda z: cross_entropy(softmax(z), target), [logits], EPS, TOL)


def check_inception(rng) -> GradcheckReport:
    spec = InceptionSpec(int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    c_in = int(rng.integers(1, 3))
    params = inception_params(rng, c_in, spec)
    for t in params.values():
        t.values += rng.uniform(-0.1, 0.1, size=t.shape)
    names = sorted(params)
    x = _distinct(rng, (c_in, 6, 6))
    proj = _projection(rng, (spec.out_channels, 6, 6))

    def f(inp, *weights):
        return (inception_block(inp, spec, dict(zip(names, weights))) * proj).sum()

    return finite_diff_gradcheck(f, [x] + [params[n].values for n in names], EPS, TOL)


def _branch_stable(f, arrays, k, idx, eps, base) -> bool:
    """True if stepping element ``idx`` of input ``k`` by +-eps keeps every branch of ``base``."""
    for delta in (eps, -eps):
        moved = [a.copy() for a in arrays]
        moved[k].reshape(-1)[idx] += delta
        with no_grad(), record_branches() as log:
            f(*[Tensor(a) for a in moved])
        if log != base:
            return False
    return True


def check_stn_forward(rng, per_tensor: int = 3, max_tries: int = 12) -> GradcheckReport:
    """Spot checks through the complete localizer -> sampler -> classifier chain.

    A step in theta moves every pixel of the focus crop, so even a 1e-5
    step can flip a few of the classifier's relu or max-pool branches.
    Central differences are only a gradient oracle on a single smooth piece,
    so candidate elements whose +-eps evaluations change any branch are
    passed over (and counted in ``rejected``).
    """
    geom = CropGeometry()
    seed = int(rng.integers(2**31))
    params = build_localizer(geom, seed, COMPACT.localizer).merge(build_classifier(geom, seed + 1, COMPACT.classifier))
    # Smooth image-like patches keep the number of branch flips per step low.
    noise = rng.uniform(0, 1, size=(2, 3, geom.d_i, geom.d_i))
    patches = np.clip(0.5 + 4.0 * (gaussian_filter(noise, sigma=(0, 0, 3, 3)) - 0.5), 0, 1)
    # At scale 0.5 the sample points fall on pixel centres, where bilinear
    # interpolation has kinks.  Shift the head bias by half a pixel and give
    # it random weights scaled so theta moves by at most 1e-3; every sample
    # point then stays more than 0.3 px from a kink.
    head = params["localizer"]
    head["fc2.b"].values[[2, 5]] += 1.0 / geom.d_i
    head["fc2.w"].values[:] = rng.uniform(-1, 1, size=head["fc2.w"].shape)
    with no_grad():
        spread = np.abs(localizer_forward(params, patches).values.reshape(2, 6) - head["fc2.b"].values).max()
    head["fc2.w"].values *= 1e-3 / spread
    target = one_hot(rng.integers(0, 3, size=2))
    gt = np.stack([make_ground_truth_theta(geom, *rng.integers(-32, 33, size=2)) for _ in range(2)])
    keys = [(g, n) for g in ("localizer", "classifier") for n in sorted(params[g])]
    chosen = [keys[i] for i in sorted(rng.choice(len(keys), size=6, replace=False))]
    arrays = [params[g][n].values.copy() for g, n in chosen]

    def f(*weights):
        for (g, n), wt in zip(chosen, weights):
            params[g][n] = wt
        theta, probs, _ = stn_forward(params, patches, geom)
        return localization_loss(theta, gt) + cross_entropy(probs, target)

    with no_grad(), record_branches() as base:
        f(*[Tensor(a) for a in arrays])
    elements, rejected = [], 0
    for k, a in enumerate(arrays):
        accepted = []
        for idx in rng.permutation(a.size)[:max_tries]:
            if len(accepted) == per_tensor:
                break
            if _branch_stable(f, arrays, k, int(idx), EPS, base):
                accepted.append(int(idx))
            else:
                rejected += 1
        elements.append(accepted)
    report = finite_diff_gradcheck(f, arrays, EPS, TOL, elements=elements)
    report.rejected = rejected
    return report


CHECKS: Dict[str, Callable[[np.random.Generator], GradcheckReport]] = {
    "conv2d": check_conv2d,
    "maxpool2d": check_maxpool2d,
    "dense": check_dense,
    "relu": check_relu,
    "softmax": check_softmax,
    "bilinear_sample": check_bilinear,
    "bilinear_sample (theta path)": check_bilinear_theta,
    "extract_scales": check_extract_scales,
    "localization_loss": check_localization_loss,
    "cross_entropy": check_cross_entropy,
    "inception_block": check_inception,
    "stn_forward (spot checks)": check_stn_forward,
}


def run_suite(seed: int = 0, instances: int = INSTANCES, only=None) -> List[OpResult]:
    streams = np.random.SeedSequence(seed).spawn(len(CHECKS))
    results = []
    for (name, check), stream in zip(CHECKS.items(), streams):
        if only is not None and name not in only:
            continue
        rng = np.random.default_rng(stream)
        start = time.perf_counter()
        reports = [check(rng) for _ in range(instances)]
        results.append(OpResult(name, reports, time.perf_counter() - start))
    return results


def format_results(results: List[OpResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{status} {r.name:<30} instances={len(r.reports)} checked={r.checked:<5} "
            f"max_rel_err={r.max_rel_error:.2e} ({r.seconds:.1f}s)"
            + (f" skipped={r.rejected} (branch change within eps)" if r.rejected else "")
        )
    return "\n".join(lines)
