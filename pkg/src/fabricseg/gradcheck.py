"""Central-difference gradient verification.

The AD side runs the production float32 path; the finite-difference side
replays the same forward at float64 (perturbations are applied in float32 and
the actually-realised step is measured), which keeps the oracle noise below
the stated tolerances.  Relative error is max |g_ad - g_fd| / (|g_ad| +
|g_fd| + 1e-8) over the sampled coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import GradTape, Tensor5, mul, tsum

REL_EPS = 1e-8


@dataclass
class GradCheckReport:
    label: str
    max_rel_err: float
    n_coords: int
    worst_coord: Optional[tuple] = None
    worst_ad: float = 0.0
    worst_fd: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def line(self, tol: float) -> str:
        status = "PASS" if self.passed(tol) else "FAIL"
        return (f"{status}  {self.label}: max rel err {self.max_rel_err:.3e} "
                f"(tol {tol:.0e}, {self.n_coords} coords)")


def away_from_kinks(x: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Push values with |x| < margin out to +/-margin (ReLU-kink avoidance)."""
    y = x.copy()
    small = np.abs(y) < margin
    y[small] = np.where(y[small] >= 0, margin, -margin)
    return y


def _projection(shape, rng: np.random.Generator) -> np.ndarray:
    # continuous zero-mean weights: a +/-1 projection can null out gradients
    # exactly (e.g. equal signs across softmax channels), and a nonzero-mean
    # one amplifies common-mode f32 rounding in slice-reduction gradients
    return rng.normal(0.0, 1.0, size=shape).astype(np.float32)


def _scalarize(y: Tensor5, r: np.ndarray) -> Tensor5:
    return tsum(mul(y, Tensor5(r.astype(y.data.dtype), dtype=y.data.dtype)))


def _sample_coords(shape, max_coords: int, rng: np.random.Generator):
    size = int(np.prod(shape))
    if size <= max_coords:
        flat = np.arange(size)
    else:
        flat = rng.choice(size, size=max_coords, replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def gradcheck(f: Callable[[Tensor5], Tensor5], x: Tensor5, h: float = 1e-3,
              tol: float = 1e-4, max_coords: int = 200, min_grad: float = 0.0,
              rng: Optional[np.random.Generator] = None,
              label: str = "fn") -> GradCheckReport:
    """Compare f's tape gradient against central differences at sampled coordinates.

    f must be deterministic (reseed any internal randomness per call) and
    accept both float32 and float64 tensors.  min_grad excludes coordinates
    whose gradient magnitude sits at the f32 noise floor (falls back to all
    coordinates when none qualify).
    """
    rng = rng or np.random.default_rng(0)
    x32 = np.asarray(x.data, dtype=np.float32)

    xt = Tensor5(x32.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(xt)
        r = _projection(y.shape, rng)
        loss = _scalarize(y, r)
    tape.backward(loss)
    if xt.grad is None:
        raise ValueError(f"{label}: no gradient reached the input")
    g_ad = xt.grad

    def loss64(arr32: np.ndarray) -> float:
        out = f(Tensor5(arr32.astype(np.float64), dtype=np.float64))
        return float(_scalarize(out, r).item())

    if min_grad > 0.0 and np.any(np.abs(g_ad) >= min_grad):
        flat = np.flatnonzero(np.abs(g_ad) >= min_grad)
        if flat.size > max_coords:
            flat = rng.choice(flat, size=max_coords, replace=False)
        coords = [np.unravel_index(int(i), x32.shape) for i in flat]
    else:
        coords = _sample_coords(x32.shape, max_coords, rng)
    report = GradCheckReport(label, 0.0, len(coords))
    for c in coords:
        step = h * max(1.0, abs(float(x32[c])))
        xp = x32.copy()
        xm = x32.copy()
        xp[c] = np.float32(x32[c] + step)
        xm[c] = np.float32(x32[c] - step)
        h_act = (float(xp[c]) - float(xm[c])) / 2.0
        g_fd = (loss64(xp) - loss64(xm)) / (2.0 * h_act)
        ad = float(g_ad[c])
        rel = abs(ad - g_fd) / (abs(ad) + abs(g_fd) + REL_EPS)
        if rel > report.max_rel_err:
            report.max_rel_err = rel
            report.worst_coord = c
            report.worst_ad = ad
            report.worst_fd = g_fd
    return report


def gradcheck_parameters(forward_loss: Callable[[], Tensor5], params,
                         coords_per_param: int = 8, total_coords: int = 200,
                         h: float = 1e-3, min_grad: float = 0.0,
                         rng: Optional[np.random.Generator] = None,
                         label: str = "network") -> GradCheckReport:
    """Gradcheck a loss over named parameters, perturbing each in place.

    forward_loss() must rebuild the loss from current parameter values and be
    deterministic; it is called once under a tape (f32) and twice per sampled
    coordinate at float64 for the central difference.  Coordinates whose AD
    gradient magnitude is below min_grad are not sampled: at the f32 noise
    floor a relative comparison carries no information (deep compositions have
    architecturally near-dead coordinates, e.g. biases feeding a normalisation).
    """
    rng = rng or np.random.default_rng(0)

    for p in params:
        p.value.zero_grad()
    with GradTape() as tape:
        loss = forward_loss()
    tape.backward(loss)

    report = GradCheckReport(label, 0.0, 0)
    budget = total_coords
    for p in params:
        if budget <= 0:
            break
        if p.value.grad is None:
            raise ValueError(f"{label}: parameter {p.name} received no gradient")
        arr = p.value.data
        n = min(coords_per_param, budget)
        if min_grad > 0.0:
            flat = np.flatnonzero(np.abs(p.value.grad) >= min_grad)
            if flat.size == 0:
                continue
            if flat.size > n:
                flat = rng.choice(flat, size=n, replace=False)
            coords = [np.unravel_index(int(i), arr.shape) for i in flat]
        else:
            coords = _sample_coords(arr.shape, n, rng)
        for c in coords:
            base = float(arr[c])
            step = h * max(1.0, abs(base))
            vp = np.float32(base + step)
            vm = np.float32(base - step)
            h_act = (float(vp) - float(vm)) / 2.0
            try:
                arr[c] = vp
                lp = float(forward_loss(dtype=np.float64).item())
                arr[c] = vm
                lm = float(forward_loss(dtype=np.float64).item())
            finally:
                arr[c] = np.float32(base)
            g_fd = (lp - lm) / (2.0 * h_act)
            ad = float(p.value.grad[c])
            rel = abs(ad - g_fd) / (abs(ad) + abs(g_fd) + REL_EPS)
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_coord = (p.name,) + c
                report.worst_ad = ad
                report.worst_fd = g_fd
            report.n_coords += 1
        budget -= n
    return report
