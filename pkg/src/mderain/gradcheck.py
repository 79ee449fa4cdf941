"""Central finite-difference verification of reverse-mode gradients."""

from dataclasses import dataclass, field

import numpy as np

from mderain import tensor as T


@dataclass
class GradCheckReport:
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error <= self.tol

    def worst(self):
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_error:.3e} (tol {self.tol:g}, worst {self.worst()})"


def grad_check(fn, inputs, tol=1e-4, h=1e-6, max_entries=8, directions=1, seed=0):
    """Compare analytic gradients of ``fn()`` against central differences.

    ``inputs`` maps names to tensors with ``requires_grad`` set (Params or
    leaf inputs); they must hold float64 data. For each input, up to
    ``max_entries`` coordinates (the largest-gradient ones first, then random)
    and ``directions`` random directions are probed. The error for a
    coordinate is ``|a - n| / scale`` with ``scale`` the largest analytic or
    numeric magnitude seen for that input; for a direction ``r`` it is
    ``|a.r - n| / (|a| |r|)``. Magnitudes are floored at ``1e-6 * max(1, |loss|)``.

    The step ``h`` is small because a bias moves every pre-activation of its
    channel: with ``h=1e-5`` some of them straddle a LeakyReLU kink in the
    full model, which corrupts the difference quotient, not the gradient.
    """
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs, {name} is {t.dtype}")
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    loss = fn()
    # floor for gradient magnitudes: below it central differences are round-off noise
    floor = 1e-6 * max(1.0, abs(float(loss.data)))
    T.backward(loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for name, t in inputs.items()}

    def evaluate():
        with T.no_grad():
            return float(fn().data)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol)
    for name, t in inputs.items():
        a = analytic[name]
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        n = flat.size
        k = min(max_entries, n)
        top = np.argsort(-np.abs(a_flat), kind="stable")[: max(1, k // 2)]
        rest = np.setdiff1d(np.arange(n), top)
        extra = rng.choice(rest, size=min(k - top.size, rest.size), replace=False) if rest.size else []
        idx = np.concatenate([top, np.asarray(extra, dtype=int)])

        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = evaluate()
            flat[i] = old - h
            fm = evaluate()
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * h)
        scale = max(np.abs(a_flat).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        err = float(np.abs(a_flat[idx] - numeric).max(initial=0.0) / scale)

        base = t.data.copy()
        anorm = np.linalg.norm(a_flat)
        for _ in range(directions):
            r = rng.standard_normal(t.shape)
            r /= np.linalg.norm(r)
            t.data[...] = base + h * r
            fp = evaluate()
            t.data[...] = base - h * r
            fm = evaluate()
            t.data[...] = base
            fd = (fp - fm) / (2 * h)
            err = max(err, abs(float((a * r).sum()) - fd) / max(anorm, floor))
        report.errors[name] = err
    return report
