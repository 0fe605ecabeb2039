"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic, numeric, atol: float = 1e-9) -> np.ndarray:
    """``|a - n| / max(|a|, |n|)``; differences below ``atol`` count as agreement.

    The absolute cut-off keeps structurally zero gradients (e.g. a bias that
    feeds batch normalization) from reporting finite-difference noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), np.finfo(np.float64).tiny)
    return np.where(diff <= atol, 0.0, diff / scale)


def gradient_check(loss_fn, params, analytic, h: float = 1e-5, max_entries: int | None = None,
                   seed: int = 0, names=None, atol: float = 1e-9) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must recompute the scalar loss from the current contents of
    ``params`` (arrays perturbed in place) and be deterministic, so any
    dropout masks have to be re-seeded inside it. ``analytic`` holds the
    gradients at the unperturbed point. With ``max_entries`` only a random
    subset of each array is probed.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    names = names or [f"p{i}" for i in range(len(params))]
    for name, p, g in zip(names, params, analytic):
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError(f"{name}: parameter array must be contiguous to perturb in place")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            numeric[j] = (up - down) / (2 * h)
        err = float(relative_error(np.asarray(g).reshape(-1)[idx], numeric, atol).max()) if len(idx) else 0.0
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
        report.n_checked += len(idx)
    return report
