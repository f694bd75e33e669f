"""Finite-difference verification of analytic gradients.

Central differences need the forward pass to be far more precise than the
perturbation, so the checker promotes the model to float64 for the duration
of the check and restores the original dtype afterwards. Float32 forward
noise (~1e-7 relative) amplified by the 1/(2*delta) cancellation would
otherwise swamp the 1e-3 tolerance this checker enforces.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, no_grad


def gradcheck(
    f,
    params: list[Parameter],
    delta: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng=None,
    promote: list[Parameter] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic closure over `params` returning a scalar
    Tensor (run dropout in eval mode). Frozen parameters are skipped after
    asserting their analytic gradient is identically zero. When
    `max_coords_per_param` is set, that many coordinates are sampled per
    parameter (deterministically from `rng`) instead of sweeping all of them.
    `promote` lists additional parameters on the forward path that should be
    upcast to float64 for precision without being checked themselves.

    The error at each coordinate is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-4); the absolute floor keeps near-zero-gradient coordinates
    from dividing rounding noise by itself.
    """
    touched: list[Parameter] = []
    seen: set[int] = set()
    for p in list(params) + list(promote or []):
        if id(p) not in seen:
            seen.add(id(p))
            touched.append(p)
    saved_dtypes = [p.data.dtype for p in touched]
    for p in touched:
        p.astype_(np.float64)
    try:
        for p in touched:
            p.zero_grad()
        out = f()
        if not np.isfinite(out.data).all():
            raise ValueError("gradcheck: function returned a non-finite value")
        out.backward()
        analytic = [p.grad.copy() for p in params]

        worst = 0.0
        for p, a in zip(params, analytic):
            if not p.trainable:
                if np.any(a != 0.0):
                    raise AssertionError("frozen parameter accumulated gradient")
                continue
            coords = np.arange(p.data.size)
            if max_coords_per_param is not None and p.data.size > max_coords_per_param:
                if rng is None:
                    raise ValueError("coordinate sampling needs an RngStream")
                coords = rng.permutation(p.data.size)[:max_coords_per_param]
            flat = p.data.reshape(-1)
            with no_grad():
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + delta
                    f_plus = float(f().data)
                    flat[i] = orig - delta
                    f_minus = float(f().data)
                    flat[i] = orig
                    numeric = (f_plus - f_minus) / (2.0 * delta)
                    an = float(a.reshape(-1)[i])
                    err = abs(an - numeric) / max(abs(an), abs(numeric), 1e-4)
                    worst = max(worst, err)
        return worst
    finally:
        for p, dt in zip(touched, saved_dtypes):
            p.astype_(dt)
