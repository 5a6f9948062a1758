"""Central finite-difference gradient verification for layers and whole models.

Analytic gradients are compared against (f(x+h) - f(x-h)) / 2h of a scalar
probe loss sum(output * R) with a fixed random projection R.  Checks run the
regular forward/backward code path in float64.
"""

from __future__ import annotations

import numpy as np


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _probe_entries(arr: np.ndarray, rng: np.random.Generator, max_entries: int) -> np.ndarray:
    if arr.size <= max_entries:
        return np.arange(arr.size)
    return rng.choice(arr.size, size=max_entries, replace=False)


def _central_diff(loss_fn, flat: np.ndarray, idx: int, step: float) -> float:
    orig = flat[idx]
    flat[idx] = orig + step
    hi = loss_fn()
    flat[idx] = orig - step
    lo = loss_fn()
    flat[idx] = orig
    return (hi - lo) / (2.0 * step)


def fd_gradient_entries(loss_fn, arr: np.ndarray, entries, h: float = 1e-6,
                        detect_kinks: bool = False):
    """Central differences of loss_fn() with respect to selected flat entries of arr.

    With detect_kinks, each entry is probed at two step sizes; entries where the
    estimates disagree crossed a ReLU/maxpool kink inside the step, so the FD
    value itself is invalid there and the entry is flagged.  Returns the values
    and, when detecting, a validity mask.
    """
    if not arr.flags["C_CONTIGUOUS"]:
        raise ValueError("finite differences need a C-contiguous array")
    out = np.empty(len(entries))
    valid = np.ones(len(entries), dtype=bool)
    flat = arr.reshape(-1)
    for j, idx in enumerate(entries):
        step = h * max(1.0, abs(flat[idx]))
        out[j] = _central_diff(loss_fn, flat, idx, step)
        if detect_kinks:
            check = _central_diff(loss_fn, flat, idx, 2.5 * step)
            if abs(out[j] - check) / max(abs(out[j]), abs(check), 1e-3) > 1e-5:
                valid[j] = False
    if detect_kinks:
        return out, valid
    return out


def check_model_gradients(model, x, rng: np.random.Generator,
                          max_entries_per_tensor: int = 4, h: float = 1e-6) -> float:
    """Max relative error over sampled parameter entries and all input entries.

    `x` is an input array or tuple of arrays (dual models); float64 required.
    """
    inputs = x if isinstance(x, tuple) else (x,)
    for arr in inputs:
        if arr.dtype != np.float64:
            raise ValueError("gradient checks must run in float64")

    out = model.forward(x if isinstance(x, tuple) else inputs[0], training=True)
    proj = rng.standard_normal(out.shape)

    def probe_loss():
        y = model.forward(x if isinstance(x, tuple) else inputs[0], training=True)
        return float(np.sum(y * proj))

    model.zero_grad()
    model.forward(x if isinstance(x, tuple) else inputs[0], training=True)
    grads_in = model.backward(proj.copy())
    grads_in = grads_in if isinstance(grads_in, tuple) else (grads_in,)

    worst = 0.0
    probed = kinked = 0
    for name, p in model.parameters():
        entries = _probe_entries(p.data, rng, max_entries_per_tensor)
        numeric, valid = fd_gradient_entries(probe_loss, p.data, entries, h, detect_kinks=True)
        analytic = p.grad.reshape(-1)[entries]
        probed += len(entries)
        kinked += int((~valid).sum())
        for a, n, v in zip(analytic, numeric, valid):
            if v:
                worst = max(worst, relative_error(float(a), float(n)))
    for arr, g in zip(inputs, grads_in):
        if g is None:
            # first-layer convs skip the unused input gradient in training nets
            continue
        entries = _probe_entries(arr, rng, max_entries_per_tensor * 4)
        numeric, valid = fd_gradient_entries(probe_loss, arr, entries, h, detect_kinks=True)
        analytic = g.reshape(-1)[entries]
        probed += len(entries)
        kinked += int((~valid).sum())
        for a, n, v in zip(analytic, numeric, valid):
            if v:
                worst = max(worst, relative_error(float(a), float(n)))
    if probed and kinked > probed // 2:
        raise RuntimeError(f"{kinked}/{probed} probes crossed activation kinks; "
                           "inputs unsuitable for finite differences")
    return worst


def check_layer_gradients(layer, x: np.ndarray, rng: np.random.Generator,
                          max_entries_per_tensor: int = 16, h: float = 1e-6) -> float:
    """Max relative error for one layer, over its parameters and its input."""
    if x.dtype != np.float64:
        raise ValueError("gradient checks must run in float64")
    out = layer.forward(x, training=True)
    proj = rng.standard_normal(out.shape)

    def probe_loss():
        return float(np.sum(layer.forward(x, training=True) * proj))

    for _, p in layer.parameters():
        p.zero_grad()
    layer.forward(x, training=True)
    grad_in = layer.backward(proj.copy())

    worst = 0.0
    for _, p in layer.parameters():
        entries = _probe_entries(p.data, rng, max_entries_per_tensor)
        numeric = fd_gradient_entries(probe_loss, p.data, entries, h)
        analytic = p.grad.reshape(-1)[entries]
        for a, n in zip(analytic, numeric):
            worst = max(worst, relative_error(float(a), float(n)))
    entries = _probe_entries(x, rng, max_entries_per_tensor * 4)
    numeric = fd_gradient_entries(probe_loss, x, entries, h)
    analytic = grad_in.reshape(-1)[entries]
    for a, n in zip(analytic, numeric):
        worst = max(worst, relative_error(float(a), float(n)))
    return worst
