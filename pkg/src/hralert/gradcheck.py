"""Central-difference gradient checking."""

import numpy as np

from . import autodiff as ad


# Central differences carry ~1e-11 round-off per entry, so a gradient that is
# identically zero (e.g. attention key bias) would otherwise score 1.0.
ABS_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    """Norm-wise ``|a - n| / max(|a| + |n|, floor)``."""
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(loss_fn, named_params, step=1e-5, max_elements=None, rng=None):
    """Compare reverse-mode grads of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the graph on each call and be deterministic (reseed
    any dropout rng inside it).  With ``max_elements`` only a random subset of
    each parameter's entries is perturbed.  Returns ``{name: relative error}``.
    """
    params = [p for _, p in named_params]
    for p in params:
        p.zero_grad()
    ad.backward(loss_fn())
    errors = {}
    for name, p in named_params:
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            original = flat[i]
            flat[i] = original + step
            up = float(loss_fn().values)
            flat[i] = original - step
            down = float(loss_fn().values)
            flat[i] = original
            numeric[k] = (up - down) / (2.0 * step)
        errors[name] = relative_error(p.grad.reshape(-1)[idx], numeric)
    return errors
