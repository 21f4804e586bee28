"""Shared test utilities: numeric gradient checking against the tape."""

import numpy as np

from wedgenet.autodiff import Tensor


def check_gradients(build, arrays, step=1e-5, rtol=1e-4, atol=1e-8):
    """Compare analytic gradients with central finite differences.

    ``build`` maps a list of Tensors (one per array in ``arrays``) to a
    scalar Tensor. All arrays are promoted to float64 before the check.
    Returns the analytic gradients for further inspection.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    for which, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            plus = build([Tensor(a.copy()) for a in arrays]).item()
            flat[j] = keep - step
            minus = build([Tensor(a.copy()) for a in arrays]).item()
            flat[j] = keep
            num_flat[j] = (plus - minus) / (2.0 * step)
        ana = analytic[which]
        err = np.abs(ana - numeric)
        bound = atol + rtol * np.maximum(np.abs(numeric), np.abs(ana))
        assert np.all(err <= bound), (
            f"gradient mismatch for input {which}: "
            f"max err {err.max():.3e}, worst bound {bound[err > bound].min():.3e}"
        )
    return analytic
