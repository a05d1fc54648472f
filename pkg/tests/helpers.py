import numpy as np
import torch


def finite_difference_check(fn, params, eps=1e-6, rtol=1e-4, atol=1e-7, max_entries=40, seed=0):
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    Checks up to ``max_entries`` randomly chosen entries per parameter.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    fn().backward()
    for p in params:
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(max_entries, flat.numel()), replace=False)
        for i in idx:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = fn().item()
                flat[i] = old - eps
                down = fn().item()
                flat[i] = old
            numeric = (up - down) / (2 * eps)
            a = analytic.view(-1)[i].item()
            assert abs(a - numeric) <= atol + rtol * max(abs(a), abs(numeric)), (tuple(p.shape), int(i), a, numeric)
