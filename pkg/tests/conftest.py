import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from ckd_transbts.phantom import PhantomSpec, generate_phantom

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def directional_fd(fn, tensors, seed=0, h=1e-6):
    """Relative error between autograd and a central finite difference.

    ``fn`` maps the float64 ``tensors`` to a scalar. One random direction is
    drawn for all of them jointly; the relative error compares d/dt fn(x + t v)
    from both routes.
    """
    g = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(t.shape, generator=g, dtype=torch.float64) for t in tensors]
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs) if gr is not None)
    with torch.no_grad():
        plus = float(fn(*[t + h * d for t, d in zip(tensors, dirs)]))
        minus = float(fn(*[t - h * d for t, d in zip(tensors, dirs)]))
    numeric = (plus - minus) / (2 * h)
    return abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12)


def params_fd(module, fn, seed=0, h=1e-6):
    """Directional finite-difference check over all parameters of ``module``."""
    params = [p for p in module.parameters() if p.requires_grad]
    g = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
    module.zero_grad()
    fn().backward()
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs) if p.grad is not None)
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(h * d)
        plus = float(fn())
        for p, d in zip(params, dirs):
            p.sub_(2 * h * d)
        minus = float(fn())
        for p, d in zip(params, dirs):
            p.add_(h * d)
    numeric = (plus - minus) / (2 * h)
    return abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12)


def randomize_(module, seed=0, scale=0.3):
    """Fill every parameter with noise so zero-initialised tables/biases are exercised."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(PhantomSpec(dims=(32, 32, 32), radius_range=(5.0, 7.0), seed=3, id="p32"))
