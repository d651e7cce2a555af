"""Central finite-difference check of autograd gradients, one scalar parameter at a time."""
from __future__ import annotations

from dataclasses import dataclass

import torch

# gradients smaller than this are compared on an absolute scale
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    checked: int
    max_rel_error: float
    worst: str

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def check_gradients(loss_fn, module: torch.nn.Module, step: float = 1e-5) -> GradCheckResult:
    """Compare d loss_fn() / d theta from autograd against (f(theta+h) - f(theta-h)) / 2h for every scalar theta.

    ``loss_fn`` must be deterministic (any noise held fixed) and return a
    scalar tensor.
    """
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    named = [(n, p) for n, p in module.named_parameters()]
    analytic = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in named}

    worst, worst_name, count = 0.0, "", 0
    with torch.no_grad():
        for name, p in named:
            flat = p.view(-1)
            g = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = loss_fn().item()
                flat[i] = orig - step
                f_minus = loss_fn().item()
                flat[i] = orig
                err = relative_error(g[i].item(), (f_plus - f_minus) / (2 * step))
                count += 1
                if err > worst:
                    worst, worst_name = err, f"{name}[{i}]"
    return GradCheckResult(count, worst, worst_name)
