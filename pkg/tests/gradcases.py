"""Finite-difference gradient cases on 16x16 inputs, shared by unit and acceptance tests."""
import numpy as np
import torch

from oracles import central_difference, max_relative_error
from platescan.model import DRSSM, PFSSM, LossWeights, ModelOutput, PromptFilter, structure_loss, total_loss

SIZE = 16


def _check(loss_fn, tensors, params=(), rng=None, max_coords=40):
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.requires_grad_(True)
    params = list(params)
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, list(tensors) + params)
    with torch.no_grad():
        numeric = central_difference(loss_fn, list(tensors) + params, eps=1e-6, max_coords=max_coords, rng=rng)
    return max_relative_error(analytic, numeric)


def _weights(seed, c):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(1, c, SIZE, SIZE, generator=g, dtype=torch.float64)


def prompt_filter_case(seed=0):
    torch.manual_seed(seed)
    m = PromptFilter(4, num_kernels=3).double()
    p, x, w = _weights(seed + 1, 4), _weights(seed + 2, 4), _weights(seed + 3, 4)
    return _check(lambda: (m(p, x) * w).sum(), [p, x], m.parameters())


def pfssm_case(seed=0):
    torch.manual_seed(seed)
    m = PFSSM(4, num_kernels=3, state_dim=3).double()
    p, x, w = _weights(seed + 1, 4), _weights(seed + 2, 4), _weights(seed + 3, 4)
    return _check(lambda: (m(p, x) * w).sum(), [p, x], m.parameters())


def drssm_case(seed=0):
    torch.manual_seed(seed)
    m = DRSSM(4, width=4, state_dim=3).double()
    f_low = torch.randn(1, 4, SIZE // 2, SIZE // 2, dtype=torch.float64)
    coarse = torch.rand(1, 2, SIZE, SIZE, dtype=torch.float64)
    w = _weights(seed + 3, 2)
    return _check(lambda: (m(f_low, coarse) * w).sum(), [f_low, coarse], m.parameters())


def structure_loss_case(seed=0):
    g = torch.Generator().manual_seed(seed)
    pred = torch.randn(2, SIZE, SIZE, generator=g, dtype=torch.float64)
    mask = (torch.rand(2, SIZE, SIZE, generator=g) < 0.3).double()
    return _check(lambda: structure_loss(pred, mask), [pred], max_coords=None)


def total_loss_case(seed=0):
    g = torch.Generator().manual_seed(seed)
    mk = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    coarse, refined, lines = mk(1, 2, SIZE, SIZE), mk(1, 2, SIZE, SIZE), mk(1, 2, SIZE, SIZE)
    counts = torch.rand(1, 2, generator=g, dtype=torch.float64) * 5 + 0.5
    targets = {
        "points": (torch.rand(1, 2, SIZE, SIZE, generator=g) < 0.2).double(),
        "lines": (torch.rand(1, 2, SIZE, SIZE, generator=g) < 0.2).double(),
        "counts": torch.tensor([[3.0, 2.0]], dtype=torch.float64),
    }
    fn = lambda: total_loss(ModelOutput(coarse, refined, lines, counts), targets, LossWeights())[0]
    return _check(fn, [coarse, refined, lines, counts], max_coords=60)


CASES = {
    "prompt_filter": prompt_filter_case,
    "pfssm": pfssm_case,
    "drssm": drssm_case,
    "structure_loss": structure_loss_case,
    "total_loss": total_loss_case,
}
