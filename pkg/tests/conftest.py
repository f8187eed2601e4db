import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from platescan.annotations import EndpointAnnotation
from platescan.metrics import ImageResult

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


def random_annotation(rng, width=None, height=None, stack_axis=None, image_id="img",
                      min_gap=3.0, n_range=(1, 6)):
    """A valid annotation with random sorted endpoints of both polarities."""
    width = width or int(rng.integers(16, 80))
    height = height or int(rng.integers(16, 80))
    stack_axis = stack_axis or ("x" if rng.random() < 0.5 else "y")
    k = 0 if stack_axis == "x" else 1
    size = (width, height)

    def pts():
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        for _ in range(100):
            stack = np.sort(rng.uniform(0, size[k] - 1, n))
            if n == 1 or np.diff(stack).min() >= min_gap:
                break
        else:
            stack = np.linspace(0, size[k] - 1, n)
        other = rng.uniform(0, size[1 - k] - 1, n)
        out = []
        for s, o in zip(stack, other):
            p = [0.0, 0.0]
            p[k], p[1 - k] = float(s), float(o)
            out.append(tuple(p))
        return tuple(out)

    return EndpointAnnotation(image_id, width, height, pts(), pts(), stack_axis=stack_axis).validate()


def stack_ann(anodes, cathodes, w=100, h=100, axis="x", image_id="s"):
    return EndpointAnnotation(image_id, w, h, anodes, cathodes, stack_axis=axis).validate()


def jitter(pts, rng, s=1.5):
    return [(x + rng.normal(0, s), y + rng.normal(0, s)) for x, y in pts]


def alternating_stack(rng, axis="x", image_id="s"):
    """n+1 anodes and n cathodes interleaved along the stack axis, in a 100x100 frame."""
    n = int(rng.integers(1, 6))
    k = 0 if axis == "x" else 1
    stack = np.sort(rng.choice(np.arange(5, 95, 4), 2 * n + 1, replace=False)).astype(float)
    other = rng.uniform(10, 90, 2 * n + 1)

    def pt(s, o):
        p = [0.0, 0.0]
        p[k], p[1 - k] = s, o
        return tuple(p)

    an = [pt(stack[i], other[i]) for i in range(0, 2 * n + 1, 2)]
    ca = [pt(stack[i], other[i]) for i in range(1, 2 * n + 1, 2)]
    return stack_ann(an, ca, axis=axis, image_id=image_id)


def random_results(rng, n_images=10, p_wrong=0.3):
    out = []
    for i in range(n_images):
        gt = alternating_stack(rng, axis="x" if rng.random() < 0.5 else "y", image_id=f"i{i}")
        k = 0 if gt.stack_axis == "x" else 1
        an, ca = jitter(gt.anode_points, rng), jitter(gt.cathode_points, rng)
        if rng.random() < p_wrong:
            an = an[:-1]
        if rng.random() < p_wrong:
            ca = ca + [(99.0, 99.0)]
        sort = lambda pts: sorted(pts, key=lambda p: (p[k], p[1 - k]))
        out.append(ImageResult(sort(an), sort(ca), gt))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Remember and print one pass/fail line for an acceptance criterion."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
