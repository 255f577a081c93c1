import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wblab.dataset import LongTailProfile, assign_groups, synth_gaussian_lt, tertile_thresholds
from wblab.linalg import RngStream
from wblab.trainer import Splits

settings.register_profile("wblab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("wblab")


def small_splits(seed=0, C=4, N1=40, rho=10, p=6, separation=4.0, cov_scale=1.0):
    tr, va, te = synth_gaussian_lt(LongTailProfile(C, N1, rho), p, separation, cov_scale,
                                   RngStream(seed, (7,)), val_per_class=10, test_per_class=20)
    return Splits(tr, va, te)


def groups_for(train):
    return assign_groups(train.class_counts, tertile_thresholds(train.class_counts))


@pytest.fixture
def splits():
    return small_splits()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def objective_and_grads(net, X, y, lam=0.0, zeta=0.0):
    """CE + (lam/2)||theta||^2 + FR in train mode, with analytic gradients."""
    from wblab.losses import ce_loss, fr_penalty, wd_penalty
    from wblab.network import backward, forward

    F, logits, cache = forward(net, X, "train")
    ce, dlogits = ce_loss(logits, y)
    wd, dwd = wd_penalty(net.params(), lam)
    fr, dF = fr_penalty(F, zeta)
    grads = backward(net, cache, dlogits, dF)
    for name, g in dwd.items():
        grads[name] = grads[name] + g
    return ce + wd + fr, grads


def max_gradient_error(net, X, y, lam=0.0, zeta=0.0, h=1e-5):
    """Largest per-tensor ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, 1e-6).

    The floor matters for linear biases feeding batch norm, whose true gradient is exactly zero.
    """
    from wblab.linalg import finite_diff_grad

    _, grads = objective_and_grads(net, X, y, lam, zeta)
    worst = 0.0
    for slot in list(net.param_slots()):
        orig = slot.value.copy()

        def f(m, slot=slot):
            setattr(slot.owner, slot.attr, m)
            return objective_and_grads(net, X, y, lam, zeta)[0]

        num = finite_diff_grad(f, orig, h)
        setattr(slot.owner, slot.attr, orig)
        a = grads[slot.name]
        scale = max(np.max(np.abs(a)), np.max(np.abs(num)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - num)) / scale))
    return worst


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
