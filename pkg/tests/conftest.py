import numpy as np
import pytest

from moe_lab import autodiff as ad
from moe_lab.data import normalize, split, synth_clusters
from moe_lab.model import ModelConfig, build

ACCEPTANCE_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, name): numbered acceptance criterion")


def fd_grad(fn, theta, eps=1e-5):
    """Central finite differences of a scalar ``fn(ndarray) -> float``."""
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (fn(theta + e) - fn(theta - e)) / (2 * eps)
    return g


def loss_value(loss_fn, theta):
    with ad.no_grad():
        return loss_fn(ad.Tensor(theta)).item()


def grad_of(loss_fn, theta):
    return ad.value_and_grad(loss_fn, theta)[1]


def fd_hvp(loss_fn, theta, v, eps=1e-5, min_eps=1e-8, agree=1e-6):
    """Central difference of gradients along ``v``.

    The step is halved until two successive estimates agree; a step that
    straddles a relu kink makes the difference quotient jump, and the
    shrinking step walks back inside the smooth piece around ``theta``.
    """
    def quotient(h):
        return (grad_of(loss_fn, theta + h * v) - grad_of(loss_fn, theta - h * v)) / (2 * h)

    prev = quotient(eps)
    while eps > min_eps:
        eps /= 2
        cur = quotient(eps)
        if rel_err(prev, cur) < agree:
            return cur
        prev = cur
    return prev


def fd_hessian(loss_fn, theta, eps=1e-6):
    """Dense Hessian from central differences of reverse-mode gradients, symmetrised."""
    n = theta.size
    h = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        h[:, j] = (grad_of(loss_fn, theta + e) - grad_of(loss_fn, theta - e)) / (2 * eps)
    return 0.5 * (h + h.T), h


def rel_err(a, b):
    """Max absolute deviation relative to the largest reference entry."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def tiny_config(head="dense", seed=0, **kw):
    base = dict(input_dim=4, backbone_hidden=(5,), feature_dim=5, head=head, num_experts=3,
                expert_hidden=3, k=1 if head == "hard" else 2, dense_hidden=6, num_classes=3,
                kl_weight=0.1, importance_weight=0.1, load_weight=0.1, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def synth_splits():
    ds = synth_clusters(0, classes=4, clusters_per_class=2, dim=16, n_per_class=200, spread=0.8)
    return normalize(*split(ds, (0.7, 0.15, 0.15), 0))


@pytest.fixture
def tiny_sparse():
    return build(tiny_config("sparse"))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, name = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else rep.longrepr)
        detail = (detail + "; " if detail else "") + msg.splitlines()[0][:160]
    ACCEPTANCE_RESULTS[number] = (name, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key:2d}. {name}  [{detail}]")
