import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowmix.autodiff import backward, reset_tape

settings.register_profile(
    "flowmix", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("flowmix")

ACCEPTANCE = {}


def record(key, title, passed, detail=""):
    ACCEPTANCE[key] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        title, ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:>3} {'PASS' if ok else 'FAIL'}  {title}  {detail}")


def numeric_grad(f, arr, h=1e-5, index=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def fd_noise(value, h):
    """Round-off bound of a central difference of a loss of size ``value``."""
    return 8 * np.finfo(float).eps * max(abs(value), 1.0) / h


def max_rel_err(analytic, numeric, noise=0.0):
    """``max |a - n| / (|a| + 1e-8)`` over the checked entries.

    ``noise`` (the finite-difference round-off bound) is forgiven first, so
    structurally zero gradients such as biases ahead of batchnorm compare
    against the numerical noise floor instead of failing on one ulp.
    """
    a = analytic.reshape(-1)
    return max(max(abs(a[i] - n) - noise, 0.0) / (abs(a[i]) + 1e-8) for i, n in numeric.items())


def grad_check(loss_fn, params, h=1e-5, max_entries=None, rng=None):
    """Largest relative error between backward() and central differences.

    ``loss_fn`` builds the loss Tensor from scratch.  With ``max_entries`` a
    random subset of each parameter's entries is checked.
    """
    loss = loss_fn()
    noise = fd_noise(loss.item(), h)
    for p in params:
        p.grad = None
    backward(loss)
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def value():
        v = loss_fn().item()
        reset_tape()
        return v

    worst = 0.0
    for p, g in zip(params, grads):
        index = None
        if max_entries is not None and p.data.size > max_entries:
            index = (rng or np.random.default_rng(0)).choice(p.data.size, max_entries,
                                                            replace=False)
        num = numeric_grad(value, p.data, h, index)
        worst = max(worst, max_rel_err(g, num, noise))
    return worst


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_vae():
    """A short two-squares autoencoder run shared by the inference tests."""
    from flowmix.training import load_dataset, preset_config, train

    cfg = preset_config("two_squares_vae", epochs=40, warmup_epochs=15, lr_decay_epochs=[30])
    data = load_dataset(cfg)
    model, log = train(cfg, data)
    return model, log, data
