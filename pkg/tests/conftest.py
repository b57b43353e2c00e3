import pytest
import torch

from dreamer_cdp.config import Config


def tiny_config(**overrides) -> Config:
    values = dict(
        image_size=16,
        cnn_stages=2,
        cnn_depth=4,
        embed=128,
        deter=32,
        hidden=32,
        cdp_hidden=32,
        groups=2,
        classes=3,
        actor_hidden=32,
        batch=3,
        seq_len=6,
        time_limit=20,
        prefill=0,
        imag_starts=0,
        horizon=4,
        eval_episodes=2,
        checkpoint_every=0,
        replay_capacity=5000,
    )
    values.update(overrides)
    return Config(**values)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def central_diff(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar f at x (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max() / max(a.abs().max(), b.abs().max(), 1e-12))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
