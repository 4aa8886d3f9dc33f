import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def central_fd_check(loss_fn, tensors, points=20, eps=1e-6, rtol=1e-4, seed=0, atol=1e-10):
    """Compare autograd gradients of a scalar ``loss_fn()`` with central differences.

    ``tensors`` are float64 leaves with requires_grad. Checks ``points`` random entries spread over
    the tensors and returns the worst relative error.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        i = int(rng.integers(len(tensors)))
        t, g = tensors[i], grads[i]
        j = int(rng.integers(t.numel()))
        flat = t.data.view(-1)
        orig = flat[j].item()
        flat[j] = orig + eps
        up = loss_fn().item()
        flat[j] = orig - eps
        down = loss_fn().item()
        flat[j] = orig
        fd = (up - down) / (2 * eps)
        an = g.reshape(-1)[j].item()
        err = abs(fd - an) / max(abs(fd), abs(an), atol)
        if abs(fd - an) > atol:
            worst = max(worst, err)
    assert worst < rtol, f"worst relative gradient error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
