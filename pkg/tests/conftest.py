import numpy as np
import pytest
import torch

from advgen.data import generate_toy_dataset, split_by_identity
from advgen.models import build

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    manifest = generate_toy_dataset(6, 2, 32, 3, root)
    return manifest, split_by_identity(manifest, (0.5, 0.25, 0.25), 0)


def trained(arch, size=32, **kw):
    """A randomly initialised network flagged as trained (for plumbing tests)."""
    torch.manual_seed(0)
    h = build(arch, size, **kw)
    h.meta["trained"] = True
    return h.freeze()


@pytest.fixture
def images():
    torch.manual_seed(1)
    return torch.rand(2, 3, 32, 32) * 2 - 1


def perturbed(handle, scale=0.05, seed=0):
    """Add noise to every parameter so zero-initialized heads become non-trivial."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in handle.parameters():
            p.add_(torch.randn(p.shape, generator=g) * scale)
    return handle


def idgan_bundle(size=32, scale=0.2, **kw):
    from advgen.idgan import build_idgan

    torch.manual_seed(0)
    b = build_idgan(size, **kw)
    for i, h in enumerate(b.handles().values()):
        perturbed(h, scale, i)
        h.meta["trained"] = True
        h.freeze()
    b.meta["trained"] = True
    return b


def advgen_bundle(size=32, **kw):
    from advgen.adversarial import AdvgenBundle

    torch.manual_seed(0)
    gen = perturbed(build("generator_perturbation", size), 0.3, 1)
    disc = build("patch_discriminator", size)
    dec = perturbed(trained("decomposer", size), 0.02, 2)
    return AdvgenBundle(gen, disc, dec, trained("embedder", size), trained("pad_cnn_small", size),
                        idgan_bundle(size), **kw)


def fd_check(make_loss, x, modules=(), probe=8, h=1e-5, seed=0):
    """Relative error between the float32 autograd gradient of ``make_loss()(x)``
    and a float64 central-difference estimate on a random probe x probe patch.

    ``make_loss`` is called again after ``modules`` have been cast, so any rng
    it uses must be re-created inside it.
    """
    x32 = x.detach().float().clone().requires_grad_(True)
    grad, = torch.autograd.grad(make_loss()(x32), x32)
    r = np.random.default_rng(seed)
    c = int(r.integers(x.shape[1]))
    i0, j0 = (int(v) for v in r.integers(0, x.shape[-1] - probe + 1, 2))
    for m in modules:
        m.double()
    try:
        fn = make_loss()
        x64 = x.detach().double()
        fd = torch.zeros(probe, probe, dtype=torch.float64)
        with torch.no_grad():
            for i in range(probe):
                for j in range(probe):
                    e = torch.zeros_like(x64)
                    e[:, c, i0 + i, j0 + j] = h
                    fd[i, j] = (fn(x64 + e) - fn(x64 - e)) / (2 * h)
    finally:
        for m in modules:
            m.float()
    ana = grad[:, c, i0:i0 + probe, j0:j0 + probe].sum(0).double()
    assert fd.norm() > 0, "probe patch has zero gradient"
    return ((ana - fd).norm() / fd.norm()).item()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[1].rstrip("abc:")), s)):
            terminalreporter.write_line(line)
