import numpy as np
import pytest
from scipy import ndimage

from bscnet import autodiff as ad
from bscnet.sparse import SparseTensor, clear_kernel_map_cache, cube_offsets


def random_sparse(rng, grid=8, occupancy=0.1, channels=3, batch=1, min_sites=2):
    """Random sparse tensor on a ``grid``^3 lattice (coords in ``[0, grid)``)."""
    coords = []
    for b in range(batch):
        mask = rng.random((grid, grid, grid)) < occupancy
        while mask.sum() < min_sites:
            mask[tuple(rng.integers(0, grid, 3))] = True
        xyz = np.argwhere(mask)
        coords.append(np.column_stack([np.full(len(xyz), b), xyz]))
    coords = np.vstack(coords)
    return SparseTensor(coords, rng.normal(size=(len(coords), channels)))


def densify(t: SparseTensor, grid: int) -> np.ndarray:
    """``(B, grid, grid, grid, C)`` dense copy of a stride-1 sparse tensor."""
    nb = int(t.coords[:, 0].max()) + 1
    dense = np.zeros((nb, grid, grid, grid, t.channels))
    b, x, y, z = t.coords.T
    dense[b, x, y, z] = np.asarray(t.features)
    return dense


def dense_conv_at(t: SparseTensor, weights, grid: int, shift=(0, 0, 0), out_coords=None):
    """Oracle: dense zero-padded 3^3 correlation (scipy.ndimage) sampled at sites.

    ``weights[k]`` belongs to offset ``cube_offsets(3)[k]``; the window at output
    ``u`` is centred on ``u + shift``.
    """
    weights = np.asarray(weights)
    k, cin, cout = weights.shape
    pad = 2
    dense = np.pad(densify(t, grid), ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    kern = np.zeros((3, 3, 3, cin, cout))
    for j, (dx, dy, dz) in enumerate(cube_offsets(3)):
        kern[dx + 1, dy + 1, dz + 1] = weights[j]
    out_coords = t.coords if out_coords is None else out_coords
    res = np.zeros((len(out_coords), cout))
    for b in np.unique(out_coords[:, 0]):
        full = np.zeros(dense.shape[1:4] + (cout,))
        for ci in range(cin):
            for co in range(cout):
                full[..., co] += ndimage.correlate(dense[b, ..., ci], kern[..., ci, co], mode="constant", cval=0.0)
        rows = out_coords[:, 0] == b
        q = out_coords[rows, 1:] + np.asarray(shift) + pad
        res[rows] = full[q[:, 0], q[:, 1], q[:, 2]]
    return res


def fd_grad(f, x, h=1e-6, indices=None):
    """Central finite differences of scalar ``f`` w.r.t. entries of array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _fresh_kernel_maps():
    clear_kernel_map_cache()
    yield


def tape_grads(loss_fn, params):
    """Analytic gradients of ``loss_fn(*vars)`` via the tape."""
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        loss = loss_fn(*[tape.watch(p) for p in params])
        tape.backward(loss)
    return [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]


def numeric_grads(loss_fn, params, h=1e-6):
    """Central-difference gradients of the same loss, evaluated without a tape."""
    def f():
        return float(np.asarray(ad.value(loss_fn(*[ad.Var(p.value) for p in params]))))

    out = []
    for p in params:
        fd = fd_grad(f, p.value, h)
        out.append(np.array([fd[i] for i in range(p.value.size)]).reshape(p.value.shape))
    return out


def assert_grads_close(loss_fn, params, rtol=1e-4, atol=1e-8, h=1e-6):
    for got, want in zip(tape_grads(loss_fn, params), numeric_grads(loss_fn, params, h)):
        np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results, key=lambda c: int(c[1:])):
        status, detail = results[cid]
        terminalreporter.write_line(f"{cid} {status}  {detail}")
