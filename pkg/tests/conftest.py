import numpy as np
import pytest

from keydiff import nd
from keydiff.arm import ArmSpec
from keydiff.scene import BoxObstacle, Scene


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5, max_entries: int | None = None, rng=None) -> tuple:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place and restored)."""
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return idx, out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build, params: dict, h: float = 1e-5, max_entries: int | None = None) -> dict:
    """Relative error per parameter between ``backward`` and central differences.

    ``build(tensors)`` returns a scalar Tensor from a dict of leaf Tensors.
    """
    leaves = {k: nd.Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    with nd.Tape() as tape:
        loss = build(leaves)
    grads = nd.backward(tape, loss)

    def value():
        return float(build(leaves).data)

    errs = {}
    for k, t in leaves.items():
        analytic = grads.get(t, np.zeros_like(t.data)).reshape(-1)
        idx, num = numeric_grad(value, t.data, h, max_entries)
        errs[k] = rel_error(analytic[idx], num)
    return errs


@pytest.fixture
def planar_arm() -> ArmSpec:
    return ArmSpec()


@pytest.fixture
def empty_scene() -> Scene:
    return Scene([], np.array([[-1.5, -1.5], [1.5, 1.5]]), 0)


def box_scene(*boxes) -> Scene:
    obs = [BoxObstacle(np.array(c, float), np.array(h, float), r) for c, h, r in boxes]
    return Scene(obs, np.array([[-1.5, -1.5], [1.5, 1.5]]), 0)


@pytest.fixture(scope="session")
def small_dataset_path(tmp_path_factory):
    """A 20-scene x 5-plan desk corpus, generated once per session and saved."""
    from keydiff.dataset import DatasetConfig, generate_dataset, save_dataset

    cfg = DatasetConfig(n_scenes=20, plans_per_scene=5, seed=3, cloud_points=256)
    path = tmp_path_factory.mktemp("data") / "small.kdds"
    save_dataset(path, generate_dataset(cfg))
    return path


@pytest.fixture(scope="session")
def small_dataset(small_dataset_path):
    from keydiff.dataset import load_dataset

    return load_dataset(small_dataset_path)
