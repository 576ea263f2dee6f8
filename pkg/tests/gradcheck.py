"""Central finite-difference helpers shared by the gradient tests."""
import numpy as np

from certainnet.model import CertainNetModel, ModelConfig
from certainnet.synthdata import Scene
from certainnet.training import TrainConfig, loss_and_grads, prepare_targets

TINY = ModelConfig(n_classes=2, widths=(3, 4, 5), strides=(2, 2, 1), dilations=(1, 1, 2),
                   hyperspace_dim=4, dims_scale=4.0, dims_init=6.0)


def central_diff(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` w.r.t. every entry of array ``x`` (in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor=1e-4):
    """Worst relative error of ``analytic`` against ``numeric``.

    Entries smaller than ``floor`` times the largest magnitude are dominated
    by finite-difference roundoff, so they are measured against that largest
    magnitude instead of their own.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = np.maximum(np.abs(a), np.abs(n))
    top = scale.max() if scale.size else 0.0
    if top == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(scale, floor * top)))


def random_instance(seed):
    """Tiny float64 model, images and targets for an end-to-end gradient check."""
    rng = np.random.default_rng(seed)
    model = CertainNetModel.initialize(TINY, seed=seed, sigma=0.4, dtype=np.float64)
    model.params = {k: v + rng.normal(0, 0.05, v.shape) for k, v in model.params.items()}
    images = rng.random((2, 12, 12))
    scenes = []
    for i in range(2):
        boxes = np.array([[rng.integers(0, 4), rng.integers(0, 4), rng.integers(4, 8),
                           rng.integers(4, 8)]], dtype=float)
        scenes.append(Scene(str(i), i, images[i], boxes, np.array([rng.integers(0, 2)])))
    y, dims, mask = prepare_targets(scenes, model.grid_shape(12, 12), model.stride, 2)
    config = TrainConfig(lam=2.0, reg_weight=0.3, dims_weight=0.2, pos_weight=3.0)
    return model, images, y, dims, mask, config
