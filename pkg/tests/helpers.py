"""Small shared builders for model-level tests."""

import numpy as np

from fcnbnl import fcn
from fcnbnl.data import Dataset, LabelSet
from fcnbnl.fcn import ConvLayerSpec, FcnModel, FcnTopology, ScalePyramidConfig
from fcnbnl.nbnl import NbnlConfig, PrototypeBank


def small_model(seed=0, dtype=np.float64, base=20, factors=(1.0,), **flags):
    topo = fcn.default_topology(descriptor_dim=8, **flags)
    return FcnModel.init(topo, np.random.default_rng(seed), ScalePyramidConfig(factors, base), dtype=dtype)


def random_images(rng, n, size=20):
    return [np.rint(rng.uniform(size=(size, size, 3)) * 255) / 255 for _ in range(n)]


def random_dataset(rng, k=2, per_class=4, size=20):
    labels = [y for y in range(k) for _ in range(per_class)]
    paths = [f"c{y}/{i:03d}.ppm" for i, y in enumerate(labels)]
    names = tuple(f"c{y}" for y in range(k))
    return Dataset(random_images(rng, len(labels), size), labels, LabelSet(names), paths=paths)


def color_toy(rng, per_class=10):
    """Two classes of flat images, reddish vs bluish, separable by a hyperplane in pixel space."""
    images, labels = [], []
    for y, center in enumerate(([0.8, 0.3, 0.2], [0.2, 0.3, 0.8])):
        for _ in range(per_class):
            color = np.clip(np.array(center) + rng.uniform(-0.15, 0.15, 3), 0, 1)
            images.append(np.broadcast_to(color, (4, 4, 3)).copy())
            labels.append(y)
    return Dataset(images, labels, LabelSet(("red", "blue")))


def pixel_model():
    """Frozen identity 1x1 extractor with unit-norm descriptors: the descriptor is the pixel direction."""
    topo = FcnTopology(
        (ConvLayerSpec(1, 1, 3, 3, relu=False),), normalize_descriptors=True, batch_norm_before_head=False
    )
    w = np.eye(3).reshape(3, 3, 1, 1)
    return FcnModel(topo, [w], [np.zeros(3)], ScalePyramidConfig((1.0,), 4))


def random_bank(rng, k, p, d, q=10.0, dtype=np.float64):
    W = rng.standard_normal((k, p, d))
    W /= np.linalg.norm(W, axis=-1, keepdims=True) * 2
    return PrototypeBank(W.astype(dtype), NbnlConfig(k=k, p=p, q=q))
