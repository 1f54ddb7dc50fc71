"""MNIST-format surrogate corpus built from sklearn's 8x8 digits.

Real MNIST is not downloadable in the offline test environment, so the
desk-scale experiments run on this stand-in: the 1797 digit images are
upscaled to 28x28, augmented (rotation, shift, brightness), and written
as standard IDX files. Train and test draw from disjoint base images.

If genuine MNIST IDX files are available, point BPPLAB_MNIST_DIR at a
directory containing train-images-idx3-ubyte / train-labels-idx1-ubyte /
t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte and they are used
instead.
"""

import os

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

from bpplab.imagecore import Image, LabeledImage, write_idx_dataset

MNIST_ENV = "BPPLAB_MNIST_DIR"


def _augment(base28, rng):
    """Elastic + affine distortion strong enough that two draws from the
    same base image are visibly different writings. Without this, a
    poisoned sample would have near-identical clean-labeled siblings in
    the corpus, which real MNIST does not have."""
    # elastic displacement field (Simard-style)
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (28, 28)), 4.0) * 16.0
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (28, 28)), 4.0) * 16.0
    yy, xx = np.meshgrid(np.arange(28.0), np.arange(28.0), indexing="ij")
    img = ndimage.map_coordinates(base28, [yy + dy, xx + dx], order=1, mode="constant")
    angle = rng.uniform(-12.0, 12.0)
    img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant")
    zoom = rng.uniform(0.9, 1.1)
    img = ndimage.affine_transform(
        img, np.diag([1 / zoom, 1 / zoom]), offset=14.0 * (1 - 1 / zoom),
        order=1, mode="constant",
    )
    img = ndimage.shift(
        img, (rng.integers(-2, 3), rng.integers(-2, 3)), order=0, mode="constant"
    )
    img *= rng.uniform(0.8, 1.0)
    return np.clip(np.round(img), 0, 255)


def _build_split(bases, labels, n, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for _ in range(n):
        i = rng.integers(0, len(bases))
        out.append(
            LabeledImage(
                Image(_augment(bases[i], rng)[:, :, None], depth=8), int(labels[i])
            )
        )
    return out


def build_surrogate(out_dir, n_train=12000, n_test=2000, seed=7):
    """Write <out_dir>/{train,test}-{images,labels} IDX files; returns
    the four paths. Cached: skips work when the files already exist."""
    paths = {
        "train_images": os.path.join(out_dir, "train-images-idx3-ubyte"),
        "train_labels": os.path.join(out_dir, "train-labels-idx1-ubyte"),
        "test_images": os.path.join(out_dir, "t10k-images-idx3-ubyte"),
        "test_labels": os.path.join(out_dir, "t10k-labels-idx1-ubyte"),
    }
    mnist_dir = os.environ.get(MNIST_ENV)
    if mnist_dir:
        return {k: os.path.join(mnist_dir, os.path.basename(v)) for k, v in paths.items()}
    if all(os.path.exists(p) for p in paths.values()):
        return paths
    digits = load_digits()
    # 8x8 [0, 16] -> 28x28 [0, 255], bilinear
    images28 = np.stack(
        [
            ndimage.zoom(img * (255.0 / 16.0), 28 / 8, order=1, grid_mode=True,
                         mode="grid-constant")
            for img in digits.images
        ]
    )
    test_base = np.arange(len(images28)) % 6 == 0
    os.makedirs(out_dir, exist_ok=True)
    train = _build_split(
        images28[~test_base], digits.target[~test_base], n_train, seed
    )
    test = _build_split(
        images28[test_base], digits.target[test_base], n_test, seed + 1
    )
    write_idx_dataset(train, paths["train_images"], paths["train_labels"])
    write_idx_dataset(test, paths["test_images"], paths["test_labels"])
    return paths
