import numpy as np
import pytest

from prunekit.data import Dataset
from prunekit.engine import init_weights
from prunekit.model import LayerSpec
from prunekit.presets import blank_graph


def fc_graph(weight_rows, activation="none", prunable=False, bias=None,
             layer_id="fc", num_classes=None):
    """Single fully-connected layer fed by a flatten over a (1, 1, in) input."""
    w = np.asarray(weight_rows, dtype=np.float64)
    fin, fout = w.shape
    layers = [
        LayerSpec("flat", "flatten"),
        LayerSpec(layer_id, "fully-connected", (fin, fout), activation=activation,
                  prunable=prunable),
    ]
    g = blank_graph(layers, (1, 1, fin), num_classes or fout)
    g.weights[layer_id] = (w.copy(), np.zeros(fout) if bias is None else np.asarray(bias, float))
    return g


def conv_chain(widths=(6, 8), fc_out=(10, 4), input_shape=(8, 8, 3), seed=11,
               pool=True, prunable_all=False):
    """conv -> conv -> [pool] -> flatten -> fc -> fc chain with seeded weights."""
    h, w, c = input_shape
    w1, w2 = widths
    layers = [
        LayerSpec("c1", "conv2d", (3, 3, c, w1), padding="same", activation="relu",
                  prunable=True if prunable_all else False),
        LayerSpec("c2", "conv2d", (3, 3, w1, w2), padding="same", activation="relu",
                  prunable=True),
    ]
    spatial = (h // 2) * (w // 2) if pool else h * w
    if pool:
        layers.append(LayerSpec("p1", "maxpool", (2, 2)))
    layers += [
        LayerSpec("fl", "flatten"),
        LayerSpec("f1", "fully-connected", (spatial * w2, fc_out[0]), activation="relu",
                  prunable=True),
        LayerSpec("f2", "fully-connected", (fc_out[0], fc_out[1]), activation="softmax",
                  prunable=False),
    ]
    return init_weights(blank_graph(layers, input_shape, fc_out[1]), seed)


def tiny_dataset(n=40, shape=(8, 8, 3), num_classes=4, seed=5):
    rng = np.random.default_rng(seed)
    return Dataset(
        images=rng.uniform(0.0, 1.0, (n, *shape)),
        labels=rng.integers(0, num_classes, n),
        num_classes=num_classes,
    )


def separable_dataset(n=200, seed=5):
    """Two linearly separable point clouds as 1x1x2 images."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    imgs = np.zeros((n, 1, 1, 2))
    imgs[labels == 0] = [0.2, 0.8]
    imgs[labels == 1] = [0.8, 0.2]
    imgs += rng.uniform(-0.05, 0.05, imgs.shape)
    return Dataset(np.clip(imgs, 0, 1), labels, 2)


@pytest.fixture
def small_chain():
    return conv_chain()


@pytest.fixture
def small_data():
    return tiny_dataset()
