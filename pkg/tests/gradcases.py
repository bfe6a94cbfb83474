"""Gradient-check catalogue shared by the autodiff tests and the acceptance suite."""
import numpy as np

from voxcal import autodiff as ad
from voxcal.autodiff import Tensor


def param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def primitive_cases(rng):
    """(name, function, checked tensors) covering every registered primitive."""
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    v = param(rng, 4)
    m = param(rng, 4, 2)
    pos = Tensor(rng.uniform(0.2, 1.0, (3, 4)), requires_grad=True)
    x2, w2 = param(rng, 2, 2, 5, 5), param(rng, 3, 2, 3, 3)
    x3, w3 = param(rng, 1, 2, 4, 4, 4), param(rng, 2, 2, 3, 3, 3)
    xt, wt = param(rng, 1, 2, 2, 3, 2), param(rng, 2, 3, 4, 4, 4)
    img = param(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 4, 3)
    tgt = rng.uniform(0, 1, (3, 4))
    # offsets keep relu / leaky_relu / l1 away from their kinks
    kinky = Tensor(rng.choice([-1, 1], (3, 4)) * rng.uniform(0.1, 1.0, (3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))

    def weighted(t):
        return ad.sum_(ad.mul(t, w))

    return {
        "add": (lambda: weighted(ad.add(a, v)), [a, v]),
        "sub": (lambda: weighted(ad.sub(a, b)), [a, b]),
        "mul": (lambda: weighted(ad.mul(a, v)), [a, v]),
        "matmul": (lambda: ad.sum_(ad.mul(ad.matmul(a, m), 1.5)), [a, m]),
        "reshape": (lambda: ad.sum_(ad.mul(ad.reshape(a, (4, 3)), w.T)), [a]),
        "concat": (lambda: ad.sum_(ad.mul(ad.concat([a, b], axis=1), np.tile(w, 2))), [a, b]),
        "slice": (lambda: ad.sum_(ad.mul(a[1:, ::2], 2.0)), [a]),
        "relu": (lambda: weighted(ad.relu(kinky)), [kinky]),
        "leaky_relu": (lambda: weighted(ad.leaky_relu(kinky, 0.2)), [kinky]),
        "sigmoid": (lambda: weighted(ad.sigmoid(a)), [a]),
        "tanh": (lambda: weighted(ad.tanh(a)), [a]),
        "softplus": (lambda: weighted(ad.softplus(a)), [a]),
        "softmax": (lambda: weighted(ad.softmax(a, axis=1)), [a]),
        "sum": (lambda: ad.mul(ad.sum_(ad.mul(a, a), axis=0)[2], 1.0), [a]),
        "mean": (lambda: ad.sum_(ad.mul(ad.mean(a, axis=1), ad.mean(a, axis=1))), [a]),
        # random read-out weights; each conv output is linear in every single coordinate
        "conv2d": (lambda: ad.sum_(ad.mul(ad.conv2d(x2, w2, 2, 1), rng_fixed((2, 3, 3, 3)))), [x2, w2]),
        "conv3d": (lambda: ad.sum_(ad.mul(ad.conv3d(x3, w3, 1, 1), rng_fixed((1, 2, 4, 4, 4)))), [x3, w3]),
        "conv_transpose3d": (lambda: ad.sum_(ad.mul(ad.conv_transpose3d(xt, wt, 2, 1), rng_fixed((1, 3, 4, 6, 4)))), [xt, wt]),
        "instance_norm": (lambda: ad.sum_(ad.mul(ad.instance_norm(img), rng_fixed(img.shape))), [img]),
        "dropout": (lambda: weighted(ad.dropout(a, 0.5, 7)), [a]),
        "l1_loss": (lambda: ad.l1_loss(kinky, np.zeros((3, 4))), [kinky]),
        "mse_loss": (lambda: ad.mse_loss(a, tgt), [a]),
        "bce_with_logits": (lambda: ad.bce_with_logits(a, tgt), [a]),
        "cross_entropy": (lambda: ad.cross_entropy(a, labels), [a]),
        "_pos": (lambda: weighted(ad.mul(pos, pos)), [pos]),
    }


def rng_fixed(shape):
    return np.random.default_rng(99).standard_normal(shape)
