"""Central finite-difference gradient checks for every primitive and layer.

The FD side is the independent oracle: it only ever calls the forward pass.
``run_suite`` drives named checks over seeded random shapes and is shared by
the test suite and the ``gradcheck`` CLI command.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (
    BatchNormLayer,
    Conv2dLayer,
    DropoutLayer,
    LinearLayer,
    batchnorm,
    conv2d,
    dropout,
    linear,
    maxpool2d,
)

EPS = 1e-5


def fd_gradient(f, arr, eps=EPS):
    """Central differences of the scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_err(analytic, fd):
    return float(np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))))


def check_gradients(build_loss, leaves, eps=EPS):
    """Max relative error between tape gradients and FD over ``leaves``."""
    for t in leaves:
        t.grad = None
    grads = T.gradients(build_loss(), leaves)
    worst = 0.0
    for t, g in zip(leaves, grads):
        fd = fd_gradient(lambda: build_loss().item(), t.data, eps)
        worst = max(worst, max_rel_err(g, fd))
    return worst


def _rand(rng, shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.2)
    return T.Tensor(x, requires_grad=True)


def _weighted_mean(y, rng):
    r = T.Tensor(rng.standard_normal(y.data.shape))
    return T.reduce_mean(T.mul(y, r))


# -- individual checks -------------------------------------------------

def _check_elementwise(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=2))
    a = _rand(rng, shape)
    b = _rand(rng, shape)
    c = float(rng.standard_normal())
    err = 0.0
    for op in (T.add, T.sub, T.mul):
        err = max(err, check_gradients(lambda: _weighted_mean(op(a, b), rng), [a, b]))
        err = max(err, check_gradients(lambda: _weighted_mean(op(a, c), rng), [a]))
    return err


def _check_relu_abs(seed):
    rng = np.random.default_rng(seed)
    a = _rand(rng, tuple(rng.integers(2, 6, size=2)), away_from_zero=True)
    err = check_gradients(lambda: _weighted_mean(T.relu(a), rng), [a])
    return max(err, check_gradients(lambda: _weighted_mean(T.abs_(a), rng), [a]))


def _check_matmul(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 6, size=3)
    a = _rand(rng, (m, k))
    b = _rand(rng, (k, n))
    return check_gradients(lambda: _weighted_mean(T.matmul(a, b), rng), [a, b])


def _check_layout_ops(seed):
    rng = np.random.default_rng(seed)
    a = _rand(rng, (2, 6))
    b = _rand(rng, (2, 3))
    err = check_gradients(lambda: _weighted_mean(T.reshape(a, (3, 4)), rng), [a])
    err = max(err, check_gradients(lambda: _weighted_mean(T.concat([a, b], 1), rng), [a, b]))
    err = max(err, check_gradients(lambda: T.reduce_mean(a), [a]))
    c = _rand(rng, (2, 3, 4, 4))
    return max(err, check_gradients(lambda: _weighted_mean(T.spatial_mean(c), rng), [c]))


def _check_linear(seed):
    rng = np.random.default_rng(seed)
    b, in_d, out_d = rng.integers(1, 6, size=3)
    lay = LinearLayer(int(in_d), int(out_d), seed=seed)
    x = _rand(rng, (int(b), int(in_d)))
    return check_gradients(
        lambda: _weighted_mean(linear(x, lay), rng), [x, lay.weight, lay.bias]
    )


def _check_conv2d(seed):
    rng = np.random.default_rng(seed)
    B, C, O = rng.integers(1, 4, size=3)
    H = int(rng.integers(4, 7))
    k = int(rng.choice([1, 3]))
    lay = Conv2dLayer(int(C), int(O), kernel=k, seed=seed)
    x = _rand(rng, (int(B), int(C), H, H))
    return check_gradients(
        lambda: _weighted_mean(conv2d(x, lay), rng), [x, lay.weight, lay.bias]
    )


def _check_conv2d_strided(seed):
    rng = np.random.default_rng(seed)
    lay = Conv2dLayer(2, 3, kernel=3, stride=2, padding=1, seed=seed)
    x = _rand(rng, (2, 2, 5, 5))
    return check_gradients(
        lambda: _weighted_mean(conv2d(x, lay), rng), [x, lay.weight, lay.bias]
    )


def _check_maxpool(seed):
    rng = np.random.default_rng(seed)
    # distinct values keep the argmax stable under the FD perturbation
    vals = rng.permutation(16 * 2).astype(np.float64).reshape(1, 2, 4, 4)
    x = T.Tensor(vals * 0.37, requires_grad=True)
    return check_gradients(lambda: _weighted_mean(maxpool2d(x, 2, 2), rng), [x])


def _check_batchnorm(seed):
    rng = np.random.default_rng(seed)
    lay = BatchNormLayer(3)
    lay.update_running = False  # keep forward a pure function for FD
    x = _rand(rng, (4, 3, 3, 3))
    err = check_gradients(
        lambda: _weighted_mean(batchnorm(x, lay), rng), [x, lay.gamma, lay.beta]
    )
    lay.mode = "eval"
    lay.running_mean = rng.standard_normal(3)
    lay.running_var = rng.random(3) + 0.5
    return max(
        err,
        check_gradients(
            lambda: _weighted_mean(batchnorm(x, lay), rng), [x, lay.gamma, lay.beta]
        ),
    )


def _check_dropout(seed):
    rng = np.random.default_rng(seed)
    lay = DropoutLayer(rate=0.4, seed=seed)
    x = _rand(rng, (3, 5))

    def build():
        lay.reseed(seed + 1)  # same mask on every FD re-evaluation
        return _weighted_mean(dropout(x, lay), rng)

    return check_gradients(build, [x])


def _check_composite(seed):
    """conv -> batchnorm -> relu -> maxpool -> fc -> L1 loss, end to end."""
    rng = np.random.default_rng(seed)
    conv = Conv2dLayer(1, 2, kernel=3, seed=seed)
    bn = BatchNormLayer(2)
    bn.update_running = False
    fc = LinearLayer(2 * 3 * 3, 1, seed=seed + 1)
    x = _rand(rng, (2, 1, 6, 6))
    target = T.Tensor(rng.standard_normal((2, 1)))

    def build():
        h = maxpool2d(T.relu(batchnorm(conv2d(x, conv), bn)), 2, 2)
        pred = linear(T.reshape(h, (2, 2 * 3 * 3)), fc)
        return T.reduce_mean(T.abs_(T.sub(pred, target)))

    leaves = [x, conv.weight, conv.bias, bn.gamma, bn.beta, fc.weight, fc.bias]
    return check_gradients(build, leaves)


@dataclass
class CheckResult:
    name: str
    max_err: float
    threshold: float

    @property
    def ok(self):
        return self.max_err < self.threshold


CHECKS = [
    ("elementwise", _check_elementwise, 1e-6),
    ("relu_abs", _check_relu_abs, 1e-6),
    ("matmul", _check_matmul, 1e-6),
    ("layout_ops", _check_layout_ops, 1e-6),
    ("linear", _check_linear, 1e-6),
    ("conv2d", _check_conv2d, 1e-6),
    ("conv2d_strided", _check_conv2d_strided, 1e-6),
    ("maxpool2d", _check_maxpool, 1e-6),
    ("batchnorm", _check_batchnorm, 1e-4),
    ("dropout", _check_dropout, 1e-6),
    ("composite", _check_composite, 1e-4),
]


def run_suite(n_shapes=10, base_seed=1234):
    """Run every check over ``n_shapes`` seeded shapes; returns CheckResults."""
    results = []
    for name, fn, threshold in CHECKS:
        worst = max(fn(base_seed + 101 * i) for i in range(n_shapes))
        results.append(CheckResult(name, worst, threshold))
    return results
