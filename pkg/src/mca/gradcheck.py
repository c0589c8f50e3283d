"""Central finite-difference verification of analytic gradients.

All checks run in double precision with step h=1e-4 on inputs in [-1,1].
The numeric side rebuilds the forward pass from perturbed copies, so it is
independent of the backward rules it verifies.
"""

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .attention import AttentionConfig, CmcParams, SeParams, cfc_forward, \
    eca_forward, mca_forward, se_forward
from .moments import aggregate, moment1, moment_k

__all__ = ["gradcheck", "max_rel_error", "run_op_gradcheck", "GRADCHECK_OPS"]


def max_rel_error(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(fn, tensors, h=1e-4):
    """Compare analytic grads of scalar fn(tensors) against central differences.

    fn must rebuild its graph from the given leaf tensors on every call.
    Returns the max relative error over all elements of all tensors.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "parameter did not receive a gradient"
        analytic = t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        worst = max(worst, max_rel_error(analytic, numeric))
        t.zero_grad()
    return worst


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def _check_moment1(rng):
    x = _rand(rng, 2, 3, 4, 4)
    return gradcheck(lambda: moment1(x).sum(), [x])


def _check_moment2(rng):
    x = _rand(rng, 2, 3, 4, 4)
    w = Tensor(rng.uniform(-1, 1, size=(2, 3)))
    return gradcheck(lambda: ag.mul(moment_k(x, 2), w).sum(), [x])


def _check_moment3(rng):
    x = _rand(rng, 2, 3, 4, 4)
    w = Tensor(rng.uniform(-1, 1, size=(2, 3)))
    err = gradcheck(lambda: ag.mul(moment_k(x, 3), w).sum(), [x])
    # constant channels must give exactly zero gradient, not NaN
    xc = Tensor(np.full((1, 2, 3, 3), 0.7), requires_grad=True)
    loss = moment_k(xc, 3).sum()
    loss.backward()
    if not np.allclose(xc.grad, 0.0):
        return np.inf
    return err


def _check_conv2d(rng):
    x = _rand(rng, 2, 3, 6, 6)
    w = _rand(rng, 4, 3, 3, 3)
    return gradcheck(lambda: ag.conv2d(x, w, stride=1, pad=1).sum(), [x, w])


def _check_conv1d(rng):
    m = _rand(rng, 2, 2, 8)
    w = _rand(rng, 1, 2, 3)
    return gradcheck(lambda: ag.conv1d_channel(m, w).sum(), [m, w])


def _check_cmc(rng):
    x = _rand(rng, 2, 4, 4, 4)
    cfg = AttentionConfig(variant="mca-e", kernel_size=3)
    p = CmcParams.create(cfg, channels=4)
    params = [x] + list(p.named().values())
    from .attention import cmc_forward

    def fn():
        return cmc_forward(aggregate(x, cfg.selected), p).sum()
    return gradcheck(fn, params)


def _check_cfc(rng):
    x = _rand(rng, 2, 4, 4, 4)
    w = _rand(rng, 2, 4)
    return gradcheck(lambda: cfc_forward(aggregate(x, (1, 2)), w).sum(), [x, w])


def _check_se(rng):
    x = _rand(rng, 2, 4, 4, 4)
    p = SeParams.create(channels=4, reduction=2, rng=rng)
    params = [x] + list(p.named().values())
    return gradcheck(lambda: se_forward(x, p).y.sum(), params)


def _check_eca(rng):
    x = _rand(rng, 2, 5, 4, 4)
    w = _rand(rng, 1, 1, 3)
    return gradcheck(lambda: eca_forward(x, w).y.sum(), [x, w])


def _mca_block(rng, variant, k):
    x = _rand(rng, 2, 4, 4, 4)
    cfg = AttentionConfig(variant=variant, kernel_size=k)
    p = CmcParams.create(cfg, channels=4)
    params = [x] + list(p.named().values())
    return gradcheck(lambda: mca_forward(x, cfg, p).y.sum(), params)


def _check_mca_e(rng):
    return _mca_block(rng, "mca-e", 3)


def _check_mca_s(rng):
    return _mca_block(rng, "mca-s", 3)


GRADCHECK_OPS = {
    "moment1": (_check_moment1, 1e-6),
    "moment2": (_check_moment2, 1e-6),
    "moment3": (_check_moment3, 1e-6),
    "conv2d": (_check_conv2d, 1e-5),
    "conv1d": (_check_conv1d, 1e-5),
    "cmc": (_check_cmc, 1e-5),
    "cfc": (_check_cfc, 1e-5),
    "se": (_check_se, 1e-4),
    "eca": (_check_eca, 1e-5),
    "mca-block": (_check_mca_e, 1e-4),
    "mca-block-s": (_check_mca_s, 1e-4),
}


def run_op_gradcheck(op, trials=20, seed=0):
    """Max relative error over `trials` random draws for one named op."""
    fn, tol = GRADCHECK_OPS[op]
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng(seed * 1000 + t)
        worst = max(worst, fn(rng))
    return worst, tol
