"""Finite-difference verification suite.

Compares tape gradients against central differences for every
differentiable operation and for the full tiny network under each of
the four losses.  Network checks probe a deterministic random subset of
input coordinates plus a couple of coordinates of every parameter
tensor, which keeps the suite fast without weakening the tolerance.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import LossSpec, compute_loss
from .rng import pcg
from .unet import ModelConfig, build

__all__ = ["op_checks", "network_checks", "full_suite", "TOLERANCE"]

TOLERANCE = 1e-4
ELEMENTWISE_TOLERANCE = 1e-6


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def op_checks() -> dict[str, float]:
    """Max relative FD error for each primitive op."""
    rng = pcg(20240)
    results: dict[str, float] = {}

    x = rng.standard_normal((2, 3, 6, 6))
    k = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4) * 0.1
    kt, bt = t64(k), t64(b)
    results["conv2d/input"] = grad_check(lambda v: ad.tsum(ad.conv2d(v, kt, bt)), t64(x))
    xt = t64(x)
    results["conv2d/kernel"] = grad_check(lambda v: ad.tsum(ad.conv2d(xt, v, bt)), t64(k))
    results["conv2d/bias"] = grad_check(lambda v: ad.tsum(ad.conv2d(xt, kt, v)), t64(b))

    for ksize in (2, 3):
        w = rng.standard_normal((3, 2, ksize, ksize)) * 0.5
        wt = t64(w)
        results[f"conv_transpose2d k{ksize}/input"] = grad_check(
            lambda v: ad.tsum(ad.conv_transpose2d(v, wt)), t64(x)
        )
        results[f"conv_transpose2d k{ksize}/kernel"] = grad_check(
            lambda v: ad.tsum(ad.conv_transpose2d(xt, v)), t64(w)
        )

    pool_in = rng.permutation(2 * 2 * 36).astype(np.float64).reshape(2, 2, 6, 6)
    results["maxpool2"] = grad_check(lambda v: ad.tsum(ad.maxpool2(v)), t64(pool_in))

    bn_x = rng.standard_normal((3, 2, 4, 4))
    gamma = rng.standard_normal(2) * 0.3 + 1.0
    beta = rng.standard_normal(2) * 0.2
    weights = rng.standard_normal(bn_x.shape)

    def bn(v, g, bb):
        out = ad.batchnorm2d(v, g, bb, np.zeros(2), np.ones(2), mode="train")
        return ad.tsum(ad.mul(out, weights))

    gt, bt2 = t64(gamma), t64(beta)
    results["batchnorm2d/input"] = grad_check(lambda v: bn(v, gt, bt2), t64(bn_x))
    bx = t64(bn_x)
    results["batchnorm2d/gamma"] = grad_check(lambda v: bn(bx, v, bt2), t64(gamma))
    results["batchnorm2d/beta"] = grad_check(lambda v: bn(bx, gt, v), t64(beta))

    ew = rng.standard_normal(64)
    results["elu"] = grad_check(lambda v: ad.tsum(ad.elu(v)), t64(ew))
    results["sigmoid"] = grad_check(lambda v: ad.tsum(ad.sigmoid(v)), t64(ew))
    results["dropout"] = grad_check(
        lambda v: ad.tsum(ad.dropout(v, 0.3, "train", seed=5)), t64(ew)
    )

    ca = rng.standard_normal((2, 2, 4, 4))
    cb = rng.standard_normal((2, 3, 4, 4))
    cw = rng.standard_normal((2, 5, 4, 4))
    cbt = t64(cb)
    results["concat_channels"] = grad_check(
        lambda v: ad.tsum(ad.mul(ad.concat_channels(v, cbt), cw)), t64(ca)
    )
    results["slice_channels"] = grad_check(
        lambda v: ad.tsum(ad.slice_channels(v, 1, 4)), t64(cw)
    )
    return results


def _loss_specs() -> dict[str, LossSpec]:
    return {
        "BCE": LossSpec("BCE"),
        "WCE": LossSpec("WCE", class_weights=(1.0, 2.0, 1.5, 0.5)),
        "JDL": LossSpec("JDL"),
        "SDL": LossSpec("SDL"),
    }


def network_checks(
    input_sample: int = 40, param_sample: int = 2, seed: int = 7
) -> dict[str, float]:
    """Tiny network (32x32, base 4) under each loss, input + parameters."""
    rng = pcg(seed)
    x0 = rng.standard_normal((1, 1, 32, 32))
    lab = rng.integers(0, 4, (1, 32, 32))
    truth = np.zeros((1, 4, 32, 32))
    for c in range(4):
        truth[:, c] = lab == c

    results: dict[str, float] = {}
    for name, spec in _loss_specs().items():
        model = build(
            ModelConfig(
                input_size=(32, 32),
                base_channels=4,
                dropout_schedule=(0.1, 0.1, 0.2, 0.2, 0.2),
                seed=11,
                precision="f64",
            )
        )

        def loss_of_input(v):
            pred = model.forward(v, mode="train", dropout_seed=3)
            return compute_loss(spec, pred, truth)

        worst = grad_check(loss_of_input, t64(x0), sample=input_sample, seed=1)

        # probe a couple of coordinates of every parameter tensor by
        # temporarily installing the probe tensor as the parameter
        xt = Tensor(x0, dtype=np.float64)
        for pname in list(model.params):
            original = model.params[pname]

            def loss_of_param(v, _name=pname, _orig=original):
                model.params[_name] = v
                try:
                    pred = model.forward(xt, mode="train", dropout_seed=3)
                    return compute_loss(spec, pred, truth)
                finally:
                    model.params[_name] = _orig

            err = grad_check(
                loss_of_param,
                Tensor(original.data.copy(), dtype=np.float64),
                sample=param_sample,
                seed=2,
            )
            worst = max(worst, err)
        results[f"unet+{name}"] = worst
    return results


def full_suite(include_network: bool = True) -> dict[str, float]:
    results = op_checks()
    if include_network:
        results.update(network_checks())
    return results
