"""Finite-difference verification of the autodiff engine.

Checks every primitive in isolation (64-bit, random smooth inputs away
from kinks) and the full toy generator + loss graph. Shared by the CLI
``gradcheck`` command and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor, grad_check
from .network import NetworkConfig, discriminator_forward, generator_forward, init_discriminator, init_generator
from .training import completion_loss_graph, generator_adv_graph

PRIMITIVE_TOL = 1e-6
FULL_GRAPH_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _pos(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True, dtype=np.float64)


def check_primitives(seed: int = 7) -> list:
    rng = np.random.default_rng(seed)
    checks = []

    a, b = _t(rng, 4, 5), _t(rng, 5, 3)
    checks.append(("matmul", [a, b], lambda xs: ad.reduce_sum(ad.square(ad.matmul(xs[0], xs[1])))))

    a, b = _t(rng, 4, 3), _t(rng, 4, 3)
    checks.append(("add", [a, b], lambda xs: ad.reduce_sum(ad.square(ad.add(xs[0], xs[1])))))

    a, bias = _t(rng, 4, 3), _t(rng, 3)
    checks.append(("add_bias", [a, bias], lambda xs: ad.reduce_sum(ad.square(ad.add(xs[0], xs[1])))))

    a, b = _t(rng, 4, 3), _t(rng, 4, 3)
    checks.append(("sub", [a, b], lambda xs: ad.reduce_sum(ad.square(ad.sub(xs[0], xs[1])))))

    a = _t(rng, 5)
    checks.append(("scalar_mul", [a], lambda xs: ad.reduce_sum(ad.square(ad.scalar_mul(xs[0], 1.7)))))

    a, b = _t(rng, 3, 2), _t(rng, 3, 4)
    checks.append(("concat", [a, b], lambda xs: ad.reduce_sum(ad.square(ad.concat(xs, axis=1)))))

    a = Tensor(rng.normal(size=(4, 4)) + np.sign(rng.normal(size=(4, 4))) * 0.5,
               requires_grad=True, dtype=np.float64)  # keep away from the kink
    checks.append(("relu", [a], lambda xs: ad.reduce_sum(ad.square(ad.relu(xs[0])))))

    a = _t(rng, 6)
    checks.append(("square", [a], lambda xs: ad.reduce_sum(ad.square(xs[0]))))

    a = _pos(rng, 5)
    checks.append(("log", [a], lambda xs: ad.reduce_sum(ad.square(ad.log(xs[0])))))

    a = _t(rng, 5)
    checks.append(("sigmoid", [a], lambda xs: ad.reduce_sum(ad.square(ad.sigmoid(xs[0])))))

    a = _t(rng, 4, 3)
    checks.append(("reduce_mean", [a], lambda xs: ad.reduce_sum(ad.square(ad.reduce_mean(xs[0], axis=0)))))
    a = _t(rng, 4, 3)
    checks.append(("reduce_sum", [a], lambda xs: ad.square(ad.reduce_sum(xs[0]))))

    vals = rng.permutation(12).reshape(3, 4) + rng.uniform(-0.2, 0.2, size=(3, 4))
    a = Tensor(vals, requires_grad=True, dtype=np.float64)  # distinct values: stable argmax
    checks.append(("reduce_max", [a], lambda xs: ad.reduce_sum(ad.square(ad.reduce_max(xs[0], axis=1)))))

    a = _t(rng, 5, 3)
    idx = np.array([[0, 2, 2], [4, 1, 0]])
    checks.append(("gather_rows", [a], lambda xs: ad.reduce_sum(ad.square(ad.gather_rows(xs[0], idx)))))

    a = _t(rng, 2, 6)
    checks.append(("reshape", [a], lambda xs: ad.reduce_sum(ad.square(ad.reshape(xs[0], (3, 4))))))

    a = Tensor(rng.uniform(0.2, 0.8, size=6), requires_grad=True, dtype=np.float64)
    checks.append(("clamp", [a], lambda xs: ad.reduce_sum(ad.square(ad.clamp(xs[0], 0.1, 0.9)))))

    x = _t(rng, 8, 4)
    gamma = _pos(rng, 4)
    beta = _t(rng, 4)
    bn_train = BatchNormState.create(4, dtype=np.float64)
    # the constant offset breaks the normalization invariance of sum(y^2),
    # which is otherwise independent of x
    offset = ad.constant(rng.normal(size=(8, 4)), dtype=np.float64)
    checks.append(("batch_norm_train", [x, gamma, beta],
                   lambda xs: ad.reduce_sum(ad.square(ad.add(ad.batch_norm(
                       xs[0], xs[1], xs[2], bn_train, training=True, update_running=False), offset)))))

    x2 = _t(rng, 8, 4)
    gamma2, beta2 = _pos(rng, 4), _t(rng, 4)
    bn_eval = BatchNormState.create(4, dtype=np.float64)
    bn_eval.running_mean = rng.normal(size=4)
    bn_eval.running_var = rng.uniform(0.5, 2.0, size=4)
    checks.append(("batch_norm_eval", [x2, gamma2, beta2],
                   lambda xs: ad.reduce_sum(ad.square(ad.batch_norm(
                       xs[0], xs[1], xs[2], bn_eval, training=False)))))

    results = []
    for name, inputs, fn in checks:
        err = grad_check(fn, inputs, h=1e-6 if name == "log" else 1e-5)
        results.append(CheckResult(name, err, PRIMITIVE_TOL))
    return results


def toy_config() -> NetworkConfig:
    return NetworkConfig(
        k=3, layer_dims=(4, 6), n_in=16, m_out=8, m1=2, m2=4,
        disc_dims=(4, 6, 8), disc_classifier=(6, 1), blocks=(1, 1, 1),
    )


def check_full_graph(seed: int = 3) -> CheckResult:
    """Finite differences through the whole generator, losses, and the
    frozen discriminator at toy scale (64-bit)."""
    cfg = toy_config()
    rng = np.random.default_rng(seed)
    gw = init_generator(cfg, rng, dtype=np.float64)
    dw = init_discriminator(cfg, rng, dtype=np.float64)
    for p in dw.parameters():
        p.requires_grad = False  # discriminator is a fixed map here

    points = rng.uniform(0.0, 1.0, size=(cfg.n_in, 3))
    gt = rng.uniform(0.0, 1.0, size=(cfg.m_out, 3))
    gt_mid = gt[:cfg.m2]
    gt_coarse = gt[:cfg.m1]
    params = gw.parameters()

    def loss_fn(_):
        coarse, middle, fine = generator_forward(points, gw, cfg,
                                                 training=True, update_running=False)
        l_com = completion_loss_graph(fine, middle, coarse, gt, gt_mid, gt_coarse, alpha=0.1)
        d_fake = discriminator_forward(fine, dw, cfg, training=True, update_running=False)
        l_adv = generator_adv_graph(d_fake, "nonsaturating")
        return ad.add(ad.scalar_mul(l_com, 0.9), ad.scalar_mul(l_adv, 0.1))

    err = grad_check(loss_fn, params, h=1e-5)
    return CheckResult("generator_full_graph", err, FULL_GRAPH_TOL)


def run_all(seed: int = 7):
    results = check_primitives(seed)
    results.append(check_full_graph())
    return results, all(r.ok for r in results)
