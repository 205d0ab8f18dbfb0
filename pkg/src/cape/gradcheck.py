"""Finite-difference verification of every reverse-mode gradient path.

Covers each primitive op, each individual training objective, and the full
pretrain/finetune losses on a small model. Per-op inputs are random but
kink-free by construction (ReLU checks are shifted away from 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .losses import (LossWeights, contrastive_loss, finetune_loss,
                     monotonic_loss, ngm_proxy, pretrain_loss, recon_loss,
                     smoothness_loss)
from .model import CapeModel, ModelConfig

TOY_CONFIG = dict(T=12, patch_len=4, d=16, L=1, heads=2, K=4, horizon=2,
                  constraint_roles=["mono_inc", "mono_dec", "infectious",
                                    "free"])

OP_CASES = {
    "add": lambda ts: ad.tsum(ad.mul(ad.add(ts[0], ts[1]), ts[0])),
    "sub": lambda ts: ad.tsum(ad.mul(ad.sub(ts[0], ts[1]), ts[1])),
    "mul": lambda ts: ad.tsum(ad.mul(ts[0], ts[1])),
    "div": lambda ts: ad.tsum(ad.div(ts[0], ad.add(ad.square(ts[1]), 1.0))),
    "neg": lambda ts: ad.tsum(ad.mul(ad.neg(ts[0]), ts[1])),
    "matmul": lambda ts: ad.tsum(ad.square(ad.matmul(ts[0], ts[1]))),
    "relu": lambda ts: ad.tsum(ad.relu(ad.add(ts[0], 0.5))),
    "exp": lambda ts: ad.tsum(ad.exp(ad.mul(ts[0], 0.3))),
    "log": lambda ts: ad.tsum(ad.log(ad.add(ad.square(ts[0]), 1.0))),
    "sqrt": lambda ts: ad.tsum(ad.sqrt(ad.add(ad.square(ts[0]), 1.0))),
    "square": lambda ts: ad.tsum(ad.square(ad.add(ts[0], ts[1]))),
    "power": lambda ts: ad.tsum(ad.power(ad.add(ad.square(ts[0]), 1.0), 1.3)),
    "sum": lambda ts: ad.tsum(ad.mul(ad.tsum(ts[0], axis=0),
                                     ad.tsum(ts[1], axis=0))),
    "mean": lambda ts: ad.tsum(ad.mul(ad.tmean(ts[0], axis=1),
                                      ad.tmean(ts[1], axis=1))),
    "transpose": lambda ts: ad.tsum(ad.mul(ad.transpose(ts[0]),
                                           ad.transpose(ts[1]))),
    "reshape": lambda ts: ad.tsum(ad.mul(ad.reshape(ts[0], (16,)),
                                         ad.reshape(ts[1], (16,)))),
    "concat": lambda ts: ad.tsum(ad.square(ad.concat([ts[0], ts[1]], axis=0))),
    "stack": lambda ts: ad.tsum(ad.square(ad.stack([ts[0], ts[1]], axis=1))),
    "slice": lambda ts: ad.tsum(ad.mul(ts[0][1:3, :], ts[1][0:2, :])),
    "softmax": lambda ts: ad.tsum(ad.mul(ad.softmax(ts[0], axis=-1), ts[1])),
    # weight the normalized output: sum(LN(x)^2) is near-constant in x and
    # its vanishing gradient sits below the FD roundoff floor
    "layer_norm": lambda ts: ad.tsum(ad.mul(ad.layer_norm(
        ts[0], Tensor(np.ones(4)), Tensor(np.zeros(4))), ts[1])),
    "l2_normalize": lambda ts: ad.tsum(ad.mul(ad.l2_normalize(ts[0]), ts[1])),
    "attention": lambda ts: ad.tsum(ad.matmul(ad.softmax(
        ad.mul(ad.matmul(ts[0], ad.transpose(ts[1])), 0.5), axis=-1), ts[1])),
}


@dataclass
class CheckResult:
    name: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def row(self) -> dict:
        return {"check": self.name, "seed": self.seed,
                "max_rel_error": self.report.max_rel_error,
                "n_checked": self.report.n_checked,
                "status": "pass" if self.passed else "fail"}


def _toy_model(seed: int) -> CapeModel:
    return CapeModel(ModelConfig(**TOY_CONFIG), seed=seed)


def check_ops(n_seeds: int = 10, tolerance: float = 1e-4) -> list[CheckResult]:
    out = []
    for name, fn in sorted(OP_CASES.items()):
        for seed in range(n_seeds):
            rng = np.random.default_rng(10_000 + seed)
            a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
            report = grad_check(fn, [a, b], step=1e-5, tolerance=tolerance)
            out.append(CheckResult(f"op/{name}", seed, report))
    return out


def check_individual_losses(n_seeds: int = 10,
                            tolerance: float = 1e-4) -> list[CheckResult]:
    out = []
    for seed in range(n_seeds):
        rng = np.random.default_rng(20_000 + seed)
        x, xh = rng.normal(size=(2, 12)), rng.normal(size=(2, 12))
        out.append(CheckResult("loss/recon", seed, grad_check(
            lambda ts: recon_loss(ts[0], x), [xh], tolerance=tolerance)))
        va, vb = rng.normal(size=(3, 4, 6)), rng.normal(size=(3, 4, 6))
        out.append(CheckResult("loss/contrastive", seed, grad_check(
            lambda ts: contrastive_loss(ts[0], ts[1]), [va, vb],
            tolerance=tolerance)))
        pi = rng.uniform(0.05, 0.95, size=8)
        out.append(CheckResult("loss/monotonic", seed, grad_check(
            lambda ts: ad.add(monotonic_loss(ts[0], "inc", 0.013),
                              monotonic_loss(ts[0], "dec", 0.017)),
            [pi], tolerance=tolerance)))
        field = rng.uniform(size=(5, 3))
        out.append(CheckResult("loss/smoothness", seed, grad_check(
            lambda ts: smoothness_loss(ts[0]), [field], tolerance=tolerance)))

        model = _toy_model(seed)
        names = ["prototypes.E", "calib", "embed.W"]

        def ngm_hinge(tensors):
            for name, t in zip(names, tensors):
                model.params[name] = t
            # a range the raw bounds sit outside, so the hinge is active
            return ngm_proxy(model, (5.0, 6.0)).loss

        points = [model.params[n].data.copy() for n in names]
        out.append(CheckResult("loss/ngm_hinge", seed, grad_check(
            ngm_hinge, points, tolerance=tolerance, max_coords_per_tensor=8,
            rng=np.random.default_rng(seed))))
    return out


def check_full_objectives(n_seeds: int = 10, tolerance: float = 1e-4,
                          coords_per_tensor: int = 4) -> list[CheckResult]:
    out = []
    for seed in range(n_seeds):
        rng = np.random.default_rng(30_000 + seed)
        model = _toy_model(seed)
        names = list(model.params)
        weights = LossWeights(lambda_align=0.1, r0_range=(0.0, 0.2))
        x = rng.normal(size=(2, 12))
        mask = np.zeros((2, 3), dtype=bool)
        mask[:, seed % 3] = True
        va = rng.normal(size=(2, 12))
        vb = np.hstack([rng.normal(size=(2, 4)), va[:, 4:]])
        omega = np.tile(np.arange(1, 3), (2, 1))

        def f_pre(tensors):
            for name, t in zip(names, tensors):
                model.params[name] = t
            return pretrain_loss(model, x, mask, va, vb, omega, omega,
                                 weights).total

        points = [model.params[n].data.copy() for n in names]
        out.append(CheckResult("full/pretrain", seed, grad_check(
            f_pre, points, tolerance=tolerance,
            max_coords_per_tensor=coords_per_tensor,
            rng=np.random.default_rng(100 + seed))))

        y = rng.normal(size=(2, 2))

        def f_fin(tensors):
            for name, t in zip(names, tensors):
                model.params[name] = t
            return finetune_loss(model, x, y, weights).total

        out.append(CheckResult("full/finetune", seed, grad_check(
            f_fin, points, tolerance=tolerance,
            max_coords_per_tensor=coords_per_tensor,
            rng=np.random.default_rng(200 + seed))))
    return out


def run_suite(n_seeds: int = 10) -> list[CheckResult]:
    results = check_ops(n_seeds)
    results += check_individual_losses(n_seeds)
    results += check_full_objectives(n_seeds)
    return results
