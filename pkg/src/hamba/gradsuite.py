"""Finite-difference gradient suites for every differentiable kernel and the composed model.

Each case builds small random inputs, runs the central-difference checker
and is judged at 1e-6 for operations linear in every input (where the
difference quotient is exact up to rounding) and 1e-4 otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import GradCheckReport, ParamStore, Tensor, check_function, finite_diff_check, ops

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4


@dataclass
class GradCase:
    name: str
    tol: float
    run: Callable[[], GradCheckReport]


def _rng(seed):
    return np.random.default_rng(seed)


def _away_from(x, points, margin=1e-3):
    """Nudge entries of ``x`` away from kinks at ``points``."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.copysign(margin * 2, x - p + 1e-300), x)
    return x


def kernel_cases() -> list[GradCase]:
    r = _rng(0)
    a23, b23 = r.standard_normal((2, 3)), r.standard_normal((2, 3))
    pos = r.uniform(0.5, 2.0, (2, 3))
    cases = []

    def lin(name, fn, *arrays):
        cases.append(GradCase(name, LINEAR_TOL, lambda: check_function(fn, *arrays)))

    def nonlin(name, fn, *arrays):
        cases.append(GradCase(name, NONLINEAR_TOL, lambda: check_function(fn, *arrays)))

    lin("add", ops.add, a23, b23)
    lin("sub", ops.sub, a23, b23)
    lin("neg", ops.neg, a23)
    lin("mul", ops.mul, a23, b23)
    lin("mul_scalar", lambda x: ops.mul(x, 2.5), a23)
    lin("matmul", ops.matmul, r.standard_normal((3, 4)), r.standard_normal((4, 2)))
    lin("linear", ops.linear, r.standard_normal((2, 5, 3)), r.standard_normal((3, 4)), r.standard_normal(4))
    lin("einsum", lambda x, y: ops.einsum("bij,jk->bik", x, y), r.standard_normal((2, 3, 4)),
        r.standard_normal((4, 2)))
    lin("reshape", lambda x: ops.reshape(x, (3, 2)), a23)
    lin("transpose", lambda x: ops.transpose(x, (2, 0, 1)), r.standard_normal((2, 3, 4)))
    lin("swapaxes", lambda x: ops.swapaxes(x, 0, 2), r.standard_normal((2, 3, 4)))
    lin("flip", lambda x: ops.flip(x, 1), a23)
    lin("broadcast_to", lambda x: ops.broadcast_to(x, (4, 3)), r.standard_normal(3))
    lin("concat", lambda x, y: ops.concat([x, y], axis=0), a23, b23)
    lin("stack", lambda x, y: ops.stack([x, y], axis=1), a23, b23)
    lin("split", lambda x: ops.mul(ops.split(x, [1, 2], axis=1)[1], 3.0), a23)
    lin("index_basic", lambda x: x[:, 1:], a23)
    lin("index_advanced", lambda x: x[np.array([0, 1, 1])], a23)
    lin("sum", lambda x: ops.sum(x, axis=0), a23)
    lin("mean", lambda x: ops.mean(x, axis=1, keepdims=True), a23)
    lin("mean_pool", ops.mean_pool, r.standard_normal((2, 4, 3, 5)))
    lin("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
        r.standard_normal((2, 5, 4, 2)), r.standard_normal((3, 3, 2, 3)), r.standard_normal(3))
    lin("conv2d_1x1", lambda x, w, b: ops.conv2d(x, w, b),
        r.standard_normal((1, 3, 2, 4)), r.standard_normal((1, 1, 4, 2)), r.standard_normal(2))
    lin("depthwise_conv1d", ops.depthwise_conv1d, r.standard_normal((2, 5, 3)), r.standard_normal((3, 3)))
    lin("grid_sample_features", lambda f: ops.grid_sample(f, Tensor(np.array([[[0.3, 1.6], [2.2, 0.7]]] * 2))),
        r.standard_normal((2, 4, 3, 2)))

    nonlin("div", ops.div, a23, pos)
    nonlin("exp", ops.exp, a23)
    nonlin("log", ops.log, pos)
    nonlin("square", ops.square, a23)
    nonlin("sqrt", ops.sqrt, pos)
    nonlin("abs", ops.abs, _away_from(a23, [0.0]))
    nonlin("relu", ops.relu, _away_from(a23, [0.0]))
    nonlin("sigmoid", ops.sigmoid, a23)
    nonlin("silu", ops.silu, a23)
    nonlin("softplus", ops.softplus, a23)
    nonlin("gelu", ops.gelu, a23)
    nonlin("tanh", ops.tanh, a23)
    nonlin("clamp", lambda x: ops.clamp(x, -0.5, 0.5), _away_from(a23, [-0.5, 0.5]))
    nonlin("softmax", lambda x: ops.softmax(x, axis=-1), a23)
    mask = np.array([[True, False, True], [True, True, False]])
    nonlin("masked_softmax", lambda x: ops.masked_softmax(x, mask), a23)
    nonlin("layer_norm", ops.layer_norm, r.standard_normal((2, 4, 5)), r.standard_normal(5), r.standard_normal(5))
    nonlin("batch_norm_train",
           lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(3), np.ones(3), True),
           r.standard_normal((4, 2, 3)), r.standard_normal(3), r.standard_normal(3))
    nonlin("batch_norm_eval",
           lambda x, g, b: ops.batch_norm(x, g, b, np.full(3, 0.2), np.full(3, 1.5), False),
           r.standard_normal((4, 3)), r.standard_normal(3), r.standard_normal(3))
    nonlin("grid_sample_coords",
           lambda f, c: ops.grid_sample(f, c),
           r.standard_normal((2, 4, 3, 2)), np.array([[[0.3, 1.6], [2.2, 0.7]], [[1.4, 0.2], [0.6, 1.3]]]))
    nonlin("axis_angle_to_matrix", ops.axis_angle_to_matrix, r.standard_normal((4, 3)))
    nonlin("axis_angle_to_matrix_small", ops.axis_angle_to_matrix, 1e-4 * r.standard_normal((3, 3)))
    x = r.standard_normal((2, 6, 3))
    nonlin("selective_scan_kernel",
           lambda x, d, a, b, c, s: ops.selective_scan_kernel(x, ops.softplus(d), a, b, c, s),
           x, r.standard_normal((2, 6, 3)), -r.uniform(0.5, 2.0, (3, 2)), r.standard_normal((2, 6, 2)),
           r.standard_normal((2, 6, 2)), r.standard_normal(3))
    nonlin("selective_scan_kernel_tiny_step",
           lambda x, d, a, b, c, s: ops.selective_scan_kernel(x, d, a, b, c, s),
           x, r.uniform(1e-5, 2e-5, (2, 6, 3)), -r.uniform(0.5, 2.0, (3, 2)), r.standard_normal((2, 6, 2)),
           r.standard_normal((2, 6, 2)), r.standard_normal(3))
    return cases


MODULE_STEP = 1e-5   # composite functions: larger step keeps rounding noise well below tolerance


def _store_check(build: Callable[[ParamStore, np.random.Generator], Callable[[], Tensor]], seed: int = 0,
                 max_entries=None) -> Callable[[], GradCheckReport]:
    def run():
        store = ParamStore()
        f = build(store, _rng(seed))
        return finite_diff_check(f, store, h=MODULE_STEP, max_entries=max_entries, seed=seed)
    return run


def module_cases() -> list[GradCase]:
    from .graph import GCNLayer
    from .hand.kinematics import FOCAL, forward_kinematics, perspective_project
    from .losses import Annotations, Discriminators, discriminator_loss, total_loss
    from .model import (Downsample, GSSBlock, MambaLayer, PipelineConfig, TokenSampler, gss_block)
    from .ssm import SS2D, ScanDirection, init_ssm_params, selective_scan

    cfg = PipelineConfig.toy()

    def projected(fn, shape_seed=7):
        probe = {}

        def f():
            out = fn()
            if "r" not in probe:
                probe["r"] = Tensor(_rng(shape_seed).standard_normal(out.shape))
            return ops.sum(ops.mul(out, probe["r"]))
        return f

    def ssm_scan(store, rng):
        p = init_ssm_params(store, "scan", 3, 2, rng)
        x = store.add("x", rng.standard_normal((2, 5, 3)))
        return projected(lambda: selective_scan(x, p, ScanDirection.BACKWARD))

    def ss2d(store, rng):
        block = SS2D(store, "ss2d", 4, rng, state_dim=1)
        x = store.add("x", rng.standard_normal((2, 6, 4)))
        return projected(lambda: block(x))

    def mamba(store, rng):
        layer = MambaLayer(store, "mamba", 4, rng, cfg)
        x = store.add("x", rng.standard_normal((2, 6, 4)))
        return projected(lambda: layer(x))

    def gcn(store, rng):
        layer = GCNLayer(store, "gcn", 4, rng)
        store["gcn.adj_logits"].data[...] = rng.standard_normal((21, 21))
        x = store.add("x", rng.standard_normal((3, 21, 4)))
        return projected(lambda: layer(x))

    def downsample(store, rng):
        layer = Downsample(store, "down", 8, 4, rng)
        x = store.add("x", rng.standard_normal((2, 3, 2, 8)))
        return projected(lambda: layer(x))

    def sampler(store, rng):
        layer = TokenSampler(store, "ts", 4, rng)
        grid = store.add("grid", rng.standard_normal((2, 16, 12, 4)))
        j2d = store.add("j2d", rng.uniform(20, 170, (2, 21, 2)))
        return projected(lambda: layer(grid, j2d))

    def gss(store, rng):
        block = GSSBlock(store, "gss", cfg, rng)
        grid = store.add("grid", rng.standard_normal((2, 16, 12, 4)))
        t = store.add("t", rng.standard_normal((2, 21, 4)))
        return projected(lambda: gss_block(gss_block(t, 1, grid, block), 2, grid, block))

    def kinematics(store, rng):
        theta = store.add("theta", 0.4 * rng.standard_normal((2, 48)))
        beta = store.add("beta", rng.standard_normal((2, 10)))
        cam = store.add("cam", np.array([[0.05, -0.02, 7.0], [0.0, 0.03, 6.0]]))

        def run():
            j3d, verts = forward_kinematics(theta, beta)
            j2d = perspective_project(j3d, FOCAL, cam)
            return ops.concat([ops.reshape(j2d, (2, -1)), ops.reshape(ops.mul(verts, 100.0), (2, -1))], axis=1)
        return projected(run)

    def discriminators(store, rng):
        disc = Discriminators(rng, hidden=5, store=store)
        theta = store.add("theta", 0.4 * rng.standard_normal((3, 48)))
        beta = store.add("beta", rng.standard_normal((3, 10)))
        real = (0.4 * rng.standard_normal((3, 48)), rng.standard_normal((3, 10)))
        fake = (0.4 * rng.standard_normal((3, 48)), rng.standard_normal((3, 10)))
        return lambda: ops.add(ops.sum(disc(theta, beta)), discriminator_loss(disc, *real, *fake))

    def losses(store, rng):
        disc = Discriminators(rng, hidden=4, store=store)
        pred = type("P", (), {})()
        pred.theta = store.add("pred.theta", 0.3 * rng.standard_normal((2, 48)))
        pred.beta = store.add("pred.beta", rng.standard_normal((2, 10)))
        pred.joints3d = store.add("pred.joints3d", rng.standard_normal((2, 21, 3)))
        pred.joints2d = store.add("pred.joints2d", 100 * rng.standard_normal((2, 21, 2)))
        gt = Annotations(joints2d=100 * rng.standard_normal((2, 21, 2)), joints3d=rng.standard_normal((2, 21, 3)),
                         theta=rng.standard_normal((2, 48)), beta=rng.standard_normal((2, 10)),
                         has_3d=np.array([True, False]))
        return lambda: total_loss(pred, gt, disc=disc)[0]

    return [
        GradCase("ssm.selective_scan", NONLINEAR_TOL, _store_check(ssm_scan)),
        GradCase("ssm.ss2d", NONLINEAR_TOL, _store_check(ss2d)),
        GradCase("model.mamba_layer", NONLINEAR_TOL, _store_check(mamba)),
        GradCase("graph.gcn_layer", NONLINEAR_TOL, _store_check(gcn)),
        GradCase("model.downsample", NONLINEAR_TOL, _store_check(downsample)),
        GradCase("model.token_sampler", NONLINEAR_TOL, _store_check(sampler)),
        # seed 0 places a GCN ReLU input within the difference step of its kink
        GradCase("model.gss_blocks", NONLINEAR_TOL, _store_check(gss, seed=1)),
        GradCase("hand.kinematics_projection", NONLINEAR_TOL, _store_check(kinematics)),
        GradCase("losses.discriminators", NONLINEAR_TOL, _store_check(discriminators)),
        GradCase("losses.total_loss", NONLINEAR_TOL, _store_check(losses)),
    ]


def composition_case(max_entries: int = 6) -> GradCase:
    """hamba_forward -> total_loss end to end at toy widths."""
    from .hand.synth import synth_sample
    from .losses import Annotations, Discriminators, total_loss
    from .model import HambaModel, PipelineConfig, hamba_forward

    def run():
        rng = _rng(3)
        samples = [synth_sample(rng) for _ in range(2)]
        images = Tensor(np.stack([img for img, _ in samples]))
        gt = Annotations(joints2d=np.stack([g.joints2d for _, g in samples]),
                         joints3d=np.stack([g.joints3d for _, g in samples]),
                         theta=np.stack([g.params.theta for _, g in samples]),
                         beta=np.stack([g.params.beta for _, g in samples]))
        model = HambaModel(PipelineConfig.toy(head_init_scale=1.0), seed=0)
        disc = Discriminators(rng, hidden=4, store=model.store)

        def f():
            return total_loss(hamba_forward(images, model), gt, disc=disc)[0]
        return finite_diff_check(f, model.store, h=MODULE_STEP, max_entries=max_entries, seed=0)

    return GradCase("model.hamba_forward_total_loss", NONLINEAR_TOL, run)


def all_cases(include_composition: bool = True) -> list[GradCase]:
    cases = kernel_cases() + module_cases()
    if include_composition:
        cases.append(composition_case())
    return cases


def run_suite(cases=None) -> list[tuple[GradCase, GradCheckReport]]:
    return [(case, case.run()) for case in (cases if cases is not None else all_cases())]
