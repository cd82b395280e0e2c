"""The graph-guided state-space hand decoder and its end-to-end forward pass.

Pipeline: convolutional backbone stub -> 1x1 downsampler -> joints regressor
(state-space blocks over all grid tokens) -> projected 2-D joints -> token
sampler -> stack of GSS blocks over 21 joint tokens + 1 global token ->
fusion MLP -> hand parameters -> kinematics -> projection.

Tokens are laid out (B, J, C) throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .autodiff import ParamStore, Tensor, ops
from .graph import NUM_JOINTS, GCNLayer
from .hand.kinematics import (FOCAL, IMAGE_SIZE, NUM_CAM, NUM_POSE, NUM_SHAPE, PRINCIPAL,
                              forward_kinematics, perspective_project)
from .hand.params import HandParams, HandPrediction
from .nn import MLP, BatchNorm, Conv2d, FeedForward, LayerNorm, Linear, Module
from .ssm import SS2D

PATCH = 16
GRID_SHAPE = (IMAGE_SIZE[0] // PATCH, IMAGE_SIZE[1] // PATCH)   # (16, 12)
GRID_TOKENS = GRID_SHAPE[0] * GRID_SHAPE[1]                     # 192
SCAN_TOKENS = NUM_JOINTS + 1                                    # 22
MAX_LOG_DEPTH = 3.0

ABLATIONS = {
    # CLI name -> flag switched off
    "ts_branch": "use_ts_branch",
    "2d_branch": "use_2d_branch",
    "gss_branch": "use_gss_branch",
    "global_branch": "use_global_branch",
    "token_sampler": "use_token_sampler",
    "bidirectional": "use_bidirectional",
    "gcn": "use_gcn",
    "graph_order": "use_graph_order",
    "mamba": "use_mamba",
}


@dataclass(frozen=True)
class PipelineConfig:
    num_gss_blocks: int = 4
    num_jr_blocks: int = 4
    dim: int = 512                     # token width after downsampling
    backbone_dim: int = 1280
    backbone_widths: tuple = (64, 128, 256)   # first three stub stages; the fourth is backbone_dim
    fusion_width: int = 1024
    state_dim: int = 1
    ssm_ratio: int = 2
    mlp_ratio: int = 4
    conv_kernel: int = 3
    depth_scale: float = 7.0           # camera depth at zero raw output, meters
    head_init_scale: float = 0.01
    shuffle_seed: int = 1234
    use_ts_branch: bool = True
    use_2d_branch: bool = True
    use_gss_branch: bool = True
    use_global_branch: bool = True
    use_gcn: bool = True
    use_bidirectional: bool = True
    use_graph_order: bool = True
    use_mamba: bool = True
    use_token_sampler: bool = True

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Reduced widths, full topology: trainable on one CPU core."""
        base = dict(dim=32, backbone_dim=64, backbone_widths=(8, 16, 32), fusion_width=256)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy(cls, **overrides) -> "PipelineConfig":
        """Tiny widths for gradient checks."""
        base = dict(dim=4, backbone_dim=6, backbone_widths=(2, 3, 4), fusion_width=8,
                    num_gss_blocks=2, num_jr_blocks=1)
        base.update(overrides)
        return cls(**base)

    def ablate(self, *names: str) -> "PipelineConfig":
        unknown = [n for n in names if n not in ABLATIONS]
        if unknown:
            raise ValueError(f"unknown ablation(s) {unknown}; choose from {sorted(ABLATIONS)}")
        return replace(self, **{ABLATIONS[n]: False for n in names})

    @property
    def fusion_input_width(self) -> int:
        return SCAN_TOKENS * self.dim + self.dim + NUM_JOINTS * self.dim + 2 * NUM_JOINTS

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------- components

class BackboneStub(Module):
    """Four stride-2 3x3 conv stages: (B, 256, 192, 3) -> (B, 16, 12, backbone_dim)."""

    def __init__(self, store, prefix, widths, rng):
        super().__init__(store, prefix)
        chans = [3, *widths]
        self.convs = [Conv2d(store, self._name(f"stage{i}.conv"), a, b, 3, rng, stride=2, padding=1, bias=False)
                      for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
        self.norms = [BatchNorm(store, self._name(f"stage{i}.bn"), b) for i, b in enumerate(chans[1:])]

    def forward(self, image: Tensor) -> Tensor:
        x = image
        for conv, bn in zip(self.convs, self.norms):
            x = ops.relu(bn(conv(x)))
        return x


class Downsample(Module):
    """1x1 conv -> BatchNorm -> ReLU -> 1x1 conv."""

    def __init__(self, store, prefix, c_in: int, c_out: int, rng):
        super().__init__(store, prefix)
        self.c_in = c_in
        self.conv1 = Conv2d(store, self._name("conv1"), c_in, c_out, 1, rng, bias=False)   # BN follows
        self.bn = BatchNorm(store, self._name("bn"), c_out)
        self.conv2 = Conv2d(store, self._name("conv2"), c_out, c_out, 1, rng)

    def forward(self, grid: Tensor) -> Tensor:
        if grid.ndim != 4 or grid.shape[-1] != self.c_in:
            raise ops.ShapeError("downsample", grid.shape, detail=f"expected {self.c_in} channels")
        return self.conv2(ops.relu(self.bn(self.conv1(grid))))


class MambaLayer(Module):
    """y = z + SS2D(z); out = y + FFN(LN(y))."""

    def __init__(self, store, prefix, dim: int, rng, cfg: PipelineConfig, bidirectional: bool = True):
        super().__init__(store, prefix)
        self.ss2d = SS2D(store, self._name("ss2d"), dim, rng, state_dim=cfg.state_dim,
                         ssm_ratio=cfg.ssm_ratio, conv_kernel=cfg.conv_kernel, bidirectional=bidirectional)
        self.norm = LayerNorm(store, self._name("norm"), dim)
        self.ffn = FeedForward(store, self._name("ffn"), dim, rng, ratio=cfg.mlp_ratio)

    def forward(self, z: Tensor) -> Tensor:
        y = ops.add(z, self.ss2d(z))
        return ops.add(y, self.ffn(self.norm(y)))


def _head(store, name, d_in, d_out, rng, scale):
    head = Linear(store, name, d_in, d_out, rng)
    head.weight.data *= scale
    head.bias.data[:] = 0.0
    return head


class JointsRegressor(Module):
    """State-space blocks over the row-major flattened grid, mean-pool, three linear heads."""

    def __init__(self, store, prefix, cfg: PipelineConfig, rng):
        super().__init__(store, prefix)
        self.blocks = [MambaLayer(store, self._name(f"blocks.{i}"), cfg.dim, rng, cfg)
                       for i in range(cfg.num_jr_blocks)]
        self.theta_head = _head(store, self._name("theta_head"), cfg.dim, NUM_POSE, rng, cfg.head_init_scale)
        self.beta_head = _head(store, self._name("beta_head"), cfg.dim, NUM_SHAPE, rng, cfg.head_init_scale)
        self.cam_head = _head(store, self._name("cam_head"), cfg.dim, NUM_CAM, rng, cfg.head_init_scale)
        self.dim = cfg.dim

    def forward(self, grid: Tensor):
        if grid.ndim != 4 or grid.shape[1:] != GRID_SHAPE + (self.dim,):
            raise ops.ShapeError("joints_regressor", grid.shape, GRID_SHAPE + (self.dim,))
        bsz = grid.shape[0]
        x = ops.reshape(grid, (bsz, GRID_TOKENS, self.dim))
        for block in self.blocks:
            x = block(x)
        pooled = ops.mean(x, axis=1)
        return self.theta_head(pooled), self.beta_head(pooled), self.cam_head(pooled)


def pixel_to_grid(joints2d: Tensor) -> Tensor:
    """Image pixels -> continuous grid-cell coordinates (cell centers are integers)."""
    return ops.sub(ops.mul(joints2d, 1.0 / PATCH), 0.5)


class TokenSampler(Module):
    """Bilinear sampling at the joints followed by Conv1d(k=1) -> BN -> ReLU -> Conv1d(k=1)."""

    def __init__(self, store, prefix, dim: int, rng):
        super().__init__(store, prefix)
        self.conv1 = Linear(store, self._name("conv1"), dim, dim, rng, bias=False)   # BN follows
        self.bn = BatchNorm(store, self._name("bn"), dim)
        self.conv2 = Linear(store, self._name("conv2"), dim, dim, rng)

    def forward(self, grid: Tensor, joints2d: Tensor) -> Tensor:
        if not np.all(np.isfinite(joints2d.data)):
            raise ValueError("token_sampler: non-finite joint coordinates")
        sampled = ops.grid_sample(grid, pixel_to_grid(joints2d))
        return self.conv2(ops.relu(self.bn(self.conv1(sampled))))


def token_sampler(grid: Tensor, joints2d: Tensor, sampler: TokenSampler) -> Tensor:
    return sampler(grid, joints2d)


class GSSBlock(Module):
    def __init__(self, store, prefix, cfg: PipelineConfig, rng):
        super().__init__(store, prefix)
        self.gcn = GCNLayer(store, self._name("gcn"), cfg.dim, rng) if cfg.use_gcn else None
        self.mamba = (MambaLayer(store, self._name("mamba"), cfg.dim, rng, cfg,
                                 bidirectional=cfg.use_bidirectional) if cfg.use_mamba else None)
        self.order: Optional[np.ndarray] = None
        if not cfg.use_graph_order:
            perm = np.random.default_rng(cfg.shuffle_seed).permutation(NUM_JOINTS)
            self.order = np.concatenate([perm, [NUM_JOINTS]])

    def forward(self, joints: Tensor, global_token: Tensor) -> Tensor:
        t = self.gcn(joints) if self.gcn is not None else joints
        z = ops.concat([t, global_token], axis=1)
        if self.mamba is None:
            return z
        if self.order is None:
            return self.mamba(z)
        out = self.mamba(z[:, self.order])
        return out[:, np.argsort(self.order)]


def gss_block(t_in: Tensor, l: int, grid: Tensor, block: GSSBlock) -> Tensor:
    """One GSS block; ``l`` is 1-based.

    Block 1 takes the 21 sampled tokens and uses the grid mean as the global
    token; later blocks take the previous 22-token output and split token 22
    off as the global token.
    """
    if l < 1:
        raise ValueError(f"gss_block: block index must be >= 1, got {l}")
    if t_in.ndim != 3:
        raise ops.ShapeError("gss_block", t_in.shape)
    expected = NUM_JOINTS if l == 1 else SCAN_TOKENS
    if t_in.shape[1] != expected:
        raise ValueError(f"gss_block: block {l} takes {expected} tokens, got {t_in.shape[1]}")
    if l == 1:
        joints, global_token = t_in, ops.reshape(ops.mean_pool(grid), (grid.shape[0], 1, grid.shape[-1]))
    else:
        joints, global_token = ops.split(t_in, [NUM_JOINTS, 1], axis=1)
    return block(joints, global_token)


class FusionHeads(Module):
    """Concatenate the enabled branches (disabled ones are zero-filled), MLP trunk, three heads."""

    def __init__(self, store, prefix, cfg: PipelineConfig, rng):
        super().__init__(store, prefix)
        self.cfg = cfg
        w = cfg.fusion_width
        self.trunk = MLP(store, self._name("trunk"), [cfg.fusion_input_width, w, w], rng)
        self.theta_head = _head(store, self._name("theta_head"), w, NUM_POSE, rng, cfg.head_init_scale)
        self.beta_head = _head(store, self._name("beta_head"), w, NUM_SHAPE, rng, cfg.head_init_scale)
        self.cam_head = _head(store, self._name("cam_head"), w, NUM_CAM, rng, cfg.head_init_scale)

    def forward(self, gss: Tensor, global_mean: Tensor, sampled: Tensor, joints2d: Tensor, cam_hat: Tensor):
        cfg = self.cfg
        enabled = (cfg.use_gss_branch, cfg.use_global_branch, cfg.use_ts_branch, cfg.use_2d_branch)
        if not any(enabled):
            raise ValueError("fusion_and_heads: every branch is disabled")
        bsz = joints2d.shape[0]
        widths = (SCAN_TOKENS * cfg.dim, cfg.dim, NUM_JOINTS * cfg.dim, 2 * NUM_JOINTS)
        coords = ops.mul(ops.sub(joints2d, Tensor(np.broadcast_to(PRINCIPAL, joints2d.shape))),
                         1.0 / IMAGE_SIZE[0])
        parts = []
        for on, t, width in zip(enabled, (gss, global_mean, sampled, coords), widths):
            parts.append(ops.reshape(t, (bsz, width)) if on else Tensor(np.zeros((bsz, width))))
        h = ops.relu(self.trunk(ops.concat(parts, axis=1)))
        cam_raw = ops.add(self.cam_head(h), cam_hat)
        return self.theta_head(h), self.beta_head(h), cam_raw


def fusion_and_heads(gss, global_mean, sampled, joints2d, cam_hat, heads: FusionHeads):
    return heads(gss, global_mean, sampled, joints2d, cam_hat)


def decode_camera(raw: Tensor, depth_scale: float) -> Tensor:
    """(r_x, r_y, r_z) -> (r_x, r_y, depth_scale * exp(clamp(r_z)))."""
    xy, rz = ops.split(raw, [2, 1], axis=-1)
    z = ops.mul(ops.exp(ops.clamp(rz, -MAX_LOG_DEPTH, MAX_LOG_DEPTH)), depth_scale)
    return ops.concat([xy, z], axis=-1)


def encode_camera(cam: np.ndarray, depth_scale: float) -> np.ndarray:
    cam = np.asarray(cam, dtype=np.float64)
    return np.concatenate([cam[..., :2], np.log(cam[..., 2:] / depth_scale)], axis=-1)


# ---------------------------------------------------------------- full model

@dataclass
class ForwardOutput:
    theta: Tensor
    beta: Tensor
    cam: Tensor
    joints3d: Tensor
    joints2d: Tensor
    vertices: Tensor
    jr_theta: Tensor
    jr_beta: Tensor
    jr_cam: Tensor
    jr_joints3d: Tensor
    jr_joints2d: Tensor
    scan_tokens: int
    trace: dict = field(default_factory=dict)

    def prediction(self, i: int = 0) -> HandPrediction:
        params = HandParams(self.theta.data[i], self.beta.data[i], self.cam.data[i])
        return HandPrediction(params, self.joints3d.data[i].copy(), self.joints2d.data[i].copy(),
                              self.vertices.data[i].copy())


class HambaModel(Module):
    def __init__(self, cfg: PipelineConfig, seed: int = 0, store: Optional[ParamStore] = None):
        store = store if store is not None else ParamStore()
        super().__init__(store, "")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = BackboneStub(store, "backbone", (*cfg.backbone_widths, cfg.backbone_dim), rng)
        self.downsample = Downsample(store, "downsample", cfg.backbone_dim, cfg.dim, rng)
        self.jr = JointsRegressor(store, "jr", cfg, rng)
        if cfg.use_token_sampler:
            self.sampler = TokenSampler(store, "sampler", cfg.dim, rng)
            self.joint_embed = None
        else:
            self.sampler = None
            self.joint_embed = store.add("joint_embed", rng.normal(0.0, 0.02, (NUM_JOINTS, cfg.dim)))
        # without the GSS branch nothing consumes the blocks' output, so none are built
        n_blocks = cfg.num_gss_blocks if cfg.use_gss_branch else 0
        self.blocks = [GSSBlock(store, f"gss.{i}", cfg, rng) for i in range(n_blocks)]
        self.fusion = FusionHeads(store, "fusion", cfg, rng)

    def forward(self, image) -> ForwardOutput:
        return hamba_forward(image, self)


def hamba_forward(image, model: HambaModel) -> ForwardOutput:
    """Run the whole pipeline on a (B, 256, 192, 3) or (256, 192, 3) image."""
    cfg = model.cfg
    image = ops.as_tensor(image)
    if image.ndim == 3:
        image = ops.reshape(image, (1,) + image.shape)
    if image.shape[1:] != IMAGE_SIZE + (3,):
        raise ops.ShapeError("hamba_forward", image.shape, IMAGE_SIZE + (3,))
    bsz = image.shape[0]
    trace = {"image": image.shape}

    feats = model.backbone(image)
    trace["backbone"] = feats.shape
    grid = model.downsample(feats)
    trace["downsample"] = grid.shape

    jr_theta, jr_beta, jr_cam_raw = model.jr(grid)
    jr_cam = decode_camera(jr_cam_raw, cfg.depth_scale)
    jr_j3d, _ = forward_kinematics(jr_theta, jr_beta, with_vertices=False)
    jr_j2d = perspective_project(jr_j3d, FOCAL, jr_cam)
    trace["jr"] = (jr_theta.shape, jr_beta.shape, jr_cam.shape)
    trace["jr_joints2d"] = jr_j2d.shape

    global_mean = ops.mean_pool(grid)                        # (B, C)
    if model.sampler is not None:
        sampled = token_sampler(grid, jr_j2d, model.sampler)
    else:
        embed = ops.broadcast_to(model.joint_embed, (bsz, NUM_JOINTS, cfg.dim))
        sampled = ops.add(embed, ops.broadcast_to(ops.reshape(global_mean, (bsz, 1, cfg.dim)), embed.shape))
    trace["sampled"] = sampled.shape

    tokens = None
    for l, block in enumerate(model.blocks, start=1):
        tokens = gss_block(sampled if tokens is None else tokens, l, grid, block)
        trace[f"gss{l}"] = tokens.shape

    theta, beta, cam_raw = fusion_and_heads(tokens, global_mean, sampled, jr_j2d, jr_cam_raw, model.fusion)
    cam = decode_camera(cam_raw, cfg.depth_scale)
    joints3d, vertices = forward_kinematics(theta, beta)
    joints2d = perspective_project(joints3d, FOCAL, cam)
    trace["heads"] = (theta.shape, beta.shape, cam.shape)
    trace["mesh"] = vertices.shape
    trace["joints3d"] = joints3d.shape
    trace["joints2d"] = joints2d.shape
    return ForwardOutput(theta, beta, cam, joints3d, joints2d, vertices,
                         jr_theta, jr_beta, jr_cam, jr_j3d, jr_j2d,
                         scan_tokens=0 if tokens is None else tokens.shape[1], trace=trace)


def count_scan_tokens(cfg: PipelineConfig) -> dict:
    """Tokens entering each state-space scan, GSS decoder vs scanning the full grid."""
    reduction = 1.0 - SCAN_TOKENS / GRID_TOKENS
    return {"gss_tokens": SCAN_TOKENS, "grid_tokens": GRID_TOKENS,
            "reduction_pct": round(100.0 * reduction, 1), "num_gss_blocks": cfg.num_gss_blocks}


def scan_flops(tokens: int, cfg: PipelineConfig) -> int:
    """Multiply-adds of one bidirectional selective scan over ``tokens`` tokens (recurrence only)."""
    hidden = cfg.ssm_ratio * cfg.dim
    per_token = hidden * cfg.state_dim * 6 + hidden * (2 * cfg.state_dim + 2 * math.ceil(hidden / 16))
    directions = 2 if cfg.use_bidirectional else 1
    return directions * tokens * per_token
