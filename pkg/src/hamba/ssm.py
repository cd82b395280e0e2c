"""Selective state-space machinery: discretization, scans and the SS2D block."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ParamStore, Tensor, ops
from .autodiff.ops import expm1_over_z
from .nn import DepthwiseConv1d, LayerNorm, Linear, Module, uniform_fan_in


class ScanDirection(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


def zoh_discretize(a, b, delta):
    """Zero-order-hold discretization of a diagonal continuous SSM.

    Returns ``(exp(delta*a), (delta*a)^-1 (exp(delta*a) - 1) delta*b)`` elementwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("zoh_discretize: step size must be positive")
    if not np.all(np.isfinite(a)):
        raise ValueError("zoh_discretize: non-finite state matrix")
    z = delta * a
    return np.exp(z), expm1_over_z(z) * delta * b


@dataclass
class SsmParams:
    """Per-direction S6 parameters for a D-channel, N-state scan.

    ``a_log`` parameterizes A = -exp(a_log) (D, N); ``w_b``/``w_c`` map a token to
    the input-dependent B_t/C_t (D -> N); the step is
    softplus(x w_dt_down w_dt_up + b_dt) per channel.
    """

    a_log: Tensor
    d_skip: Tensor
    w_b: Tensor
    w_c: Tensor
    w_dt_down: Tensor
    w_dt_up: Tensor
    b_dt: Tensor

    @property
    def channels(self) -> int:
        return self.d_skip.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]


def init_ssm_params(store: ParamStore, prefix: str, channels: int, state_dim: int,
                    rng: np.random.Generator, dt_init: float = 0.01) -> SsmParams:
    rank = max(1, math.ceil(channels / 16))

    def add(name, value):
        return store.add(f"{prefix}.{name}", value)

    a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1)))
    return SsmParams(
        a_log=add("a_log", a_log),
        d_skip=add("d_skip", np.ones(channels)),
        w_b=add("w_b", uniform_fan_in(rng, (channels, state_dim), channels)),
        w_c=add("w_c", uniform_fan_in(rng, (channels, state_dim), channels)),
        w_dt_down=add("w_dt_down", uniform_fan_in(rng, (channels, rank), channels)),
        w_dt_up=add("w_dt_up", uniform_fan_in(rng, (rank, channels), rank)),
        # softplus(b_dt) == dt_init
        b_dt=add("b_dt", np.full(channels, math.log(math.expm1(dt_init)))),
    )


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


def selective_scan(x: Tensor, p: SsmParams, direction: ScanDirection = ScanDirection.FORWARD) -> Tensor:
    """Run the input-dependent recurrence over a (L, C) or (B, L, C) sequence."""
    xb, squeeze = _batched(x)
    if xb.shape[-1] != p.channels:
        raise ops.ShapeError("selective_scan", x.shape, p.d_skip.shape)
    if xb.shape[1] < 1:
        raise ValueError("selective_scan: empty sequence")
    if direction is ScanDirection.BACKWARD:
        xb = ops.flip(xb, 1)
    delta = ops.softplus(ops.linear(ops.linear(xb, p.w_dt_down), p.w_dt_up, p.b_dt))
    bmat = ops.linear(xb, p.w_b)
    cmat = ops.linear(xb, p.w_c)
    a = ops.neg(ops.exp(p.a_log))
    y = ops.selective_scan_kernel(xb, delta, a, bmat, cmat, p.d_skip)
    if direction is ScanDirection.BACKWARD:
        y = ops.flip(y, 1)
    return ops.reshape(y, x.shape) if squeeze else y


def bidirectional_scan(x: Tensor, p_fwd: SsmParams, p_bwd: SsmParams) -> Tensor:
    """Sum of a forward and a backward selective scan."""
    return ops.add(selective_scan(x, p_fwd, ScanDirection.FORWARD),
                   selective_scan(x, p_bwd, ScanDirection.BACKWARD))


class SS2D(Module):
    """Gate-free SS2D block over a 1-D token sequence.

    z'' = Linear(LN(z)); z''' = SiLU(DWConv_k(z'')); s = scan(z''');
    out = Linear(LN(s)).  The hidden width is ``ssm_ratio * dim``.
    """

    def __init__(self, store, prefix, dim: int, rng, state_dim: int = 1, ssm_ratio: int = 2,
                 conv_kernel: int = 3, bidirectional: bool = True):
        super().__init__(store, prefix)
        hidden = ssm_ratio * dim
        self.norm = LayerNorm(store, self._name("norm"), dim)
        self.in_proj = Linear(store, self._name("in_proj"), dim, hidden, rng, bias=False)
        self.dwconv = DepthwiseConv1d(store, self._name("dwconv"), hidden, conv_kernel, rng)
        self.scan_fwd = init_ssm_params(store, self._name("scan_fwd"), hidden, state_dim, rng)
        self.scan_bwd: Optional[SsmParams] = None
        if bidirectional:
            self.scan_bwd = init_ssm_params(store, self._name("scan_bwd"), hidden, state_dim, rng)
        self.out_norm = LayerNorm(store, self._name("out_norm"), hidden)
        self.out_proj = Linear(store, self._name("out_proj"), hidden, dim, rng, bias=False)

    def forward(self, z: Tensor) -> Tensor:
        zb, squeeze = _batched(z)
        h = self.in_proj(self.norm(zb))
        h = ops.silu(self.dwconv(h))
        if self.scan_bwd is not None:
            s = bidirectional_scan(h, self.scan_fwd, self.scan_bwd)
        else:
            s = selective_scan(h, self.scan_fwd, ScanDirection.FORWARD)
        out = self.out_proj(self.out_norm(s))
        return ops.reshape(out, z.shape) if squeeze else out


def ss2d_block(z: Tensor, block: SS2D) -> Tensor:
    return block(z)
