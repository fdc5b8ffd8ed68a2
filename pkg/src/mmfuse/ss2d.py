"""Four-directional selective scanning over an H x W token grid.

Each direction linearizes the grid with its own traversal order (row-major,
reversed row-major, column-major, reversed column-major), runs an
independent 1-D selective scan, maps the result back to grid order, and the
four outputs are merged by summation. The block wrapper adds projections, a
multiplicative gate, per-token layer normalization and a residual path.

All four directional scans are evaluated as one batched scan over a leading
direction axis, so the merge is trivially independent of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import Rng
from .scan import ScanParams, discretized_sequence, init_scan_params, scan_sequential
from .tensor import Tensor


@dataclass
class DirectionalPermutations:
    """The four traversal orders and their inverses over h*w tokens."""

    h: int
    w: int
    forward: np.ndarray  # [4, h*w]
    inverse: np.ndarray  # [4, h*w]

    @property
    def tokens(self) -> int:
        return self.h * self.w


def make_permutations(h: int, w: int) -> DirectionalPermutations:
    """dir 1 = row-major, dir 2 = its reverse, dir 3 = column-major
    (transpose scan), dir 4 = its reverse."""
    if h < 1 or w < 1:
        raise ConfigError(f"grid extents must be >= 1, got {h}x{w}")
    rowmajor = np.arange(h * w, dtype=np.int64)
    colmajor = rowmajor.reshape(h, w).T.reshape(-1)
    forward = np.stack([rowmajor, rowmajor[::-1], colmajor, colmajor[::-1]])
    inverse = np.argsort(forward, axis=1)
    return DirectionalPermutations(h=h, w=w, forward=forward, inverse=inverse)


def _lift(t: Tensor, mid: int) -> Tensor:
    """Insert ``mid`` singleton axes after the leading direction axis."""
    if mid <= 0:
        return t
    return T.reshape(t, t.shape[:1] + (1,) * mid + t.shape[1:])


def _stack_field(sps: Sequence[ScanParams], attr: str) -> Tensor:
    return T.stack([getattr(p, attr) for p in sps], axis=0)


def stacked_projection(xs: Tensor, sps: Sequence[ScanParams]) -> tuple[Tensor, Tensor, Tensor]:
    """project_params over a leading direction axis.

    ``xs`` is [K, ..., L, D] with one parameter set per direction; returns
    (delta, b_seq, c_seq) shaped [K, ..., L, D] / [K, ..., L, n].
    """
    mid = xs.ndim - 3  # batch axes between direction and (L, D)
    dw = _lift(_stack_field(sps, "delta_w"), mid)
    db = _lift(_stack_field(sps, "delta_b"), mid + 1)
    bcw = _lift(_stack_field(sps, "bc_w"), mid)
    bcb = _lift(_stack_field(sps, "bc_b"), mid + 1)
    delta = T.softplus(T.add(T.matmul(xs, dw), db))
    bc = T.add(T.matmul(xs, bcw), bcb)
    n = sps[0].state_size
    return delta, T.slice_axis(bc, 0, n, axis=-1), T.slice_axis(bc, n, 2 * n, axis=-1)


def stacked_state_matrix(sps: Sequence[ScanParams], mid: int) -> Tensor:
    """Effective A = -exp(a_log) per direction, lifted for broadcasting."""
    return _lift(T.neg(T.exp(_stack_field(sps, "a_log"))), mid)


def directional_scan(x: Tensor, sps: Sequence[ScanParams],
                     perms: DirectionalPermutations) -> Tensor:
    """Permute, scan per direction, inverse-permute, merge by summation."""
    _check_tokens(x, perms)
    xs = T.stack([T.take(x, perms.forward[k], axis=-2) for k in range(4)], axis=0)
    delta, b_seq, c_seq = stacked_projection(xs, sps)
    a = stacked_state_matrix(sps, x.ndim - 1)
    d_skip = _lift(_stack_field(sps, "d_skip"), x.ndim - 1)
    dseq = discretized_sequence(xs, delta, a, b_seq, c_seq, d_skip)
    y, _ = scan_sequential(dseq, xs)
    outs = [T.take(T.index(y, k, axis=0), perms.inverse[k], axis=-2) for k in range(4)]
    return T.add(T.add(outs[0], outs[1]), T.add(outs[2], outs[3]))


def _check_tokens(x: Tensor, perms: DirectionalPermutations) -> None:
    if x.shape[-2] != perms.tokens:
        raise ShapeError(
            f"token count {x.shape[-2]} does not match {perms.h}x{perms.w} grid")


@dataclass
class VssBlockParams:
    """Residual scan block: in/out projections, channelwise mixing, one scan
    parameter set per direction, layer-norm affine, multiplicative gate."""

    in_w: Tensor
    in_b: Tensor
    mix_scale: Tensor
    mix_shift: Tensor
    scans: list[ScanParams]
    ln_scale: Tensor
    ln_shift: Tensor
    gate_w: Tensor
    gate_b: Tensor
    out_w: Tensor
    out_b: Tensor
    perms: DirectionalPermutations

    def __post_init__(self):
        if len(self.scans) != 4:
            raise ConfigError(f"need one scan parameter set per direction, got {len(self.scans)}")
        dims = {(p.channels, p.state_size) for p in self.scans}
        if len(dims) != 1:
            raise ConfigError(f"directional scan params disagree on (D, n): {sorted(dims)}")

    def named_tensors(self, prefix: str = ""):
        for field in ("in_w", "in_b", "mix_scale", "mix_shift", "ln_scale",
                      "ln_shift", "gate_w", "gate_b", "out_w", "out_b"):
            yield f"{prefix}{field}", getattr(self, field)
        for k, p in enumerate(self.scans):
            yield from p.named_tensors(f"{prefix}scan{k}.")


def init_vss_params(rng: Rng, name: str, channels: int, state: int,
                    perms: DirectionalPermutations) -> VssBlockParams:
    lim = 1.0 / np.sqrt(channels)
    def u(field, shape):
        return Tensor(rng.uniform(f"{name}.{field}", shape, -lim, lim), requires_grad=True)

    return VssBlockParams(
        in_w=u("in_w", (channels, channels)),
        in_b=Tensor(np.zeros(channels), requires_grad=True),
        mix_scale=Tensor(np.ones(channels), requires_grad=True),
        mix_shift=Tensor(np.zeros(channels), requires_grad=True),
        scans=[init_scan_params(rng.child(f"{name}.dir{k}"), f"{name}.dir{k}",
                                channels, state) for k in range(4)],
        ln_scale=Tensor(np.ones(channels), requires_grad=True),
        ln_shift=Tensor(np.zeros(channels), requires_grad=True),
        gate_w=u("gate_w", (channels, channels)),
        gate_b=Tensor(np.zeros(channels), requires_grad=True),
        out_w=u("out_w", (channels, channels)),
        out_b=Tensor(np.zeros(channels), requires_grad=True),
        perms=perms,
    )


def ss2d_forward(x: Tensor, params: VssBlockParams) -> Tensor:
    """Bare four-direction scan with the block's scan parameters."""
    return directional_scan(x, params.scans, params.perms)


def vss_block(x: Tensor, params: VssBlockParams) -> Tensor:
    """y = x + out_proj(norm(scan(act(in_proj(x)))) * gate(x))."""
    u = T.gelu(T.linear(x, params.in_w, params.in_b))
    u = T.add(T.mul(u, params.mix_scale), params.mix_shift)
    s = directional_scan(u, params.scans, params.perms)
    s = T.layer_norm(s, params.ln_scale, params.ln_shift)
    g = T.gelu(T.linear(x, params.gate_w, params.gate_b))
    return T.add(x, T.linear(T.mul(s, g), params.out_w, params.out_b))
