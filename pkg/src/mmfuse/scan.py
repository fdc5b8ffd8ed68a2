"""1-D selective state-space scan.

The recurrence is h_t = a_bar_t * h_{t-1} + b_bar_t * x_t with readout
y_t = <c_t, h_t> + d_skip * x_t, where the per-step parameters come from
input-dependent projections followed by discretization: a_bar = exp(delta*A)
and b_bar = delta * B (first-order form). The state matrix is diagonal per
channel, stored as A = -exp(a_log) so it stays strictly negative and the
discretized a_bar stays in (0, 1) for positive delta.

Two kernels compute the same recurrence: a sequential reference that runs
on the tape (trainable), and a chunked kernel that evaluates all chunks of
the sequence simultaneously and stitches them by carrying boundary states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor


@dataclass
class ScanParams:
    """Learnable parameter bundle for one scan head.

    a_log:   [D, n], effective state matrix is -exp(a_log)
    d_skip:  [D], skip connection
    delta_w, delta_b: [D, D] and [D], step-size projection
    bc_w, bc_b: [D, 2n] and [2n], joint projection split into (B, C)
    """

    a_log: Tensor
    d_skip: Tensor
    delta_w: Tensor
    delta_b: Tensor
    bc_w: Tensor
    bc_b: Tensor

    def __post_init__(self):
        d, n = self.a_log.shape
        if d < 1 or n < 1:
            raise ConfigError(f"scan params need D >= 1 and n >= 1, got D={d}, n={n}")
        if self.d_skip.shape != (d,):
            raise ConfigError(f"d_skip shape {self.d_skip.shape} != ({d},)")
        if self.delta_w.shape != (d, d) or self.delta_b.shape != (d,):
            raise ConfigError("delta projection shapes inconsistent with D")
        if self.bc_w.shape != (d, 2 * n) or self.bc_b.shape != (2 * n,):
            raise ConfigError("bc projection shapes inconsistent with (D, n)")

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]

    def named_tensors(self, prefix: str = ""):
        yield f"{prefix}a_log", self.a_log
        yield f"{prefix}d_skip", self.d_skip
        yield f"{prefix}delta_w", self.delta_w
        yield f"{prefix}delta_b", self.delta_b
        yield f"{prefix}bc_w", self.bc_w
        yield f"{prefix}bc_b", self.bc_b


def init_scan_params(rng: Rng, name: str, channels: int, state: int) -> ScanParams:
    """Stable defaults: -exp(a_log) spans [-state, -1] per state index,
    skip starts at one, projections are small uniform."""
    a_row = np.log(np.arange(1, state + 1, dtype=np.float64))
    a_log = np.tile(a_row, (channels, 1))
    lim = 0.05
    return ScanParams(
        a_log=Tensor(a_log, requires_grad=True),
        d_skip=Tensor(np.ones(channels), requires_grad=True),
        delta_w=Tensor(rng.uniform(f"{name}.delta_w", (channels, channels), -lim, lim),
                       requires_grad=True),
        delta_b=Tensor(rng.uniform(f"{name}.delta_b", (channels,), -lim, lim),
                       requires_grad=True),
        bc_w=Tensor(rng.uniform(f"{name}.bc_w", (channels, 2 * state), -lim, lim),
                    requires_grad=True),
        bc_b=Tensor(rng.uniform(f"{name}.bc_b", (2 * state,), -lim, lim),
                    requires_grad=True),
    )


def effective_state_matrix(p: ScanParams) -> Tensor:
    """A = -exp(a_log), strictly negative elementwise."""
    return T.neg(T.exp(p.a_log))


def project_params(x: Tensor, p: ScanParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent (delta, B, C) sequences.

    delta = softplus(x @ delta_w + delta_b) > 0; the bc projection output is
    split into the first n columns (B) and the last n (C), in that order.
    """
    if x.shape[-1] != p.channels:
        raise ShapeError(f"project_params: input width {x.shape} vs D={p.channels}")
    delta = T.softplus(T.linear(x, p.delta_w, p.delta_b))
    bc = T.linear(x, p.bc_w, p.bc_b)
    n = p.state_size
    b_seq = T.slice_axis(bc, 0, n, axis=-1)
    c_seq = T.slice_axis(bc, n, 2 * n, axis=-1)
    return delta, b_seq, c_seq


def discretize(delta: Tensor, a: Tensor, b_seq: Tensor) -> tuple[Tensor, Tensor]:
    """a_bar[t,d,:] = exp(delta[t,d] * a[d,:]); b_bar[t,d,:] = delta[t,d] * b_seq[t,:].

    ``a`` may carry leading broadcast axes (e.g. a direction axis); it must
    already be shaped to broadcast against delta[..., None].
    """
    dl = T.reshape(delta, delta.shape + (1,))
    a_bar = T.exp(T.mul(dl, a))
    b_lift = T.reshape(b_seq, b_seq.shape[:-1] + (1, b_seq.shape[-1]))
    b_bar = T.mul(dl, b_lift)
    return a_bar, b_bar


@dataclass
class DiscretizedSeq:
    """Per-step scan inputs: a_bar and b_bar_x are [..., L, D, n], c_seq is
    [..., L, n], d_skip broadcasts against [..., L, D]. When produced by
    :func:`discretize` from valid params, 0 < a_bar < 1 elementwise."""

    a_bar: Tensor
    b_bar_x: Tensor
    c_seq: Tensor
    d_skip: Tensor


def discretized_sequence(x: Tensor, delta: Tensor, a: Tensor, b_seq: Tensor,
                         c_seq: Tensor, d_skip: Tensor) -> DiscretizedSeq:
    a_bar, b_bar = discretize(delta, a, b_seq)
    x_lift = T.reshape(x, x.shape + (1,))
    return DiscretizedSeq(a_bar, T.mul(b_bar, x_lift), c_seq, d_skip)


def scan_sequential(dseq: DiscretizedSeq, x: Tensor,
                    h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Exact left-to-right recurrence; differentiable via the tape.

    Returns (y, h_L) with y shaped like x and h_L the final hidden state.
    """
    L = dseq.a_bar.shape[-3]
    h = h0 if h0 is not None else T.zeros(())
    states = []
    for t in range(L):
        a_t = T.index(dseq.a_bar, t, axis=-3)
        b_t = T.index(dseq.b_bar_x, t, axis=-3)
        h = T.add(T.mul(a_t, h), b_t)
        states.append(h)
    H = T.stack(states, axis=-3)
    c = dseq.c_seq
    c_lift = T.reshape(c, c.shape[:-1] + (1, c.shape[-1]))
    y = T.add(T.tsum(T.mul(c_lift, H), axis=-1), T.mul(dseq.d_skip, x))
    return y, h


def scan_parallel(dseq: DiscretizedSeq, x: Tensor, h0: Tensor | None = None,
                  chunk: int = 64) -> tuple[Tensor, Tensor]:
    """Chunked evaluation of the same recurrence (inference/bench kernel).

    The sequence is cut into ceil(L/chunk) chunks; all chunks run their local
    recurrence simultaneously (data-parallel across the chunk axis, so the
    result cannot depend on scheduling), then boundary states are carried
    across chunks and folded back in via within-chunk cumulative products of
    a_bar. Matches scan_sequential to ~1e-10 max-abs; not differentiated.
    """
    if chunk < 1:
        raise ConfigError(f"chunk must be >= 1, got {chunk}")
    a = dseq.a_bar.data
    b = dseq.b_bar_x.data
    lead = np.broadcast_shapes(a.shape, b.shape)[:-3]
    a, b = np.broadcast_to(a, lead + a.shape[-3:]), np.broadcast_to(b, lead + b.shape[-3:])
    L, D, n = a.shape[-3:]
    nchunks = -(-L // chunk)
    pad = nchunks * chunk - L
    if pad:
        pad_width = [(0, 0)] * (a.ndim - 3) + [(0, pad), (0, 0), (0, 0)]
        a = np.pad(a, pad_width, constant_values=1.0)
        b = np.pad(b, pad_width, constant_values=0.0)
    cshape = a.shape[:-3] + (nchunks, chunk, D, n)
    ac = a.reshape(cshape)
    bc = b.reshape(cshape)

    # Local scans with zero carry-in, all chunks at once.
    h_local = np.empty(cshape)
    h = np.zeros(cshape[:-3] + (D, n))
    for s in range(chunk):
        h = ac[..., s, :, :] * h + bc[..., s, :, :]
        h_local[..., s, :, :] = h
    prod = np.cumprod(ac, axis=-3)

    # Carry boundary states across chunks.
    carry = np.zeros(cshape[:-4] + (D, n))
    if h0 is not None:
        carry = carry + h0.data
    carries = np.empty(cshape[:-3] + (D, n))
    for c in range(nchunks):
        carries[..., c, :, :] = carry
        carry = prod[..., c, -1, :, :] * carry + h_local[..., c, -1, :, :]

    H = h_local + prod * carries[..., :, None, :, :]
    H = H.reshape(a.shape[:-3] + (nchunks * chunk, D, n))[..., :L, :, :]

    c_seq = dseq.c_seq.data
    y = np.einsum("...ln,...ldn->...ld", c_seq, H) + dseq.d_skip.data * x.data
    hL = H[..., L - 1, :, :]
    return Tensor(y, _internal=True), Tensor(np.ascontiguousarray(hL), _internal=True)
