"""Finite-difference gradient oracle, independent of the tape.

``fd_gradient`` evaluates the target function with recording suspended, so
it can never inherit a bug from the reverse pass it is used to audit.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, backward, no_tape


def fd_gradient(f: Callable[[Tensor], Tensor], at: Tensor, step: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued ``f`` at ``at``.

    Perturbs one coordinate at a time: (f(x+h e_i) - f(x-h e_i)) / 2h.
    """
    if step <= 0:
        raise ContractError("fd_gradient requires step > 0")
    base = at.data.copy()
    flat = base.reshape(-1)
    grad = np.empty_like(flat)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(Tensor(base.reshape(at.shape), _internal=True)))
            flat[i] = orig - step
            lo = float(f(Tensor(base.reshape(at.shape), _internal=True)))
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
    return Tensor(grad.reshape(at.shape), _internal=True)


def rel_error(got: np.ndarray, want: np.ndarray) -> float:
    """Max elementwise gap, scaled by the larger gradient magnitude.

    The 1e-6 floor keeps genuinely-zero gradients from amplifying FD noise
    into spurious failures.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    num = float(np.max(np.abs(got - want))) if got.size else 0.0
    den = max(float(np.max(np.abs(got))) if got.size else 0.0,
              float(np.max(np.abs(want))) if want.size else 0.0,
              1e-6)
    return num / den


def compare_gradients(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
) -> dict[str, float]:
    """Relative error between tape and FD gradients per named parameter.

    ``f`` is a closure over ``params`` returning a scalar loss; FD perturbs
    each parameter's data in place (restored afterwards).
    """
    with Tape() as tape:
        loss = f()
    grads = backward(loss, tape)

    errors: dict[str, float] = {}
    for name, p in params.items():
        def loss_at(x: Tensor, _p=p) -> Tensor:
            saved = _p.data
            _p.data = x.data
            try:
                return f()
            finally:
                _p.data = saved

        fd = fd_gradient(loss_at, p, step=step)
        got = grads.get(p)
        got_arr = got.data if got is not None else np.zeros(p.shape)
        errors[name] = rel_error(got_arr, fd.data)
    return errors
