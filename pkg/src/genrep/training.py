"""Shared first-order training loop (Adam + cosine decay)."""

import logging

import numpy as np

from .autodiff import Adam, NonFiniteError, Tape, cosine_lr

logger = logging.getLogger(__name__)


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss or activation."""


def run_adam(params, loss_fn, steps, lr, callback=None, what="training"):
    """Minimise ``loss_fn(step)`` over ``params`` for ``steps`` Adam updates.

    ``loss_fn`` must build its graph on the active tape and return a scalar
    tensor.  ``callback(step, loss_tensor, lr)`` runs before each update.
    Returns the list of per-step loss values.
    """
    opt = Adam(params, lr)
    losses = []
    for step in range(steps):
        step_lr = cosine_lr(step, steps, lr)
        try:
            with Tape() as tape:
                loss = loss_fn(step)
        except NonFiniteError as exc:
            raise DivergenceError(f"{what} diverged at step {step}: {exc}") from exc
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"{what} diverged at step {step}: loss={value}")
        losses.append(value)
        if callback is not None:
            callback(step, loss, step_lr)
        grads = tape.backward(loss, params)
        opt.step(grads, step_lr)
        if step % 250 == 0:
            logger.debug("%s step %d loss %.6g lr %.3g", what, step, value, step_lr)
    return losses


def batch_indices(rng, n_items, batch_size):
    """Indices of one minibatch: a random subset, or everything when it fits."""
    if n_items <= batch_size:
        return np.arange(n_items)
    return np.sort(rng.permutation(n_items)[:batch_size])
