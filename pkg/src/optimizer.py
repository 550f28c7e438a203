import logging
from typing import Callable, Optional

import numpy as np

from src.autodiff import Tensor
from src.errors import ShapeMismatch

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


def sgd_adam_step(params: list, grads: list, state: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                  eps: float = 1e-8, weight_decay: float = 0.0, decay_mask: Optional[list] = None) -> tuple:
    """
    One AdamW update with decoupled weight decay.

    Parameters:
    params (list): Parameter arrays.
    grads (list): Gradients, same shapes as params.
    state (dict): {"step", "m", "v"}; empty dict on the first call.
    decay_mask (list): Per parameter, whether weight decay applies (all when None).

    Returns:
    tuple: (updated parameter arrays, updated state)
    """
    beta1, beta2 = betas
    step = state.get("step", 0) + 1
    m_prev = state.get("m") or [np.zeros_like(p) for p in params]
    v_prev = state.get("v") or [np.zeros_like(p) for p in params]
    decay_mask = decay_mask or [True] * len(params)

    new_params, new_m, new_v = [], [], []
    for p, g, m, v, decays in zip(params, grads, m_prev, v_prev, decay_mask):
        if p.shape != g.shape:
            raise ShapeMismatch(f"Gradient of shape {g.shape} for parameter of shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        updated = p * (1.0 - lr * weight_decay) if decays and weight_decay else p
        updated = updated - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params.append(updated.astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return new_params, {"step": step, "m": new_m, "v": new_v}


def decays_by_default(name: str, tensor: Tensor) -> bool:
    """Matrices decay; biases, layer-norm gains, positional and mask vectors do not."""
    return tensor.ndim >= 2 and not name.endswith(("fsu_pos", "time_pos"))


class AdamW:
    """Stateful wrapper over sgd_adam_step for a named parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, decay_filter: Callable = decays_by_default):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.names = sorted(params)
        self._decay = [decay_filter(n, params[n]) for n in self.names]
        self.state = {}

    def step(self):
        tensors = [self.params[n] for n in self.names]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        updated, self.state = sgd_adam_step(
            [t.data for t in tensors], grads, self.state,
            self.lr, self.betas, self.eps, self.weight_decay, self._decay,
        )
        for tensor, data in zip(tensors, updated):
            tensor.data = data

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None
