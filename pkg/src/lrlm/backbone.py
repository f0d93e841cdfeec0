"""Differentiable substrate: recurrent encoder, bottleneck head, Adam, gradient checks.

Reverse-mode differentiation is delegated to torch; every tensor is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from lrlm.exceptions import DimensionError

DTYPE = torch.float64


def _uniform_fan_in_(weight: torch.Tensor) -> None:
    fan_in = weight.shape[-1] if weight.dim() > 1 else weight.shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound)


class RecurrentEncoder(nn.Module):
    """Stacked LSTM producing the hidden state that precedes each position.

    ``forward(ids, state)`` on ``M`` input tokens returns ``M + 1`` states:
    the top-layer output of ``state`` (the state before any input) followed by
    the output after each consumed token.
    """

    def __init__(self, vocab_size, embed_dim, hidden_dim, num_layers=1, dropout=0.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.embedding = nn.Embedding(vocab_size, embed_dim, dtype=DTYPE)
        self.lstm = nn.LSTM(
            embed_dim, hidden_dim, num_layers=num_layers, dropout=dropout if num_layers > 1 else 0.0, dtype=DTYPE
        )
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.uniform_(self.embedding.weight, -0.1, 0.1)
        H = self.hidden_dim
        for name, p in self.lstm.named_parameters():
            if name.startswith("weight"):
                _uniform_fan_in_(p)
            else:
                with torch.no_grad():
                    p.uniform_(-1.0 / math.sqrt(H), 1.0 / math.sqrt(H))
                    # gate order is input, forget, cell, output
                    p[H:2 * H] = 1.0 if name.startswith("bias_ih") else 0.0

    def initial_state(self):
        z = torch.zeros(self.num_layers, self.hidden_dim, dtype=DTYPE)
        return z, z.clone()

    def forward(self, ids: torch.Tensor, state=None):
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise IndexError("token id outside the embedding table")
        if state is None:
            state = self.initial_state()
        h0 = state[0][-1].unsqueeze(0)
        if ids.numel() == 0:
            return h0, state
        out, new_state = self.lstm(self.embedding(ids), state)
        return torch.cat([h0, out], dim=0), new_state


def encode_sequence(encoder: RecurrentEncoder, ids, state=None):
    ids = torch.as_tensor(ids, dtype=torch.long)
    return encoder(ids, state)


class BottleneckLinear(nn.Module):
    """``W1 (W2 h + b2) + b1`` with ``W1: L x K`` and ``W2: K x D``."""

    def __init__(self, in_dim, bottleneck_dim, out_dim):
        super().__init__()
        if bottleneck_dim > in_dim or bottleneck_dim > out_dim:
            raise DimensionError(f"bottleneck {bottleneck_dim} exceeds input {in_dim} or output {out_dim}")
        self.W2 = nn.Parameter(torch.empty(bottleneck_dim, in_dim, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.empty(bottleneck_dim, dtype=DTYPE))
        self.W1 = nn.Parameter(torch.empty(out_dim, bottleneck_dim, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.empty(out_dim, dtype=DTYPE))
        for w, b in ((self.W2, self.b2), (self.W1, self.b1)):
            _uniform_fan_in_(w)
            bound = 1.0 / math.sqrt(w.shape[1])
            with torch.no_grad():
                b.uniform_(-bound, bound)

    @property
    def in_dim(self):
        return self.W2.shape[1]

    def forward(self, h):
        if h.shape[-1] != self.in_dim:
            raise DimensionError(f"expected input dimension {self.in_dim}, got {h.shape[-1]}")
        return (h @ self.W2.T + self.b2) @ self.W1.T + self.b1


def bottleneck_logits(bl: BottleneckLinear, h):
    return bl(torch.as_tensor(h, dtype=DTYPE))


def log_softmax(logits, dim=-1):
    """Shift-invariant log-softmax for numpy arrays or torch tensors."""
    if isinstance(logits, torch.Tensor):
        return torch.log_softmax(logits, dim=dim)
    x = np.asarray(logits, dtype=np.float64)
    m = np.max(x, axis=dim, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=dim, keepdims=True))


@dataclass
class AdamState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    def clone(self) -> "AdamState":
        return AdamState(self.step, [m.clone() for m in self.exp_avg], [v.clone() for v in self.exp_avg_sq])


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if g is None:
                continue
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


def grad_check(loss_fn, params, eps=1e-5, max_coords=40, seed=0, floor=1e-5) -> float:
    """Largest relative error between autograd and central differences.

    ``loss_fn()`` must return a scalar tensor built from ``params``. Up to
    ``max_coords`` coordinates per tensor are probed. Coordinates whose
    gradient magnitude is below ``floor`` are compared on an absolute scale.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            coords = range(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
            for c in coords:
                c = int(c)
                orig = flat[c].item()
                flat[c] = orig + eps
                hi = flat[c].item()
                up = float(loss_fn())
                flat[c] = orig - eps
                lo = flat[c].item()
                down = float(loss_fn())
                flat[c] = orig
                numeric = (up - down) / (hi - lo)  # the step actually taken after rounding
                a = float(g.view(-1)[c])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
