"""Shared neural building blocks: GRU cells, biGRU, initialization helpers.

The GRU follows the classic encoder-decoder convention: sigmoid reset/update
gates, tanh candidate, and the reset gate applied to the previous hidden state
*before* the recurrent transform.  (The stock torch GRU applies reset after
the recurrent matmul, which is a different network.)
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def uniform_fan_in_(tensor: Tensor, fan_in: int, generator: torch.Generator) -> Tensor:
    """In-place uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


def make_linear(
    d_in: int,
    d_out: int,
    dtype: torch.dtype,
    generator: torch.Generator,
    bias: bool = True,
) -> nn.Linear:
    """nn.Linear with uniform fan-in weights and zero bias."""
    lin = nn.Linear(d_in, d_out, bias=bias, dtype=dtype)
    uniform_fan_in_(lin.weight, d_in, generator)
    if bias:
        with torch.no_grad():
            lin.bias.zero_()
    return lin


class GRU(nn.Module):
    """Single-direction GRU over a (m, d_in) sequence, initial state zero.

    Gate order in the packed weights is [update z | reset r | candidate c].
    """

    def __init__(
        self, d_in: int, hidden: int, dtype: torch.dtype, generator: torch.Generator
    ):
        super().__init__()
        self.d_in = d_in
        self.hidden = hidden
        self.w_ih = nn.Parameter(torch.empty(3 * hidden, d_in, dtype=dtype))
        self.w_hh = nn.Parameter(torch.empty(3 * hidden, hidden, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(3 * hidden, dtype=dtype))
        uniform_fan_in_(self.w_ih, d_in, generator)
        uniform_fan_in_(self.w_hh, hidden, generator)

    def forward(self, x: Tensor) -> Tensor:
        """x: (m, d_in) -> hidden states (m, hidden)."""
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"expected (m, {self.d_in}) input, got {tuple(x.shape)}")
        hidden = self.hidden
        h = x.new_zeros(hidden)
        gates_x = x @ self.w_ih.T + self.bias          # (m, 3h)
        gates_zr = gates_x[:, : 2 * hidden]
        gates_c = gates_x[:, 2 * hidden :]
        u_zr_t = self.w_hh[: 2 * hidden].T             # (h, 2h)
        u_c_t = self.w_hh[2 * hidden :].T              # (h, h)
        states = []
        for t in range(x.shape[0]):
            zr = torch.sigmoid(gates_zr[t] + h @ u_zr_t)
            z, r = zr[:hidden], zr[hidden:]
            c = torch.tanh(gates_c[t] + (r * h) @ u_c_t)
            h = z * h + (1.0 - z) * c
            states.append(h)
        return torch.stack(states)


class BiGRU(nn.Module):
    """Bidirectional GRU; per-step output is [forward_t || backward_t].

    Both directions run through shared batched tensor ops (one recurrence
    loop instead of two); the math per direction is identical to GRU.forward.
    """

    def __init__(
        self, d_in: int, hidden: int, dtype: torch.dtype, generator: torch.Generator
    ):
        super().__init__()
        self.fwd = GRU(d_in, hidden, dtype, generator)
        self.bwd = GRU(d_in, hidden, dtype, generator)

    @property
    def out_dim(self) -> int:
        return 2 * self.fwd.hidden

    def forward(self, x: Tensor) -> Tensor:
        """x: (m, d_in) -> (m, 2*hidden)."""
        hidden = self.fwd.hidden
        m = x.shape[0]
        x_pair = torch.stack([x, torch.flip(x, dims=(0,))])        # (2, m, d)
        w_ih = torch.stack([self.fwd.w_ih, self.bwd.w_ih])
        w_hh = torch.stack([self.fwd.w_hh, self.bwd.w_hh])
        bias = torch.stack([self.fwd.bias, self.bwd.bias])
        gates_x = torch.bmm(x_pair, w_ih.transpose(1, 2)) + bias.unsqueeze(1)
        gates_zr = gates_x[:, :, : 2 * hidden]                     # (2, m, 2h)
        gates_c = gates_x[:, :, 2 * hidden :]
        u_zr_t = w_hh[:, : 2 * hidden].transpose(1, 2)             # (2, h, 2h)
        u_c_t = w_hh[:, 2 * hidden :].transpose(1, 2)              # (2, h, h)
        h = x.new_zeros(2, 1, hidden)
        states = []
        for t in range(m):
            zr = torch.sigmoid(gates_zr[:, t : t + 1] + torch.bmm(h, u_zr_t))
            z, r = zr[:, :, :hidden], zr[:, :, hidden:]
            c = torch.tanh(gates_c[:, t : t + 1] + torch.bmm(r * h, u_c_t))
            h = z * h + (1.0 - z) * c
            states.append(h[:, 0])
        stacked = torch.stack(states)                              # (m, 2, h)
        return torch.cat([stacked[:, 0], torch.flip(stacked[:, 1], dims=(0,))], dim=1)


class MLP(nn.Module):
    """Two affine layers with a ReLU in between."""

    def __init__(
        self,
        d_in: int,
        d_hidden: int,
        d_out: int,
        dtype: torch.dtype,
        generator: torch.Generator,
    ):
        super().__init__()
        self.fc1 = make_linear(d_in, d_hidden, dtype, generator)
        self.fc2 = make_linear(d_hidden, d_out, dtype, generator)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.relu(self.fc1(x)))
