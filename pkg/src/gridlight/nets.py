"""Small dense graph-attention building blocks shared by the behaviour model
and the trainers.

Networks here are desk-scale (a handful of nodes), so attention runs on the
dense adjacency matrix rather than edge lists; one layer is a few matmuls.
All layers share parameters across agents by construction — node count never
appears in a weight shape.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
from torch import nn


class DenseGAT(nn.Module):
    """One multi-head graph-attention layer over a dense adjacency matrix.

    Input ``(..., N, in_dim)``, output ``(..., N, heads * head_dim)`` with
    ``head_dim = out_dim // heads``.  Attention logits use the additive
    source/destination split; entries where ``adj == 0`` are masked out, so
    the adjacency should carry self-loops.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int = 4,
                 negative_slope: float = 0.2):
        super().__init__()
        if out_dim % heads:
            raise ValueError(f"out_dim {out_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = out_dim // heads
        self.proj = nn.Linear(in_dim, out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.leaky = nn.LeakyReLU(negative_slope)
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.xavier_uniform_(self.att_src)
        nn.init.xavier_uniform_(self.att_dst)

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-2]
        n = x.shape[-2]
        h = self.proj(x).reshape(*lead, n, self.heads, self.head_dim)
        # additive attention logits e_ij = leaky(src_i + dst_j), per head
        src = (h * self.att_src).sum(-1)                  # (..., N, H)
        dst = (h * self.att_dst).sum(-1)
        e = self.leaky(src.unsqueeze(-2) + dst.unsqueeze(-3))   # (..., N, N, H)
        mask = adj.to(dtype=torch.bool).reshape((1,) * len(lead) + (n, n, 1))
        e = e.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(e, dim=-2)                  # over neighbours j
        out = torch.einsum("...ijh,...jhd->...ihd", alpha, h)
        return out.reshape(*lead, n, self.heads * self.head_dim) + self.bias


class GATStack(nn.Module):
    """``layers`` DenseGAT layers with an activation between them."""

    def __init__(self, in_dim: int, hidden: int, layers: int, heads: int,
                 activation: str = "leaky_relu"):
        super().__init__()
        if activation == "leaky_relu":
            self.act = nn.LeakyReLU(0.2)
        elif activation == "relu":
            self.act = nn.ReLU()
        else:
            raise ValueError(f"unknown activation {activation!r}")
        dims = [in_dim] + [hidden] * layers
        self.layers = nn.ModuleList(
            DenseGAT(dims[i], dims[i + 1], heads) for i in range(layers))

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = self.act(layer(x, adj))
        return x


class EpisodeTensors(NamedTuple):
    """Episodes stacked into training tensors, batch and time leading.

    ``prev_actions`` is ``actions`` shifted right by one step with the start
    token ``num_phases`` in slot 0.  ``behavior_prob`` / ``model_prob`` are
    ``None`` unless every transition carries them.
    """

    obs: torch.Tensor            # (B, T, N, F) float32
    actions: torch.Tensor        # (B, T, N) int64
    prev_actions: torch.Tensor   # (B, T, N) int64
    rewards: torch.Tensor        # (B, T) float32
    next_obs: torch.Tensor       # (B, T, N, F) float32
    dones: torch.Tensor          # (B, T) float32
    behavior_prob: torch.Tensor | None   # (B, T, N) float32
    model_prob: torch.Tensor | None      # (B, T, N) float32


def episodes_to_tensors(episodes, num_phases: int) -> EpisodeTensors:
    lengths = {len(ep.transitions) for ep in episodes}
    if len(lengths) != 1:
        raise ValueError(f"episodes have mixed lengths {sorted(lengths)}; "
                         "batching needs a fixed horizon")

    def stack(field):
        return np.stack([[getattr(tr, field) for tr in ep.transitions]
                         for ep in episodes])

    actions = torch.as_tensor(stack("actions"), dtype=torch.int64)
    prev = torch.roll(actions, shifts=1, dims=1)
    prev[:, 0, :] = num_phases
    have_b = all(tr.behavior_prob is not None
                 for ep in episodes for tr in ep.transitions)
    have_m = all(tr.model_prob is not None
                 for ep in episodes for tr in ep.transitions)
    as_f32 = lambda a: torch.as_tensor(a, dtype=torch.float32)
    return EpisodeTensors(
        obs=as_f32(stack("obs")),
        actions=actions,
        prev_actions=prev,
        rewards=as_f32(stack("reward")),
        next_obs=as_f32(stack("next_obs")),
        dones=as_f32(stack("done")),
        behavior_prob=as_f32(stack("behavior_prob")) if have_b else None,
        model_prob=as_f32(stack("model_prob")) if have_m else None,
    )
