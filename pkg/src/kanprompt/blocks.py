"""Small attention/MLP building blocks shared by the encoders and the decoder."""

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class Mlp(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, depth: int = 2):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (depth - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class Attention(nn.Module):
    """Multi-head attention with separate query/key/value sources."""

    def __init__(self, dim: int, num_heads: int = 4):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, nq, c = q.shape
        h = self.num_heads
        q = self.q_proj(q).reshape(b, nq, h, c // h).transpose(1, 2)
        k = self.k_proj(k).reshape(b, k.shape[1], h, c // h).transpose(1, 2)
        v = self.v_proj(v).reshape(b, v.shape[1], h, c // h).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(c // h)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, c)
        return self.out_proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with an MLP, both residual."""

    def __init__(self, dim: int, num_heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, dim)

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y)
        x = x + self.mlp(self.norm2(x))
        return x


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dimension of a [B, C, H, W] map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def sincos_positions(h: int, w: int, dim: int, dtype=torch.float32) -> Tensor:
    """Fixed 2-D sine/cosine positional features for an h x w cell grid.

    Returns [h * w, dim]; dim must be divisible by 4 (sin/cos for each axis).
    """
    if dim % 4 != 0:
        raise ValueError(f"positional dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = torch.arange(h, dtype=torch.float64)
    xs = torch.arange(w, dtype=torch.float64)
    grid_y = ys[:, None].expand(h, w).reshape(-1)
    grid_x = xs[None, :].expand(h, w).reshape(-1)
    parts = []
    for coord in (grid_y, grid_x):
        angles = coord[:, None] * omega[None, :]
        parts.extend([angles.sin(), angles.cos()])
    return torch.cat(parts, dim=1).to(dtype)
