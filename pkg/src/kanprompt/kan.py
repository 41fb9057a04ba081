"""Spline-parameterized networks with trainable per-edge activations.

Every edge carries its own univariate function

    phi(x) = w_b * silu(x) + sum_j c_j * B_j(x)

where the B_j are B-spline basis functions on a fixed grid. A layer arranges
n_out x n_in such edges and each output is the sum of its row of edge values;
networks chain layers whose widths match.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class SplineGrid:
    """Knot vector for a B-spline basis of fixed polynomial order.

    The usable domain is [knots[order], knots[-order - 1]]; the extra `order`
    knots on each side keep every basis function defined on the whole domain.
    Inputs outside the domain are clamped to its boundary before evaluation.
    """

    def __init__(self, knots, order: int):
        knots = torch.as_tensor(knots, dtype=torch.float64)
        if order < 1:
            raise ValueError(f"spline order must be a positive integer, got {order}")
        if knots.ndim != 1 or knots.numel() < 2 * order + 2:
            raise ValueError(
                f"need at least {2 * order + 2} knots for order {order}, "
                f"got shape {tuple(knots.shape)}"
            )
        if not torch.all(knots[1:] > knots[:-1]):
            raise ValueError("knots must be strictly increasing")
        self.knots = knots
        self.order = order

    @classmethod
    def uniform(cls, intervals: int = 8, order: int = 3, lo: float = -1.0, hi: float = 1.0):
        """Uniform grid with `intervals` domain intervals over [lo, hi]."""
        if intervals < 1:
            raise ValueError(f"need at least one interval, got {intervals}")
        if not lo < hi:
            raise ValueError(f"domain range requires lo < hi, got [{lo}, {hi}]")
        step = (hi - lo) / intervals
        idx = torch.arange(-order, intervals + order + 1, dtype=torch.float64)
        return cls(lo + step * idx, order)

    @property
    def lo(self) -> float:
        return float(self.knots[self.order])

    @property
    def hi(self) -> float:
        return float(self.knots[-self.order - 1])

    @property
    def n_intervals(self) -> int:
        return self.knots.numel() - 2 * self.order - 1

    @property
    def n_basis(self) -> int:
        # one basis function per domain interval plus `order` boundary ones
        return self.n_intervals + self.order

    def __repr__(self):
        return (
            f"SplineGrid(order={self.order}, intervals={self.n_intervals}, "
            f"domain=[{self.lo:g}, {self.hi:g}])"
        )


def bspline_basis(x: Tensor, grid: SplineGrid) -> Tensor:
    """Evaluate every basis function of `grid` at each point of the vector `x`.

    Returns a [len(x), grid.n_basis] matrix whose rows sum to one. Inputs are
    clamped to the grid domain, so rows for out-of-range points equal the row
    at the nearest boundary.
    """
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D input vector, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise ValueError(f"input contains {bad} non-finite value(s); inputs must be finite")
    knots = grid.knots.to(x.dtype)
    xc = x.clamp(min=grid.lo, max=grid.hi)
    # interval index i with knots[i] <= x < knots[i+1], right endpoint folded
    # into the last domain interval so the basis stays a partition of unity
    idx = torch.searchsorted(knots, xc.detach(), right=True) - 1
    idx = idx.clamp(grid.order, grid.order + grid.n_intervals - 1)
    n = x.numel()
    basis = torch.zeros(n, knots.numel() - 1, dtype=x.dtype)
    basis[torch.arange(n), idx] = 1.0
    xcol = xc.unsqueeze(1)
    for d in range(1, grid.order + 1):
        m = knots.numel() - 1 - d
        left = (xcol - knots[:m]) / (knots[d : d + m] - knots[:m])
        right = (knots[d + 1 : d + 1 + m] - xcol) / (knots[d + 1 : d + 1 + m] - knots[1 : 1 + m])
        basis = left * basis[:, :m] + right * basis[:, 1 : m + 1]
    return basis


@dataclass
class KanEdgeFunction:
    """A single trainable edge activation and its spline grid."""

    base_weight: Tensor
    coeffs: Tensor
    grid: SplineGrid

    def __post_init__(self):
        self.base_weight = torch.as_tensor(self.base_weight)
        self.coeffs = torch.as_tensor(self.coeffs)
        if self.coeffs.ndim != 1 or self.coeffs.numel() != self.grid.n_basis:
            raise ValueError(
                f"expected {self.grid.n_basis} spline coefficients for {self.grid}, "
                f"got shape {tuple(self.coeffs.shape)}"
            )


def kan_edge_eval(x: Tensor, edge: KanEdgeFunction) -> Tensor:
    """Apply one edge activation elementwise to the vector `x`."""
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    dtype = torch.promote_types(x.dtype, edge.coeffs.dtype)
    x = x.to(dtype)
    basis = bspline_basis(x, edge.grid)
    return edge.base_weight.to(dtype) * F.silu(x) + basis @ edge.coeffs.to(dtype)


class KanLayer(nn.Module):
    """One layer of per-edge activations: output q sums phi[q, p](z[p]) over p.

    Spline coefficients start as small zero-mean noise so the layer is close
    to a plain silu map early in training; base weights start at 1/n_in to keep
    each output's silu sum at unit scale regardless of width.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        grid: SplineGrid | None = None,
        base_weight_init: float | None = None,
        coeff_noise: float = 0.1,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ValueError(f"layer widths must be positive, got {n_in} -> {n_out}")
        self.n_in = n_in
        self.n_out = n_out
        self.grid = grid if grid is not None else SplineGrid.uniform()
        if base_weight_init is None:
            base_weight_init = 1.0 / n_in
        nb = self.grid.n_basis
        self.base_weight = nn.Parameter(torch.full((n_out, n_in), base_weight_init, dtype=dtype))
        self.coeffs = nn.Parameter(torch.randn(n_out, n_in, nb, dtype=dtype) * (coeff_noise / nb))

    def forward(self, z: Tensor) -> Tensor:
        single = z.ndim == 1
        if single:
            z = z.unsqueeze(0)
        if z.ndim != 2 or z.shape[1] != self.n_in:
            raise ValueError(
                f"layer expects {self.n_in} inputs per sample, got shape {tuple(z.shape)}"
            )
        z = z.to(self.base_weight.dtype)
        b = z.shape[0]
        basis = bspline_basis(z.reshape(-1), self.grid).reshape(b, self.n_in, -1)
        out = F.silu(z) @ self.base_weight.t() + torch.einsum("bpj,qpj->bq", basis, self.coeffs)
        return out.squeeze(0) if single else out

    def edge(self, q: int, p: int) -> KanEdgeFunction:
        """View of the activation on edge (output q, input p)."""
        return KanEdgeFunction(self.base_weight[q, p], self.coeffs[q, p], self.grid)

    def extra_repr(self):
        return f"n_in={self.n_in}, n_out={self.n_out}, grid={self.grid}"


class KanNetwork(nn.Module):
    """Composition of KanLayers applied in order; widths must chain."""

    def __init__(self, layers):
        super().__init__()
        layers = list(layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"consecutive layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.layers = nn.ModuleList(layers)

    @classmethod
    def from_dims(
        cls,
        dims,
        grid: SplineGrid | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        """Build a network with the given sequence of widths, e.g. [2, 3, 1]."""
        dims = list(dims)
        if len(dims) < 2:
            raise ValueError(f"need at least an input and an output width, got {dims}")
        return cls(KanLayer(a, b, grid=grid, dtype=dtype) for a, b in zip(dims, dims[1:]))

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def forward(self, z: Tensor) -> Tensor:
        for layer in self.layers:
            z = layer(z)
        return z


def kan_layer_forward(z: Tensor, layer: KanLayer) -> Tensor:
    """Apply one layer to an input vector."""
    z = torch.as_tensor(z)
    if z.ndim != 1:
        raise ValueError(f"expected a 1-D input vector, got shape {tuple(z.shape)}")
    return layer(z)


def kan_forward(z: Tensor, net: KanNetwork) -> Tensor:
    """Apply a whole network to an input vector."""
    z = torch.as_tensor(z)
    if z.ndim != 1 or z.numel() != net.n_in:
        raise ValueError(
            f"network expects an input vector of length {net.n_in}, got shape {tuple(z.shape)}"
        )
    return net(z)


@dataclass
class KanLayerGradients:
    base_weight: Tensor
    coeffs: Tensor


@dataclass
class KanGradients:
    """Gradients of <upstream, net(z)> for the input and every parameter."""

    input: Tensor
    layers: list[KanLayerGradients]


def kan_gradients(z: Tensor, net: KanNetwork, upstream: Tensor) -> KanGradients:
    """Analytic gradients of the scalar <upstream, net(z)>.

    Differentiates through the exact forward computation, so the result agrees
    with central finite differences up to floating-point error.
    """
    dtype = net.layers[0].base_weight.dtype
    z = torch.as_tensor(z, dtype=dtype)
    upstream = torch.as_tensor(upstream, dtype=dtype)
    if z.ndim != 1 or z.numel() != net.n_in:
        raise ValueError(
            f"network expects an input vector of length {net.n_in}, got shape {tuple(z.shape)}"
        )
    if upstream.ndim != 1 or upstream.numel() != net.n_out:
        raise ValueError(
            f"upstream must have length {net.n_out}, got shape {tuple(upstream.shape)}"
        )
    z = z.detach().clone().requires_grad_(True)
    target = (net(z) * upstream).sum()
    params = [p for layer in net.layers for p in (layer.base_weight, layer.coeffs)]
    grads = torch.autograd.grad(target, [z, *params])
    layer_grads = [
        KanLayerGradients(base_weight=grads[1 + 2 * i], coeffs=grads[2 + 2 * i])
        for i in range(len(net.layers))
    ]
    return KanGradients(input=grads[0], layers=layer_grads)
