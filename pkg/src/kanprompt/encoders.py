"""Image encoders, channel fusion, and the dimension-alignment projection.

Two lightweight patchify-plus-attention towers stand in for large pretrained
backbones. Both reduce an image to a feature map on an (H/16, W/16) grid, so
any encoder honoring that contract (including features precomputed to files)
can be swapped in without touching the rest of the pipeline.
"""

import zlib
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .blocks import LayerNorm2d, TransformerBlock, sincos_positions

PATCH_STRIDE = 16
BACKBONE_NAMES = ("sam2_stub", "pathology_stub")


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 4
    patch_stride: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 8 or self.embed_dim % 8 != 0:
            raise ValueError(f"embed_dim must be a positive multiple of 8, got {self.embed_dim}")
        if self.depth < 2 or self.depth % 2 != 0:
            raise ValueError(f"depth must be an even integer >= 2, got {self.depth}")
        if self.patch_stride != PATCH_STRIDE:
            raise ValueError(f"patch stride is fixed at {PATCH_STRIDE}, got {self.patch_stride}")


def validate_image(images: Tensor) -> Tensor:
    """Check image layout [3, H, W] or [B, 3, H, W] with stride-16-friendly dims."""
    if images.ndim not in (3, 4) or images.shape[-3] != 3:
        raise ValueError(f"expected [3, H, W] or [B, 3, H, W] image tensor, got {tuple(images.shape)}")
    h, w = images.shape[-2], images.shape[-1]
    if h % PATCH_STRIDE != 0 or w % PATCH_STRIDE != 0:
        pad_h = (PATCH_STRIDE - h % PATCH_STRIDE) % PATCH_STRIDE
        pad_w = (PATCH_STRIDE - w % PATCH_STRIDE) % PATCH_STRIDE
        raise ValueError(
            f"image dims {h}x{w} not divisible by stride {PATCH_STRIDE}; "
            f"pad by {pad_h} rows and {pad_w} cols first"
        )
    return images


class StubEncoder(nn.Module):
    """Two-stage attention tower: stride-8 patchify, then a stride-2 merge.

    Output grid is (H/16, W/16) with `embed_dim` channels.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.embed_dim
        half = cfg.depth // 2
        self.patch = nn.Conv2d(3, dim // 2, kernel_size=8, stride=8)
        self.stage1 = nn.ModuleList(TransformerBlock(dim // 2) for _ in range(half))
        self.merge = nn.Conv2d(dim // 2, dim, kernel_size=2, stride=2)
        self.stage2 = nn.ModuleList(TransformerBlock(dim) for _ in range(half))
        self.norm = nn.LayerNorm(dim)

    @staticmethod
    def _run_blocks(x: Tensor, blocks) -> Tensor:
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)
        seq = seq + sincos_positions(h, w, c, dtype=seq.dtype)
        for block in blocks:
            seq = block(seq)
        return seq.transpose(1, 2).reshape(b, c, h, w)

    def forward(self, images: Tensor) -> Tensor:
        images = validate_image(images)
        single = images.ndim == 3
        if single:
            images = images.unsqueeze(0)
        x = self.patch(images)
        x = self._run_blocks(x, self.stage1)
        x = self.merge(x)
        x = self._run_blocks(x, self.stage2)
        x = self.norm(x.flatten(2).transpose(1, 2)).transpose(1, 2).reshape_as(x)
        return x.squeeze(0) if single else x


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-component seed so sibling modules get independent parameters."""
    return (seed * 1000003 + zlib.crc32(tag.encode())) % (2**31 - 1)


def build_encoder(which: str, cfg: EncoderConfig) -> StubEncoder:
    """Construct the named backbone with parameters determined by cfg.seed."""
    if which not in BACKBONE_NAMES:
        raise ValueError(f"unknown backbone {which!r}; expected one of {BACKBONE_NAMES}")
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, which))
        return StubEncoder(cfg)


def encode_backbone(image: Tensor, which: str, cfg: EncoderConfig) -> Tensor:
    """Run the named backbone on an image, as a pure function of (image, cfg)."""
    encoder = build_encoder(which, cfg)
    with torch.no_grad():
        return encoder(image)


def fuse_features(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two feature maps along channels; spatial grids must match."""
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ValueError(f"feature maps must both be 3-D or 4-D, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-2:] != b.shape[-2:] or (a.ndim == 4 and a.shape[0] != b.shape[0]):
        raise ValueError(f"feature map grids do not match: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.cat([a, b], dim=-3)


class DimensionAlign(nn.Module):
    """Per-cell linear projection to a target channel width, then channel norm."""

    def __init__(self, in_channels: int, out_channels: int, identity_init: bool = False):
        super().__init__()
        if out_channels <= 0:
            raise ValueError(f"target channel width must be positive, got {out_channels}")
        if in_channels <= 0:
            raise ValueError(f"input channel width must be positive, got {in_channels}")
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        self.norm = LayerNorm2d(out_channels)
        if identity_init:
            if in_channels != out_channels:
                raise ValueError("identity init requires matching channel widths")
            with torch.no_grad():
                self.proj.weight.copy_(torch.eye(out_channels).reshape(out_channels, in_channels, 1, 1))
                self.proj.bias.zero_()

    def forward(self, fmap: Tensor) -> Tensor:
        single = fmap.ndim == 3
        if single:
            fmap = fmap.unsqueeze(0)
        out = self.norm(self.proj(fmap))
        return out.squeeze(0) if single else out


def dimension_align(h_fusion: Tensor, align: DimensionAlign) -> Tensor:
    """Apply an alignment module to a fused feature map."""
    return align(h_fusion)
