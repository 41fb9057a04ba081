"""Learnable per-class prompt tokens and the prompt-conditioned mask decoder.

A trainable embedding table feeds one spline network per class; each output
token conditions the decoder, which emits one mask-logit plane and one
predicted-IOU scalar per class. Tokens never attend to each other (unless the
self-attention switch is on), so equal tokens always produce equal masks.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import Attention, LayerNorm2d, Mlp, sincos_positions
from .kan import KanNetwork, SplineGrid

PROMPT_KINDS = ("kan", "mlp")


@dataclass
class SegmentationOutput:
    """Per-class mask logits at input resolution plus predicted IOU scalars."""

    mask_logits: Tensor  # [k, H, W]
    ious: Tensor  # [k], each in (0, 1)

    def __post_init__(self):
        if self.mask_logits.ndim != 3:
            raise ValueError(f"mask_logits must be [k, H, W], got {tuple(self.mask_logits.shape)}")
        if self.ious.ndim != 1 or self.ious.numel() != self.mask_logits.shape[0]:
            raise ValueError(
                f"need one iou per class: {self.mask_logits.shape[0]} planes "
                f"but ious shape {tuple(self.ious.shape)}"
            )

    @property
    def k(self) -> int:
        return self.mask_logits.shape[0]

    def save(self, directory) -> None:
        """Write logits as a multi-plane array plus a small metadata record."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        logits = self.mask_logits.detach().cpu().numpy().astype(np.float32)
        np.save(directory / "mask_logits.npy", logits)
        meta = {
            "k": self.k,
            "height": int(self.mask_logits.shape[1]),
            "width": int(self.mask_logits.shape[2]),
            "ious": [float(v) for v in self.ious.detach().cpu()],
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "SegmentationOutput":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        logits = torch.from_numpy(np.load(directory / "mask_logits.npy"))
        return cls(mask_logits=logits, ious=torch.tensor(meta["ious"], dtype=logits.dtype))


class ClassEmbeddingTable(nn.Module):
    """k trainable class embeddings of a shared width."""

    def __init__(self, k: int, dim: int):
        super().__init__()
        if k < 1:
            raise ValueError(f"need at least one class, got k={k}")
        if dim < 1:
            raise ValueError(f"embedding dim must be positive, got {dim}")
        self.weight = nn.Parameter(torch.randn(k, dim) * 0.5)

    @property
    def k(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


def generate_prompt_tokens(table: ClassEmbeddingTable, nets) -> Tensor:
    """Produce k prompt tokens: token_i = nets[i](embedding_i) + embedding_i.

    The residual keeps token identity intact when the networks are untrained.
    """
    nets = list(nets)
    if len(nets) != table.k:
        raise ValueError(f"class table has k={table.k} but {len(nets)} networks were given")
    tokens = []
    for i, net in enumerate(nets):
        e = table.weight[i]
        out = net(e)
        if out.shape != e.shape:
            raise ValueError(
                f"network {i} maps dim {e.numel()} to {out.numel()}; prompt nets must preserve dim"
            )
        tokens.append(out + e)
    return torch.stack(tokens)


class PromptMlp(nn.Module):
    """Per-class perceptron baseline of matching width (silu between layers)."""

    def __init__(self, dim: int, depth: int = 3):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(depth))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.silu(x)
        return x


class PromptGenerator(nn.Module):
    """Embedding table plus one prompt network per class (optionally shared)."""

    def __init__(
        self,
        k: int,
        dim: int,
        kind: str = "kan",
        depth: int = 3,
        shared: bool = False,
        grid: SplineGrid | None = None,
    ):
        super().__init__()
        if kind not in PROMPT_KINDS:
            raise ValueError(f"unknown prompt kind {kind!r}; expected one of {PROMPT_KINDS}")
        self.table = ClassEmbeddingTable(k, dim)
        self.shared = shared
        n_nets = 1 if shared else k
        if kind == "kan":
            dims = [dim] * (depth + 1)
            nets = [KanNetwork.from_dims(dims, grid=grid) for _ in range(n_nets)]
        else:
            nets = [PromptMlp(dim, depth) for _ in range(n_nets)]
        self.nets = nn.ModuleList(nets)

    def forward(self) -> Tensor:
        if self.shared:
            nets = [self.nets[0]] * self.table.k
        else:
            nets = list(self.nets)
        return generate_prompt_tokens(self.table, nets)


class DecoderBlock(nn.Module):
    """Cross-attention round trip: tokens read the features, features read back."""

    def __init__(self, dim: int, num_heads: int = 4, token_self_attention: bool = False, mlp_ratio: int = 4):
        super().__init__()
        self.token_self_attention = token_self_attention
        if token_self_attention:
            self.self_attn = Attention(dim, num_heads)
            self.norm_self = nn.LayerNorm(dim)
        self.token_to_feat = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.feat_to_token = Attention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tokens: Tensor, feats: Tensor, pe: Tensor):
        if self.token_self_attention:
            tokens = self.norm_self(tokens + self.self_attn(tokens, tokens, tokens))
        keyed = feats + pe
        tokens = self.norm1(tokens + self.token_to_feat(tokens, keyed, feats))
        tokens = self.norm2(tokens + self.mlp(tokens))
        feats = self.norm3(feats + self.feat_to_token(feats + pe, tokens, tokens))
        return tokens, feats


class MaskDecoder(nn.Module):
    """Turn aligned features and k prompt tokens into k masks with IOU scores.

    Features are upscaled 4x by transposed convolutions; each token is mapped
    to a channel filter whose dot product with the upscaled features gives that
    class's logit plane, bilinearly resized to the input resolution. A shared
    regression head squashed through a sigmoid predicts each mask's IOU.
    """

    def __init__(
        self,
        dim: int = 256,
        depth: int = 2,
        num_heads: int = 4,
        token_self_attention: bool = False,
        stride: int = 16,
    ):
        super().__init__()
        if dim % 8 != 0:
            raise ValueError(f"decoder dim must be a multiple of 8, got {dim}")
        self.dim = dim
        self.stride = stride
        self.blocks = nn.ModuleList(
            DecoderBlock(dim, num_heads, token_self_attention) for _ in range(depth)
        )
        self.final_attn = Attention(dim, num_heads)
        self.norm_final = nn.LayerNorm(dim)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, kernel_size=2, stride=2),
            LayerNorm2d(dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hyper = Mlp(dim, dim, dim // 8, depth=3)
        self.iou_head = Mlp(dim, dim, 1, depth=3)

    def forward(self, features: Tensor, tokens: Tensor):
        single = features.ndim == 3
        if single:
            features = features.unsqueeze(0)
        if features.ndim != 4 or features.shape[1] != self.dim:
            raise ValueError(
                f"expected features [B, {self.dim}, h, w], got {tuple(features.shape)}"
            )
        if tokens.ndim == 2:
            tokens = tokens.unsqueeze(0).expand(features.shape[0], -1, -1)
        if tokens.shape[-1] != self.dim:
            raise ValueError(
                f"prompt dim {tokens.shape[-1]} does not match decoder dim {self.dim}"
            )
        b, d, h, w = features.shape
        pe = sincos_positions(h, w, d, dtype=features.dtype)
        feats = features.flatten(2).transpose(1, 2)
        for block in self.blocks:
            tokens, feats = block(tokens, feats, pe)
        tokens = self.norm_final(tokens + self.final_attn(tokens, feats + pe, feats))

        grid = feats.transpose(1, 2).reshape(b, d, h, w)
        upscaled = self.upscale(grid)
        filters = self.hyper(tokens)
        logits = torch.einsum("bkc,bchw->bkhw", filters, upscaled)
        logits = F.interpolate(
            logits, size=(h * self.stride, w * self.stride), mode="bilinear", align_corners=False
        )
        ious = torch.sigmoid(self.iou_head(tokens)).squeeze(-1)
        if single:
            return logits.squeeze(0), ious.squeeze(0)
        return logits, ious


def decode(h_aligned: Tensor, prompts: Tensor, decoder: MaskDecoder) -> SegmentationOutput:
    """Decode one aligned feature map with k prompt tokens."""
    if h_aligned.ndim != 3:
        raise ValueError(f"expected an unbatched [C, h, w] feature map, got {tuple(h_aligned.shape)}")
    if prompts.ndim != 2:
        raise ValueError(f"expected [k, d] prompt tokens, got {tuple(prompts.shape)}")
    logits, ious = decoder(h_aligned, prompts)
    return SegmentationOutput(mask_logits=logits, ious=ious)


def predict_semantic(out: SegmentationOutput) -> np.ndarray:
    """Per-pixel argmax over the class logit planes; ties go to the lowest class."""
    logits = out.mask_logits.detach().cpu().numpy()
    return np.argmax(logits, axis=0).astype(np.int64)


def save_label_png(labels: np.ndarray, path) -> None:
    """Write a label map as a single-channel 8-bit PNG (pixel value = class)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in 8 bits")
    from PIL import Image

    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)
