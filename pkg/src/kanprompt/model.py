"""Full segmentation model: dual encoders, fusion, alignment, prompts, decoder."""

from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn

from .decoder import MaskDecoder, PromptGenerator, SegmentationOutput
from .encoders import (
    BACKBONE_NAMES,
    DimensionAlign,
    EncoderConfig,
    build_encoder,
    derive_seed,
    fuse_features,
)
from .kan import SplineGrid


@dataclass(frozen=True)
class ModelConfig:
    k: int = 2
    encoder_dim: int = 64
    encoder_depth: int = 4
    decoder_dim: int = 256
    decoder_depth: int = 2
    prompt_kind: str = "kan"
    prompt_depth: int = 3
    shared_prompt_net: bool = False
    token_self_attention: bool = False
    spline_intervals: int = 8
    spline_order: int = 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class SegmentationModel(nn.Module):
    """End-to-end pipeline from an RGB image to k mask planes with IOU scores.

    Each component draws its initial parameters from a seed derived from
    (seed, component name), so two models built with the same seed share every
    component that has the same configuration.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        enc_cfg = EncoderConfig(embed_dim=cfg.encoder_dim, depth=cfg.encoder_depth, seed=seed)
        self.encoders = nn.ModuleDict({name: build_encoder(name, enc_cfg) for name in BACKBONE_NAMES})
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(seed, "align"))
            self.align = DimensionAlign(2 * cfg.encoder_dim, cfg.decoder_dim)
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(seed, "prompts"))
            grid = SplineGrid.uniform(intervals=cfg.spline_intervals, order=cfg.spline_order)
            self.prompts = PromptGenerator(
                cfg.k,
                cfg.decoder_dim,
                kind=cfg.prompt_kind,
                depth=cfg.prompt_depth,
                shared=cfg.shared_prompt_net,
                grid=grid,
            )
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(seed, "decoder"))
            self.decoder = MaskDecoder(
                cfg.decoder_dim,
                depth=cfg.decoder_depth,
                token_self_attention=cfg.token_self_attention,
            )

    def encode(self, images: Tensor, precomputed: dict | None = None) -> Tensor:
        """Fused and aligned features; `precomputed` maps encoder name -> feature map."""
        precomputed = precomputed or {}
        maps = []
        for name in BACKBONE_NAMES:
            fmap = precomputed.get(name)
            maps.append(fmap if fmap is not None else self.encoders[name](images))
        return self.align(fuse_features(*maps))

    def forward(self, images: Tensor, precomputed: dict | None = None):
        aligned = self.encode(images, precomputed)
        tokens = self.prompts()
        return self.decoder(aligned, tokens)

    @torch.no_grad()
    def predict(self, image: Tensor) -> SegmentationOutput:
        """Run one unbatched image through the pipeline."""
        if image.ndim != 3:
            raise ValueError(f"predict expects a single [3, H, W] image, got {tuple(image.shape)}")
        logits, ious = self.forward(image.unsqueeze(0))
        return SegmentationOutput(mask_logits=logits.squeeze(0), ious=ious.squeeze(0))


def freeze_encoders(model: SegmentationModel, names) -> None:
    """Stop gradient updates for the named encoders."""
    for name in names:
        if name not in BACKBONE_NAMES:
            raise ValueError(f"unknown encoder {name!r}; expected one of {BACKBONE_NAMES}")
        for p in model.encoders[name].parameters():
            p.requires_grad_(False)
