import math
from dataclasses import dataclass

import torch
from diffusers import UNet2DConditionModel
from torch import nn

from .config import DenoiserConfig, DetectorConfig, EncoderConfig
from .errors import ConfigError, ShapeMismatchError


class ConditionalDenoiser(nn.Module):
    """Noise predictor eps(x_t, t, condition) with cross-attention over the condition tokens"""

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        levels = len(config.block_channels)
        self.unet = UNet2DConditionModel(
            sample_size=config.image_size // config.latent_downsample,
            in_channels=config.channels,
            out_channels=config.channels,
            layers_per_block=config.layers_per_block,
            block_out_channels=tuple(config.block_channels),
            down_block_types=("DownBlock2D",) + ("CrossAttnDownBlock2D",) * (levels - 1),
            up_block_types=("CrossAttnUpBlock2D",) * (levels - 1) + ("UpBlock2D",),
            cross_attention_dim=config.condition_dim,
            attention_head_dim=config.attention_heads,
            norm_num_groups=config.norm_groups,
            use_linear_projection=True,
        )
        self.null_condition = nn.Parameter(torch.randn(config.condition_dim) * 0.02)

    def forward(self, x: torch.Tensor, t: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        if condition.dim() != 3 or condition.shape[-1] != self.config.condition_dim:
            raise ShapeMismatchError(
                f"Condition must be (batch, tokens, {self.config.condition_dim}), got {tuple(condition.shape)}"
            )
        return self.unet(x, t, encoder_hidden_states=condition).sample

    def null_condition_like(self, batch: int, length: int) -> torch.Tensor:
        return self.null_condition.expand(batch, length, -1)


class CategoryConditioner(nn.Module):
    """Bag-of-categories condition: slot 0 is the mean of present categories, then one row per instance"""

    def __init__(self, num_categories: int, emb: int) -> None:
        super().__init__()
        self.embedding = nn.Embedding(num_categories, emb)
        nn.init.normal_(self.embedding.weight, std=0.5)

    def instance_tokens(self, instance_ids: torch.Tensor) -> torch.Tensor:
        """(B, M) category ids with -1 for empty slots -> (B, M, emb), zero rows for empty slots"""
        valid = instance_ids >= 0
        tokens = self.embedding(instance_ids.clamp(min=0))
        return tokens * valid.unsqueeze(-1).to(tokens.dtype)

    def forward(self, instance_ids: torch.Tensor) -> torch.Tensor:
        valid = instance_ids >= 0
        present = torch.zeros(instance_ids.shape[0], self.embedding.num_embeddings, device=instance_ids.device)
        present.scatter_(1, instance_ids.clamp(min=0), valid.to(present.dtype))
        present = (present > 0).to(self.embedding.weight.dtype)
        summary = present @ self.embedding.weight / present.sum(dim=1, keepdim=True).clamp(min=1.0)
        return torch.cat([summary.unsqueeze(1), self.instance_tokens(instance_ids)], dim=1)


@dataclass
class EncoderOutput:
    summary: torch.Tensor
    patch_tokens: torch.Tensor
    block_features: list[torch.Tensor]


def _conv_block(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(min(8, c_out), c_out),
        nn.SiLU(),
    )


class PatchEncoder(nn.Module):
    """Four conv blocks to a patch grid, plus a learned summary token pooled by attention"""

    STRIDES = (2, 2, 2, 1)

    def __init__(self, config: EncoderConfig, num_categories: int) -> None:
        super().__init__()
        if config.channels[-1] != config.emb:
            raise ConfigError(f"Last encoder block width {config.channels[-1]} must equal emb {config.emb}")
        self.config = config
        widths = [3, *config.channels]
        self.blocks = nn.ModuleList(
            _conv_block(c_in, c_out, stride) for c_in, c_out, stride in zip(widths[:-1], widths[1:], self.STRIDES,
                                                                            strict=True)
        )
        self.query = nn.Parameter(torch.randn(1, 1, config.emb) * 0.02)
        self.pool = nn.MultiheadAttention(config.emb, config.pool_heads, batch_first=True)
        self.norm = nn.LayerNorm(config.emb)
        self.head = nn.Linear(config.emb, num_categories)

    def forward(self, images: torch.Tensor) -> EncoderOutput:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeMismatchError(f"Encoder expects (batch, 3, H, W) images, got {tuple(images.shape)}")
        h = (images - 0.5) / 0.5
        features = []
        for block in self.blocks:
            h = block(h)
            features.append(h)
        patches = h.flatten(2).transpose(1, 2)
        pooled, _ = self.pool(self.query.expand(h.shape[0], -1, -1), patches, patches, need_weights=False)
        return EncoderOutput(summary=self.norm(pooled[:, 0]), patch_tokens=patches, block_features=features)

    def summary(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images).summary

    def classify(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.summary(images))


class GridDetector(nn.Module):
    """Scores every (prompt token, grid cell) pair by a scaled dot product between cell features and token queries"""

    def __init__(self, vocabulary: list[str], config: DetectorConfig, image_size: int, grid_size: int) -> None:
        super().__init__()
        stride = 2 ** len(config.channels)
        if image_size // stride != grid_size or image_size % stride:
            raise ConfigError(f"{len(config.channels)} stride-2 blocks map {image_size}px to "
                              f"{image_size // stride} cells, expected {grid_size}")
        self.vocabulary = list(vocabulary)
        self.word_index = {w: i for i, w in enumerate(self.vocabulary)}
        self.grid_size = grid_size
        self.feature_dim = config.feature_dim

        widths = [5, *config.channels]
        self.backbone = nn.Sequential(
            *(_conv_block(c_in, c_out, 2) for c_in, c_out in zip(widths[:-1], widths[1:], strict=True)),
            _conv_block(widths[-1], widths[-1], 1),
            nn.Conv2d(widths[-1], config.feature_dim, 1),
        )
        self.word_embedding = nn.Embedding(len(self.vocabulary), config.feature_dim)
        self.phrase_proj = nn.Linear(config.feature_dim, config.feature_dim)
        self.bias = nn.Parameter(torch.tensor(-4.0))

    def cell_features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, G*G, D)"""
        b, _, h, w = images.shape
        ys = torch.linspace(-1.0, 1.0, h, device=images.device, dtype=images.dtype)
        xs = torch.linspace(-1.0, 1.0, w, device=images.device, dtype=images.dtype)
        coords = torch.stack(torch.meshgrid(ys, xs, indexing="ij")).expand(b, -1, -1, -1)
        features = self.backbone(torch.cat([(images - 0.5) / 0.5, coords], dim=1))
        return features.flatten(2).transpose(1, 2)

    def word_ids(self, words: list[str]) -> torch.Tensor:
        missing = [w for w in words if w not in self.word_index]
        if missing:
            raise ValueError(f"Prompt words {missing} are not in the detector vocabulary {self.vocabulary}")
        return torch.tensor([self.word_index[w] for w in words], device=self.word_embedding.weight.device)

    def token_queries(self, phrases: list[list[str]]) -> torch.Tensor:
        """One query per token, in prompt order; each token is conditioned on the mean of its phrase"""
        queries = []
        for words in phrases:
            embedded = self.word_embedding(self.word_ids(words))
            queries.append(embedded + self.phrase_proj(embedded.mean(dim=0, keepdim=True)))
        return torch.cat(queries, dim=0)

    def logits(self, features: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """(B, G*G, D) x (L, D) -> (B, L, G*G)"""
        scores = torch.einsum("bcd,ld->blc", features, queries.to(features.dtype))
        return scores / math.sqrt(self.feature_dim) + self.bias

    def forward(self, images: torch.Tensor, phrases: list[list[str]]) -> torch.Tensor:
        return self.logits(self.cell_features(images), self.token_queries(phrases))

