"""Small vision and text encoders with a frozen-text-side adapter.

The vision encoder is a 4-block convolutional network; the text encoder
is a 2-layer token-sequence transformer kept frozen throughout training
(the seam accepts pretrained weights but ships with a fixed random
initialization). A lightweight adapter (one self-attention layer plus a
two-layer MLP, both residual) refines the final token sequence before
pooling.
"""

from __future__ import annotations

import math
import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F

MAX_SEQ_LEN = 77
LOGIT_SCALE_INIT = math.log(1.0 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)

PAD, START, END = 0, 1, 2

_BASE_WORDS = (
    "a", "an", "the", "of", "with", "image", "images", "fluorescence",
    "microscopy", "stain", "stained", "focus", "level", "rank", "sharp",
    "blurred", "tissue", "cell", "nucleus", "like",
    "hoechst", "dapi", "alexa", "cy3", "cy5", "fitc", "gfp", "phalloidin",
    "488", "546", "555", "594", "647", "33342", "34580",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
)
_NUM_HASH_BUCKETS = 64


class Vocabulary:
    """Word-level vocabulary with deterministic hash buckets for OOV."""

    def __init__(self):
        self.word_to_id = {w: i + 3 for i, w in enumerate(_BASE_WORDS)}
        self._bucket_base = 3 + len(_BASE_WORDS)
        self.size = self._bucket_base + _NUM_HASH_BUCKETS

    def token_id(self, word: str) -> int:
        word = word.lower()
        if word in self.word_to_id:
            return self.word_to_id[word]
        return self._bucket_base + zlib.crc32(word.encode()) % _NUM_HASH_BUCKETS

    def tokenize(self, text: str) -> list[int]:
        words = []
        current = []
        for ch in text.lower():
            if ch.isalnum():
                current.append(ch)
            elif current:
                words.append("".join(current))
                current = []
        if current:
            words.append("".join(current))
        return [self.token_id(w) for w in words]


class VisionEncoder(nn.Module):
    """4-block conv net mapping HxW grayscale images to unit vectors."""

    def __init__(self, image_size: int = 64, embed_dim: int = 64, width: int = 16):
        super().__init__()
        self.image_size = image_size
        self.embed_dim = embed_dim
        widths = [width, width * 2, width * 4, width * 4]
        blocks = []
        in_ch = 1
        for w in widths:
            blocks += [
                nn.Conv2d(in_ch, w, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(4, w),
                nn.GELU(),
            ]
            in_ch = w
        self.blocks = nn.Sequential(*blocks)
        self.proj = nn.Linear(in_ch, embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 2:
            images = images[None]
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} images, "
                f"got {tuple(images.shape[-2:])}"
            )
        x = images[:, None, :, :] if images.dim() == 3 else images
        x = self.blocks(x)
        x = x.mean(dim=(2, 3))
        x = self.proj(x)
        return F.normalize(x, dim=-1)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class TextEncoder(nn.Module):
    """Frozen 2-layer sequence encoder over token embeddings.

    Callers pass already-embedded token sequences (learnable prompt
    tokens mixed with vocabulary embeddings); pooling happens at the
    end-of-sequence position, followed by a projection to the shared
    embedding dimension.
    """

    def __init__(
        self,
        vocab_size: int,
        token_dim: int = 64,
        embed_dim: int = 64,
        layers: int = 2,
        heads: int = 4,
    ):
        super().__init__()
        self.token_dim = token_dim
        self.embed_dim = embed_dim
        self.token_embedding = nn.Embedding(vocab_size, token_dim)
        self.positional = nn.Parameter(torch.empty(MAX_SEQ_LEN, token_dim))
        nn.init.normal_(self.positional, std=0.01)
        self.blocks = nn.ModuleList(
            TransformerBlock(token_dim, heads) for _ in range(layers)
        )
        self.final_norm = nn.LayerNorm(token_dim)
        self.proj = nn.Linear(token_dim, embed_dim, bias=False)

    def embed_ids(self, ids: list[int]) -> torch.Tensor:
        idx = torch.as_tensor(ids, dtype=torch.long)
        return self.token_embedding(idx)

    def token_sequence_features(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run the frozen encoder stack over (B, T, D_tok) embeddings."""
        if tokens.shape[1] > MAX_SEQ_LEN:
            raise ValueError(
                f"sequence length {tokens.shape[1]} exceeds maximum {MAX_SEQ_LEN}"
            )
        x = tokens + self.positional[: tokens.shape[1]]
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def pool_and_project(self, features: torch.Tensor, eos_index: int) -> torch.Tensor:
        pooled = features[:, eos_index, :]
        return F.normalize(self.proj(pooled), dim=-1)


class Adapter(nn.Module):
    """Single-head self-attention plus a two-layer MLP, both residual.

    Operates on the text encoder's final token sequence (before pooling);
    preserves the (tokens x dim) shape.
    """

    def __init__(self, dim: int, mlp_ratio: int = 2):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, num_heads=1, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


def encode_tokens(
    encoder: TextEncoder,
    adapter: Adapter,
    tokens: torch.Tensor,
    eos_index: int,
) -> torch.Tensor:
    """Frozen encode, adapt the token sequence, pool at EOS, normalize."""
    features = encoder.token_sequence_features(tokens)
    features = adapter(features)
    return encoder.pool_and_project(features, eos_index)


def cosine_logits(
    image_features: torch.Tensor,
    text_features: torch.Tensor,
    logit_scale: torch.Tensor,
) -> torch.Tensor:
    """Scaled cosine similarities between rows of images and texts.

    Both inputs must be row-normalized; the scale is exp(learnable)
    clamped to at most 100.
    """
    if __debug__:
        with torch.no_grad():
            for t in (image_features, text_features):
                norms = t.norm(dim=-1)
                if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
                    raise AssertionError("cosine_logits expects unit-norm rows")
    scale = torch.exp(torch.clamp(logit_scale, max=LOGIT_SCALE_MAX))
    return scale * image_features @ text_features.t()
