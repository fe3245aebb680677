"""Two-stage ordinal focus model: container, freezing schedule, checkpoints.

The model couples a trainable vision encoder with a frozen text encoder,
a stain-token table grounded in stage 1, and a stain-conditioned rank
space trained in stage 2. Ablation variants reuse the same container:

    A  rank prompts only (no stain segment, no conditioning)
    B  stain segment frozen at tokenized stain-name embeddings
    C  stain segment trainable during ranking, never grounded
    D  stain segment grounded in stage 1, frozen afterwards
    E  D plus stain-conditioned rank embeddings
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import (
    Adapter,
    LOGIT_SCALE_INIT,
    TextEncoder,
    VisionEncoder,
    Vocabulary,
    cosine_logits,
    encode_tokens,
)
from .prompting import PromptBuilder, RankSpace, StainTable

CHECKPOINT_VERSION = 1

VARIANTS = ("A", "B", "C", "D", "E")
#: variants whose rank prompts carry a stain segment
STAIN_SEGMENT_VARIANTS = ("B", "C", "D", "E")
#: variants that require the grounding stage
GROUNDED_VARIANTS = ("D", "E")


@dataclass(frozen=True)
class ModelConfig:
    stain_names: tuple
    num_levels: int = 10
    image_size: int = 64
    embed_dim: int = 64
    token_dim: int = 64
    tokens_per_stain: int = 2
    tokens_per_rank: int = 2
    anchors: tuple = ()  # empty means (1, num_levels)
    cond_hidden: int = 64
    vision_width: int = 16
    text_layers: int = 2
    text_heads: int = 4
    variant: str = "E"
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_levels < 2:
            raise ValueError("num_levels must be >= 2")


class FocusRankModel(nn.Module):
    """Full model state: encoders, adapter, stain table, rank space."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.init_seed)
        vocab = Vocabulary()
        self.vision_encoder = VisionEncoder(
            config.image_size, config.embed_dim, config.vision_width
        )
        self.text_encoder = TextEncoder(
            vocab.size,
            config.token_dim,
            config.embed_dim,
            config.text_layers,
            config.text_heads,
        )
        self.adapter = Adapter(config.token_dim)
        self.stain_table = StainTable(
            config.stain_names, config.tokens_per_stain, config.token_dim
        )
        anchors = config.anchors or (1, config.num_levels)
        self.rank_space = RankSpace(
            config.num_levels,
            config.token_dim,
            config.tokens_per_rank,
            anchors,
            config.cond_hidden,
        )
        self.prompt = PromptBuilder(self.text_encoder)
        self.logit_scale = nn.Parameter(torch.tensor(LOGIT_SCALE_INIT))
        # stain tokens start at their tokenized-name embeddings for every
        # variant; grounding then refines them for D/E
        self.stain_table.init_from_names(self.text_encoder)
        # the text encoder stays frozen through both stages
        for p in self.text_encoder.parameters():
            p.requires_grad_(False)
        # rides the state dict so checkpoints remember stage-1 completion
        self.register_buffer("grounded_flag", torch.tensor(0, dtype=torch.long))
        self._text_cache: dict = {}

    # -- prompt encoding -------------------------------------------------

    @property
    def uses_stain_segment(self) -> bool:
        return self.config.variant in STAIN_SEGMENT_VARIANTS

    @property
    def uses_conditioning(self) -> bool:
        return self.config.variant == "E"

    def stain_text_features(self) -> torch.Tensor:
        """(L, D) grounding-stage prompt embeddings, one per stain."""
        prompts, eos = self.prompt.stain_prompts(self.stain_table)
        return encode_tokens(self.text_encoder, self.adapter, prompts, eos)

    def rank_text_features(self, stain_id: int, use_cache: bool = False) -> torch.Tensor:
        """(K, D) ranking-stage prompt embeddings for one stain."""
        if use_cache and stain_id in self._text_cache:
            return self._text_cache[stain_id]
        if self.uses_stain_segment:
            stain_tokens = self.stain_table.stain_tokens(stain_id)
            rank_tokens = self.rank_space.rank_tokens(
                stain_tokens if self.uses_conditioning else None
            )
            prompts, eos = self.prompt.rank_prompts(
                self.stain_table, stain_id, rank_tokens
            )
        else:
            rank_tokens = self.rank_space.rank_tokens(None)
            prompts, eos = self.prompt.rank_prompts(None, None, rank_tokens)
        features = encode_tokens(self.text_encoder, self.adapter, prompts, eos)
        if use_cache:
            self._text_cache[stain_id] = features.detach()
        return features

    def clear_text_cache(self) -> None:
        self._text_cache.clear()

    def train(self, mode: bool = True):
        # parameters only change in training mode, so mode transitions
        # are the cache invalidation points
        if mode != self.training:
            self.clear_text_cache()
        return super().train(mode)

    # -- forward paths ---------------------------------------------------

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        return self.vision_encoder(images)

    def stain_logits(self, images: torch.Tensor) -> torch.Tensor:
        """(B, L) scaled cosine similarities against stain prompts."""
        v = self.encode_images(images)
        t = self.stain_text_features()
        return cosine_logits(v, t, self.logit_scale)

    def rank_logits(
        self, images: torch.Tensor, stain_ids, use_cache: bool = False
    ) -> torch.Tensor:
        """(B, K) scaled cosine similarities against each rank prompt."""
        v = self.encode_images(images)
        stain_ids = torch.as_tensor(stain_ids, dtype=torch.long)
        if stain_ids.numel() != v.shape[0]:
            raise ValueError("stain_ids length must match batch size")
        if not self.uses_stain_segment:
            t = self.rank_text_features(0, use_cache=use_cache)
            return cosine_logits(v, t, self.logit_scale)
        out = torch.empty(
            v.shape[0], self.config.num_levels, dtype=v.dtype, device=v.device
        )
        for sid in stain_ids.unique().tolist():
            t = self.rank_text_features(sid, use_cache=use_cache)
            sel = stain_ids == sid
            out[sel] = cosine_logits(v[sel], t, self.logit_scale)
        return out

    @torch.no_grad()
    def predict_batch(self, images: torch.Tensor, stain_ids):
        """(argmax ranks, probabilities, expected ranks) for a batch."""
        was_training = self.training
        self.eval()
        logits = self.rank_logits(images, stain_ids, use_cache=True)
        probs = F.softmax(logits, dim=-1)
        ranks = torch.argmax(logits, dim=-1)
        levels = torch.arange(self.config.num_levels, dtype=probs.dtype)
        expected = (probs * levels).sum(dim=-1)
        if was_training:
            self.train()
        return ranks, probs, expected

    # -- freezing schedule ------------------------------------------------

    def parameter_groups(self) -> dict:
        """Named parameter groups used by the stage freezing schedule."""
        return {
            "vision_encoder": list(self.vision_encoder.parameters()),
            "text_encoder": list(self.text_encoder.parameters()),
            "adapter": list(self.adapter.parameters()),
            "stain_table": [self.stain_table.embeddings],
            "rank_base": [self.rank_space.base],
            "conditioner": self.rank_space.conditioner_parameters(),
            "stain_context": [self.prompt.stain_context],
            "rank_context": [self.prompt.rank_context],
            "logit_scale": [self.logit_scale],
        }

    def stage_update_groups(self, stage: int) -> tuple:
        """Parameter groups a training stage is allowed to update."""
        if stage == 1:
            return ("stain_table", "adapter")
        if stage != 2:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        groups = ["rank_base", "rank_context", "vision_encoder", "logit_scale"]
        if self.uses_stain_segment:
            groups.append("stain_context")
        if self.uses_conditioning:
            groups.append("conditioner")
        if self.config.variant == "C":
            groups.append("stain_table")
        return tuple(groups)

    def set_stage(self, stage: int) -> None:
        """Freeze everything except the stage's update set."""
        allowed = set(self.stage_update_groups(stage))
        for name, params in self.parameter_groups().items():
            flag = name in allowed
            for p in params:
                p.requires_grad_(flag)
        self.clear_text_cache()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def parameter_digests(model: "FocusRankModel") -> dict:
    """SHA-256 digest per parameter group (frozen-weights audit)."""
    digests = {}
    for name, params in model.parameter_groups().items():
        h = hashlib.sha256()
        for p in params:
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        digests[name] = h.hexdigest()
    return digests


def save_checkpoint(model: FocusRankModel, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> FocusRankModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {version!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    cfg_dict = dict(payload["model_config"])
    cfg_dict["stain_names"] = tuple(cfg_dict["stain_names"])
    cfg_dict["anchors"] = tuple(cfg_dict["anchors"])
    config = ModelConfig(**cfg_dict)
    model = FocusRankModel(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def config_digest(config) -> str:
    """Stable digest of a (dataclass or dict) configuration."""
    import json

    if hasattr(config, "__dataclass_fields__"):
        config = asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()
