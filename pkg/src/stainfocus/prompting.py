"""Stain tokens, base rank embeddings, conditioning, and prompt assembly.

Rank prompts are built from a small set of base (anchor) rank embeddings:
each base embedding is conditioned on the stain's token embedding through
a residual MLP, and intermediate ranks are convex combinations of the
conditioned anchors. Prompts are pseudo-sentences of continuous tokens:
[start][stain-context][stain tokens][rank-context][rank tokens][end].
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .encoders import END, MAX_SEQ_LEN, START, TextEncoder


def interpolation_weights(num_levels: int, anchors) -> torch.Tensor:
    """K x K' piecewise-linear inverse-distance weights.

    Ranks and anchors are 1-indexed. A rank between two adjacent anchors
    splits its weight by inverse distance; ranks at an anchor get a
    one-hot row. Rows are non-negative and sum to 1.
    """
    anchors = [float(a) for a in anchors]
    if len(anchors) < 2:
        raise ValueError(f"need at least 2 anchors, got {len(anchors)}")
    if any(b <= a for a, b in zip(anchors, anchors[1:])):
        raise ValueError(f"anchors must be strictly increasing: {anchors}")
    if anchors[0] != 1.0 or anchors[-1] != float(num_levels):
        raise ValueError(
            f"anchors must span [1, {num_levels}], got [{anchors[0]}, {anchors[-1]}]"
        )
    weights = torch.zeros(num_levels, len(anchors), dtype=torch.float64)
    for k in range(1, num_levels + 1):
        for j, p in enumerate(anchors):
            if k == p:
                weights[k - 1, j] = 1.0
                break
        else:
            j = max(i for i, p in enumerate(anchors) if p < k)
            left, right = anchors[j], anchors[j + 1]
            weights[k - 1, j] = (right - k) / (right - left)
            weights[k - 1, j + 1] = (k - left) / (right - left)
    return weights


class StainTable(nn.Module):
    """L learnable stain token embeddings plus the stain name vocabulary."""

    def __init__(self, names, tokens_per_stain: int, token_dim: int):
        super().__init__()
        names = tuple(names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate stain names: {names}")
        self.names = names
        self.tokens_per_stain = tokens_per_stain
        self.embeddings = nn.Parameter(
            torch.empty(len(names), tokens_per_stain, token_dim)
        )
        nn.init.normal_(self.embeddings, std=0.02)

    @property
    def num_stains(self) -> int:
        return len(self.names)

    def init_from_names(self, encoder: TextEncoder) -> None:
        """Reset each stain's tokens to its tokenized-name embeddings.

        Names shorter than tokens_per_stain are padded by repeating the
        last token; longer ones are truncated.
        """
        from .encoders import Vocabulary

        vocab = Vocabulary()
        with torch.no_grad():
            for i, name in enumerate(self.names):
                ids = vocab.tokenize(name) or [vocab.token_id(name)]
                while len(ids) < self.tokens_per_stain:
                    ids.append(ids[-1])
                ids = ids[: self.tokens_per_stain]
                self.embeddings[i] = encoder.embed_ids(ids)

    def stain_tokens(self, stain_id: int) -> torch.Tensor:
        if not (0 <= stain_id < self.num_stains):
            raise ValueError(f"invalid stain_id {stain_id} for {self.num_stains} stains")
        return self.embeddings[stain_id]


class RankSpace(nn.Module):
    """Base rank embeddings, anchor interpolation and stain conditioning."""

    def __init__(
        self,
        num_levels: int,
        token_dim: int,
        tokens_per_rank: int = 2,
        anchors=None,
        hidden_dim: int | None = None,
    ):
        super().__init__()
        if anchors is None:
            anchors = (1, num_levels)
        self.num_levels = num_levels
        self.anchors = tuple(float(a) for a in anchors)
        self.tokens_per_rank = tokens_per_rank
        weights = interpolation_weights(num_levels, self.anchors)
        self.register_buffer("weights", weights.to(torch.get_default_dtype()))
        self.base = nn.Parameter(
            torch.empty(len(self.anchors), tokens_per_rank, token_dim)
        )
        nn.init.normal_(self.base, std=0.02)
        hidden = hidden_dim or token_dim
        self.cond_in = nn.Linear(2 * token_dim, hidden)
        self.cond_act = nn.GELU()
        self.cond_out = nn.Linear(hidden, token_dim)
        # zero-init so training starts from the stain-agnostic model
        nn.init.zeros_(self.cond_out.weight)
        nn.init.zeros_(self.cond_out.bias)

    @property
    def num_base(self) -> int:
        return len(self.anchors)

    def conditioner_parameters(self):
        return [
            self.cond_in.weight,
            self.cond_in.bias,
            self.cond_out.weight,
            self.cond_out.bias,
        ]

    def condition(self, stain_tokens: torch.Tensor) -> torch.Tensor:
        """Project base embeddings into the stain's space (residual MLP).

        stain_tokens: (C, D). Returns (K', C_r, D): base + MLP applied
        token-wise to concat(base token, mean stain token).
        """
        if stain_tokens.dim() != 2 or stain_tokens.shape[-1] != self.base.shape[-1]:
            raise ValueError(
                f"stain_tokens shape {tuple(stain_tokens.shape)} incompatible "
                f"with base token dim {self.base.shape[-1]}"
            )
        pooled = stain_tokens.mean(dim=0)
        expanded = pooled.expand(self.num_base, self.tokens_per_rank, -1)
        mlp_in = torch.cat([self.base, expanded], dim=-1)
        delta = self.cond_out(self.cond_act(self.cond_in(mlp_in)))
        return self.base + delta

    def interpolate(self, conditioned: torch.Tensor) -> torch.Tensor:
        """Convex-combine (K', C_r, D) anchors into (K, C_r, D) rank tokens."""
        if conditioned.shape[0] != self.num_base:
            raise ValueError(
                f"expected {self.num_base} conditioned embeddings, "
                f"got {conditioned.shape[0]}"
            )
        return torch.einsum("kj,jcd->kcd", self.weights, conditioned)

    def rank_tokens(self, stain_tokens: torch.Tensor | None) -> torch.Tensor:
        """Stain-guided rank tokens, or plain interpolated base tokens."""
        if stain_tokens is None:
            return self.interpolate(self.base)
        return self.interpolate(self.condition(stain_tokens))


class PromptBuilder(nn.Module):
    """Learnable context tokens and pseudo-sentence assembly.

    The stain context is fixed during the grounding stage and trainable
    (with the rank context) during the ranking stage; both are
    initialized from the token embeddings of fixed phrases.
    """

    STAIN_PHRASE = "a fluorescence image stained with"
    RANK_PHRASE = "with focus level"

    def __init__(self, encoder: TextEncoder):
        super().__init__()
        from .encoders import Vocabulary

        vocab = Vocabulary()
        with torch.no_grad():
            stain_ids = vocab.tokenize(self.STAIN_PHRASE)
            rank_ids = vocab.tokenize(self.RANK_PHRASE)
            self.stain_context = nn.Parameter(
                encoder.embed_ids(stain_ids).detach().clone()
            )
            self.rank_context = nn.Parameter(
                encoder.embed_ids(rank_ids).detach().clone()
            )
            self.register_buffer(
                "start_token", encoder.embed_ids([START]).detach().clone()
            )
            self.register_buffer(
                "end_token", encoder.embed_ids([END]).detach().clone()
            )

    @staticmethod
    def _assemble(segments) -> tuple[torch.Tensor, int]:
        seq = torch.cat(segments, dim=0)
        if seq.shape[0] > MAX_SEQ_LEN:
            raise ValueError(
                f"assembled prompt length {seq.shape[0]} exceeds {MAX_SEQ_LEN}"
            )
        return seq, seq.shape[0] - 1  # EOS position

    def stain_prompts(self, table: StainTable) -> tuple[torch.Tensor, int]:
        """(L, T, D) grounding-stage prompts [start][ctx][S_l][end] + EOS index."""
        prompts = []
        eos = None
        for l in range(table.num_stains):
            seq, eos = self._assemble(
                [self.start_token, self.stain_context, table.stain_tokens(l),
                 self.end_token]
            )
            prompts.append(seq)
        return torch.stack(prompts), eos

    def rank_prompts(
        self,
        table: StainTable | None,
        stain_id: int | None,
        rank_tokens: torch.Tensor,
    ) -> tuple[torch.Tensor, int]:
        """(K, T, D) ranking-stage prompts + EOS index.

        With a stain table, the layout is [start][stain-context][S_s]
        [rank-context][rank_k][end]; without one (rank-only ablation)
        the stain segment is omitted.
        """
        prompts = []
        eos = None
        for k in range(rank_tokens.shape[0]):
            if table is None:
                segments = [self.start_token, self.rank_context,
                            rank_tokens[k], self.end_token]
            else:
                segments = [self.start_token, self.stain_context,
                            table.stain_tokens(stain_id), self.rank_context,
                            rank_tokens[k], self.end_token]
            seq, eos = self._assemble(segments)
            prompts.append(seq)
        return torch.stack(prompts), eos

    def segment_layout(self, table: StainTable | None, space: RankSpace) -> dict:
        """Token index ranges of each segment in a ranking prompt."""
        pos = 1  # after [start]
        layout = {}
        if table is not None:
            layout["stain_context"] = (pos, pos + self.stain_context.shape[0])
            pos += self.stain_context.shape[0]
            layout["stain_tokens"] = (pos, pos + table.tokens_per_stain)
            pos += table.tokens_per_stain
        layout["rank_context"] = (pos, pos + self.rank_context.shape[0])
        pos += self.rank_context.shape[0]
        layout["rank_tokens"] = (pos, pos + space.tokens_per_rank)
        pos += space.tokens_per_rank
        layout["end"] = (pos, pos + 1)
        return layout
