"""Query/text fusion transformer bridging image tokens to the action decoder.

A bank of M learned query tokens and up to L_T embedded text tokens travel
together through Z layers. Each layer does three things in order:

  1. joint self-attention over the concatenated query and text streams, so
     queries can read the task and history;
  2. cross-attention where only the query stream attends to the image tokens
     (the d_I -> d_Q key/value projection lives inside this sublayer);
  3. separate feed-forwards for the post-cross query stream and the post-self
     text stream.

All sublayers are pre-norm residual blocks, so zeroed output projections make
the whole stack an identity on its input streams. The same stack is reused
for high-resolution crops with a second query bank supplied by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .actions import verbalize_history
from .layers import FeedForward, LayerNorm, MultiHeadAttention, prefixed
from .numerics import Tensor
from .vocabulary import TextTokenizer


@dataclass(frozen=True)
class QFormerConfig:
    m_queries: int
    d_q: int
    d_i: int  # width of incoming image tokens
    z_layers: int
    heads: int
    ffn_mult: int
    max_text_tokens: int = 64

    def validate(self) -> None:
        for name in ("m_queries", "d_q", "d_i", "z_layers", "heads", "ffn_mult", "max_text_tokens"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"QFormerConfig.{name} must be a positive int, got {v!r}")
        if self.d_q % self.heads:
            raise ValueError(f"d_q {self.d_q} not divisible by heads {self.heads}")


class _Layer:
    def __init__(self, rng: np.random.Generator, cfg: QFormerConfig):
        d = cfg.d_q
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, cfg.heads)
        self.ln_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, cfg.heads, d_kv_in=cfg.d_i)
        self.ln_ffn_q = LayerNorm(d)
        self.ffn_q = FeedForward(rng, d, cfg.ffn_mult * d, d)
        self.ln_ffn_t = LayerNorm(d)
        self.ffn_t = FeedForward(rng, d, cfg.ffn_mult * d, d)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, piece in (
            ("ln_self", self.ln_self),
            ("self_attn", self.self_attn),
            ("ln_cross", self.ln_cross),
            ("cross_attn", self.cross_attn),
            ("ln_ffn_q", self.ln_ffn_q),
            ("ffn_q", self.ffn_q),
            ("ln_ffn_t", self.ln_ffn_t),
            ("ffn_t", self.ffn_t),
        ):
            out.update(prefixed(name, piece.params()))
        return out


class QFormer:
    """Z fusion layers plus the text embedding tables.

    The query bank itself is owned by the caller (the agent holds one bank per
    resolution), so one parameter set serves both passes.
    """

    def __init__(self, rng: np.random.Generator, cfg: QFormerConfig, tokenizer: TextTokenizer):
        cfg.validate()
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.text_embed = nm.tensor(
            nm.uniform_init(rng, (tokenizer.size, cfg.d_q), fan_in=cfg.d_q), requires_grad=True
        )
        self.text_pos = nm.tensor(
            nm.uniform_init(rng, (cfg.max_text_tokens, cfg.d_q), fan_in=cfg.d_q), requires_grad=True
        )
        self.layers = [_Layer(rng, cfg) for _ in range(cfg.z_layers)]

    # ------------------------------------------------------------------
    # text side
    # ------------------------------------------------------------------

    def encode_text_ids(self, task: str, history) -> list[int]:
        """Token ids for "<task> ; <history>", capped at max_text_tokens.

        When the combined text overflows the cap, whole history actions are
        dropped oldest-first (renumbering the survivors) before any hard
        truncation touches the tail, so the task and the freshest context
        always survive.
        """
        if not task.strip():
            raise ValueError("task text must be non-empty")
        hist = list(history)
        while True:
            ids = self.tokenizer.encode(task + " ; " + verbalize_history(hist))
            if len(ids) <= self.cfg.max_text_tokens or not hist:
                break
            hist = hist[1:]
        return ids[: self.cfg.max_text_tokens]

    def embed_text(self, ids: list[int]) -> Tensor:
        """(L_T, d_q) text tokens with learned positions added."""
        if not ids:
            raise ValueError("cannot embed an empty token id list")
        if len(ids) > self.cfg.max_text_tokens:
            raise ValueError(f"{len(ids)} text tokens exceed cap {self.cfg.max_text_tokens}")
        emb = nm.take_rows(self.text_embed, np.asarray(ids, dtype=np.int64))
        pos = nm.narrow(self.text_pos, 0, 0, len(ids))
        return nm.add(emb, pos)

    # ------------------------------------------------------------------
    # fusion stack
    # ------------------------------------------------------------------

    def layer_forward(
        self,
        z: int,
        e_q: Tensor,
        e_t: Tensor,
        images: Tensor,
        block_text_to_query: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """One fusion layer; returns the updated (query, text) streams.

        block_text_to_query is a diagnostic switch that masks text keys out of
        the query rows during joint self-attention, used to verify that text
        actually influences the queries in the normal path.
        """
        layer = self.layers[z]
        m, lt = e_q.shape[0], e_t.shape[0]

        joint = nm.concat([e_q, e_t], axis=0)
        mask = None
        if block_text_to_query:
            mask = np.zeros((m + lt, m + lt))
            mask[:m, m:] = -1e9
        normed = layer.ln_self(joint)
        joint = nm.add(joint, layer.self_attn(normed, normed, mask))
        e_q = nm.narrow(joint, 0, 0, m)
        e_t = nm.narrow(joint, 0, m, lt)

        e_q = nm.add(e_q, layer.cross_attn(layer.ln_cross(e_q), images))

        e_q = nm.add(e_q, layer.ffn_q(layer.ln_ffn_q(e_q)))
        e_t = nm.add(e_t, layer.ffn_t(layer.ln_ffn_t(e_t)))
        return e_q, e_t

    def forward(
        self,
        queries: Tensor,
        text: Tensor,
        images: Tensor,
        block_text_to_query: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """Run all Z layers; returns final (query, text) streams.

        queries: (M, d_q) bank, text: (L_T, d_q), images: (K, d_i).
        """
        if queries.shape[1] != self.cfg.d_q or text.shape[1] != self.cfg.d_q:
            raise nm.ShapeError(
                f"query/text width must be {self.cfg.d_q}, got {queries.shape} and {text.shape}"
            )
        if images.shape[1] != self.cfg.d_i:
            raise nm.ShapeError(f"image tokens must be {self.cfg.d_i} wide, got {images.shape}")
        e_q, e_t = queries, text
        for z in range(self.cfg.z_layers):
            e_q, e_t = self.layer_forward(z, e_q, e_t, images, block_text_to_query)
        return e_q, e_t

    def params(self) -> dict[str, Tensor]:
        out = {"text_embed": self.text_embed, "text_pos": self.text_pos}
        for i, layer in enumerate(self.layers):
            out.update(prefixed(f"layers.{i}", layer.params()))
        return out


def new_query_bank(rng: np.random.Generator, m: int, d_q: int) -> Tensor:
    """A learned (M, d_q) query bank parameter."""
    return nm.tensor(nm.uniform_init(rng, (m, d_q), fan_in=d_q), requires_grad=True)
