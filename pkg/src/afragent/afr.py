"""Adaptive feature renormalization: token-aligned affine modulation of queries.

A fusion block turns an enrichment stream into per-token coefficients through
two independent feed-forwards, then rescales a target stream:

    alpha = FFN_a(enrich)    beta = FFN_b(enrich)    out = alpha * target + beta

Both coefficient FFNs have zero-initialized output layers with bias 1 for
alpha and 0 for beta, so a freshly built block is exactly the identity on its
target; fusion strategies therefore start indistinguishable from no fusion
and only diverge through training.

Low resolution enriches the final query stream with the raw image tokens
(token-aligned because the query bank has one query per image token). High
resolution enriches the image-conditioned queries from the first pass with
the crop-conditioned queries from the second pass.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .layers import FeedForward, prefixed
from .numerics import Tensor

FUSION_LOW = ("afr", "residual", "none")
FUSION_HIGH = ("afr", "none")
BETA_SOURCES = ("high", "image")


class AlignmentError(ValueError):
    """Enrichment and target streams disagree on token count."""


def _check_aligned(enrich_rows: int, target_rows: int) -> None:
    if enrich_rows != target_rows:
        raise AlignmentError(
            f"enrichment has {enrich_rows} tokens but target has {target_rows}; "
            "modulation is per token and needs equal counts"
        )


class AFRBlock:
    """Per-token affine modulation with learned, identity-initialized coefficients."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.d_in = d_in
        self.d_out = d_out
        self.ffn_alpha = FeedForward(rng, d_in, d_hidden, d_out, zero_init_out=True, out_bias_fill=1.0)
        self.ffn_beta = FeedForward(rng, d_in, d_hidden, d_out, zero_init_out=True, out_bias_fill=0.0)

    def coefficients(self, enrich: Tensor) -> tuple[Tensor, Tensor]:
        if enrich.shape[1] != self.d_in:
            raise nm.ShapeError(f"enrichment width {enrich.shape[1]} != block d_in {self.d_in}")
        return self.ffn_alpha(enrich), self.ffn_beta(enrich)

    def modulate(self, enrich: Tensor, target: Tensor) -> Tensor:
        """alpha(enrich) * target + beta(enrich), token i modulating token i."""
        _check_aligned(enrich.shape[0], target.shape[0])
        if target.shape[1] != self.d_out:
            raise nm.ShapeError(f"target width {target.shape[1]} != block d_out {self.d_out}")
        alpha, beta = self.coefficients(enrich)
        return nm.add(nm.mul(alpha, target), beta)

    def params(self) -> dict[str, Tensor]:
        return {
            **prefixed("ffn_alpha", self.ffn_alpha.params()),
            **prefixed("ffn_beta", self.ffn_beta.params()),
        }


def enrich_low_res(block: AFRBlock, image_tokens: Tensor, e_q_final: Tensor) -> Tensor:
    """Modulate the final query stream with the encoder's image tokens."""
    return block.modulate(image_tokens, e_q_final)


def enrich_high_res(
    block: AFRBlock,
    e_q_crops: Tensor,
    e_q_image: Tensor,
    beta_source: str = "high",
) -> Tensor:
    """Modulate first-pass queries with crop-pass queries.

    beta_source picks where the additive coefficient comes from: "high" uses
    the crop-conditioned queries for both coefficients; "image" keeps alpha
    from the crop pass but derives beta from the first-pass queries instead.
    """
    if beta_source not in BETA_SOURCES:
        raise ValueError(f"beta_source must be one of {BETA_SOURCES}, got {beta_source!r}")
    _check_aligned(e_q_crops.shape[0], e_q_image.shape[0])
    if beta_source == "high":
        return block.modulate(e_q_crops, e_q_image)
    alpha = block.ffn_alpha(e_q_crops)
    beta = block.ffn_beta(e_q_image)
    return nm.add(nm.mul(alpha, e_q_image), beta)


class ResidualFusion:
    """Ablation baseline: target + MLP(enrich), also an identity at init."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.d_in = d_in
        self.d_out = d_out
        self.mlp = FeedForward(rng, d_in, d_hidden, d_out, zero_init_out=True, out_bias_fill=0.0)

    def fuse(self, enrich: Tensor, target: Tensor) -> Tensor:
        _check_aligned(enrich.shape[0], target.shape[0])
        if target.shape[1] != self.d_out:
            raise nm.ShapeError(f"target width {target.shape[1]} != fusion d_out {self.d_out}")
        return nm.add(target, self.mlp(enrich))

    def params(self) -> dict[str, Tensor]:
        return prefixed("mlp", self.mlp.params())
