"""Closed-form multiply-accumulate counts for one teacher-forced forward pass.

Every dense operation in the model flows through the shared linear and
attention layers, so each term below names a concrete call site. The grand
total is an exact equality with the runtime matmul instrument, not an
estimate: predicted MACs == measured MACs for any configuration, text length,
and action length. Elementwise work (norms, activations, softmax) is excluded
on both sides.

FLOPs are roughly 2x MACs (one multiply and one add per accumulate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .actions import ActionVocab
from .agent import AgentConfig

# ---------------------------------------------------------------------------
# per-site formulas
# ---------------------------------------------------------------------------


def attention_block_macs(t: int, d: int, ffn_hidden: int) -> int:
    """One pre-norm self-attention block over t tokens of width d.

    q/k/v/o projections: 4*t*d^2; scores and value mixing across all heads:
    2*t^2*d (head count cancels); feed-forward: 2*t*d*ffn_hidden.
    """
    return 4 * t * d * d + 2 * t * t * d + 2 * t * d * ffn_hidden


def vision_pass_macs(n_patches: int, patch: int, d_i: int, layers: int, ffn_hidden: int) -> int:
    """Patch projection plus encoder blocks over n_patches + 1 tokens."""
    t = n_patches + 1
    return n_patches * (3 * patch * patch) * d_i + layers * attention_block_macs(t, d_i, ffn_hidden)


def fusion_pass_macs(
    m: int, l_text: int, k_img: int, d_q: int, d_i: int, z_layers: int, ffn_hidden: int
) -> tuple[int, int, int]:
    """(self, cross, ffn) MACs for one run of the query/text fusion stack.

    Self-attention is joint over m queries + l_text text tokens. Cross
    attention projects only the m query rows but keys and values come from
    k_img image tokens at width d_i. The two stream feed-forwards run on
    their own token counts.
    """
    s = m + l_text
    self_part = z_layers * (4 * s * d_q * d_q + 2 * s * s * d_q)
    cross_part = z_layers * (2 * m * d_q * d_q + 2 * k_img * d_i * d_q + 2 * m * k_img * d_q)
    ffn_part = z_layers * (2 * m * d_q * ffn_hidden + 2 * l_text * d_q * ffn_hidden)
    return self_part, cross_part, ffn_part


def modulation_macs(rows: int, d_in: int, hidden: int, d_out: int, coefficient_ffns: int) -> int:
    """coefficient_ffns feed-forwards of shape d_in -> hidden -> d_out on rows tokens."""
    return coefficient_ffns * (rows * d_in * hidden + rows * hidden * d_out)


def decoder_pass_macs(t: int, d_l: int, layers: int, ffn_hidden: int) -> int:
    return layers * attention_block_macs(t, d_l, ffn_hidden)


def cross_attn_cost(seq_len: int, crops: int, patches_per_crop: int, layers: int, d: int) -> int:
    """Planning-level cross-attention cost: every fused token attending over
    every crop patch, per layer, per channel. Coarser than the exact census
    above; useful for sizing the high-res pathway before building it."""
    return seq_len * crops * patches_per_crop * layers * d


# ---------------------------------------------------------------------------
# whole-model census
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    """Named MAC counts for one forward pass; total is their exact sum."""

    components: dict[str, int] = field(default_factory=dict)
    l_text: int = 0
    a_tokens: int = 0

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def group(self, suffix: str) -> int:
        return sum(v for k, v in self.components.items() if k.endswith(suffix))

    @property
    def high_low_ratio(self) -> float | None:
        """Cost of the crop pathway relative to the base-resolution pathway."""
        high = self.group("-high")
        if high == 0:
            return None
        low = self.group("-low")
        return high / low


def total_forward_cost(cfg: AgentConfig, l_text: int, a_tokens: int) -> CostReport:
    """Exact MAC census of one teacher-forced forward at the given lengths."""
    cfg.validate()
    if not 1 <= l_text <= cfg.max_text_tokens:
        raise ValueError(f"l_text must be in [1, {cfg.max_text_tokens}], got {l_text}")
    if not 1 <= a_tokens <= cfg.max_action_tokens:
        raise ValueError(f"a_tokens must be in [1, {cfg.max_action_tokens}], got {a_tokens}")

    n = cfg.n_patches
    m = cfg.m_queries
    enc_ffn = cfg.encoder_ffn_mult * cfg.d_i
    qf_ffn = cfg.qformer_ffn_mult * cfg.d_q
    dec_ffn = cfg.decoder_ffn_mult * cfg.d_l
    hidden = cfg.afr_hidden_dim
    vocab = ActionVocab().size

    comp: dict[str, int] = {}
    comp["vision-low"] = vision_pass_macs(n, cfg.patch, cfg.d_i, cfg.encoder_layers, enc_ffn)
    s_low, c_low, f_low = fusion_pass_macs(
        m, l_text, n + 1, cfg.d_q, cfg.d_i, cfg.z_layers, qf_ffn
    )
    comp["qformer-self-low"] = s_low
    comp["qformer-cross-low"] = c_low
    comp["qformer-ffn-low"] = f_low
    if cfg.fusion_low == "afr":
        comp["fusion-low"] = modulation_macs(m, cfg.d_i, hidden, cfg.d_q, coefficient_ffns=2)
    elif cfg.fusion_low == "residual":
        comp["fusion-low"] = modulation_macs(m, cfg.d_i, hidden, cfg.d_q, coefficient_ffns=1)

    if cfg.fusion_high == "afr":
        comp["vision-high"] = cfg.crops * vision_pass_macs(
            n, cfg.patch, cfg.d_i, cfg.encoder_layers, enc_ffn
        )
        s_hi, c_hi, f_hi = fusion_pass_macs(
            m, l_text, cfg.crops * (n + 1), cfg.d_q, cfg.d_i, cfg.z_layers, qf_ffn
        )
        comp["qformer-self-high"] = s_hi
        comp["qformer-cross-high"] = c_hi
        comp["qformer-ffn-high"] = f_hi
        # both beta sources cost the same: one alpha FFN and one beta FFN on m rows
        comp["fusion-high"] = modulation_macs(m, cfg.d_q, hidden, cfg.d_q, coefficient_ffns=2)

    comp["projection"] = m * cfg.d_q * cfg.d_l
    comp["decoder"] = decoder_pass_macs(
        m + l_text + a_tokens, cfg.d_l, cfg.decoder_layers, dec_ffn
    )
    comp["head"] = a_tokens * cfg.d_l * vocab
    return CostReport(components=comp, l_text=l_text, a_tokens=a_tokens)


def report_text(rep: CostReport) -> str:
    """Human-readable table with totals and the high/low pathway comparison."""
    if not rep.components:
        raise ValueError("empty cost report")
    width = max(len(k) for k in rep.components)
    total = rep.total
    lines = [f"{'component':<{width}}  {'macs':>16}  share"]
    for name, macs in rep.components.items():
        lines.append(f"{name:<{width}}  {macs:>16,}  {macs / total:6.1%}")
    lines.append(f"{'total':<{width}}  {total:>16,}  100.0%")
    lines.append("")
    lines.append(f"flops ~= {2 * total:,} (two per multiply-accumulate)")
    lines.append(f"text tokens = {rep.l_text}, action tokens = {rep.a_tokens}")
    ratio = rep.high_low_ratio
    if ratio is not None:
        lines.append(
            f"crop pathway costs {ratio:.2f}x the base pathway; the extra encoder "
            "passes and the wider cross-attention key set dominate"
        )
    return "\n".join(lines) + "\n"
