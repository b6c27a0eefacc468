"""The full GUI agent: screen encoding, query fusion, action decoding, training.

Pipeline for one observation:

  1. vision encoder turns the low-res screen into N+1 image tokens;
  2. the fusion transformer runs M = N+1 learned queries and the embedded
     task/history text against those tokens;
  3. the configured low-res fusion strategy modulates the final query stream
     with the raw image tokens (afr), adds an MLP of them (residual), or
     leaves it alone (none);
  4. optionally, the high-res screen is split into crops, encoded with shared
     weights, run through the same fusion stack under a second query bank,
     and the crop-conditioned queries modulate the image-conditioned ones;
  5. the queries are projected to the decoder width and concatenated with a
     decoder-side text embedding, forming the prefix;
  6. a causal transformer decodes action tokens after the prefix; logits are
     computed on action slots only.

Training is teacher-forced mean token cross-entropy with Adam. Decoding is
greedy to EOS. Checkpoints are a self-describing binary format that embeds
the config, so loading never depends on caller-supplied dimensions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields as dataclass_fields
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .actions import Action, ActionVocab, BOS, EOS, ParseError, parse, serialize
from .afr import AFRBlock, BETA_SOURCES, FUSION_HIGH, FUSION_LOW, ResidualFusion, enrich_high_res, enrich_low_res
from .layers import LayerNorm, Linear, TransformerBlock, causal_mask, prefixed
from .numerics import Tensor
from .qformer import QFormer, QFormerConfig, new_query_bank
from .synthgui import Episode
from .vision import Screen, VisionEncoder, crop_horizontal
from .vocabulary import TextTokenizer


class NonFiniteLossError(RuntimeError):
    """Training loss left the reals; carries an activation-norm report."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or disagree with the model they describe."""


class InputMismatchError(ValueError):
    """An observation does not fit the configured model (geometry, missing crops)."""


@dataclass
class AgentConfig:
    """Model, fusion, and training knobs; defaults are desk scale."""

    screen_w: int = 64
    screen_h: int = 64
    patch: int = 8
    crops: int = 4
    d_i: int = 32
    encoder_layers: int = 2
    encoder_heads: int = 2
    encoder_ffn_mult: int = 2
    d_q: int = 32
    z_layers: int = 2
    qformer_heads: int = 4
    qformer_ffn_mult: int = 2
    max_text_tokens: int = 64
    d_l: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_ffn_mult: int = 2
    max_action_tokens: int = 24
    afr_hidden: int = 0  # 0 means "use d_q"
    fusion_low: str = "afr"
    fusion_high: str = "none"
    beta_source: str = "high"
    history_len: int = 8
    lr: float = 5e-5
    epochs: int = 12
    batch_size: int = 8
    seed: int = 0
    ground_epochs: int = 0
    ground_lr: float = 1e-3

    @property
    def n_patches(self) -> int:
        return (self.screen_h // self.patch) * (self.screen_w // self.patch)

    @property
    def m_queries(self) -> int:
        # one query per image token, global token included
        return self.n_patches + 1

    @property
    def high_h(self) -> int:
        return self.screen_h * self.crops

    @property
    def afr_hidden_dim(self) -> int:
        return self.afr_hidden if self.afr_hidden > 0 else self.d_q

    def validate(self) -> None:
        if self.screen_h % self.patch or self.screen_w % self.patch:
            raise ValueError(
                f"screen {self.screen_w}x{self.screen_h} not divisible by patch {self.patch}"
            )
        for name, d, h in (
            ("d_i", self.d_i, self.encoder_heads),
            ("d_q", self.d_q, self.qformer_heads),
            ("d_l", self.d_l, self.decoder_heads),
        ):
            if d <= 0 or d % h:
                raise ValueError(f"{name}={d} must be positive and divisible by its head count {h}")
        if self.fusion_low not in FUSION_LOW:
            raise ValueError(f"fusion_low must be one of {FUSION_LOW}, got {self.fusion_low!r}")
        if self.fusion_high not in FUSION_HIGH:
            raise ValueError(f"fusion_high must be one of {FUSION_HIGH}, got {self.fusion_high!r}")
        if self.beta_source not in BETA_SOURCES:
            raise ValueError(f"beta_source must be one of {BETA_SOURCES}, got {self.beta_source!r}")
        for name in ("crops", "encoder_layers", "z_layers", "decoder_layers", "max_text_tokens",
                     "max_action_tokens", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.history_len < 0:
            raise ValueError("history_len must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.ground_epochs < 0:
            raise ValueError("ground_epochs must be non-negative")
        if self.ground_lr < 0:
            raise ValueError("ground_lr must be non-negative")


def config_to_text(cfg: AgentConfig) -> str:
    """Stable "key = value" rendering, one field per line, sorted."""
    lines = []
    for f in sorted(dataclass_fields(cfg), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, str) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> AgentConfig:
    """Inverse of config_to_text; unknown keys are errors, missing keys default."""
    types = {f.name: f.type for f in dataclass_fields(AgentConfig)}
    defaults = AgentConfig()
    values: dict = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in types:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        current = getattr(defaults, key)
        try:
            if isinstance(current, int):
                values[key] = int(val)
            elif isinstance(current, float):
                values[key] = float(val)
            else:
                if len(val) >= 2 and val[0] == val[-1] and val[0] in "'\"":
                    val = val[1:-1]
                values[key] = val
        except ValueError:
            raise ValueError(f"config line {ln}: bad value {val!r} for {key}") from None
    cfg = AgentConfig(**values)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class StepSample:
    """One supervised step: observation plus the gold action."""

    task: str
    screen: Screen
    history: tuple[Action, ...]
    action: Action
    screen_high: Screen | None = None


def episode_samples(episode: Episode, use_high: bool) -> list[StepSample]:
    """Expand an episode into per-step samples with gold-action history."""
    out = []
    past: list[Action] = []
    for st in episode.steps:
        out.append(
            StepSample(
                task=episode.goal,
                screen=st.screen,
                history=tuple(past),
                action=st.action,
                screen_high=st.screen_high if use_high else None,
            )
        )
        past.append(st.action)
    return out


@dataclass
class PolicyOutput:
    """Greedy decode result: per-step logits, emitted ids, parsed action."""

    logits: np.ndarray  # (steps, vocab)
    token_ids: list[int]
    decoded: Action | ParseError


class AgentModel:
    """All parameters and the forward/training surface of the agent."""

    def __init__(self, cfg: AgentConfig):
        cfg.validate()
        self.cfg = cfg
        self.action_vocab = ActionVocab()
        self.tokenizer = TextTokenizer()

        def rng(name: str) -> np.random.Generator:
            return nm.component_rng(cfg.seed, name)

        self.vision = VisionEncoder(
            rng("vision"), cfg.screen_h, cfg.screen_w, cfg.patch, cfg.d_i,
            cfg.encoder_layers, cfg.encoder_heads, cfg.encoder_ffn_mult,
        )
        qcfg = QFormerConfig(
            m_queries=cfg.m_queries, d_q=cfg.d_q, d_i=cfg.d_i, z_layers=cfg.z_layers,
            heads=cfg.qformer_heads, ffn_mult=cfg.qformer_ffn_mult,
            max_text_tokens=cfg.max_text_tokens,
        )
        self.qformer = QFormer(rng("qformer"), qcfg, self.tokenizer)
        self.query_low = new_query_bank(rng("query_low"), cfg.m_queries, cfg.d_q)

        hidden = cfg.afr_hidden_dim
        self.afr_low: AFRBlock | None = None
        self.residual_low: ResidualFusion | None = None
        if cfg.fusion_low == "afr":
            self.afr_low = AFRBlock(rng("afr_low"), cfg.d_i, hidden, cfg.d_q)
        elif cfg.fusion_low == "residual":
            self.residual_low = ResidualFusion(rng("residual_low"), cfg.d_i, hidden, cfg.d_q)

        self.query_high: Tensor | None = None
        self.afr_high: AFRBlock | None = None
        if cfg.fusion_high == "afr":
            self.query_high = new_query_bank(rng("query_high"), cfg.m_queries, cfg.d_q)
            self.afr_high = AFRBlock(rng("afr_high"), cfg.d_q, hidden, cfg.d_q)

        self.proj = Linear(rng("proj"), cfg.d_q, cfg.d_l)

        drng = rng("decoder")
        self.text_embed_l = nm.tensor(
            nm.uniform_init(drng, (self.tokenizer.size, cfg.d_l), fan_in=cfg.d_l), requires_grad=True
        )
        self.text_pos_l = nm.tensor(
            nm.uniform_init(drng, (cfg.max_text_tokens, cfg.d_l), fan_in=cfg.d_l), requires_grad=True
        )
        self.action_embed = nm.tensor(
            nm.uniform_init(drng, (self.action_vocab.size, cfg.d_l), fan_in=cfg.d_l),
            requires_grad=True,
        )
        self.action_pos = nm.tensor(
            nm.uniform_init(drng, (cfg.max_action_tokens + 1, cfg.d_l), fan_in=cfg.d_l),
            requires_grad=True,
        )
        self.dec_blocks = [
            TransformerBlock(drng, cfg.d_l, cfg.decoder_heads, cfg.decoder_ffn_mult * cfg.d_l)
            for _ in range(cfg.decoder_layers)
        ]
        self.ln_dec = LayerNorm(cfg.d_l)
        self.head = Linear(drng, cfg.d_l, self.action_vocab.size)

    # ------------------------------------------------------------------
    # parameter registry
    # ------------------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        """Every trainable tensor exactly once, under a stable dotted name."""
        out: dict[str, Tensor] = {}
        out.update(prefixed("vision", self.vision.params()))
        out.update(prefixed("qformer", self.qformer.params()))
        out["query_low"] = self.query_low
        if self.afr_low is not None:
            out.update(prefixed("afr_low", self.afr_low.params()))
        if self.residual_low is not None:
            out.update(prefixed("residual_low", self.residual_low.params()))
        if self.query_high is not None:
            out["query_high"] = self.query_high
        if self.afr_high is not None:
            out.update(prefixed("afr_high", self.afr_high.params()))
        out.update(prefixed("proj", self.proj.params()))
        out["decoder.text_embed"] = self.text_embed_l
        out["decoder.text_pos"] = self.text_pos_l
        out["decoder.action_embed"] = self.action_embed
        out["decoder.action_pos"] = self.action_pos
        for i, b in enumerate(self.dec_blocks):
            out.update(prefixed(f"decoder.blocks.{i}", b.params()))
        out.update(prefixed("decoder.ln_out", self.ln_dec.params()))
        out.update(prefixed("decoder.head", self.head.params()))
        return out

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _check_screen(self, screen: Screen) -> None:
        if (screen.height_px, screen.width_px) != (self.cfg.screen_h, self.cfg.screen_w):
            raise InputMismatchError(
                f"screen is {screen.width_px}x{screen.height_px}, model expects "
                f"{self.cfg.screen_w}x{self.cfg.screen_h}"
            )

    def forward_features(
        self,
        task: str,
        screen: Screen,
        history: Sequence[Action] = (),
        screen_high: Screen | None = None,
    ) -> tuple[Tensor, list[int]]:
        """Build the decoder prefix: (M + L_T, d_l) tensor plus the text ids."""
        cfg = self.cfg
        self._check_screen(screen)
        hist = list(history)[-cfg.history_len:] if cfg.history_len else []
        ids = self.qformer.encode_text_ids(task, hist)
        e_t0 = self.qformer.embed_text(ids)

        image_tokens = self.vision.encode_low(screen)
        e_q, _ = self.qformer.forward(self.query_low, e_t0, image_tokens)

        if self.afr_low is not None:
            e_q = enrich_low_res(self.afr_low, image_tokens, e_q)
        elif self.residual_low is not None:
            e_q = self.residual_low.fuse(image_tokens, e_q)

        if cfg.fusion_high == "afr":
            if screen_high is None:
                raise InputMismatchError(
                    "fusion_high=afr needs a high-res screen but none was provided"
                )
            if (screen_high.height_px, screen_high.width_px) != (cfg.high_h, cfg.screen_w):
                raise InputMismatchError(
                    f"high-res screen is {screen_high.width_px}x{screen_high.height_px}, "
                    f"model expects {cfg.screen_w}x{cfg.high_h}"
                )
            crop_tokens = self.vision.encode_crops(crop_horizontal(screen_high, cfg.crops))
            e_q_crops, _ = self.qformer.forward(self.query_high, e_t0, crop_tokens)
            e_q = enrich_high_res(self.afr_high, e_q_crops, e_q, beta_source=cfg.beta_source)

        g_q = self.proj(e_q)
        g_l = nm.add(
            nm.take_rows(self.text_embed_l, np.asarray(ids, dtype=np.int64)),
            nm.narrow(self.text_pos_l, 0, 0, len(ids)),
        )
        return nm.concat([g_q, g_l], axis=0), ids

    def _decode_stack(self, seq: Tensor) -> Tensor:
        mask = causal_mask(seq.shape[0])
        x = seq
        for block in self.dec_blocks:
            x = block(x, mask)
        return self.ln_dec(x)

    def action_logits(self, prefix: Tensor, gold_ids: Sequence[int]) -> Tensor:
        """Teacher-forced logits, one row per gold token (EOS included)."""
        a = len(gold_ids)
        if a == 0:
            raise ValueError("empty gold token sequence")
        if a > self.cfg.max_action_tokens:
            raise ValueError(f"{a} action tokens exceed cap {self.cfg.max_action_tokens}")
        in_ids = [self.action_vocab.id_of(BOS)] + list(gold_ids[:-1])
        emb = nm.add(
            nm.take_rows(self.action_embed, np.asarray(in_ids, dtype=np.int64)),
            nm.narrow(self.action_pos, 0, 0, a),
        )
        h = self._decode_stack(nm.concat([prefix, emb], axis=0))
        act_h = nm.narrow(h, 0, prefix.shape[0], a)
        return self.head(act_h)

    def step_log_probs(self, sample: StepSample) -> tuple[Tensor, list[int]]:
        """Log-probabilities of the sample's gold tokens; also returns the ids."""
        prefix, _ = self.forward_features(
            sample.task, sample.screen, sample.history, sample.screen_high
        )
        gold_ids = [self.action_vocab.id_of(t) for t in serialize(sample.action)]
        logits = self.action_logits(prefix, gold_ids)
        lp = nm.log_softmax(logits, axis=-1)
        picked = nm.gather_pairs(lp, np.arange(len(gold_ids)), np.asarray(gold_ids))
        return picked, gold_ids

    def batch_loss(self, batch: Sequence[StepSample]) -> Tensor:
        """Mean token-level cross entropy over every gold token in the batch."""
        if not batch:
            raise ValueError("empty batch")
        total: Tensor | None = None
        count = 0
        for sample in batch:
            picked, gold_ids = self.step_log_probs(sample)
            s = nm.sum_all(picked)
            total = s if total is None else nm.add(total, s)
            count += len(gold_ids)
        return nm.mul(total, -1.0 / count)

    def forward_policy(
        self,
        task: str,
        screen: Screen,
        history: Sequence[Action] = (),
        screen_high: Screen | None = None,
    ) -> PolicyOutput:
        """Greedy decode to EOS; never raises on model output, only on bad input."""
        with nm.inference_mode():
            prefix, _ = self.forward_features(task, screen, history, screen_high)
            bos_id = self.action_vocab.id_of(BOS)
            eos_id = self.action_vocab.id_of(EOS)
            emitted: list[int] = []
            rows: list[np.ndarray] = []
            for _ in range(self.cfg.max_action_tokens):
                in_ids = [bos_id] + emitted
                emb = nm.add(
                    nm.take_rows(self.action_embed, np.asarray(in_ids, dtype=np.int64)),
                    nm.narrow(self.action_pos, 0, 0, len(in_ids)),
                )
                h = self._decode_stack(nm.concat([prefix, emb], axis=0))
                last = nm.narrow(h, 0, h.shape[0] - 1, 1)
                logits = self.head(last)
                rows.append(logits.data[0].copy())
                nxt = int(np.argmax(logits.data[0]))
                emitted.append(nxt)
                if nxt == eos_id:
                    break
        logit_mat = np.stack(rows) if rows else np.zeros((0, self.action_vocab.size))
        if not emitted or emitted[-1] != eos_id:
            decoded: Action | ParseError = ParseError(
                len(emitted), f"no EOS within {self.cfg.max_action_tokens} tokens"
            )
        else:
            try:
                decoded = parse([self.action_vocab.token_of(i) for i in emitted])
            except ParseError as e:
                decoded = e
        return PolicyOutput(logits=logit_mat, token_ids=emitted, decoded=decoded)

    # ------------------------------------------------------------------
    # diagnostics
    # ------------------------------------------------------------------

    def _activation_report(self, sample: StepSample) -> str:
        lines = []
        with nm.inference_mode():
            try:
                image_tokens = self.vision.encode_low(sample.screen)
                lines.append(f"image_tokens_norm = {np.linalg.norm(image_tokens.data):.4e}")
                prefix, _ = self.forward_features(
                    sample.task, sample.screen, sample.history, sample.screen_high
                )
                lines.append(f"prefix_norm = {np.linalg.norm(prefix.data):.4e}")
                gold_ids = [self.action_vocab.id_of(t) for t in serialize(sample.action)]
                logits = self.action_logits(prefix, gold_ids)
                lines.append(f"logits_norm = {np.linalg.norm(logits.data):.4e}")
                lines.append(f"logits_max_abs = {np.max(np.abs(logits.data)):.4e}")
            except Exception as e:  # the report must never mask the original failure
                lines.append(f"report truncated: {e}")
        return "; ".join(lines)


def train_step(model: AgentModel, optimizer: nm.Adam, batch: Sequence[StepSample]) -> float:
    """One optimization step; aborts with diagnostics if the loss is non-finite."""
    optimizer.zero_grad()
    loss = model.batch_loss(batch)
    value = float(loss.data)
    if not np.isfinite(value):
        report = model._activation_report(batch[0])
        raise NonFiniteLossError(f"non-finite training loss ({value}); {report}")
    nm.backward(loss)
    optimizer.step()
    return value


def train_agent(
    model: AgentModel,
    episodes: Sequence[Episode],
    *,
    epochs: int | None = None,
    lr: float | None = None,
    batch_size: int | None = None,
    shuffle_seed: int = 0,
    val_episodes: Sequence[Episode] | None = None,
    on_epoch: Callable[[int, float, float | None], None] | None = None,
    on_step: Callable[[int, int, float], None] | None = None,
) -> list[dict]:
    """Epochs of shuffled minibatch training; returns one log record per epoch.

    Validation, when given, reports teacher-forced-history step accuracy.
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    batch_size = cfg.batch_size if batch_size is None else batch_size
    use_high = cfg.fusion_high == "afr"
    samples = [s for ep in episodes for s in episode_samples(ep, use_high)]
    if not samples:
        raise ValueError("no training samples")
    opt = nm.Adam(model.params(), lr=lr)
    order = np.random.default_rng([shuffle_seed, 0x5A5A])
    log: list[dict] = []
    for epoch in range(epochs):
        perm = order.permutation(len(samples))
        losses = []
        for bi, start in enumerate(range(0, len(samples), batch_size)):
            batch = [samples[i] for i in perm[start : start + batch_size]]
            loss = train_step(model, opt, batch)
            losses.append(loss)
            if on_step is not None:
                on_step(epoch, bi, loss)
        val_acc = None
        if val_episodes is not None:
            val_acc = step_accuracy(model, val_episodes)
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "val_step_acc": val_acc}
        log.append(record)
        if on_epoch is not None:
            on_epoch(epoch, record["loss"], val_acc)
    return log


def grounding_warmup(
    model: AgentModel,
    episodes: Sequence[Episode],
    *,
    epochs: int | None = None,
    lr: float | None = None,
    batch_size: int | None = None,
    shuffle_seed: int = 0,
) -> list[dict]:
    """Spatial warm-up for the patch encoder before action training.

    Every click step with a recorded target box supervises a dense pretext
    task: score each patch cell of the low-res screen with a shared linear
    head and pick the cell under the target's center via softmax. From-scratch
    action training alone cannot break attention's initial symmetry at this
    model scale, so this phase plays the role a pretrained encoder plays in
    larger systems. Only vision parameters and the throwaway head receive
    updates; fusion and decoder weights are untouched, keeping every fusion
    strategy's starting point identical.

    Returns one log record per epoch: {"epoch", "loss", "cell_acc"}. Episodes
    without click boxes contribute nothing; with no usable steps at all the
    warm-up is a no-op and returns [].
    """
    cfg = model.cfg
    epochs = cfg.ground_epochs if epochs is None else epochs
    lr = cfg.ground_lr if lr is None else lr
    batch_size = cfg.batch_size if batch_size is None else batch_size
    if epochs <= 0:
        return []
    cells_x = cfg.screen_w // cfg.patch
    cells_y = cfg.screen_h // cfg.patch
    n_cells = cells_x * cells_y
    samples: list[tuple[Screen, int]] = []
    for ep in episodes:
        for st in ep.steps:
            if st.rect is None:
                continue
            cx = (st.rect[0] + st.rect[2]) / 2
            cy = (st.rect[1] + st.rect[3]) / 2
            ci = min(cells_x - 1, int(cx * cells_x))
            cj = min(cells_y - 1, int(cy * cells_y))
            samples.append((st.screen, cj * cells_x + ci))
    if not samples:
        return []
    head = Linear(nm.component_rng(cfg.seed, "ground"), cfg.d_i, 1)
    params = {f"vision.{k}": v for k, v in model.vision.params().items()}
    params["head.w"] = head.w
    params["head.b"] = head.b
    opt = nm.Adam(params, lr=lr)
    order = np.random.default_rng([shuffle_seed, 0x6E0D])
    log: list[dict] = []
    for epoch in range(epochs):
        perm = order.permutation(len(samples))
        losses: list[float] = []
        hits = 0
        for start in range(0, len(samples), batch_size):
            batch = [samples[i] for i in perm[start : start + batch_size]]
            rows = []
            for screen, cell in batch:
                tokens = model.vision.encode_low(screen)
                patches = nm.narrow(tokens, 0, 1, n_cells)
                scores = nm.reshape(head(patches), (1, n_cells))
                nll = nm.neg(nm.gather_pairs(nm.log_softmax(scores), [0], [cell]))
                rows.append(nm.reshape(nll, (1, 1)))
                hits += int(np.argmax(scores.data) == cell)
            loss = nm.mean_all(nm.concat(rows, axis=0))
            if not np.isfinite(loss.data):
                raise NonFiniteLossError("grounding warm-up loss is not finite")
            opt.zero_grad()
            nm.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        log.append(
            {"epoch": epoch, "loss": float(np.mean(losses)), "cell_acc": hits / len(samples)}
        )
    return log


def evaluate_agent(
    model: AgentModel, episodes: Sequence[Episode], closed_loop: bool = False
):
    """Decode every step of every episode; returns evalkit episode records.

    Histories are the gold actions of earlier steps unless closed_loop, in
    which case the model's own parsed predictions accumulate (parse failures
    contribute nothing). Screens always come from the recorded episode.
    """
    from .evalkit import EpisodeRecord

    use_high = model.cfg.fusion_high == "afr"
    records = []
    for ep in episodes:
        golds = [st.action for st in ep.steps]
        rects = [st.rect for st in ep.steps]
        preds: list = []
        pred_history: list[Action] = []
        for i, st in enumerate(ep.steps):
            history = pred_history if closed_loop else golds[:i]
            out = model.forward_policy(
                ep.goal, st.screen, history, st.screen_high if use_high else None
            )
            preds.append(out.decoded)
            if closed_loop and not isinstance(out.decoded, ParseError):
                pred_history.append(out.decoded)
        records.append(EpisodeRecord(ep.episode_id, ep.subset, preds, golds, rects))
    return records


def step_accuracy(model: AgentModel, episodes: Sequence[Episode]) -> float:
    """Fraction of matched steps with gold histories; the quick val metric."""
    from .evalkit import score_episode

    hits = 0
    total = 0
    for rec in evaluate_agent(model, episodes):
        score = score_episode(rec.preds, rec.golds, rec.rects)
        hits += score.matched_steps
        total += score.total_steps
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"AFRA"
_VERSION = 1


def save_checkpoint(model: AgentModel, path: str, trained_epochs: int = 0) -> None:
    """Binary: magic, version, embedded config text, named float64 blobs.

    A trailing counter records how many epochs produced these weights, so a
    resumed run can continue its epoch numbering from the file alone.
    """
    cfg_bytes = config_to_text(model.cfg).encode("utf-8")
    params = model.params()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.data.ndim))
            for d in p.data.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        f.write(struct.pack("<I", trained_epochs))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint {self.path} at byte {self.off}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> AgentModel:
    """Rebuild the model from its embedded config and restore every parameter."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != _MAGIC:
        raise CheckpointError(f"{path} is not an agent checkpoint (bad magic)")
    version = r.u32()
    if version != _VERSION:
        raise CheckpointError(f"{path} has unsupported checkpoint version {version}")
    try:
        cfg = config_from_text(r.take(r.u32()).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: bad embedded config ({e})") from None
    model = AgentModel(cfg)
    params = model.params()
    n = r.u32()
    seen: set[str] = set()
    for _ in range(n):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        count = 1
        for d in shape:
            count *= d
        blob = r.take(8 * count)
        if name not in params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        target = params[name]
        if target.data.shape != shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {shape}, model expects {target.data.shape}"
            )
        target.data[...] = np.frombuffer(blob, dtype="<f8").reshape(shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    return model


def checkpoint_meta(path: str) -> dict:
    """Scan a checkpoint without building the model: config text and progress."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != _MAGIC:
        raise CheckpointError(f"{path} is not an agent checkpoint (bad magic)")
    version = r.u32()
    if version != _VERSION:
        raise CheckpointError(f"{path} has unsupported checkpoint version {version}")
    config_text = r.take(r.u32()).decode("utf-8")
    n = r.u32()
    for _ in range(n):
        r.take(r.u16())
        ndim = r.u32()
        count = 1
        for _ in range(ndim):
            count *= r.u32()
        r.take(8 * count)
    return {"config_text": config_text, "param_count": n, "trained_epochs": r.u32()}
