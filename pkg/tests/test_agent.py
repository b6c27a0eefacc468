"""End-to-end model assembly: fusion wiring, training, decoding, checkpoints."""

import math

import numpy as np
import pytest

from afragent import numerics as nm
from afragent.actions import Click, ParseError, PressHome, TypeText
from afragent.agent import (
    AgentConfig,
    AgentModel,
    CheckpointError,
    InputMismatchError,
    NonFiniteLossError,
    StepSample,
    config_from_text,
    config_to_text,
    episode_samples,
    evaluate_agent,
    grounding_warmup,
    load_checkpoint,
    save_checkpoint,
    step_accuracy,
    train_agent,
    train_step,
)
from afragent.evalkit import aggregate
from afragent.synthgui import GeneratorConfig, generate_dataset
from afragent.vision import Screen

from conftest import assert_sampled_grads_match


def tiny_cfg(**kw) -> AgentConfig:
    base = dict(
        screen_w=16, screen_h=16, patch=8, crops=2,
        d_i=8, encoder_layers=1, encoder_heads=2, encoder_ffn_mult=2,
        d_q=8, z_layers=1, qformer_heads=2, qformer_ffn_mult=2, max_text_tokens=16,
        d_l=16, decoder_layers=1, decoder_heads=2, decoder_ffn_mult=2,
        history_len=4, seed=3,
    )
    base.update(kw)
    return AgentConfig(**base)


def tiny_screen(seed: int, h: int = 16, w: int = 16) -> Screen:
    rng = np.random.default_rng(seed)
    return Screen(w, h, bytes(rng.integers(0, 256, size=h * w * 3, dtype=np.uint8)))


def sample_for(cfg: AgentConfig, seed: int = 0, with_high: bool = False) -> StepSample:
    return StepSample(
        task="click the red button",
        screen=tiny_screen(seed, cfg.screen_h, cfg.screen_w),
        history=(PressHome(),),
        action=Click(0.31, 0.77),
        screen_high=tiny_screen(seed + 100, cfg.high_h, cfg.screen_w) if with_high else None,
    )


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def test_config_text_roundtrip():
    cfg = tiny_cfg(fusion_low="residual", fusion_high="afr", beta_source="image", lr=3e-4)
    back = config_from_text(config_to_text(cfg))
    assert back == cfg


def test_config_from_text_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown key"):
        config_from_text("d_q = 8\nwarp_factor = 9\n")


def test_config_from_text_partial_uses_defaults():
    cfg = config_from_text("d_l = 128\n\n# comment line\n")
    assert cfg.d_l == 128
    assert cfg.d_q == AgentConfig().d_q


def test_config_validation_catches_bad_values():
    with pytest.raises(ValueError, match="divisible"):
        tiny_cfg(d_q=9).validate()
    with pytest.raises(ValueError, match="fusion_low"):
        tiny_cfg(fusion_low="cross").validate()
    with pytest.raises(ValueError, match="patch"):
        tiny_cfg(screen_w=17).validate()


def test_derived_dimensions():
    cfg = tiny_cfg()
    assert cfg.n_patches == 4
    assert cfg.m_queries == 5
    assert cfg.high_h == 32


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

def test_params_unique_tensors():
    model = AgentModel(tiny_cfg(fusion_low="afr", fusion_high="afr"))
    params = model.params()
    ids = [id(t) for t in params.values()]
    assert len(ids) == len(set(ids))
    assert all(isinstance(k, str) and k for k in params)


def test_fusion_choice_only_adds_parameters():
    names_none = set(AgentModel(tiny_cfg(fusion_low="none")).params())
    names_afr = set(AgentModel(tiny_cfg(fusion_low="afr")).params())
    extra = names_afr - names_none
    assert names_none < names_afr
    assert all(n.startswith("afr_low.") for n in extra)


def test_shared_parameters_identical_across_fusion_choices():
    a = AgentModel(tiny_cfg(fusion_low="afr", fusion_high="afr"))
    b = AgentModel(tiny_cfg(fusion_low="none", fusion_high="none"))
    pa, pb = a.params(), b.params()
    for name in set(pa) & set(pb):
        assert pa[name].data.tobytes() == pb[name].data.tobytes(), name


def test_same_seed_same_model():
    pa = AgentModel(tiny_cfg()).params()
    pb = AgentModel(tiny_cfg()).params()
    assert set(pa) == set(pb)
    for name in pa:
        assert pa[name].data.tobytes() == pb[name].data.tobytes()


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def test_prefix_shape():
    cfg = tiny_cfg()
    model = AgentModel(cfg)
    s = sample_for(cfg)
    prefix, ids = model.forward_features(s.task, s.screen, s.history)
    assert prefix.shape == (cfg.m_queries + len(ids), cfg.d_l)
    assert 0 < len(ids) <= cfg.max_text_tokens


def test_fusion_strategies_agree_at_init():
    # zero-initialized fusion output layers make every strategy collapse to
    # the plain pipeline, bitwise, before any training
    cfg_kw = dict(seed=11)
    sample = sample_for(tiny_cfg(**cfg_kw), with_high=True)
    gold = [AgentModel(tiny_cfg(fusion_low="none", **cfg_kw))]
    variants = [
        AgentModel(tiny_cfg(fusion_low="afr", **cfg_kw)),
        AgentModel(tiny_cfg(fusion_low="residual", **cfg_kw)),
        AgentModel(tiny_cfg(fusion_low="afr", fusion_high="afr", **cfg_kw)),
        AgentModel(tiny_cfg(fusion_low="afr", fusion_high="afr", beta_source="image", **cfg_kw)),
    ]
    ref = None
    for model in gold + variants:
        with nm.inference_mode():
            prefix, _ = model.forward_features(
                sample.task, sample.screen, sample.history,
                sample.screen_high if model.cfg.fusion_high == "afr" else None,
            )
            gold_ids = [model.action_vocab.id_of(t) for t in model.action_vocab.tokens[3:6]]
            logits = model.action_logits(prefix, gold_ids)
        if ref is None:
            ref = logits.data.tobytes()
        else:
            assert logits.data.tobytes() == ref


def test_history_longer_than_cap_is_truncated():
    cfg = tiny_cfg(history_len=2)
    model = AgentModel(cfg)
    s = sample_for(cfg)
    long_hist = tuple(PressHome() for _ in range(10))
    prefix, ids = model.forward_features(s.task, s.screen, long_hist)
    assert len(ids) <= cfg.max_text_tokens


def test_wrong_screen_size_rejected():
    cfg = tiny_cfg()
    model = AgentModel(cfg)
    with pytest.raises(InputMismatchError, match="24x24"):
        model.forward_features("task", tiny_screen(0, 24, 24))


def test_high_fusion_requires_high_screen():
    cfg = tiny_cfg(fusion_high="afr")
    model = AgentModel(cfg)
    s = sample_for(cfg)
    with pytest.raises(InputMismatchError, match="high-res"):
        model.forward_features(s.task, s.screen, s.history, None)
    with pytest.raises(InputMismatchError):
        model.forward_features(s.task, s.screen, s.history, tiny_screen(1, 16, 16))


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

def test_initial_loss_near_uniform():
    cfg = tiny_cfg()
    model = AgentModel(cfg)
    batch = [sample_for(cfg, seed=i) for i in range(3)]
    with nm.inference_mode():
        loss = float(model.batch_loss(batch).data)
    uniform = math.log(model.action_vocab.size)
    assert abs(loss - uniform) / uniform < 0.2


def test_train_step_reduces_loss():
    cfg = tiny_cfg()
    model = AgentModel(cfg)
    batch = [sample_for(cfg, seed=i) for i in range(2)]
    opt = nm.Adam(model.params(), lr=1e-3)
    first = train_step(model, opt, batch)
    for _ in range(14):
        last = train_step(model, opt, batch)
    assert last < first * 0.7


def test_non_finite_loss_raises_with_report():
    cfg = tiny_cfg()
    model = AgentModel(cfg)
    model.head.w.data[...] = 1e308
    opt = nm.Adam(model.params(), lr=1e-3)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteLossError, match="norm"):
        train_step(model, opt, [sample_for(cfg)])


def test_gradcheck_end_to_end():
    cfg = tiny_cfg(fusion_low="afr", fusion_high="afr", max_text_tokens=24)
    model = AgentModel(cfg)
    # nudge fusion outputs off their exact-zero init so their gradients are generic
    jitter = np.random.default_rng(5)
    for name, p in model.params().items():
        if name.startswith(("afr_low.", "afr_high.")):
            p.data += jitter.standard_normal(p.data.shape) * 0.05
    sample = sample_for(cfg, with_high=True)
    assert_sampled_grads_match(
        lambda: model.batch_loss([sample]),
        model.params(),
        rng=np.random.default_rng(7),
        coords_per_param=2,
    )


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def test_forward_policy_shapes_and_types():
    cfg = tiny_cfg()
    model = AgentModel(cfg)
    s = sample_for(cfg)
    out = model.forward_policy(s.task, s.screen, s.history)
    assert out.logits.shape[1] == model.action_vocab.size
    assert len(out.token_ids) == out.logits.shape[0]
    assert len(out.token_ids) <= cfg.max_action_tokens
    assert isinstance(out.decoded, (ParseError,)) or out.decoded is not None


def test_trained_model_decodes_memorized_action():
    cfg = tiny_cfg()
    model = AgentModel(cfg)
    sample = StepSample(
        task="press home", screen=tiny_screen(4, 16, 16), history=(), action=PressHome()
    )
    opt = nm.Adam(model.params(), lr=3e-3)
    for _ in range(60):
        loss = train_step(model, opt, [sample])
        if loss < 0.01:
            break
    out = model.forward_policy(sample.task, sample.screen, sample.history)
    assert out.decoded == PressHome()


# ---------------------------------------------------------------------------
# evaluation plumbing
# ---------------------------------------------------------------------------

def test_evaluate_agent_feeds_aggregate():
    gcfg = GeneratorConfig(
        seed=5, screen_w=32, screen_h=32, crops=2, include_high_res=False,
        episodes_per_subset=1, subsets=("click", "type"), min_widgets=3, max_widgets=3,
    )
    eps = generate_dataset(gcfg)
    model = AgentModel(tiny_cfg(screen_w=32, screen_h=32))
    records = evaluate_agent(model, eps)
    assert len(records) == len(eps)
    report = aggregate(records)
    assert set(report.groups) == {"click", "type"}
    acc = step_accuracy(model, eps)
    assert 0.0 <= acc <= 1.0
    closed = evaluate_agent(model, eps, closed_loop=True)
    assert len(closed) == len(eps)


def test_train_agent_logs_epochs():
    gcfg = GeneratorConfig(
        seed=6, screen_w=32, screen_h=32, crops=2, include_high_res=False,
        episodes_per_subset=1, subsets=("click",), min_widgets=3, max_widgets=3,
    )
    eps = generate_dataset(gcfg)
    model = AgentModel(tiny_cfg(screen_w=32, screen_h=32))
    log = train_agent(model, eps, epochs=2, lr=1e-4, batch_size=4,
                      shuffle_seed=1, val_episodes=eps)
    assert [r["epoch"] for r in log] == [0, 1]
    assert all(np.isfinite(r["loss"]) for r in log)
    assert all(0.0 <= r["val_step_acc"] <= 1.0 for r in log)


def test_grounding_warmup_improves_cell_accuracy():
    gcfg = GeneratorConfig(
        seed=8, screen_w=32, screen_h=32, crops=2, include_high_res=False,
        episodes_per_subset=30, subsets=("click",), min_widgets=2, max_widgets=3,
    )
    eps = generate_dataset(gcfg)
    model = AgentModel(tiny_cfg(screen_w=32, screen_h=32))
    log = grounding_warmup(model, eps, epochs=10, lr=5e-3, batch_size=8, shuffle_seed=0)
    assert [r["epoch"] for r in log] == list(range(10))
    assert log[-1]["loss"] < log[0]["loss"]
    assert log[-1]["cell_acc"] > log[0]["cell_acc"]
    assert log[-1]["cell_acc"] > 0.5


def test_grounding_warmup_touches_only_vision():
    gcfg = GeneratorConfig(
        seed=9, screen_w=32, screen_h=32, crops=2, include_high_res=False,
        episodes_per_subset=4, subsets=("click",), min_widgets=2, max_widgets=3,
    )
    eps = generate_dataset(gcfg)
    model = AgentModel(tiny_cfg(screen_w=32, screen_h=32))
    before = {k: v.data.copy() for k, v in model.params().items()}
    grounding_warmup(model, eps, epochs=1, lr=1e-3, batch_size=8, shuffle_seed=0)
    after = model.params()
    changed = {k for k in before if not np.array_equal(before[k], after[k].data)}
    assert changed
    assert all(k.startswith("vision.") for k in changed)


def test_grounding_warmup_deterministic():
    gcfg = GeneratorConfig(
        seed=10, screen_w=32, screen_h=32, crops=2, include_high_res=False,
        episodes_per_subset=4, subsets=("click",), min_widgets=2, max_widgets=3,
    )
    eps = generate_dataset(gcfg)
    runs = []
    for _ in range(2):
        model = AgentModel(tiny_cfg(screen_w=32, screen_h=32))
        grounding_warmup(model, eps, epochs=2, lr=1e-3, batch_size=8, shuffle_seed=3)
        runs.append({k: v.data.copy() for k, v in model.params().items()})
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_grounding_warmup_no_click_boxes_is_noop():
    gcfg = GeneratorConfig(
        seed=11, screen_w=32, screen_h=32, crops=2, include_high_res=False,
        episodes_per_subset=2, subsets=("scroll",), min_widgets=2, max_widgets=3,
    )
    eps = generate_dataset(gcfg)
    model = AgentModel(tiny_cfg(screen_w=32, screen_h=32))
    before = {k: v.data.copy() for k, v in model.params().items()}
    assert grounding_warmup(model, eps, epochs=2, lr=1e-3) == []
    after = model.params()
    assert all(np.array_equal(before[k], after[k].data) for k in before)


def test_episode_samples_history_grows():
    gcfg = GeneratorConfig(
        seed=7, screen_w=32, screen_h=32, crops=2, include_high_res=False,
        episodes_per_subset=1, subsets=("multi",), min_widgets=3, max_widgets=3,
    )
    ep = generate_dataset(gcfg)[0]
    samples = episode_samples(ep, use_high=False)
    assert len(samples) == len(ep.steps)
    for i, s in enumerate(samples):
        assert len(s.history) == i
        assert s.action == ep.steps[i].action


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = tiny_cfg(fusion_low="afr", fusion_high="afr")
    model = AgentModel(cfg)
    # move off the init point so the restore is not trivially the constructor
    opt = nm.Adam(model.params(), lr=1e-3)
    train_step(model, opt, [sample_for(cfg, with_high=True)])
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(model, path)
    restored = load_checkpoint(path)
    assert restored.cfg == cfg
    pa, pb = model.params(), restored.params()
    assert set(pa) == set(pb)
    for name in pa:
        assert pa[name].data.tobytes() == pb[name].data.tobytes(), name


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    with open(path, "wb") as f:
        f.write(b"XXXX" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    cfg = tiny_cfg()
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(AgentModel(cfg), path)
    blob = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(blob[:-17])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_unknown_parameter(tmp_path):
    cfg = tiny_cfg()
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(AgentModel(cfg), path)
    blob = open(path, "rb").read()
    assert b"query_low" in blob
    with open(path, "wb") as f:
        f.write(blob.replace(b"query_low", b"query_foo"))
    with pytest.raises(CheckpointError, match="query_foo"):
        load_checkpoint(path)
