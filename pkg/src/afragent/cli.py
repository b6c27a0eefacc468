"""Operator surface: data generation, training, evaluation, verification, costs.

Configuration is line-based "key = value" text with dotted key names, shared
by every subcommand; any key can also be passed as a flag ("--fusion.low
afr") which overrides the file. Unknown keys are rejected. The seed comes
from train.seed, falling back to the AFR_SEED environment variable, then 0.

Exit codes are a stable contract: 0 success, 2 configuration error, 3
numeric failure, 4 artifact mismatch (dataset, checkpoint, or image does not
fit), 5 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from . import numerics as nm
from .actions import ParseError, parse_string, to_string
from .afr import AFRBlock, ResidualFusion
from .agent import (
    AgentConfig,
    AgentModel,
    CheckpointError,
    InputMismatchError,
    NonFiniteLossError,
    StepSample,
    checkpoint_meta,
    evaluate_agent,
    grounding_warmup,
    load_checkpoint,
    save_checkpoint,
    step_accuracy,
    train_agent,
)
from .costmodel import report_text, total_forward_cost
from .evalkit import EpisodeRecord, aggregate
from .layers import prefixed
from .qformer import QFormer, QFormerConfig, new_query_bank
from .synthgui import GeneratorConfig, generate_dataset, read_jsonl, write_jsonl
from .vision import read_ppm
from .vocabulary import TextTokenizer

SEED_ENV = "AFR_SEED"
GRADCHECK_TOL = 1e-4


class CliError(Exception):
    """Operator-facing failure with a contract exit code."""

    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration grammar
# ---------------------------------------------------------------------------

_FUSION_KEYS = {
    "fusion.low": "fusion_low",
    "fusion.high": "fusion_high",
    "fusion.beta_source": "beta_source",
}
_TRAIN_KEYS = {
    "train.lr": "lr",
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.seed": "seed",
    "train.ground_epochs": "ground_epochs",
    "train.ground_lr": "ground_lr",
}
_MODEL_KEYS = {
    f"model.{f.name}": f.name
    for f in dataclass_fields(AgentConfig)
    if f.name not in set(_FUSION_KEYS.values()) | set(_TRAIN_KEYS.values())
}
AGENT_KEYS = {**_MODEL_KEYS, **_FUSION_KEYS, **_TRAIN_KEYS}

# generator knobs; geometry comes from the model keys so the dataset and the
# model can never silently disagree about screen shape
DATA_KEYS = (
    "data.seed",
    "data.episodes_per_subset",
    "data.subsets",
    "data.min_widgets",
    "data.max_widgets",
    "data.small_target_share",
    "data.anchor_cells",
    "data.include_high_res",
)
ALL_KEYS = tuple(AGENT_KEYS) + DATA_KEYS


def parse_kv_text(text: str, source: str) -> dict[str, str]:
    """Parse "key = value" lines; blank lines and #-comments are skipped."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{source} line {ln}: expected 'key = value', got {raw!r}", 2)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in ALL_KEYS:
            raise CliError(f"{source} line {ln}: unknown key {key!r}", 2)
        if key in out:
            raise CliError(f"{source} line {ln}: duplicate key {key!r}", 2)
        out[key] = val
    return out


def _coerce(cls, field_name: str, raw: str, key: str):
    current = getattr(cls(), field_name)
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = tuple(p.strip() for p in raw.split(",") if p.strip())
            if not parts:
                raise ValueError(raw)
            return parts
        return raw
    except ValueError:
        raise CliError(f"bad value {raw!r} for {key}", 2) from None


def merged_settings(args) -> dict[str, str]:
    """File values overlaid with flag values, flags winning."""
    settings: dict[str, str] = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise CliError(f"cannot read config file: {e}", 2) from None
        settings.update(parse_kv_text(text, config_path))
    for key in ALL_KEYS:
        val = getattr(args, _flag_dest(key), None)
        if val is not None:
            settings[key] = val
    return settings


def build_agent_config(settings: dict[str, str]) -> AgentConfig:
    kwargs = {}
    for key, val in settings.items():
        if key in AGENT_KEYS:
            field = AGENT_KEYS[key]
            kwargs[field] = _coerce(AgentConfig, field, val, key)
    if "seed" not in kwargs and os.environ.get(SEED_ENV):
        try:
            kwargs["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}", 2) from None
    try:
        cfg = AgentConfig(**kwargs)
        cfg.validate()
    except ValueError as e:
        raise CliError(str(e), 2) from None
    return cfg


def build_generator_config(settings: dict[str, str], agent_cfg: AgentConfig) -> GeneratorConfig:
    kwargs = {
        "screen_w": agent_cfg.screen_w,
        "screen_h": agent_cfg.screen_h,
        "crops": agent_cfg.crops,
        "seed": agent_cfg.seed,
    }
    for key, val in settings.items():
        if key.startswith("data."):
            field = key.split(".", 1)[1]
            kwargs[field] = _coerce(GeneratorConfig, field, val, key)
    try:
        cfg = GeneratorConfig(**kwargs)
        cfg.validate()
    except ValueError as e:
        raise CliError(str(e), 2) from None
    return cfg


def _flag_dest(key: str) -> str:
    return "kv__" + key.replace(".", "__")


def _add_key_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration overrides")
    for key in ALL_KEYS:
        group.add_argument(f"--{key}", dest=_flag_dest(key), metavar="V", default=None)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockCheck:
    """Finite-difference verdict for one model block."""

    name: str
    max_err: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.max_err < GRADCHECK_TOL


def _fd_block(build, named_params: dict, rng: np.random.Generator,
              coords_per_param: int | None) -> tuple[float, str]:
    for p in named_params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.grad[...] = 0.0
    loss = build()
    nm.backward(loss)

    def f():
        with nm.inference_mode():
            return build()

    worst_err, worst_name = 0.0, "-"
    for name, p in named_params.items():
        if coords_per_param is None or p.data.size <= coords_per_param:
            coords = np.arange(p.data.size)
        else:
            coords = rng.choice(p.data.size, size=coords_per_param, replace=False)
        fd = nm.finite_diff_coords(f, p, coords, 1e-5)
        err = nm.max_rel_err(p.grad.reshape(-1)[coords], fd)
        if err > worst_err:
            worst_err, worst_name = err, name
    return worst_err, worst_name


def _check_numerics(seed: int) -> tuple[float, str]:
    rng = np.random.default_rng([seed, 1])
    x = nm.tensor(rng.standard_normal((4, 6)))
    w1 = nm.tensor(rng.standard_normal((6, 5)) * 0.5, requires_grad=True)
    b1 = nm.tensor(rng.standard_normal(5) * 0.5, requires_grad=True)
    gain = nm.tensor(rng.standard_normal(5) * 0.3 + 1.0, requires_grad=True)
    bias = nm.tensor(rng.standard_normal(5) * 0.3, requires_grad=True)
    w2 = nm.tensor(rng.standard_normal((5, 3)) * 0.5, requires_grad=True)
    proj = nm.tensor(rng.standard_normal((4, 3)))

    def build():
        h = nm.gelu(nm.add(nm.matmul(x, w1), b1))
        h = nm.layer_norm(h, gain, bias)
        lp = nm.log_softmax(nm.matmul(h, w2), axis=-1)
        return nm.sum_all(nm.mul(lp, proj))

    return _fd_block(
        build, {"w1": w1, "b1": b1, "gain": gain, "bias": bias, "w2": w2},
        np.random.default_rng([seed, 2]), None,
    )


def _check_qformer(seed: int) -> tuple[float, str]:
    rng = np.random.default_rng([seed, 3])
    cfg = QFormerConfig(m_queries=4, d_q=8, d_i=6, z_layers=1, heads=2, ffn_mult=2,
                        max_text_tokens=8)
    qf = QFormer(np.random.default_rng([seed, 4]), cfg, TextTokenizer())
    queries = new_query_bank(np.random.default_rng([seed, 5]), 4, 8)
    ids = qf.encode_text_ids("click the red button", [])[:6]
    images = nm.tensor(rng.standard_normal((5, 6)) * 0.5)
    pq = rng.standard_normal((4, 8))
    pt = rng.standard_normal((len(ids), 8))

    def build():
        e_q, e_t = qf.forward(queries, qf.embed_text(ids), images)
        return nm.add(
            nm.sum_all(nm.mul(e_q, nm.tensor(pq))), nm.sum_all(nm.mul(e_t, nm.tensor(pt)))
        )

    params = {**prefixed("qformer", qf.params()), "queries": queries}
    return _fd_block(build, params, np.random.default_rng([seed, 6]), 4)


def _check_afr(seed: int) -> tuple[float, str]:
    rng = np.random.default_rng([seed, 7])
    block = AFRBlock(np.random.default_rng([seed, 8]), 6, 5, 6)
    res = ResidualFusion(np.random.default_rng([seed, 9]), 6, 5, 6)
    for p in list(block.params().values()) + list(res.params().values()):
        p.data += rng.standard_normal(p.data.shape) * 0.1
    enrich = nm.tensor(rng.standard_normal((3, 6)) * 0.5)
    target = nm.tensor(rng.standard_normal((3, 6)) * 0.5)
    pa = rng.standard_normal((3, 6))
    pb = rng.standard_normal((3, 6))

    def build():
        a = block.modulate(enrich, target)
        b = res.fuse(enrich, target)
        return nm.add(nm.sum_all(nm.mul(a, nm.tensor(pa))), nm.sum_all(nm.mul(b, nm.tensor(pb))))

    params = {**prefixed("afr", block.params()), **prefixed("residual", res.params())}
    return _fd_block(build, params, np.random.default_rng([seed, 10]), None)


def _check_agent(seed: int) -> tuple[float, str]:
    from .vision import Screen

    cfg = AgentConfig(
        screen_w=16, screen_h=16, patch=8, crops=2,
        d_i=8, encoder_layers=1, encoder_heads=2, encoder_ffn_mult=2,
        d_q=8, z_layers=1, qformer_heads=2, qformer_ffn_mult=2, max_text_tokens=16,
        d_l=16, decoder_layers=1, decoder_heads=2, decoder_ffn_mult=2,
        fusion_low="afr", fusion_high="afr", history_len=2, seed=seed,
    )
    model = AgentModel(cfg)
    jitter = np.random.default_rng([seed, 11])
    for name, p in model.params().items():
        if name.startswith(("afr_low.", "afr_high.")):
            p.data += jitter.standard_normal(p.data.shape) * 0.05
    pix = np.random.default_rng([seed, 12])
    low = Screen(16, 16, bytes(pix.integers(0, 256, size=16 * 16 * 3, dtype=np.uint8)))
    high = Screen(16, 32, bytes(pix.integers(0, 256, size=32 * 16 * 3, dtype=np.uint8)))
    from .actions import Click

    sample = StepSample(task="click the red button", screen=low, history=(),
                        action=Click(0.31, 0.77), screen_high=high)
    return _fd_block(
        lambda: model.batch_loss([sample]), model.params(),
        np.random.default_rng([seed, 13]), 2,
    )


def run_gradcheck(seed: int = 0, inject_fault: str | None = None) -> list[BlockCheck]:
    """Finite-difference check of every block family; optionally with a
    deliberately corrupted gelu derivative to prove the harness can fail."""
    blocks = [
        ("numerics", _check_numerics),
        ("qformer", _check_qformer),
        ("afr", _check_afr),
        ("agent", _check_agent),
    ]
    results = []
    for name, fn in blocks:
        if inject_fault == "gelu":
            with nm.gelu_backward_fault():
                err, worst = fn(seed)
        else:
            err, worst = fn(seed)
        results.append(BlockCheck(name=name, max_err=err, worst_param=worst))
    return results


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    settings = merged_settings(args)
    agent_cfg = build_agent_config(settings)
    gen_cfg = build_generator_config(settings, agent_cfg)
    episodes = generate_dataset(gen_cfg)
    write_jsonl(args.out, episodes)
    counts: dict[str, int] = {}
    for ep in episodes:
        counts[ep.subset] = counts.get(ep.subset, 0) + 1
    for subset in sorted(counts):
        print(f"subset {subset}: {counts[subset]} episodes")
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


def _load_episodes(path: str):
    try:
        return read_jsonl(path)
    except OSError as e:
        raise CliError(f"cannot read dataset: {e}", 4) from None
    except ValueError as e:
        raise CliError(f"bad dataset {path}: {e}", 4) from None


def _load_model(path: str) -> AgentModel:
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise CliError(f"cannot read checkpoint: {e}", 4) from None
    except CheckpointError as e:
        raise CliError(str(e), 4) from None


def cmd_train(args) -> int:
    settings = merged_settings(args)
    cfg = build_agent_config(settings)
    if args.resume:
        model = _load_model(args.resume)
        start_epoch = checkpoint_meta(args.resume)["trained_epochs"]
        cfg = model.cfg
        # the checkpoint pins the architecture; only training knobs may change
        train_fields = set(_TRAIN_KEYS.values())
        for key, val in settings.items():
            if key not in AGENT_KEYS:
                continue
            field = AGENT_KEYS[key]
            coerced = _coerce(AgentConfig, field, val, key)
            if field in train_fields:
                setattr(cfg, field, coerced)
            elif coerced != getattr(cfg, field):
                raise CliError(
                    f"{key} = {coerced!r} disagrees with the checkpoint "
                    f"({getattr(cfg, field)!r}); architecture is pinned when resuming",
                    4,
                )
        try:
            cfg.validate()
        except ValueError as e:
            raise CliError(str(e), 2) from None
    else:
        model = AgentModel(cfg)
        start_epoch = 0
    if start_epoch >= cfg.epochs:
        print(f"checkpoint already trained for {start_epoch} epochs (target {cfg.epochs})")
        return 0

    train_eps = _load_episodes(args.data)
    val_eps = _load_episodes(args.val_data) if args.val_data else None

    if start_epoch == 0 and cfg.ground_epochs > 0:
        try:
            for rec in grounding_warmup(model, train_eps, shuffle_seed=cfg.seed):
                print(f"warm-up epoch {rec['epoch']}: loss {rec['loss']:.4f}, "
                      f"cell acc {rec['cell_acc']:.4f}")
        except NonFiniteLossError as e:
            raise CliError(str(e), 3) from None

    log_mode = "a" if (args.resume and os.path.exists(args.log)) else "w"
    log_f = open(args.log, log_mode, encoding="utf-8")
    if log_mode == "w":
        log_f.write("epoch,step,loss,val_step_acc\n")

    best = {"acc": -1.0}
    if val_eps is not None:
        acc0 = step_accuracy(model, val_eps)
        log_f.write(f"{start_epoch},-1,,{acc0:.6f}\n")
        log_f.flush()

    def on_step(epoch: int, step: int, loss: float) -> None:
        log_f.write(f"{start_epoch + epoch},{step},{loss:.6f},\n")
        log_f.flush()

    def on_epoch(epoch: int, loss: float, val_acc) -> None:
        absolute = start_epoch + epoch
        if val_acc is not None:
            log_f.write(f"{absolute},end,{loss:.6f},{val_acc:.6f}\n")
            if val_acc > best["acc"]:
                best["acc"] = val_acc
                save_checkpoint(model, args.out, trained_epochs=absolute + 1)
        else:
            log_f.write(f"{absolute},end,{loss:.6f},\n")
        log_f.flush()
        print(f"epoch {absolute}: loss {loss:.4f}"
              + (f", val step acc {val_acc:.4f}" if val_acc is not None else ""))

    try:
        train_agent(
            model, train_eps,
            epochs=cfg.epochs - start_epoch,
            shuffle_seed=cfg.seed + start_epoch,
            val_episodes=val_eps,
            on_step=on_step, on_epoch=on_epoch,
        )
    except NonFiniteLossError as e:
        log_f.close()
        raise CliError(str(e), 3) from None
    except InputMismatchError as e:
        log_f.close()
        raise CliError(str(e), 4) from None
    log_f.close()

    if val_eps is not None:
        save_checkpoint(model, args.out + ".last", trained_epochs=cfg.epochs)
        print(f"best val step acc {best['acc']:.4f}; best checkpoint {args.out}, "
              f"final state {args.out}.last")
    else:
        save_checkpoint(model, args.out, trained_epochs=cfg.epochs)
        print(f"checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    episodes = _load_episodes(args.data)
    if args.oracle:
        records = [
            EpisodeRecord(
                ep.episode_id, ep.subset,
                [st.action for st in ep.steps], [st.action for st in ep.steps],
                [st.rect for st in ep.steps],
            )
            for ep in episodes
        ]
    else:
        if not args.checkpoint:
            raise CliError("--checkpoint is required unless --oracle", 2)
        model = _load_model(args.checkpoint)
        try:
            records = evaluate_agent(model, episodes, closed_loop=args.closed_loop)
        except InputMismatchError as e:
            raise CliError(f"dataset does not fit the checkpoint: {e}", 4) from None
    report = aggregate(records)
    with open(args.out_prefix + ".tsv", "w", encoding="utf-8") as f:
        f.write(report.to_text())
    with open(args.out_prefix + ".json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
    for name in sorted(report.overall):
        print(f"overall.{name}\t{report.overall[name]:.6f}")
    print(f"reports: {args.out_prefix}.tsv {args.out_prefix}.json")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get(SEED_ENV, "0"))
    results = run_gradcheck(seed=seed, inject_fault=args.inject_fault)
    wname = max(len(r.worst_param) for r in results)
    print(f"{'block':<10} {'max_rel_err':>12}  {'worst parameter':<{wname}}  status")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<10} {r.max_err:>12.3e}  {r.worst_param:<{wname}}  {status}")
    bad = [r for r in results if not r.passed]
    if bad:
        worst = max(bad, key=lambda r: r.max_err)
        print(
            f"verification failure: block {worst.name!r} parameter {worst.worst_param!r} "
            f"max rel err {worst.max_err:.3e} >= {GRADCHECK_TOL:.0e}",
            file=sys.stderr,
        )
        return 5
    return 0


def cmd_flops(args) -> int:
    settings = merged_settings(args)
    cfg = build_agent_config(settings)
    try:
        rep = total_forward_cost(cfg, l_text=args.l_text, a_tokens=args.a_tokens)
    except ValueError as e:
        raise CliError(str(e), 2) from None
    print(report_text(rep), end="")
    return 0


def _parse_history(text: str):
    actions = []
    for i, part in enumerate(p.strip() for p in text.split(";")):
        if not part:
            continue
        try:
            actions.append(parse_string(part))
        except ParseError as e:
            raise CliError(f"history item {i} ({part!r}): {e}", 2) from None
    return actions


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    try:
        screen = read_ppm(args.screen)
        screen_high = read_ppm(args.screen_high) if args.screen_high else None
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load screen image: {e}", 4) from None
    history = _parse_history(args.history)
    try:
        out = model.forward_policy(args.goal, screen, history, screen_high)
    except InputMismatchError as e:
        raise CliError(str(e), 4) from None
    if isinstance(out.decoded, ParseError):
        print(f"undecodable: {out.decoded}")
    else:
        print(to_string(out.decoded))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="afragent",
        description="GUI agent toolkit: synthetic data, training, evaluation, verification.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic episode dataset")
    g.add_argument("--config", help="key = value settings file")
    g.add_argument("--out", required=True, help="output JSONL path")
    _add_key_flags(g)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on an episode dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="training episodes (JSONL)")
    t.add_argument("--val-data", help="validation episodes (JSONL)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", required=True, help="CSV training log path")
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_key_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on an episode dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out-prefix", required=True, help="writes <prefix>.tsv and <prefix>.json")
    e.add_argument("--closed-loop", action="store_true",
                   help="histories from own predictions instead of gold actions")
    e.add_argument("--oracle", action="store_true",
                   help="score gold actions against themselves (pipeline sanity)")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--inject-fault", choices=["gelu"],
                   help="corrupt the gelu derivative to prove checks can fail")
    c.set_defaults(fn=cmd_gradcheck)

    f = sub.add_parser("flops", help="closed-form cost census for one forward pass")
    f.add_argument("--config")
    f.add_argument("--l-text", type=int, default=16, help="text prefix length in tokens")
    f.add_argument("--a-tokens", type=int, default=4, help="decoded action length in tokens")
    _add_key_flags(f)
    f.set_defaults(fn=cmd_flops)

    d = sub.add_parser("predict", help="decode one action for a screen and goal")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--screen", required=True, help="PPM image at the model's base size")
    d.add_argument("--goal", required=True)
    d.add_argument("--history", default="", help="semicolon-separated prior actions")
    d.add_argument("--screen-high", help="PPM image at the model's crop-stack size")
    d.set_defaults(fn=cmd_predict)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
