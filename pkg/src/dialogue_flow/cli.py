"""Command-line entry point: simulate corpora, train, synthesize and evaluate.

Every option can also be set in a TOML config file with one table per
section (``[model]``, ``[flow]``, ``[train]``, ``[corpus]``, ``[synth]``).
A flag on the command line beats the file, which beats the built-in default.
Relative paths resolve against ``--workdir``.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np
import torch

from . import tokens as tk
from .corpus import (
    Category,
    CorpusConfig,
    Stage as CorpusStage,
    build_corpus,
    decode_features,
    generate_sample,
    load_corpus,
    load_sample,
    read_features,
    save_corpus,
    write_features,
)
from .errors import ConfigError, DataError, DialogueFlowError, EmptyEvalSet, IoError, NumericError
from .evaluation import (
    EvalItem,
    evaluate,
    model_generator,
    oracle_generator,
    speaker_mapping,
    voice_prompt,
)
from .flow import FlowConfig, Solver, ode_sample
from .model import ModelConfig, VectorField, load_checkpoint, parameter_checksum, save_checkpoint
from .prompt import build_inference_context
from .streams import (
    DEFAULT_HOP_S,
    FrameGrid,
    ScriptTurn,
    Speaker,
    SpeakerStreamPair,
    TimingPolicy,
    build_inference_streams,
    reconstruct_transcript,
)
from .train import Stage, TrainConfig, run_curriculum

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass(frozen=True)
class Option:
    section: str
    name: str
    type: type
    default: object
    help: str

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _optional_float(v):
    return None if v is None or str(v).lower() in ("", "none") else float(v)


OPTIONS = (
    Option("model", "n_layers", int, 4, "transformer layers"),
    Option("model", "n_heads", int, 4, "attention heads"),
    Option("model", "d_model", int, 64, "model width"),
    Option("model", "d_features", int, 16, "feature dimension per frame"),
    Option("model", "ff_mult", int, 4, "feed-forward expansion"),
    Option("model", "rotary", _bool, True, "rotary position encoding"),
    Option("flow", "sigma_min", float, 0.1, "noise floor of the probability path"),
    Option("flow", "p_uncond", float, 0.2, "guidance dropout probability in training"),
    Option("flow", "alpha", float, 1.0, "guidance strength"),
    Option("flow", "nfe", int, 32, "vector-field evaluations per sample"),
    Option("flow", "solver", str, "euler", "ODE solver: euler or midpoint"),
    Option("train", "pretrain_steps", int, 2000, "monologue pretraining steps"),
    Option("train", "dialogue_steps", int, 2000, "dialogue-mix training steps"),
    Option("train", "finetune_steps", int, 200, "fine-tuning steps (needs a fine-tune corpus)"),
    Option("train", "pretrain_lr", float, 2e-3, "peak learning rate, pretraining"),
    Option("train", "dialogue_lr", float, 1.5e-3, "peak learning rate, dialogue mix"),
    Option("train", "finetune_lr", float, 2e-4, "peak learning rate, fine-tuning"),
    Option("train", "warmup_fraction", float, 0.05, "share of each stage spent warming up"),
    Option("train", "batch_samples", int, 8, "samples per batch"),
    Option("train", "max_sample_s", float, 30.0, "sample length cap in seconds"),
    Option("train", "max_prompt_frames", int, 64, "longest voice prompt in frames"),
    Option("train", "log_every", int, 10, "metrics log interval in steps"),
    Option("train", "checkpoint_every", int, 0, "checkpoint interval in steps (0: stage end only)"),
    Option("corpus", "n", int, 100, "number of samples to simulate"),
    Option("corpus", "n_voices", int, 8, "synthetic voices in the codebook"),
    Option("corpus", "codebook_seed", int, 0, "seed of the feature codebook"),
    Option("corpus", "hop_s", float, DEFAULT_HOP_S, "frame hop in seconds"),
    Option("corpus", "weights", str, "0.5,0.3,0.2", "sequential,monologue,overlap mixing weights"),
    Option("synth", "rate", float, 4.0, "speaking rate in syllables per second"),
    Option("synth", "gap", float, 0.2, "silence between turns in seconds (negative overlaps)"),
    Option("synth", "overlap", _optional_float, None, "overlap ratio between turns; overrides --gap"),
    Option("run", "seed", int, 0, "random seed"),
)
_BY_NAME = {o.name: o for o in OPTIONS}


def default_config():
    return {o.name: o.default for o in OPTIONS}


def load_config_file(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read config file {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    out = {}
    for section, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigError(f"config key {section!r} must be inside a section table")
        for key, value in table.items():
            opt = _BY_NAME.get(key)
            if opt is None or opt.section != section:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[key] = value
    return out


def resolve_config(args):
    """Merge built-in defaults, the config file and explicit flags, in that order."""
    cfg = default_config()
    if getattr(args, "config", None):
        cfg.update(load_config_file(_path(args, args.config)))
    for opt in OPTIONS:
        if hasattr(args, opt.name):
            cfg[opt.name] = getattr(args, opt.name)
    try:
        return {o.name: (None if cfg[o.name] is None else o.type(cfg[o.name])) for o in OPTIONS}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _path(args, p):
    return p if os.path.isabs(p) else os.path.join(args.workdir, p)


def _model_config(cfg):
    return ModelConfig(n_layers=cfg["n_layers"], n_heads=cfg["n_heads"], d_model=cfg["d_model"],
                       d_features=cfg["d_features"], ff_mult=cfg["ff_mult"], rotary=cfg["rotary"])


def _flow_config(cfg):
    return FlowConfig(cfg["sigma_min"], cfg["p_uncond"], cfg["alpha"], cfg["nfe"], Solver(cfg["solver"]))


def _corpus_config(cfg):
    return CorpusConfig(n_voices=cfg["n_voices"], d_features=cfg["d_features"],
                        codebook_seed=cfg["codebook_seed"], hop_s=cfg["hop_s"])


def _weights(cfg):
    try:
        return tuple(float(w) for w in cfg["weights"].split(","))
    except ValueError as exc:
        raise ConfigError(f"weights must be comma-separated numbers: {cfg['weights']!r}") from exc


def _writable_dir(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise IoError(f"parent directory of {path} does not exist")
    return path


def _read_feature_file(path):
    try:
        return read_features(path)
    except OSError as exc:
        raise IoError(f"cannot read features {path}: {exc.strerror}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg):
    out = _writable_dir(_path(args, args.out))
    ccfg = _corpus_config(cfg)
    codebook = ccfg.codebook()
    stage = {"pretrain": "monologue", "dialogue": "dialogue_mix", "eval": "dialogue_mix"}[args.stage]
    if args.stage == "eval" or cfg["overlap"] is not None:
        cats = (Category.OVERLAP,) if cfg["overlap"] is not None else (Category.SEQUENTIAL, Category.OVERLAP)
        ss = np.random.SeedSequence(cfg["seed"])
        samples = [
            generate_sample(CorpusStage.DIALOGUE_MIX, cats[i % len(cats)], int(c.generate_state(1)[0]), ccfg,
                            codebook, overlap_ratio=cfg["overlap"])
            for i, c in enumerate(ss.spawn(cfg["n"]))
        ]
    else:
        samples = build_corpus(stage, cfg["n"], cfg["seed"], _weights(cfg), ccfg, codebook)
    names = save_corpus(samples, out)
    if args.stage == "eval":
        ss = np.random.SeedSequence([cfg["seed"], 1])
        for name, s, child in zip(names, samples, ss.spawn(len(samples))):
            seeds = child.generate_state(2)
            for k, (voice, seed) in enumerate(zip(s.voices, seeds), 1):
                write_features(os.path.join(out, name, f"prompt{k}.bin"),
                               voice_prompt(voice, int(seed), ccfg, codebook))
    digest = hashlib.sha256()
    for name in names:
        for fname in sorted(os.listdir(os.path.join(out, name))):
            with open(os.path.join(out, name, fname), "rb") as fh:
                digest.update(name.encode() + fname.encode() + fh.read())
    counts = {}
    for s in samples:
        counts[s.category.value] = counts.get(s.category.value, 0) + 1
    manifest = {
        "stage": args.stage,
        "n_samples": len(samples),
        "counts": counts,
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "corpus": ccfg.__dict__ | {"weights": list(_weights(cfg))},
        "checksum": digest.hexdigest(),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _load_corpus_dir(args, path):
    full = _path(args, path)
    if not os.path.isdir(full):
        raise IoError(f"corpus directory {full} does not exist")
    return load_corpus(full)


def cmd_train(args, cfg):
    out = _writable_dir(_path(args, args.out))
    torch.manual_seed(cfg["seed"])
    model = VectorField(_model_config(cfg), seed=cfg["seed"])
    plan = []
    stages = []
    if not args.skip_pretrain:
        stages.append((Stage.PRETRAIN, args.pretrain, cfg["pretrain_steps"], cfg["pretrain_lr"]))
    stages.append((Stage.DIALOGUE_MIX, args.dialogue, cfg["dialogue_steps"], cfg["dialogue_lr"]))
    if args.finetune:
        stages.append((Stage.FINE_TUNE, args.finetune, cfg["finetune_steps"], cfg["finetune_lr"]))
    for i, (stage, path, steps, lr) in enumerate(stages):
        if path is None:
            raise ConfigError(f"the {stage.value} stage needs a corpus directory")
        tc = TrainConfig(
            stage=stage, steps=steps, peak_lr=lr, warmup_steps=int(cfg["warmup_fraction"] * steps),
            batch_samples=cfg["batch_samples"], max_sample_s=cfg["max_sample_s"], seed=cfg["seed"] + i,
            log_every=cfg["log_every"], checkpoint_every=cfg["checkpoint_every"],
            max_prompt_frames=cfg["max_prompt_frames"],
        )
        plan.append((tc, _load_corpus_dir(args, path)))
    log_dir = out + ".logs"
    for stage, *_ in stages:
        stale = os.path.join(log_dir, f"{stage.value}.jsonl")
        if os.path.exists(stale):
            os.remove(stale)
    ckpt_dir = out + ".stages" if cfg["checkpoint_every"] else None
    result = run_curriculum(model, plan, _flow_config(cfg), log_dir=log_dir, checkpoint_dir=ckpt_dir)
    save_checkpoint(model, out, {"stages": [s.value for s, *_ in stages], "config_hash": config_hash(cfg),
                                 "seed": cfg["seed"]})
    print(f"checkpoint {out} sha256(params)={parameter_checksum(result.model)}")
    return EXIT_OK


def _read_script(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read script {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"script {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, list) or not data:
        raise DataError("a script is a non-empty JSON list of turns")
    try:
        return [ScriptTurn(t["speaker"], t["text"], t.get("start_s"), t.get("duration_s")) for t in data]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed script turn: {exc}") from exc


def readback_transcript(requested, decoding):
    """Turn an oracle decoding into a transcript, naming voices after the requested speakers."""
    mapping = speaker_mapping(requested, decoding)
    n = len(decoding)
    z = {s: np.full(n, tk.SILENCE, dtype=np.int64) for s in Speaker}
    for s, voice in mapping.items():
        for f, hyp in enumerate(decoding.frames):
            for token, v in hyp:
                if v == voice:
                    z[s][f] = token
    streams = SpeakerStreamPair(z[Speaker.SPK1], z[Speaker.SPK2], FrameGrid(requested.grid.hop_s, n))
    return reconstruct_transcript(streams)


def cmd_synth(args, cfg):
    out = _writable_dir(_path(args, args.out))
    model = _load_model(args)
    script = _read_script(_path(args, args.script))
    timing = TimingPolicy(speaking_rate=cfg["rate"], gap_s=cfg["gap"], overlap_ratio=cfg["overlap"])
    streams = build_inference_streams(script, timing, cfg["hop_s"])
    p1 = _read_feature_file(_path(args, args.prompt1)) if args.prompt1 else None
    p2 = _read_feature_file(_path(args, args.prompt2)) if args.prompt2 else None
    context = build_inference_context(p1, p2, model.cfg.d_features)
    rng = np.random.default_rng(cfg["seed"])
    feats = ode_sample(model.velocity, context, streams, _flow_config(cfg), rng)
    if not np.isfinite(feats).all():
        raise NumericError("synthesis produced non-finite features")
    write_features(out, feats)
    ccfg = _corpus_config(cfg)
    decoding = decode_features(feats, ccfg.codebook())
    readback = readback_transcript(streams, decoding)
    stem = os.path.splitext(out)[0]
    readback.save(stem + ".decoded.json")
    reconstruct_transcript(streams).save(stem + ".requested.json")
    print(f"wrote {len(feats)} frames to {out}")
    return EXIT_OK


def _load_model(args):
    path = _path(args, args.checkpoint)
    if not os.path.exists(path):
        raise IoError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def load_eval_items(directory, cfg):
    ccfg = _corpus_config(cfg)
    codebook = ccfg.codebook()
    items = []
    for i, name in enumerate(sorted(n for n in os.listdir(directory) if n.startswith("sample_"))):
        sample = load_sample(os.path.join(directory, name))
        prompts = []
        for k, voice in enumerate(sample.voices, 1):
            p = os.path.join(directory, name, f"prompt{k}.bin")
            if os.path.exists(p):
                prompts.append(read_features(p))
            else:
                prompts.append(voice_prompt(voice, int(np.random.SeedSequence([cfg["seed"], i, k]).generate_state(1)[0]),
                                            ccfg, codebook))
        items.append(EvalItem(sample.transcript, sample.voices, tuple(prompts), sample.hop_s, sample.features,
                              sample.overlap_ratio))
    return items, codebook


def cmd_eval(args, cfg):
    corpus = _path(args, args.corpus)
    if not os.path.isdir(corpus):
        raise IoError(f"evaluation corpus {corpus} does not exist")
    items, codebook = load_eval_items(corpus, cfg)
    if not items:
        raise EmptyEvalSet(f"no samples in {corpus}")
    if args.self_test:
        generate = oracle_generator(codebook)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --self-test")
        generate = model_generator(_load_model(args), _flow_config(cfg), cfg["seed"])
    report = evaluate(generate, items, codebook)
    if args.out:
        path = _writable_dir(_path(args, args.out))
        with open(path, "w") as fh:
            fh.write(report.to_json())
    print(report.table())
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_options(parser):
    for section in dict.fromkeys(o.section for o in OPTIONS):
        group = parser.add_argument_group(f"[{section}] options")
        for o in (o for o in OPTIONS if o.section == section):
            kind = o.type if o.type in (int, float, str) else str
            group.add_argument(o.flag, dest=o.name, type=kind, default=argparse.SUPPRESS,
                               help=f"{o.help} (default: {o.default})")
    parser.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file")
    parser.add_argument("--workdir", default=argparse.SUPPRESS,
                        help="base directory for relative paths (default: .)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dialogue-flow",
        allow_abbrev=False,
        description="Two-speaker dialogue synthesis with flow matching on synthetic oracle features.",
    )
    _add_options(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", allow_abbrev=False, help="write a synthetic corpus to disk")
    p.add_argument("--stage", choices=("pretrain", "dialogue", "eval"), required=True)
    p.add_argument("--out", required=True, help="corpus directory")
    _add_options(p)

    p = sub.add_parser("train", allow_abbrev=False, help="run the training curriculum")
    p.add_argument("--pretrain", help="monologue corpus directory")
    p.add_argument("--dialogue", help="dialogue-mix corpus directory")
    p.add_argument("--finetune", help="optional fine-tuning corpus directory")
    p.add_argument("--skip-pretrain", action="store_true", help="train without monologue pretraining")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_options(p)

    p = sub.add_parser("synth", allow_abbrev=False, help="synthesize a dialogue script")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--script", required=True, help="JSON list of {speaker, text} turns")
    p.add_argument("--prompt1", help="features file with Spk1's voice prompt")
    p.add_argument("--prompt2", help="features file with Spk2's voice prompt")
    p.add_argument("--out", required=True, help="output features file")
    _add_options(p)

    p = sub.add_parser("eval", allow_abbrev=False, help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--self-test", action="store_true", help="score the oracle's own rendering")
    p.add_argument("--out", help="report JSON path")
    _add_options(p)
    return parser


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "synth": cmd_synth, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.workdir = getattr(args, "workdir", ".")
    args.config = getattr(args, "config", None)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DialogueFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
