"""Curriculum training of the vector field with flow matching."""

import enum
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import Category
from .errors import ConfigError, DataError, NoCandidate, NonFinite, OutOfRange
from .flow import UNCONDITIONED, Condition, FlowConfig, cfg_dropout, fm_loss, integrate, sample_flow
from .model import batch_loss, collate, parameter_checksum, save_checkpoint
from .prompt import (
    MIN_PROMPT_FRAMES,
    assemble_training_example,
    find_prompt_candidates,
)
from .streams import DialogueTranscript, FrameGrid, TokenScheme, disentangle


class Stage(enum.Enum):
    PRETRAIN = "pretrain"
    DIALOGUE_MIX = "dialogue_mix"
    FINE_TUNE = "fine_tune"


STAGE_STEPS = {Stage.PRETRAIN: 2000, Stage.DIALOGUE_MIX: 2000, Stage.FINE_TUNE: 200}
STAGE_LR = {Stage.PRETRAIN: 2e-3, Stage.DIALOGUE_MIX: 1.5e-3, Stage.FINE_TUNE: 2e-4}


@dataclass(frozen=True)
class TrainConfig:
    stage: Stage = Stage.PRETRAIN
    steps: int = None
    peak_lr: float = None
    warmup_steps: int = None
    batch_samples: int = 8
    max_sample_s: float = 30.0
    seed: int = 0
    grad_accum: int = 1
    log_every: int = 10
    checkpoint_every: int = 0
    min_prompt_frames: int = MIN_PROMPT_FRAMES
    max_prompt_frames: int = 64
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        stage = Stage(self.stage)
        object.__setattr__(self, "stage", stage)
        if self.steps is None:
            object.__setattr__(self, "steps", STAGE_STEPS[stage])
        if self.peak_lr is None:
            object.__setattr__(self, "peak_lr", STAGE_LR[stage])
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", self.steps // 20)
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be positive")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("steps and warmup_steps must be non-negative")
        if self.steps and not self.steps > self.warmup_steps:
            raise ConfigError("steps must exceed warmup_steps")
        if self.batch_samples < 1 or self.grad_accum < 1:
            raise ConfigError("batch_samples and grad_accum must be at least 1")
        if not self.max_sample_s > 0:
            raise ConfigError("max_sample_s must be positive")


def lr_at(step, config):
    """Linear warmup to ``peak_lr`` followed by linear decay to zero at ``steps``."""
    if not 0 <= step <= config.steps:
        raise OutOfRange(f"step {step} outside [0, {config.steps}]")
    w, n, peak = config.warmup_steps, config.steps, config.peak_lr
    if step < w:
        return peak * (step / w)
    if n == w:
        return peak
    return peak * ((n - step) / (n - w))


def truncate_transcript(transcript, max_s):
    """Keep the segments that end by ``max_s``; later ones are dropped whole."""
    if transcript.total_duration_s <= max_s:
        return transcript
    kept = [s for s in transcript.segments if s.end_s <= max_s + 1e-9]
    if not kept:
        return None
    return DialogueTranscript.build(kept, max(s.end_s for s in kept))


@dataclass(frozen=True, eq=False)
class PreparedSample:
    features: np.ndarray
    streams: object
    candidates: list


def prepare_sample(sample, config, token_scheme=TokenScheme.GENERIC_SILENCE):
    """Trimmed features, token streams and prompt candidates, or None if unusable."""
    transcript = truncate_transcript(sample.transcript, config.max_sample_s)
    if transcript is None:
        return None
    grid = FrameGrid.covering(transcript.total_duration_s, sample.hop_s)
    grid = FrameGrid(grid.hop_s, min(grid.n_frames, len(sample.features)))
    streams = disentangle(transcript, grid, token_scheme)
    cands = find_prompt_candidates(
        transcript, grid, config.min_prompt_frames, config.max_prompt_frames
    )
    if {c.speaker for c in cands} != set(transcript.speakers):
        return None
    return PreparedSample(sample.features[: grid.n_frames], streams, cands)


def make_item(prepared, flow, rng, token_scheme=TokenScheme.GENERIC_SILENCE):
    """One training item: prompt prefix, noisy body, flow target and loss mask."""
    ex = assemble_training_example(prepared.features, prepared.streams, prepared.candidates, rng)
    body = prepared.features
    n_body, d = body.shape
    if cfg_dropout(ex, flow.p_uncond, rng) is UNCONDITIONED:
        null = Condition.null(n_body, d, token_scheme)
        pre_feats, z1, z2, n_pre = np.zeros((0, d)), null.z1, null.z2, 0
    else:
        n_pre = ex.prefix_len
        pre_feats, z1, z2 = ex.features[:n_pre], ex.streams.z1, ex.streams.z2
    t = rng.random()
    m0 = rng.standard_normal(body.shape)
    fs = sample_flow(body, m0, t, flow.sigma_min)
    mask = np.ones(n_pre + n_body, dtype=bool)
    mask[:n_pre] = False
    return {
        "features": np.concatenate([pre_feats, fs.w]),
        "target": np.concatenate([np.zeros((n_pre, d)), fs.target]),
        "z1": z1,
        "z2": z2,
        "loss_mask": mask,
        "t": t,
    }


def _check_stage(corpus, stage):
    if stage is Stage.PRETRAIN:
        bad = [s for s in corpus if len(s.transcript.speakers) > 1 or s.category is not Category.MONOLOGUE]
        if bad:
            raise DataError(f"the pretrain stage takes monologues only; {len(bad)} samples are dialogues")


@dataclass
class TrainResult:
    model: object
    losses: list = field(default_factory=list)
    log: list = field(default_factory=list)
    skipped: int = 0

    def smoothed(self, window=100):
        x = np.asarray(self.losses)
        w = min(window, len(x))
        return np.convolve(x, np.ones(w) / w, mode="valid") if w else x


def train_stage(model, corpus, config, flow=FlowConfig(), log_path=None, checkpoint_dir=None,
                token_scheme=TokenScheme.GENERIC_SILENCE):
    """Train ``model`` in place on ``corpus`` for ``config.steps`` Adam updates.

    Every random choice (shuffle, prompt pick, guidance dropout, flow time,
    noise) comes from one generator seeded by ``config.seed``, so a rerun
    reproduces every parameter byte.
    """
    _check_stage(corpus, config.stage)
    prepared = [prepare_sample(s, config, token_scheme) for s in corpus]
    usable = [p for p in prepared if p is not None]
    result = TrainResult(model, skipped=len(prepared) - len(usable))
    if config.steps == 0:
        return result
    if not usable:
        raise NoCandidate("no sample in the corpus has a usable prompt candidate")
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.peak_lr, betas=config.betas, eps=config.eps)
    order, cursor = rng.permutation(len(usable)), 0
    log_fh = open(log_path, "a") if log_path else None
    start = time.perf_counter()
    model.train()
    try:
        for step in range(config.steps):
            lr = lr_at(step, config)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for _ in range(config.grad_accum):
                items = []
                for _ in range(config.batch_samples):
                    if cursor == len(order):
                        order, cursor = rng.permutation(len(usable)), 0
                    items.append(make_item(usable[order[cursor]], flow, rng, token_scheme))
                    cursor += 1
                loss = batch_loss(model, collate(items, model.cfg.d_features)) / config.grad_accum
                loss.backward()
                total += float(loss.detach())
            if not np.isfinite(total) or any(
                p.grad is not None and not torch.isfinite(p.grad).all() for p in model.parameters()
            ):
                raise NonFinite(f"non-finite loss or gradient at step {step}", step=step)
            opt.step()
            result.losses.append(total)
            if log_fh and ((step + 1) % config.log_every == 0 or step + 1 == config.steps):
                rec = {
                    "step": step + 1,
                    "loss": total,
                    "lr": lr,
                    "wallclock_ms": round(1000 * (time.perf_counter() - start), 3),
                }
                result.log.append(rec)
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if checkpoint_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                _checkpoint(model, checkpoint_dir, config, step + 1)
    finally:
        if log_fh:
            log_fh.close()
        model.eval()
    if not all(torch.isfinite(p).all() for p in model.parameters()):
        raise NonFinite("parameters became non-finite", step=config.steps)
    if checkpoint_dir:
        _checkpoint(model, checkpoint_dir, config, config.steps)
    return result


def _checkpoint(model, directory, config, step):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{config.stage.value}_step{step:06d}.ckpt")
    save_checkpoint(model, path, {"stage": config.stage.value, "step": step, "seed": config.seed})
    return path


@dataclass
class CurriculumResult:
    model: object
    stages: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    @property
    def checksum(self):
        return parameter_checksum(self.model)


def run_curriculum(model, plan, flow=FlowConfig(), evaluate=None, log_dir=None, checkpoint_dir=None,
                   token_scheme=TokenScheme.GENERIC_SILENCE):
    """Run ``train_stage`` for each ``(TrainConfig, corpus)`` pair in order.

    Parameters carry over from stage to stage. ``evaluate(model)``, when
    given, is called after each stage and its result recorded.
    """
    if not plan:
        raise ConfigError("the curriculum has no stages")
    stages = [Stage(c.stage) for c, _ in plan]
    if Stage.DIALOGUE_MIX in stages:
        corpus = plan[stages.index(Stage.DIALOGUE_MIX)][1]
        if not any(len(s.transcript.speakers) > 1 for s in corpus):
            raise DataError("the dialogue stage corpus holds no dialogues")
    out = CurriculumResult(model)
    for config, corpus in plan:
        log_path = os.path.join(log_dir, f"{config.stage.value}.jsonl") if log_dir else None
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        res = train_stage(model, corpus, config, flow, log_path, checkpoint_dir, token_scheme)
        out.stages.append(res)
        if evaluate is not None:
            out.evals.append(evaluate(model))
    return out


def _silent_tokens(model, batch, length):
    null = Condition.null(length, model.cfg.d_features)
    return torch.as_tensor(null.z1).expand(batch, length).contiguous()


def fit_unconditional(model, draw, steps, batch=256, length=1, peak_lr=2e-3, warmup_steps=None, seed=0,
                      sigma_min=0.1):
    """Plain flow matching on samples from ``draw(rng, n)`` with no conditioning at all.

    ``draw`` returns ``(n, length, d_features)`` data. Token streams are
    all silence and there is no prompt, so the model learns the
    unconditional field that :func:`sample_unconditional` integrates.
    """
    config = TrainConfig(steps=steps, peak_lr=peak_lr, warmup_steps=warmup_steps, seed=seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=peak_lr, betas=config.betas, eps=config.eps)
    silent = _silent_tokens(model, batch, length)
    mask = torch.ones(batch, length, dtype=torch.bool)
    losses = []
    model.train()
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(step, config)
        m = np.asarray(draw(rng, batch), dtype=np.float64).reshape(batch, length, -1)
        m0 = rng.standard_normal(m.shape)
        t = rng.random(batch)
        w = (1 - (1 - sigma_min) * t)[:, None, None] * m0 + t[:, None, None] * m
        target = m - (1 - sigma_min) * m0
        opt.zero_grad(set_to_none=True)
        pred = model(torch.from_numpy(w), torch.from_numpy(t), silent, silent)
        loss = fm_loss(pred, torch.from_numpy(target), mask)
        loss.backward()
        if not torch.isfinite(loss):
            raise NonFinite(f"non-finite loss at step {step}", step=step)
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return losses


def sample_unconditional(model, n, length=1, nfe=32, solver="euler", seed=0):
    """Integrate the unconditional field from ``n`` noise draws in one batch."""
    rng = np.random.default_rng(seed)
    silent = _silent_tokens(model, n, length)

    def velocity(w, t):
        with torch.no_grad():
            out = model(torch.from_numpy(w), torch.full((n,), float(t), dtype=torch.float64), silent, silent)
        return out.numpy()

    m0 = rng.standard_normal((n, length, model.cfg.d_features))
    return integrate(velocity, m0, nfe, solver)
