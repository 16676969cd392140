"""A shortened version of the two-stage curriculum, scored through the feature oracle.

Pretraining on monologues comes first, then a mix of sequential, monologue and
overlapped dialogues. The held-out dialogues use voice prompts the model has
never seen transcribed. With the default 300 + 300 steps this takes about ten
minutes on one core. Pass larger step counts to approach the full desk run
(2000 + 2000 steps), which reaches a token error rate of a few percent.

Run: python demos/train_and_evaluate.py [pretrain_steps] [dialogue_steps]
"""

import sys

import torch

from dialogue_flow.corpus import CorpusConfig, build_corpus
from dialogue_flow.evaluation import evaluate, make_eval_set, model_generator, oracle_generator
from dialogue_flow.flow import FlowConfig
from dialogue_flow.model import ModelConfig, VectorField
from dialogue_flow.train import TrainConfig, run_curriculum

torch.set_num_threads(1)
steps = [int(a) for a in sys.argv[1:3]] or [300, 300]
steps += [300] * (2 - len(steps))

codebook = CorpusConfig().codebook()
mono = build_corpus("monologue", 200, seed=1)
mix = build_corpus("dialogue_mix", 200, seed=2)
held_out = make_eval_set(12, seed=99)

print(evaluate(oracle_generator(codebook), held_out, codebook).table(), " <- oracle self-test\n")

model = VectorField(ModelConfig(), seed=0)
plan = [
    (TrainConfig(stage="pretrain", steps=steps[0]), mono),
    (TrainConfig(stage="dialogue_mix", steps=steps[1], seed=1), mix),
]


def score(m):
    report = evaluate(model_generator(m, FlowConfig()), held_out, codebook)
    print(report.table())
    print(f"attribution accuracy {report.attribution_accuracy:.3f}, "
          f"overlap boundaries within 3 frames {report.boundary_hit_rate:.0%}\n")
    return report


result = run_curriculum(model, plan, evaluate=score)
for (config, _), stage in zip(plan, result.stages):
    loss = stage.smoothed(50)
    print(f"{config.stage.value:>12}: smoothed loss {loss[0]:.3f} -> {loss[-1]:.3f}, {stage.skipped} samples skipped")
