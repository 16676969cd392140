"""Two-speaker dialogue generation with conditional flow matching.

The package pairs a non-autoregressive flow-matching vector field with a
synthetic, exactly invertible feature oracle, so that generation quality can
be measured end to end without audio models.
"""

from .corpus import (
    CorpusConfig,
    OracleCodebook,
    SimulationSpec,
    Utterance,
    build_corpus,
    decode_features,
    segment_dialogue,
    simulate_dialogue,
    synth_features,
)
from .errors import ConfigError, DataError, DialogueFlowError, NumericError
from .evaluation import (
    EvalReport,
    evaluate,
    overlap_fidelity,
    rtf,
    speaker_attributed_ter,
    speaker_similarity,
    token_error_rate,
)
from .flow import FlowConfig, GaussianOracleField, Solver, cfg_dropout, cfg_field, fm_loss, ode_sample, sample_flow
from .model import ModelConfig, VectorField, load_checkpoint, save_checkpoint
from .prompt import assemble_training_example, build_inference_context, find_prompt_candidates
from .streams import (
    DialogueTranscript,
    FrameGrid,
    ScriptTurn,
    Speaker,
    SpeakerStreamPair,
    TimingPolicy,
    TokenScheme,
    TranscriptSegment,
    build_inference_streams,
    disentangle,
    reconstruct_transcript,
)
from .train import Stage, TrainConfig, lr_at, run_curriculum, train_stage

__version__ = "0.1.0"

__all__ = [
    "assemble_training_example",
    "build_corpus",
    "build_inference_context",
    "build_inference_streams",
    "cfg_dropout",
    "cfg_field",
    "ConfigError",
    "CorpusConfig",
    "DataError",
    "decode_features",
    "DialogueFlowError",
    "DialogueTranscript",
    "disentangle",
    "EvalReport",
    "evaluate",
    "find_prompt_candidates",
    "FlowConfig",
    "fm_loss",
    "FrameGrid",
    "GaussianOracleField",
    "load_checkpoint",
    "lr_at",
    "ModelConfig",
    "NumericError",
    "ode_sample",
    "OracleCodebook",
    "overlap_fidelity",
    "reconstruct_transcript",
    "rtf",
    "run_curriculum",
    "sample_flow",
    "save_checkpoint",
    "ScriptTurn",
    "segment_dialogue",
    "simulate_dialogue",
    "SimulationSpec",
    "Solver",
    "Speaker",
    "speaker_attributed_ter",
    "speaker_similarity",
    "SpeakerStreamPair",
    "Stage",
    "synth_features",
    "TimingPolicy",
    "token_error_rate",
    "TokenScheme",
    "train_stage",
    "TrainConfig",
    "TranscriptSegment",
    "Utterance",
    "VectorField",
]
