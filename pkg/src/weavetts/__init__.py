"""Streaming TTS engine over interleaved text/mel sequences.

The decoder consumes text tokens the moment they arrive, woven into one
autoregressive sequence with the mel frames it produces, so synthesis can
begin after a single text group instead of a full utterance.
"""

from .bench import LatencyReport, LatencySpec, ablation_sweep, run_bench, simulate_llm_source
from .config import EngineConfig, config_hash, default_config, load_config, save_config
from .errors import WeaveTtsError
from .loss import LossBreakdown, LossWeights, grad_check, total_loss
from .model import (
    DecoderState,
    LatentParams,
    MelLanguageModel,
    ModelConfig,
    StepOutput,
    load_model,
    save_model,
)
from .runtime import (
    Emitted,
    EndOfText,
    NeedText,
    Prompt,
    RuntimeConfig,
    Stopped,
    SynthesisOutput,
    SynthesisStream,
    TextArrived,
    synthesize,
)
from .schedule import (
    InterleavedSeq,
    ScheduleConfig,
    SequenceElement,
    TrainingTargets,
    build_interleaved,
    build_training_targets,
    plan_steps,
    position_of_frame,
)
from .synthdata import Corpus, CorpusSpec, Utterance, generate_corpus, score_reconstruction
from .train import TrainResult, train

__version__ = "0.1.0"
