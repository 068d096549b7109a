"""Self-reflection training-data pipeline.

Collects failed first attempts from a chat-completion model, elicits
reflections and corrected retries, curates them into correct-only and
preference-pair sets, exports training files for four fine-tuning settings,
and scores multi-turn self-correction.
"""

from .core import (
    AnswerKind,
    CandidateSample,
    EvalItemOutcome,
    EvalReport,
    Feedback,
    FeedbackValue,
    GenerationPolicy,
    JUDGED_PREF,
    OUTCOME_PM,
    PairContext,
    PairMember,
    PreferencePair,
    ReflectionRecord,
    RolloutTrace,
    SamplingInfo,
    TaskItem,
    TraceStatus,
    Turn,
    VerifierKind,
    validate_trace,
)
from .curation import (
    PairingPolicy,
    build_correct_set,
    build_judged_pairs,
    build_outcome_pairs,
    judge_preference,
)
from .gateway import (
    ChatGateway,
    CompletionRequest,
    CompletionResult,
    EchoBackend,
    HttpBackend,
    Message,
    ProtocolError,
    ReplayBackend,
    ScriptedBackend,
    TransportError,
    derive_seed,
    request_hash,
)
from .instructions import (
    InstructionPool,
    InstructionSpec,
    default_pool,
    enumerate_pool,
    select_instructions,
)
from .rollout import (
    AbortRecord,
    GenerationResult,
    generate_dataset,
    run_first_turn,
    run_rollout,
)
from .verification import OracleVerifier, SelfJudgmentVerifier, verify_oracle

__version__ = "0.1.0"

__all__ = [
    "AbortRecord",
    "AnswerKind",
    "CandidateSample",
    "ChatGateway",
    "CompletionRequest",
    "CompletionResult",
    "EchoBackend",
    "EvalItemOutcome",
    "EvalReport",
    "Feedback",
    "FeedbackValue",
    "GenerationPolicy",
    "GenerationResult",
    "HttpBackend",
    "InstructionPool",
    "InstructionSpec",
    "JUDGED_PREF",
    "Message",
    "OUTCOME_PM",
    "OracleVerifier",
    "PairContext",
    "PairMember",
    "PairingPolicy",
    "PreferencePair",
    "ProtocolError",
    "ReflectionRecord",
    "ReplayBackend",
    "RolloutTrace",
    "SamplingInfo",
    "ScriptedBackend",
    "SelfJudgmentVerifier",
    "TaskItem",
    "TraceStatus",
    "TransportError",
    "Turn",
    "VerifierKind",
    "build_correct_set",
    "build_judged_pairs",
    "build_outcome_pairs",
    "default_pool",
    "derive_seed",
    "enumerate_pool",
    "generate_dataset",
    "judge_preference",
    "request_hash",
    "run_first_turn",
    "run_rollout",
    "select_instructions",
    "validate_trace",
    "verify_oracle",
]
