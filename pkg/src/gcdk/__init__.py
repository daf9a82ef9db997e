"""Grammar-constrained decoding kit for mask-based diffusion samplers."""

from .grammar import (
    MASK,
    Grammar,
    GrammarError,
    Production,
    TerminalSpec,
    Vocabulary,
    load_grammar,
    load_vocabulary,
    nullable_set,
    reduce_grammar,
    terminal_matches,
)
from .earley import ChartState, advance, init_chart, is_extendable, is_valid, next_tokens
from .denoise import (
    Denoiser,
    Distribution,
    NoisyOracleDenoiser,
    ScriptedDenoiser,
    SequenceState,
    UniformDenoiser,
    make_noisy_oracle,
    sample_token,
)
from .decode import (
    DecodeConfig,
    DecodeTrace,
    Strategy,
    TraceEvent,
    VerificationResult,
    decode,
    eos_fill,
    fill,
    lookahead_verify,
    masked_positions,
    recover,
    rightmost_nonmask,
    select_unmask_positions,
)
from .harness import (
    CheckerSpec,
    Problem,
    Report,
    RunResult,
    functional_at_k,
    prefix_mask_acceptance_study,
    run_benchmark,
    syntactic_at_k,
    write_report,
)

__version__ = "0.1.0"
