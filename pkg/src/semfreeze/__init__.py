"""semfreeze: layer-freezing finetuning testbed driven by latent transition
deviations, with budget scheduling and latent-trace analysis."""

__version__ = "0.1.0"

from .linalg import cosine_similarity, pseudoinverse, softmax_cross_entropy
from .semantics import (
    DeviationProfile,
    SemanticBases,
    TransitionTrace,
    build_bases,
    deviation_profile,
    semantic_anchor,
    semantic_ce_loss,
    semantic_cos_loss,
    similarity_logits,
)
from .model import (
    FreezeDecision,
    ModelConfig,
    ModelParams,
    apply_update,
    forward_with_latents,
    init_model,
    loss_and_gradients,
)
from .freezing import PolicyState, cost_saving, seft_select_eof, select_boundary
from .budget import (
    BudgetPlan,
    InfillSchedule,
    budgeted_training_run,
    expected_saving,
    infill_order,
    make_plan,
)
from .traceio import TraceFile, analyze_trace, read_trace, write_trace
