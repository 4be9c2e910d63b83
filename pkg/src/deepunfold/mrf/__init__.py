"""Pairwise MRF inference and unfolded MRF networks."""

from .core import (  # noqa: F401
    BP,
    MAX_PRODUCT,
    MF,
    MessageState,
    MessageStyle,
    PairwiseMrf,
    ScheduleParams,
    brute_force_marginals,
    bp_message,
    compute_beliefs,
    generalized_message,
    load_mrf,
    mf_message,
    run_inference,
    schedule_blend,
)
from .unfold import (  # noqa: F401
    SigmoidNetParams,
    UnfoldedMrfNet,
    binary_generalized_activation,
    log_domain_activation,
    mrf_to_sigmoid,
    sigmoid_to_mrf,
    train_unfolded,
    unfolded_mf_forward,
)
