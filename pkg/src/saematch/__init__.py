"""Data-free matching of sparse autoencoder features across layers."""

import os

# The thread pool size is fixed when numba is first imported; keep room for
# ``--threads`` up to 8 even on small machines, and skip the TBB probe.
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, os.cpu_count() or 1)))
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

from .assignment import (  # noqa: E402
    CostMatrix,
    GroupWeights,
    Permutation,
    WeightSet,
    build_cost_matrix,
    cost_of_permutation,
    solve_lap,
    solve_lap_exact,
)
from .matching import (  # noqa: E402
    MatchOptions,
    MatchResult,
    PermutationChain,
    agreement,
    compose,
    match_chain,
    match_layers,
    quantile_split,
)
from .metrics import delta_cross_entropy, explained_variance, matching_score  # noqa: E402
from .pruning import encode_permute_decode, quantile_decode  # noqa: E402
from .sae_model import (  # noqa: E402
    ActivationBatch,
    SaeParams,
    decode,
    encode,
    fold_params,
    jump_relu,
    l0_stats,
    reconstruct,
)
from .synth import (  # noqa: E402
    SynthSpec,
    gen_activations,
    gen_chain,
    gen_norm_growth_pair,
    gen_planted_pair,
    gen_sae,
)

__version__ = "0.1.0"
