"""Probabilistic circuits trained by latent variable distillation.

Circuit representation and exact inference, HCLT structure learning,
flow-based EM and pruning, progressive growing of multi-headed circuits,
and the image pipeline that assembles them into one tractable model.
"""
from .circuit import (
    UNKNOWN,
    Circuit,
    CircuitBuilder,
    StructureReport,
    Unit,
    log_likelihood,
    log_marginal,
    make_evidence,
    stack_heads,
    subcircuit,
    validate_structure,
)
from .em import (
    FlowTable,
    LabeledBatch,
    Ties,
    compute_flows,
    conditional_log_likelihood,
    em_update,
    flow_conservation_error,
    prune,
    train_em,
)
from .errors import CircuitError, DomainError, ParseError, StructureError, ZeroProbabilityError
from .growing import (
    ClusterMap,
    EmbeddedDataset,
    GrowConfig,
    GrowthStalled,
    grow_multihead,
    progressive_grow,
    reassign_clusters,
    seeded_kmeans,
    select_clusters,
)
from .lvd import (
    AssembledModel,
    GapReport,
    PatchLayout,
    assemble,
    bits_per_dimension,
    entropy_identity_check,
    extract_patches,
    finetune,
    gap_report,
    tie_and_train_conditional,
    train_prior,
)
from .serialize import deserialize, load_circuit, save_circuit, serialize
from .structure import TreeStructure, build_hclt, chow_liu_tree, learn_hclt, pairwise_mutual_information

__version__ = "0.1.0"
