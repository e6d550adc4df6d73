"""Concept-structured dictionaries for disentangling and retrieving embeddings.

Each concept owns a group of unit-norm atoms; an item is coded with
non-negative weights on the groups of its labeled concepts only, so each
concept's part of an embedding lies in that concept's cone.
"""

from .config import ExperimentConfig
from .dictionary import (
    ALTERNATING,
    SIMULTANEOUS,
    AtomUpdateResult,
    ResidualWorkspace,
    TrainConfig,
    TrainReport,
    coefficient_stage,
    objective,
    optimal_sign,
    svd_init,
    train,
    train_minibatch,
    update_atom_alternating,
    update_atom_simultaneous,
)
from .disentangle import (
    SparseCode,
    cooccurrence_matrix,
    decompose_full,
    project_all,
    project_concept,
    sparse_code_group_omp,
    sparse_code_nn_omp,
)
from .errors import *  # noqa: F401,F403
from .nnls import NnlsSolution, kkt_residual, solve_group_masked, solve_nnls
from .pseudolabel import ConceptPrototypes, estimate_s_tilde, zero_shot_multilabel
from .retrieval import (
    Codebook,
    RankedList,
    RetrievalQuery,
    SubLabels,
    ap_at_k,
    build_lut,
    cosine_scores,
    dequantize,
    lut_score,
    map_experiment,
    quantize_pool,
    retrieve,
    score_filtered,
    top_k,
)
from .synthetic import PlantedData, planted_dataset
from .text import AlignmentMap, Vocabulary, procrustes_align, word_captions
from .types import (
    ConceptLabelMatrix,
    Decomposition,
    EmbeddingMatrix,
    GroupDictionary,
    NormalizationState,
    check_coefficients,
    corpus_mean,
    normalize_clip_style,
    normalize_tokenwise,
    normalize_unit,
    reconstruct,
)

__version__ = "0.1.0"
