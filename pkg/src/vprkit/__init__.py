"""Visual place recognition descriptor engine over precomputed token files."""

from .aggregation import (
    AssignmentMatrix,
    GlobalDescriptor,
    QueryBank,
    aggregate_boq,
    aggregate_vlaq,
    assign_sinkhorn,
    assign_softmax,
    build_descriptor,
    similarity_scores,
)
from .config import RunConfig
from .dataio import (
    DatasetManifest,
    SynthSpec,
    generate_synthetic,
    load_manifest,
    read_tokens,
    sample_place_balanced_batches,
    write_tokens,
)
from .fusion import FusionParams, Source, TokenSet, fuse, fuse_film, fuse_naive_add, fuse_residual
from .loss import MsParams, mine_pairs, ms_loss, ms_loss_descriptor_grad, similarity_matrix
from .model import DescriptorModel, ModelConfig, load_checkpoint, save_checkpoint
from .optim import AdamW, Schedule, assign_param_groups, lr_at
from .retrieval import DescriptorIndex, EvalReport, knn_query, recall_at_k
from .tensor import Parameter, affine, finite_diff_check, l2_normalize, matmul, softmax_columns

__version__ = "0.1.0"
