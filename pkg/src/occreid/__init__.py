"""Occlusion-robust image retrieval.

A vision-transformer encoder prunes low-attention patch tokens at fixed
depths, queries are ranked against a persistent full-token gallery memory by
a combined cosine / earth-mover's distance, and a one-layer decoder
consolidates the query feature from its nearest gallery neighbors.
"""

from .consolidation import (
    DecoderWeights,
    DecompositionReport,
    MultiViewFeature,
    assemble_multiview,
    decode,
    decompose_cls_attention,
    init_decoder_weights,
)
from .encoder import (
    EncodedFeature,
    EncoderConfig,
    EncoderWeights,
    TokenSequence,
    embed_image,
    encode,
    encoder_flops,
    init_weights,
    mean_cls_attention,
    select_kept,
)
from .estimators import OccludedImageRetriever, PrunedTokenEncoder
from .evaluation import (
    EvalReport,
    LabeledImage,
    SyntheticSpec,
    average_precision,
    cmc_curve,
    evaluate,
    generate_synthetic,
    sweep,
)
from .exceptions import (
    ConfigurationError,
    DegenerateInputError,
    DegenerateTransportError,
    FormatError,
    InputError,
    ShapeError,
)
from .gallery import GalleryMemory, GalleryRecord, build_gallery, load_gallery, save_gallery
from .kernels import (
    AttentionOutput,
    AttentionWeights,
    FlopsReport,
    count_flops,
    layer_norm,
    matmul,
    multi_head_attention,
    softmax_rows,
)
from .losses import Classifier, LossReport, TotalLossReport, id_loss, total_loss, triplet_loss
from .matching import (
    RankList,
    TransportPlan,
    TransportProblem,
    combined_distance,
    correlation_weights,
    cosine_distance,
    emd_distance,
    rank,
    sinkhorn_solve,
)

__version__ = "0.1.0"
