"""Object-mask distillation, pseudo-labeling, aggregation and evaluation.

The pipeline runs downstream of neural feature extraction: binary
feature packs come in, mask candidates are distilled from attention
affinities, labeled by clustering masked-image embeddings, filtered and
aggregated into per-image semantic maps, and scored with
Hungarian-matched mIoU and COCO-style mask AP.
"""

from .affinity import AffinityGraph, build_affinity_graph, cls_affinity, patch_affinity
from .cluster import (
    EmbeddingKMeans,
    KMeansModel,
    embedding_key,
    kmeans_assign,
    kmeans_fit,
    l2_normalize,
    label_candidates,
)
from .distill import (
    MaskDistiller,
    PatchMask,
    build_patch_mask,
    distill,
    extract_component,
    find_source,
    mask_to_bbox,
    refine_proposals,
    select_top_k,
    upsample_mask,
)
from .errors import (
    CorruptionError,
    EmbeddingLookupError,
    EmptyMaskError,
    FormatError,
    MaskPipeError,
    ParameterError,
    ValidationError,
)
from .formats import (
    FeaturePack,
    ObjectCandidate,
    candidate_from_mask,
    decode_rle,
    encode_rle,
    read_feature_pack,
    read_manifest,
    read_pgm,
    rle_area,
    rle_bbox,
    write_feature_pack,
    write_manifest,
    write_pgm,
)
from .loss import hard_mining_ce
from .pseudo import (
    PipelineConfig,
    SegmentationMap,
    build_pseudo_ground_truth,
    decompose_map,
    filter_by_confidence,
    resolve_overlaps,
)
from .evaluate import (
    cluster_class_assignment,
    evaluate_semseg,
    hungarian_match,
    mask_ap,
    mask_iou,
    miou,
)

__version__ = "0.1.0"
