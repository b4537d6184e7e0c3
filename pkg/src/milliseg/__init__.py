"""Click-efficient lidar annotation toolkit.

Pipeline order: prune redundant frames, select a diverse subset, cluster
each selected frame's point features, collect one class label per cluster
center, propagate labels cluster-wide, then train a pointwise classifier in
two stages (supervised, then teacher-student over the unlabeled rest).
"""

from .datamodel import (
    UNLABELED,
    DatasetManifest,
    Frame,
    FrameDescriptor,
    PseudoLabels,
    frame_descriptor,
    load_frame,
    load_manifest,
    load_pseudo_labels,
    save_frame,
    save_pseudo_labels,
)
from .pruning import PruneConfig, cosine_similarity, prune_sequence
from .selection import (
    DiversityScore,
    SceneSignature,
    diversity_scores,
    inter_scene_diversity,
    intra_scene_diversity,
    scene_signature,
    select_frames,
)
from .clustering import (
    ClusterBudget,
    Clustering,
    budget_to_k,
    cluster_centers,
    cluster_frame,
    kmeans,
    propagate_labels,
)
from .annotate import (
    ClasswiseReport,
    ClasswiseTally,
    annotate_frame,
    classwise_accuracy,
    miou,
    oracle_annotate,
)
from .semisup import (
    PointwiseClassifier,
    SemiSupConfig,
    TrainResult,
    combined_loss,
    cross_entropy,
    ema_update,
    kl_distill,
    lovasz_softmax,
    softmax_t,
    supervised_loss,
    train_two_stage,
)

__version__ = "0.1.0"
