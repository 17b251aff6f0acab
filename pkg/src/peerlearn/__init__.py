"""Peer learning for long-tailed classification.

Frequency-based head/body/tail partitioning, several peer classifiers each
trained on a combination of those groups, and consensus voting over their
(label, confidence) opinions, evaluated with scene-level R@K / mR@K.
"""
from .data import (
    LabeledDataset,
    PredictionRecords,
    ZipfSpec,
    generate_dataset,
    load_dataset,
    load_external_predictions,
    save_dataset,
    save_predictions,
    stratified_split,
)
from .exceptions import (
    ConfigError,
    InputError,
    NumericError,
    ParseError,
    PeerLearningError,
    TrainingError,
)
from .losses import (
    LossSpec,
    LossValue,
    batch_loss,
    class_balanced_loss,
    class_balanced_weights,
    cross_entropy,
    focal_loss,
    ldam_loss,
    ldam_margins,
    softmax,
)
from .metrics import (
    MetricsReport,
    SceneResults,
    evaluate,
    group_report,
    mean_metric,
    mean_recall_at_k,
    recall_at_k,
)
from .peers import PeerClassifier, PeerLearningClassifier, load_model, peer_targets, save_model
from .taxonomy import (
    FrequencyPartitioner,
    FrequencyTable,
    Group,
    GroupPartition,
    compute_frequencies,
    format_peer_config,
    parse_peer_config,
    partition_classes,
    peer_class_subset,
    tertile_thresholds,
)
from .voting import PeerPrediction, VoteResult, batch_vote, consensus_vote, tally, vote_oracle

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FrequencyPartitioner",
    "FrequencyTable",
    "Group",
    "GroupPartition",
    "InputError",
    "LabeledDataset",
    "LossSpec",
    "LossValue",
    "batch_loss",
    "class_balanced_loss",
    "MetricsReport",
    "NumericError",
    "ParseError",
    "PeerClassifier",
    "PeerLearningClassifier",
    "PeerLearningError",
    "PeerPrediction",
    "PredictionRecords",
    "SceneResults",
    "TrainingError",
    "VoteResult",
    "ZipfSpec",
    "batch_vote",
    "class_balanced_weights",
    "compute_frequencies",
    "consensus_vote",
    "cross_entropy",
    "evaluate",
    "focal_loss",
    "format_peer_config",
    "generate_dataset",
    "group_report",
    "ldam_loss",
    "ldam_margins",
    "load_dataset",
    "load_external_predictions",
    "load_model",
    "mean_metric",
    "mean_recall_at_k",
    "parse_peer_config",
    "partition_classes",
    "peer_class_subset",
    "peer_targets",
    "recall_at_k",
    "save_dataset",
    "save_model",
    "save_predictions",
    "softmax",
    "stratified_split",
    "tally",
    "tertile_thresholds",
    "vote_oracle",
]
