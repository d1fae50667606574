"""Synthetic data, corrupted streams, event labelling and metrics."""

from .data import CORRUPTIONS, SEVERITY_TABLE, Datasets, Split, corrupt, make_datasets
from .metrics import (
    MetricReport,
    auroc,
    bootstrap_ci,
    calib_metrics,
    delay_at_threshold,
    ece,
    event_weights,
    fpr_at_recall,
    frame_auprc,
    pr_curve,
    risk_coverage,
    roc_curve,
    selective_nll,
)
from .stream import (
    EventInterval,
    LabeledStream,
    StreamSpec,
    accuracy_band,
    build_id_stream,
    build_stream,
    events_from_accuracy,
    events_from_mask,
    frame_labels,
    label_events,
    read_frames,
    read_stream,
    windowed_accuracy,
    write_stream,
)
