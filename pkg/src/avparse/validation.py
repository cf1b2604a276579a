"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .data import VideoRecord
from .errors import ContractError, ShapeError


def check_feature_matrix(values, name: str, n_segments: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D [segments, dim] array, got shape {arr.shape}")
    if n_segments is not None and arr.shape[0] != n_segments:
        raise ShapeError(f"{name} must have {n_segments} segments, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_binary_matrix(values, name: str, shape=None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ContractError(f"{name} must be 0/1-valued")
    return arr


def check_records(records, name: str = "records") -> list[VideoRecord]:
    records = list(records)
    if not records:
        raise ContractError(f"{name} must not be empty")
    t = records[0].audio.shape[0]
    c = records[0].video_label.shape[0]
    d_a = records[0].audio.shape[1]
    d_v = records[0].visual.shape[1]
    for r in records:
        check_feature_matrix(r.audio, f"{r.video_id}.audio", t)
        check_feature_matrix(r.visual, f"{r.video_id}.visual", t)
        if r.audio.shape[1] != d_a or r.visual.shape[1] != d_v:
            raise ShapeError(f"{r.video_id}: feature widths differ from the first record")
        check_binary_matrix(r.video_label, f"{r.video_id}.video_label", (c,))
        check_binary_matrix(r.pseudo_a, f"{r.video_id}.pseudo_a", (t, c))
        check_binary_matrix(r.pseudo_v, f"{r.video_id}.pseudo_v", (t, c))
        r.validate()
    return records


def check_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise ContractError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first")
