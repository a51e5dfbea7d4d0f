"""Two-stage inference: segment the coarse scan, then localize landmarks.

Stage 1 runs the segmentation network on the decimated mesh, refines the
probabilities with the graph cut, and carries the labels back to the full
mesh with the RBF-SVM upsampler. Stage 2 crops one ROI per predicted tooth
and decodes landmark positions from the per-tooth heatmap regressor.

Heatmap nets are shared between mirrored tooth pairs: UR4 and UL4 carry the
same landmark schema, so nets are keyed by position type 1..7 and trained on
ROIs from both quadrants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import landmarks as lm
from .geometry import (
    decimate,
    extract_features,
    extract_roi,
    knn_graph,
    transfer_labels,
)
from .mesh_io import Annotation, TriMesh
from .postprocess import DEFAULT_LAMBDA, build_energy, refine_labels
from .svm import LabelUpsampler
from .training import segmentation_probabilities

COARSE_CELLS = 4500


def position_type(tooth_id: int) -> int:
    """Collapses mirrored tooth ids onto 1..7 (UR4 and UL4 are both 4)."""
    if not 1 <= tooth_id <= lm.NUM_TEETH:
        raise ValueError(f"tooth id {tooth_id} outside 1..{lm.NUM_TEETH}")
    return (tooth_id - 1) % 7 + 1


def heatmap_position_types() -> tuple[int, ...]:
    """Position types that carry at least one landmark (Table 1 pattern)."""
    return tuple(t for t in range(1, 8) if lm.landmark_names(t))


@dataclass
class PreprocessedScan:
    """Full-resolution mesh with its decimated counterpart.

    coarse_labels are the fine labels carried down through the collapse map
    by majority vote; None when the scan has no annotation.
    """

    fine: TriMesh
    coarse: TriMesh
    origin_map: np.ndarray
    coarse_labels: np.ndarray | None = None


def preprocess(mesh: TriMesh, ann: Annotation | None = None,
               target_cells: int = COARSE_CELLS) -> PreprocessedScan:
    coarse, origin_map = decimate(mesh, target_cells)
    labels = None
    if ann is not None:
        labels = transfer_labels(origin_map, ann.labels, coarse.num_cells)
    return PreprocessedScan(mesh, coarse, origin_map, labels)


@dataclass
class SegmentationResult:
    probabilities: np.ndarray
    coarse_labels: np.ndarray
    fine_labels: np.ndarray
    energy_trace: list = field(default_factory=list)


def segment_scan(seg_net, coarse_mesh: TriMesh, fine_mesh: TriMesh | None = None,
                 lam: float = DEFAULT_LAMBDA, svm_c: float = 10.0,
                 k_small: int = 6, k_large: int = 12) -> SegmentationResult:
    """Stage 1: network probabilities, graph-cut refinement, SVM upsampling.

    With no fine mesh the refined coarse labels double as the final labels.
    """
    probs = segmentation_probabilities(seg_net, coarse_mesh, k_small, k_large)
    model = build_energy(coarse_mesh, probs, lam)
    refined = refine_labels(model)
    if fine_mesh is None:
        fine_labels = refined
    else:
        upsampler = LabelUpsampler(c=svm_c)
        upsampler.fit(coarse_mesh.cell_barycenters, refined)
        fine_labels = upsampler.predict(fine_mesh.cell_barycenters)
    return SegmentationResult(probs, refined, fine_labels, model.energy_trace)


def _heatmap_forward(net, mesh: TriMesh, k_small: int, k_large: int):
    feats = extract_features(mesh)
    x = ad.Tensor(feats.matrix)
    with ad.no_grad():
        if getattr(net, "uses_graphs", False):
            g_small = knn_graph(mesh, k_small)
            g_large = knn_graph(mesh, k_large)
            return net.forward(x, g_small, g_large, training=False)
        return net.forward(x, training=False)


def locate_landmarks(heatmap_nets: dict, mesh: TriMesh, labels: np.ndarray,
                     min_roi_cells: int = 4, k_small: int = 6,
                     k_large: int = 12) -> tuple[dict, list]:
    """Stage 2: per-tooth ROI crop, heatmap regression, argmax decode.

    heatmap_nets maps position type -> regressor. Returns (landmarks,
    skipped): landmarks keyed (tooth_id, name) -> (position, confidence,
    low_confidence flag); skipped lists tooth ids that carry landmarks but
    could not be processed (absent from labels, ROI too small, or no net).
    """
    landmarks: dict = {}
    skipped: list = []
    for tooth in range(1, lm.NUM_TEETH + 1):
        names = lm.landmark_names(tooth)
        if not names:
            continue
        roi = extract_roi(mesh, labels, tooth)
        if roi is None or roi.mesh.num_cells < min_roi_cells:
            skipped.append(tooth)
            continue
        net = heatmap_nets.get(position_type(tooth))
        if net is None:
            skipped.append(tooth)
            continue
        heat = _heatmap_forward(net, roi.mesh, k_small, k_large)
        decoded = lm.decode_heatmaps(roi.mesh.cell_barycenters, tooth, heat.data)
        for name, estimate in decoded.items():
            landmarks[(tooth, name)] = estimate
    return landmarks, skipped


@dataclass
class InferenceResult:
    segmentation: SegmentationResult
    labels: np.ndarray
    landmarks: dict
    skipped_teeth: list


def infer_two_stage(seg_net, heatmap_nets: dict, scan: PreprocessedScan,
                    lam: float = DEFAULT_LAMBDA, svm_c: float = 10.0,
                    k_small: int = 6, k_large: int = 12) -> InferenceResult:
    """Full pipeline on one preprocessed scan."""
    seg = segment_scan(seg_net, scan.coarse, scan.fine, lam=lam, svm_c=svm_c,
                       k_small=k_small, k_large=k_large)
    landmarks, skipped = locate_landmarks(heatmap_nets, scan.fine, seg.fine_labels,
                                          k_small=k_small, k_large=k_large)
    return InferenceResult(seg, seg.fine_labels, landmarks, skipped)


def infer_with_oracle_labels(heatmap_nets: dict, mesh: TriMesh,
                             true_labels: np.ndarray, k_small: int = 6,
                             k_large: int = 12) -> tuple[dict, list]:
    """Stage 2 fed ground-truth segmentation; the landmark ceiling."""
    return locate_landmarks(heatmap_nets, mesh, true_labels,
                            k_small=k_small, k_large=k_large)


def single_stage_layout() -> list:
    """Column order of the whole-scan regressor: every landmark of every tooth."""
    out = []
    for tooth in range(1, lm.NUM_TEETH + 1):
        for name in lm.landmark_names(tooth):
            out.append((tooth, name))
    return out


def single_stage_landmarks(net, mesh: TriMesh, k_small: int = 6,
                           k_large: int = 12) -> dict:
    """Whole-scan heatmap regression; no ROI cropping, one argmax per column."""
    layout = single_stage_layout()
    heat = _heatmap_forward(net, mesh, k_small, k_large)
    if heat.data.shape[1] != len(layout):
        raise ValueError(
            f"single-stage net emits {heat.data.shape[1]} columns, "
            f"schema needs {len(layout)}"
        )
    bary = mesh.cell_barycenters
    result = {}
    for col, key in enumerate(layout):
        idx = int(np.argmax(heat.data[:, col]))
        conf = float(heat.data[idx, col])
        result[key] = (bary[idx].copy(), conf, conf < lm.LOW_CONFIDENCE)
    return result
