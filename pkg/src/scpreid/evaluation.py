"""Feature extraction, holistic and shared-part distances, and rank-k /
mean-average-precision retrieval metrics.

Everything here is pure numpy on extracted features; ordering ties are broken
by gallery index so reports are reproducible.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import PreprocessConfig
from .data import LabeledSample, preprocess_eval

FEATURE_MAGIC = b"SCPF"
FEATURE_VERSION = 1


@dataclass
class FeatureGallery:
    features: np.ndarray  # (N, D) float32, D = R*C
    labels: np.ndarray  # (N,) int
    cameras: np.ndarray  # (N,) int
    visible_fractions: np.ndarray  # (N,) float in (0, 1]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        self.visible_fractions = np.asarray(self.visible_fractions, dtype=np.float64)
        n = self.features.shape[0]
        for name, arr in (
            ("labels", self.labels),
            ("cameras", self.cameras),
            ("visible_fractions", self.visible_fractions),
        ):
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")

    def __len__(self) -> int:
        return self.features.shape[0]


def extract_features(
    model,
    samples: list[LabeledSample],
    cfg: PreprocessConfig,
    batch_size: int = 32,
) -> FeatureGallery:
    """Run the deterministic eval pipeline and collect one global feature per
    sample (dropout off, running statistics frozen)."""
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = torch.from_numpy(np.stack([preprocess_eval(s.image, cfg) for s in chunk]))
        feats = model.extract_global(batch)
        if feats.shape[1] != model.config.global_dim:
            raise ValueError(
                f"model produced {feats.shape[1]}-d features, config says {model.config.global_dim}"
            )
        rows.append(feats.cpu().numpy().astype(np.float32))
    features = np.concatenate(rows, axis=0) if rows else np.zeros((0, model.config.global_dim), np.float32)
    return FeatureGallery(
        features=features,
        labels=np.array([s.identity for s in samples], dtype=np.int64),
        cameras=np.array([s.camera for s in samples], dtype=np.int64),
        visible_fractions=np.array([s.visible_fraction for s in samples], dtype=np.float64),
    )


def pair_distance(q: np.ndarray, g: np.ndarray, shared_parts: int, R: int) -> float:
    """L2 distance over the first shared_parts contiguous channel blocks.

    shared_parts = R is the plain holistic distance over the full vectors.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if q.shape != g.shape:
        raise ValueError(f"feature length mismatch: {q.shape[0]} vs {g.shape[0]}")
    if q.shape[0] % R:
        raise ValueError(f"feature length {q.shape[0]} not divisible by R={R}")
    if not (1 <= shared_parts <= R):
        raise ValueError(f"shared_parts={shared_parts} outside [1, {R}]")
    c = q.shape[0] // R
    d = q[: shared_parts * c] - g[: shared_parts * c]
    return float(np.sqrt((d**2).sum()))


def shared_parts_for(visible_fraction: float, R: int) -> int:
    """Number of channel blocks a partially visible sample contributes:
    round(visible_fraction * R), clamped to [1, R]."""
    return int(np.clip(round(visible_fraction * R), 1, R))


def distance_matrix(
    queries: FeatureGallery,
    gallery: FeatureGallery,
    mode: str = "full",
    stripes_R: int | None = None,
) -> np.ndarray:
    """Pairwise distances between query and gallery features.

    mode="full": plain L2 over the whole vectors.
    mode="prefix_by_visibility": L2 over the first s channel blocks, where s
    comes from the smaller visible fraction of the pair; a fully visible pair
    reduces to the full distance.
    """
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    qf = queries.features.astype(np.float64)
    gf = gallery.features.astype(np.float64)
    if qf.shape[1] != gf.shape[1]:
        raise ValueError(f"feature dim mismatch: {qf.shape[1]} vs {gf.shape[1]}")
    if mode == "full":
        out = np.empty((qf.shape[0], gf.shape[0]))
        for i in range(qf.shape[0]):
            out[i] = np.sqrt(((gf - qf[i]) ** 2).sum(axis=1))
        return out
    if mode != "prefix_by_visibility":
        raise ValueError(f"mode={mode!r} not in (full, prefix_by_visibility)")
    if stripes_R is None:
        raise ValueError("prefix_by_visibility needs stripes_R")
    r = int(stripes_R)
    if qf.shape[1] % r:
        raise ValueError(f"feature length {qf.shape[1]} not divisible by R={r}")
    c = qf.shape[1] // r
    n = gf.shape[0]
    out = np.empty((qf.shape[0], n))
    for i in range(qf.shape[0]):
        sq_blocks = ((gf - qf[i]) ** 2).reshape(n, r, c).sum(axis=2)
        cum = np.cumsum(sq_blocks, axis=1)  # (N, R): prefix squared distances
        vis = np.minimum(queries.visible_fractions[i], gallery.visible_fractions)
        shared = np.clip(np.round(vis * r).astype(int), 1, r)
        out[i] = np.sqrt(cum[np.arange(n), shared - 1])
    return out


def _query_ranking(
    d_row: np.ndarray,
    q_label: int,
    q_cam: int,
    g_labels: np.ndarray,
    g_cams: np.ndarray,
    exclusion: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic gallery ordering for one query after junk removal.

    Returns (ordered gallery indices, boolean match flags in that order).
    With exclusion="same_id_same_cam", gallery entries sharing both the
    query's identity and camera are dropped entirely (they are neither
    rankable matches nor distractors).
    """
    if exclusion == "same_id_same_cam":
        junk = (g_labels == q_label) & (g_cams == q_cam)
    elif exclusion == "none":
        junk = np.zeros(len(g_labels), dtype=bool)
    else:
        raise ValueError(f"exclusion={exclusion!r} not in (none, same_id_same_cam)")
    keep = np.flatnonzero(~junk)
    order = keep[np.argsort(d_row[keep], kind="stable")]  # ties broken by gallery index
    return order, g_labels[order] == q_label


@dataclass
class RankingReport:
    cmc: np.ndarray  # cmc[k-1] = rank-k accuracy, length = gallery size
    map: float
    ranked_lists: list[np.ndarray] = field(repr=False)  # per-query gallery order
    num_valid_queries: int = 0
    num_excluded_queries: int = 0  # queries with no valid positive

    def rank_k(self, k: int) -> float:
        if not (1 <= k <= len(self.cmc)):
            raise ValueError(f"rank {k} outside [1, {len(self.cmc)}]")
        return float(self.cmc[k - 1])


def _check_ranking_inputs(distmat, q_labels, g_labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    distmat = np.asarray(distmat, dtype=np.float64)
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    if distmat.ndim != 2 or distmat.shape != (len(q_labels), len(g_labels)):
        raise ValueError(
            f"distance matrix shape {distmat.shape} does not match "
            f"{len(q_labels)} queries x {len(g_labels)} gallery entries"
        )
    if not np.all(np.isfinite(distmat)):
        raise ValueError("distance matrix contains non-finite entries")
    return distmat, q_labels, g_labels


def compute_cmc(
    distmat: np.ndarray,
    q_labels,
    g_labels,
    q_cams=None,
    g_cams=None,
    exclusion: str = "none",
) -> np.ndarray:
    """Cumulative matching characteristic over the full gallery depth.

    cmc[k-1] is the fraction of queries whose nearest valid correct match
    appears within the top k ranked entries.  Queries with no valid positive
    are dropped from the denominator (their count is available via
    evaluate_ranking).
    """
    distmat, q_labels, g_labels = _check_ranking_inputs(distmat, q_labels, g_labels)
    q_cams = np.zeros(len(q_labels), int) if q_cams is None else np.asarray(q_cams)
    g_cams = np.zeros(len(g_labels), int) if g_cams is None else np.asarray(g_cams)
    n = len(g_labels)
    curves = []
    for i in range(len(q_labels)):
        _, match = _query_ranking(distmat[i], q_labels[i], q_cams[i], g_labels, g_cams, exclusion)
        if not match.any():
            continue
        hits = np.minimum(np.cumsum(match), 1)
        curve = np.ones(n)
        curve[: len(hits)] = hits  # beyond the valid depth the match is already found
        curves.append(curve)
    if not curves:
        raise ValueError("no query has a valid positive in the gallery")
    return np.mean(curves, axis=0)


def compute_map(
    distmat: np.ndarray,
    q_labels,
    g_labels,
    q_cams=None,
    g_cams=None,
    exclusion: str = "none",
) -> float:
    """Mean over queries of average precision of the ranked valid gallery."""
    distmat, q_labels, g_labels = _check_ranking_inputs(distmat, q_labels, g_labels)
    q_cams = np.zeros(len(q_labels), int) if q_cams is None else np.asarray(q_cams)
    g_cams = np.zeros(len(g_labels), int) if g_cams is None else np.asarray(g_cams)
    aps = []
    for i in range(len(q_labels)):
        _, match = _query_ranking(distmat[i], q_labels[i], q_cams[i], g_labels, g_cams, exclusion)
        num_rel = int(match.sum())
        if num_rel == 0:
            continue
        precision_at = np.cumsum(match) / np.arange(1, len(match) + 1)
        aps.append(float((precision_at * match).sum() / num_rel))
    if not aps:
        raise ValueError("no query has a valid positive in the gallery")
    return float(np.mean(aps))


def evaluate_ranking(
    queries: FeatureGallery,
    gallery: FeatureGallery,
    mode: str = "full",
    exclusion: str = "none",
    stripes_R: int | None = None,
) -> RankingReport:
    """Distance matrix + CMC + mAP + per-query ranked lists in one report."""
    distmat = distance_matrix(queries, gallery, mode=mode, stripes_R=stripes_R)
    n = len(gallery)
    curves = []
    aps = []
    ranked_lists = []
    excluded = 0
    for i in range(len(queries)):
        order, match = _query_ranking(
            distmat[i], queries.labels[i], queries.cameras[i], gallery.labels, gallery.cameras, exclusion
        )
        ranked_lists.append(order)
        num_rel = int(match.sum())
        if num_rel == 0:
            excluded += 1
            continue
        hits = np.minimum(np.cumsum(match), 1)
        curve = np.ones(n)
        curve[: len(hits)] = hits
        curves.append(curve)
        precision_at = np.cumsum(match) / np.arange(1, len(match) + 1)
        aps.append(float((precision_at * match).sum() / num_rel))
    if not curves:
        raise ValueError("no query has a valid positive in the gallery")
    return RankingReport(
        cmc=np.mean(curves, axis=0),
        map=float(np.mean(aps)),
        ranked_lists=ranked_lists,
        num_valid_queries=len(curves),
        num_excluded_queries=excluded,
    )


def save_gallery(gallery: FeatureGallery, path: str | Path) -> None:
    """Binary feature file (header + row-major little-endian float32) plus a
    CSV sidecar with per-row label, camera and visible fraction."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, d = gallery.features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(FEATURE_VERSION.to_bytes(4, "little"))
        fh.write(n.to_bytes(8, "little"))
        fh.write(d.to_bytes(8, "little"))
        fh.write(np.ascontiguousarray(gallery.features, dtype="<f4").tobytes())
    with open(sidecar_path(path), "w", newline="") as fh:
        fh.write("# schema=1\n")
        writer = csv.writer(fh)
        writer.writerow(["row", "label", "camera", "visible_fraction"])
        for i in range(n):
            writer.writerow(
                [i, int(gallery.labels[i]), int(gallery.cameras[i]), repr(float(gallery.visible_fractions[i]))]
            )


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.csv")


def load_gallery(path: str | Path) -> FeatureGallery:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad feature-file magic {raw[:4]!r}")
    version = int.from_bytes(raw[4:8], "little")
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: feature-file version {version} != {FEATURE_VERSION}")
    n = int.from_bytes(raw[8:16], "little")
    d = int.from_bytes(raw[16:24], "little")
    features = np.frombuffer(raw[24:], dtype="<f4")
    if features.size != n * d:
        raise ValueError(f"{path}: payload holds {features.size} floats, header says {n}x{d}")
    features = features.reshape(n, d).copy()
    labels = np.empty(n, dtype=np.int64)
    cameras = np.empty(n, dtype=np.int64)
    vis = np.empty(n, dtype=np.float64)
    with open(sidecar_path(path)) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if len(rows) != n + 1:
        raise ValueError(f"{sidecar_path(path)}: {len(rows) - 1} rows for {n} features")
    for row in rows[1:]:
        i = int(row[0])
        labels[i] = int(row[1])
        cameras[i] = int(row[2])
        vis[i] = float(row[3])
    return FeatureGallery(features, labels, cameras, vis)
