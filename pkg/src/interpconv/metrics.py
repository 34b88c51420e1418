"""Interpretability metrics: part interpretability (thresholded-RF IoU against
part masks) and location stability (deviation of the peak-unit position from
part landmarks), plus the part-distribution heat map.

Feature maps are whatever the evaluated layer emits (masked maps for an
interpretable layer, post-ReLU maps otherwise).  Receptive fields are
approximated by deterministic nearest-neighbor block upscaling; an optional
circular dilation thickens regions for sensitivity analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PartDataset
from .errors import InputError, ShapeError
from .interp import assign_target_category, select_template

DEFAULT_IOU_THRESHOLD = 0.2
DEFAULT_TOP_N = 100


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def activation_threshold(maps: np.ndarray) -> float:
    """Threshold with p(value > T) = 0.005 over all positions of all maps.

    The quantile is taken by sorted order: the ceil(0.995 * N)-th smallest
    value (1-based), so a constant collection thresholds at that constant.
    """
    vals = np.asarray(maps, dtype=np.float64).ravel()
    if vals.size == 0:
        raise InputError("no activations")
    vals = np.sort(vals)
    idx = int(np.ceil(0.995 * vals.size))
    return float(vals[idx - 1])


def _upsample_indices(n: int, out: int) -> np.ndarray:
    return (np.arange(out) * n) // out


def upsample_nearest(fmap: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Block (nearest-neighbor) upscaling of an n x n map to image resolution."""
    fmap = np.asarray(fmap)
    h, w = image_size
    ri = _upsample_indices(fmap.shape[0], h)
    ci = _upsample_indices(fmap.shape[1], w)
    return fmap[np.ix_(ri, ci)]


def dilate_disc(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a rasterized disc of the given pixel radius."""
    if radius <= 0:
        return mask
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr * dr + dc * dc > radius * radius:
                continue
            src = mask[
                max(0, -dr) : h - max(0, dr),
                max(0, -dc) : w - max(0, dc),
            ]
            out[
                max(0, dr) : h - max(0, -dr),
                max(0, dc) : w - max(0, -dc),
            ] |= src
    return out


def valid_region_rf(
    fmap: np.ndarray,
    threshold: float,
    image_size: tuple[int, int],
    dilation_radius: int = 0,
) -> np.ndarray:
    """Image-resolution mask of the cells strictly above the activation threshold."""
    valid = np.asarray(fmap) > threshold
    region = upsample_nearest(valid, image_size)
    return dilate_disc(region, dilation_radius)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes disagree: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def block_center(cell: tuple[int, int], n: int, image_size: tuple[int, int]) -> tuple[float, float]:
    """Pixel center of a 1-based grid cell's upscaled block: ((i-.5)H/n, (j-.5)W/n)."""
    h, w = image_size
    i, j = cell
    return ((i - 0.5) * h / n, (j - 0.5) * w / n)


def infer_part_location(fmap: np.ndarray, image_size: tuple[int, int]) -> tuple[float, float]:
    """Center pixel of the peak unit's receptive-field block."""
    mu = select_template(fmap)
    return block_center(mu, np.asarray(fmap).shape[0], image_size)


def location_deviation(distances: np.ndarray) -> float:
    """Sqrt of the population variance of normalized landmark distances."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size < 2:
        raise InputError(f"need >= 2 distances, got {d.size}")
    return float(np.sqrt(np.mean((d - d.mean()) ** 2)))


def select_top_indices(activations: np.ndarray, limit: int) -> np.ndarray:
    """Indices of the top activations; ties keep the earlier index first."""
    a = np.asarray(activations, dtype=np.float64)
    order = np.lexsort((np.arange(a.size), -a))
    return order[: min(limit, a.size)]


def part_interpretability(
    maps: np.ndarray,
    part_masks: list[dict[str, np.ndarray]],
    threshold: float,
    image_size: tuple[int, int],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    dilation_radius: int = 0,
) -> tuple[float, dict[str, float]]:
    """(P_f, per-part P_fk) for one filter over one image collection.

    P_fk is the fraction of images containing part k whose thresholded RF
    overlaps that part's mask with IoU above the association threshold; P_f is
    the best part's probability.
    """
    if maps.shape[0] != len(part_masks):
        raise ShapeError(f"{maps.shape[0]} maps vs {len(part_masks)} mask dicts")
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for fmap, masks in zip(maps, part_masks):
        region = valid_region_rf(fmap, threshold, image_size, dilation_radius)
        for name, mask in masks.items():
            totals[name] = totals.get(name, 0) + 1
            if iou(region, mask) > iou_threshold:
                hits[name] = hits.get(name, 0) + 1
    if not totals:
        return 0.0, {}
    p_fk = {name: hits.get(name, 0) / totals[name] for name in sorted(totals)}
    return max(p_fk.values()), p_fk


def part_distribution_heatmap(maps: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Image-mean of the filter-summed upscaled maps, normalized to [0, 1]."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 4:
        raise ShapeError(f"expected (N, M, n, n) maps, got {maps.shape}")
    summed = maps.sum(axis=1).mean(axis=0)               # (n, n)
    heat = upsample_nearest(summed, image_size)
    peak = heat.max()
    return heat / peak if peak > 0 else heat


# ---------------------------------------------------------------------------
# dataset-level evaluation
# ---------------------------------------------------------------------------

def _landmark_key(category_id: int, part: str) -> str:
    return f"c{category_id}:{part}"


@dataclass
class FilterMetrics:
    filter_index: int
    assigned_category: int
    threshold: float
    p_f: float
    p_fk: dict[str, float]
    d_fk: dict[str, float]              # landmark key -> D_f,k
    d_assigned_mean: float | None       # mean over the assigned category's landmarks
    d_best_category_mean: float | None  # min over categories of their landmark mean


@dataclass
class MetricReport:
    image_size: int
    num_images: int
    iou_threshold: float
    top_n: int
    dilation_radius: int
    per_filter: list[FilterMetrics] = field(default_factory=list)
    mean_part_interpretability: float = 0.0
    location_instability: float = 0.0          # mean_f mean_k over all landmarks
    multi_category_instability: float = 0.0    # mean_f min_c mean_{k in c}
    assigned_category_instability: float = 0.0
    accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "num_images": self.num_images,
            "iou_threshold": self.iou_threshold,
            "top_n": self.top_n,
            "dilation_radius": self.dilation_radius,
            "accuracy": self.accuracy,
            "mean_part_interpretability": self.mean_part_interpretability,
            "location_instability": self.location_instability,
            "multi_category_instability": self.multi_category_instability,
            "assigned_category_instability": self.assigned_category_instability,
            "per_filter": [
                {
                    "filter": fm.filter_index,
                    "assigned_category": fm.assigned_category,
                    "threshold": fm.threshold,
                    "P_f": fm.p_f,
                    "P_fk": fm.p_fk,
                    "D_fk": fm.d_fk,
                    "D_assigned_mean": fm.d_assigned_mean,
                    "D_best_category_mean": fm.d_best_category_mean,
                }
                for fm in self.per_filter
            ],
        }


def evaluate_maps(
    maps: np.ndarray,
    dataset: PartDataset,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    top_n: int = DEFAULT_TOP_N,
    dilation_radius: int = 0,
    accuracy: float | None = None,
) -> MetricReport:
    """Score every filter's maps (dataset order) against the ground-truth parts."""
    maps = np.asarray(maps, dtype=np.float64)
    n_img, n_filters = maps.shape[:2]
    if n_img != len(dataset.samples):
        raise ShapeError(f"{n_img} map stacks vs {len(dataset.samples)} samples")
    size = (dataset.image_size, dataset.image_size)
    diag = float(np.hypot(*size))
    labels = dataset.labels_array()
    cat_ids = sorted(s.category_id for s in dataset.specs)
    idx_by_cat = {c: np.nonzero(labels == c)[0] for c in cat_ids}

    report = MetricReport(
        image_size=dataset.image_size,
        num_images=n_img,
        iou_threshold=iou_threshold,
        top_n=top_n,
        dilation_radius=dilation_radius,
        accuracy=accuracy,
    )
    total_act = maps.sum(axis=(2, 3))                    # (N, M)
    peak_act = maps.max(axis=(2, 3))                     # (N, M)

    for fm in range(n_filters):
        threshold = activation_threshold(maps[:, fm])
        means = {
            c: float(total_act[idx_by_cat[c], fm].mean())
            for c in cat_ids
            if idx_by_cat[c].size
        }
        c_hat = assign_target_category(means)

        own = idx_by_cat[c_hat]
        p_f, p_fk = part_interpretability(
            maps[own, fm],
            [dataset.samples[i].part_masks for i in own],
            threshold,
            size,
            iou_threshold=iou_threshold,
            dilation_radius=dilation_radius,
        )

        d_fk: dict[str, float] = {}
        cat_means: dict[int, float] = {}
        for c in cat_ids:
            idx = idx_by_cat[c]
            if idx.size < 2:
                continue
            top = idx[select_top_indices(peak_act[idx, fm], top_n)]
            centers = np.array([infer_part_location(maps[i, fm], size) for i in top])
            per_part = []
            for part in dataset.parts_of(c):
                landmarks = np.array([dataset.samples[i].landmarks[part] for i in top])
                d = np.linalg.norm(landmarks - centers, axis=1) / diag
                dev = location_deviation(d)
                d_fk[_landmark_key(c, part)] = dev
                per_part.append(dev)
            if per_part:
                cat_means[c] = float(np.mean(per_part))
        report.per_filter.append(
            FilterMetrics(
                filter_index=fm,
                assigned_category=c_hat,
                threshold=threshold,
                p_f=p_f,
                p_fk=p_fk,
                d_fk=d_fk,
                d_assigned_mean=cat_means.get(c_hat),
                d_best_category_mean=min(cat_means.values()) if cat_means else None,
            )
        )

    report.mean_part_interpretability = float(np.mean([f.p_f for f in report.per_filter]))
    all_d = [np.mean(list(f.d_fk.values())) for f in report.per_filter if f.d_fk]
    report.location_instability = float(np.mean(all_d)) if all_d else 0.0
    best = [f.d_best_category_mean for f in report.per_filter if f.d_best_category_mean is not None]
    report.multi_category_instability = float(np.mean(best)) if best else 0.0
    assigned = [f.d_assigned_mean for f in report.per_filter if f.d_assigned_mean is not None]
    report.assigned_category_instability = float(np.mean(assigned)) if assigned else 0.0
    return report


def evaluate_network(
    network,
    dataset: PartDataset,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    top_n: int = DEFAULT_TOP_N,
    dilation_radius: int = 0,
) -> MetricReport:
    """Run the network over the dataset and score its top conv layer's maps."""
    images = dataset.images_array()
    labels = dataset.labels_array()
    accuracy = float(np.mean(network.predict(images) == labels))
    maps = network.top_feature_maps(images)
    return evaluate_maps(
        maps,
        dataset,
        iou_threshold=iou_threshold,
        top_n=top_n,
        dilation_radius=dilation_radius,
        accuracy=accuracy,
    )


def location_instability(network, dataset: PartDataset, **kwargs) -> float:
    """mean_f mean_k D_f,k across every landmark of every category."""
    return evaluate_network(network, dataset, **kwargs).location_instability


def multi_category_instability(network, dataset: PartDataset, **kwargs) -> float:
    """mean_f min_c mean_{k in category c} D_f,k."""
    return evaluate_network(network, dataset, **kwargs).multi_category_instability
