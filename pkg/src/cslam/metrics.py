"""Evaluation metrics: rigid-alignment trajectory error, time-weighted
incremental metrics, and inlier-classification scores, plus the CSV emission
used by the experiment harness."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RigidTransform:
    rotation: np.ndarray  # (d, d)
    translation: np.ndarray  # (d,)

    def apply(self, points):
        return points @ self.rotation.T + self.translation


def umeyama_align(est_points, ref_points) -> RigidTransform:
    """Least-squares rigid transform (no scale) minimizing ||T(est) - ref||^2.

    Requires >= 3 non-degenerate correspondences; raises on collinear input.
    """
    est = np.asarray(est_points, dtype=np.float64)
    ref = np.asarray(ref_points, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 2:
        raise ValueError("point sets must share shape (n, d)")
    n, d = est.shape
    if n < 3:
        raise ValueError("need at least 3 correspondences")
    mu_e, mu_r = est.mean(axis=0), ref.mean(axis=0)
    cov = (ref - mu_r).T @ (est - mu_e) / n
    u, s, vt = np.linalg.svd(cov)
    # rank d-1 suffices (planar clouds in 3D); below that rotation is ambiguous
    if s[d - 2] < 1e-12 * max(s[0], 1e-300):
        raise ValueError("degenerate (collinear) point configuration")
    sign = np.eye(d)
    if np.linalg.det(u @ vt) < 0:
        sign[d - 1, d - 1] = -1.0
    rot = u @ sign @ vt
    return RigidTransform(rot, mu_r - rot @ mu_e)


def ate(est, ref) -> float:
    """Root-mean-square translation error after rigid alignment.

    `est` and `ref` map keys to translation vectors; the key sets must match
    and are pooled over all robots.
    """
    if set(est) != set(ref):
        raise ValueError("estimate/reference key sets differ")
    keys = sorted(est)
    e = np.array([est[k] for k in keys], dtype=np.float64)
    r = np.array([ref[k] for k in keys], dtype=np.float64)
    t = umeyama_align(e, r)
    return float(np.sqrt(np.mean(np.sum((t.apply(e) - r) ** 2, axis=1))))


def rotation_ate(est_angles, ref_angles) -> float:
    """Secondary rotation RMS (radians) without alignment of headings."""
    if set(est_angles) != set(ref_angles):
        raise ValueError("estimate/reference key sets differ")
    keys = sorted(est_angles)
    diff = np.array(
        [est_angles[k] - ref_angles[k] for k in keys], dtype=np.float64
    )
    diff = np.pi - np.mod(np.pi - diff, 2 * np.pi)
    return float(np.sqrt(np.mean(diff**2)))


def incremental(series) -> float:
    """Linearly time-weighted average: sum_k (k / sum k) * metric_k."""
    series = list(series)
    if not series:
        raise ValueError("empty series")
    ks = np.array([k for k, _ in series], dtype=np.float64)
    vals = np.array([v for _, v in series], dtype=np.float64)
    if np.any(ks <= 0):
        raise ValueError("step indices must be positive")
    w = ks / ks.sum()
    assert abs(w.sum() - 1.0) < 1e-12
    return float(np.dot(w, vals))


def f1(classifications, labels):
    """(precision, recall, f1) treating 'inlier' as the positive class.

    `classifications` and `labels` map measurement ids to booleans. Empty
    inputs are defined as perfect (1.0) with a warning.
    """
    if set(classifications) != set(labels):
        raise ValueError("classification/label key sets differ")
    if not labels:
        warnings.warn("empty classification set; defining scores as 1.0")
        return 1.0, 1.0, 1.0
    tp = sum(1 for k in labels if classifications[k] and labels[k])
    fp = sum(1 for k in labels if classifications[k] and not labels[k])
    fn = sum(1 for k in labels if not classifications[k] and labels[k])
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, score


@dataclass
class SolutionHistory:
    """Per-step joint estimates and classifications for one method run."""

    steps: list = field(default_factory=list)  # 1-based step indices
    estimates: list = field(default_factory=list)  # dict key -> translation
    rotations: list = field(default_factory=list)  # dict key -> heading (2D only)
    classifications: list = field(default_factory=list)  # dict uid -> bool

    def record(self, step, translations, rotations, classifications):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("history steps must be strictly increasing")
        self.steps.append(step)
        self.estimates.append(translations)
        self.rotations.append(rotations)
        self.classifications.append(classifications)


@dataclass
class MetricReport:
    method: str = ""
    dataset: str = ""
    seed: int = 0
    iate: float = float("nan")
    final_ate: float = float("nan")
    iate_rot: float = float("nan")
    if1: float = float("nan")
    final_f1: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    failed: bool = False
    failure: str = ""
    steps: list = field(default_factory=list)
    ate_series: list = field(default_factory=list)
    f1_series: list = field(default_factory=list)
    update_ms_series: list = field(default_factory=list)  # mean per step
    update_ms_all: list = field(default_factory=list)  # every robot update


def summarize(history: SolutionHistory, gt_translations, gt_rotations, labels,
              method="", dataset="", seed=0) -> MetricReport:
    """Compute final and incremental metrics for a recorded run."""
    rep = MetricReport(method=method, dataset=dataset, seed=seed)
    ate_series, rot_series, f1_series = [], [], []
    for est, rots, cls in zip(history.estimates, history.rotations, history.classifications):
        ref = {k: gt_translations[k] for k in est}
        ate_series.append(ate(est, ref))
        if rots:
            rot_series.append(rotation_ate(rots, {k: gt_rotations[k] for k in rots}))
        if labels:
            visible = {k: labels[k] for k in cls}
            if visible:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    f1_series.append(f1(cls, visible)[2])
            else:
                f1_series.append(1.0)
        else:
            f1_series.append(1.0)
    rep.steps = list(history.steps)
    rep.ate_series = ate_series
    rep.f1_series = f1_series
    rep.iate = incremental(zip(history.steps, ate_series))
    rep.final_ate = ate_series[-1]
    if rot_series:
        rep.iate_rot = incremental(zip(history.steps, rot_series))
    rep.if1 = incremental(zip(history.steps, f1_series))
    rep.final_f1 = f1_series[-1]
    if labels and history.classifications and history.classifications[-1]:
        cls = history.classifications[-1]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep.precision, rep.recall, _ = f1(cls, {k: labels[k] for k in cls})
    else:
        rep.precision = rep.recall = 1.0
    return rep


SUMMARY_COLUMNS = [
    "method", "dataset", "seed", "iate", "final_ate", "iate_rot",
    "if1", "final_f1", "precision", "recall", "failed",
]


def _cell(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def write_summary_csv(reports, path):
    """One deterministic row per (method, dataset, seed)."""
    lines = [",".join(SUMMARY_COLUMNS)]
    for r in reports:
        lines.append(",".join(_cell(getattr(r, c)) for c in SUMMARY_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_series_csv(reports, path):
    """Long-format per-step series for plotting (deterministic columns only)."""
    lines = ["method,dataset,seed,step,ate,f1"]
    for r in reports:
        for k, a, f in zip(r.steps, r.ate_series, r.f1_series):
            lines.append(f"{r.method},{r.dataset},{r.seed},{k},{_cell(a)},{_cell(f)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_timing_csv(reports, path):
    """Wall-clock update timing per step (inherently non-deterministic)."""
    lines = ["method,dataset,seed,step,update_ms_mean"]
    for r in reports:
        for k, ms in zip(r.steps, r.update_ms_series):
            lines.append(f"{r.method},{r.dataset},{r.seed},{k},{_cell(ms)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
