"""Evaluation metrics: Dice, Hausdorff and mean surface distance on
label boundaries, Jacobian-determinant statistics in a region of
interest, and nearest-neighbor label-mask warping.

Labels follow the project convention 0 background, 1 left-ventricle
endocardium, 2 myocardium, 3 left atrium. Distances are in pixels at the
evaluation resolution unless a pixel spacing is supplied.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gradcore import DimensionError
from .svf import VectorField, identity_grid, jacobian_determinant

LABEL_NAMES = {1: "lv_endo", 2: "myocardium", 3: "left_atrium"}
MYOCARDIUM = 2
STRUCTURE_LABELS = (1, 2, 3)


class EmptyStructureError(ValueError):
    """A metric that needs boundary pixels got an empty label set."""


def warp_mask(mask: np.ndarray, disp: VectorField) -> np.ndarray:
    """Deform an integer label mask by nearest-neighbor sampling at the
    displaced coordinates (clamp-to-edge). Labels are never blended."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if (h, w) != (disp.height, disp.width):
        raise DimensionError(f"mask {mask.shape} and field {(disp.height, disp.width)} differ")
    grid = identity_grid(h, w)
    u = disp.array
    xi = np.clip(np.rint(grid[0] + u[0]).astype(np.intp), 0, w - 1)
    yi = np.clip(np.rint(grid[1] + u[1]).astype(np.intp), 0, h - 1)
    return mask[yi, xi]


def dice(a: np.ndarray, b: np.ndarray, label: int) -> float:
    """Overlap score 2|A∩B| / (|A|+|B|); 1.0 when both sets are empty."""
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    sa = a == label
    sb = b == label
    na, nb = int(sa.sum()), int(sb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((sa & sb).sum()) / (na + nb)


def boundary_pixels(mask: np.ndarray, label: int) -> np.ndarray:
    """Coordinates [n, 2] (row, col) of label pixels 4-adjacent to a
    non-label pixel or the image border."""
    sel = mask == label
    padded = np.pad(sel, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    boundary = sel & ~interior
    return np.argwhere(boundary)


def surface_distances(
    a: np.ndarray, b: np.ndarray, label: int, spacing: float = 1.0
) -> tuple[float, float]:
    """(Hausdorff, mean surface distance) between the label boundaries.

    Hausdorff is the max of the two directed maxima, MSD the mean of the
    two directed means of nearest-boundary Euclidean distances.
    """
    pa = boundary_pixels(a, label)
    pb = boundary_pixels(b, label)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyStructureError(f"label {label} has an empty boundary set")
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2).astype(np.float64)
    ab = np.sqrt(d2.min(axis=1))
    ba = np.sqrt(d2.min(axis=0))
    hd = max(ab.max(), ba.max()) * spacing
    msd = 0.5 * (ab.mean() + ba.mean()) * spacing
    return float(hd), float(msd)


@dataclass
class JacobianStats:
    mean: float
    std: float
    min: float
    neg_frac: float
    defined: bool = True

    @classmethod
    def undefined(cls) -> "JacobianStats":
        return cls(math.nan, math.nan, math.nan, math.nan, defined=False)


def jacobian_stats(disp: VectorField, roi: np.ndarray, label: int) -> JacobianStats:
    """Jacobian-determinant statistics restricted to ``roi == label``."""
    roi = np.asarray(roi)
    if roi.shape != (disp.height, disp.width):
        raise DimensionError(f"roi {roi.shape} and field {(disp.height, disp.width)} differ")
    jac = jacobian_determinant(disp)
    values = jac[roi == label]
    if values.size == 0:
        return JacobianStats.undefined()
    return JacobianStats(
        mean=float(values.mean()),
        std=float(values.std()),
        min=float(values.min()),
        neg_frac=float((values <= 0).mean()),
    )


def endpoint_error(
    estimated: VectorField, reference: VectorField, mask: np.ndarray | None = None
) -> float:
    """Mean Euclidean distance between two displacement fields, optionally
    restricted to mask > 0."""
    d = estimated.array - reference.array
    mag = np.sqrt(d[0] ** 2 + d[1] ** 2)
    if mask is not None:
        mag = mag[np.asarray(mask) > 0]
    return float(mag.mean())


# ---------------------------------------------------------------------------
# pair-level evaluation


@dataclass
class EvalPair:
    """One end-diastole / end-systole case ready for evaluation.

    ``disp_forward`` may hold a precomputed field, letting reports be
    built without a model."""

    pair_id: str
    ed_image: np.ndarray
    es_image: np.ndarray
    ed_mask: np.ndarray | None = None
    es_mask: np.ndarray | None = None
    spacing_mm: float | None = None
    disp_forward: VectorField | None = None


@dataclass
class StructureRow:
    pair_id: str
    structure: str
    dice: float
    hd: float
    msd: float


@dataclass
class JacobianRow:
    pair_id: str
    mean: float
    std: float
    min: float
    neg_frac: float


@dataclass
class EvalReport:
    rows: list[StructureRow] = field(default_factory=list)
    jacobian_rows: list[JacobianRow] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    pooled_jacobian: list[float] = field(default_factory=list)

    def aggregate(self) -> dict:
        """Per-structure and Jacobian summaries: mean/std/median/quartiles."""
        out: dict = {"structures": {}, "jacobian": {}, "n_pairs": len(self.jacobian_rows)}
        for label_name in sorted({r.structure for r in self.rows}):
            sub = [r for r in self.rows if r.structure == label_name]
            entry = {}
            for metric in ("dice", "hd", "msd"):
                vals = np.array([getattr(r, metric) for r in sub], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                entry[metric] = _summary(vals)
            out["structures"][label_name] = entry
        per_patient_mean = np.array([r.mean for r in self.jacobian_rows if math.isfinite(r.mean)])
        out["jacobian"]["per_patient_mean"] = _summary(per_patient_mean)
        pooled = np.array(self.pooled_jacobian, dtype=np.float64)
        out["jacobian"]["pooled"] = _summary(pooled)
        neg = np.array([r.neg_frac for r in self.jacobian_rows if math.isfinite(r.neg_frac)])
        out["jacobian"]["neg_frac"] = _summary(neg)
        return out

    def write(self, out_dir: Path | str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "structure", "dice", "hd", "msd"])
            for r in self.rows:
                writer.writerow([r.pair_id, r.structure, _fmt(r.dice), _fmt(r.hd), _fmt(r.msd)])
        with open(out_dir / "jacobian.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "jac_mean", "jac_std", "jac_min", "jac_neg_frac"])
            for r in self.jacobian_rows:
                writer.writerow([r.pair_id, _fmt(r.mean), _fmt(r.std), _fmt(r.min), _fmt(r.neg_frac)])
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(self.aggregate(), fh, indent=2, sort_keys=True)
        if self.skipped:
            with open(out_dir / "skipped.log", "w") as fh:
                for pair_id, reason in self.skipped:
                    fh.write(f"{pair_id}: {reason}\n")


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.6g}"


def _summary(vals: np.ndarray) -> dict:
    if vals.size == 0:
        return {"n": 0}
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    return {
        "n": int(vals.size),
        "mean": float(vals.mean()),
        "std": float(vals.std()),
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "min": float(vals.min()),
        "max": float(vals.max()),
    }


def worker_count() -> int:
    env = os.environ.get("PATCHREG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def evaluate_pairs(model, pairs: list[EvalPair], threads: int | None = None) -> EvalReport:
    """Register each pair (end-systole moving onto end-diastole fixed),
    warp the moving mask, and collect per-structure and Jacobian metrics.

    ``model`` may be None when every pair carries a precomputed
    ``disp_forward``. Pairs without masks are skipped with a logged
    reason. Per-pair work runs on a thread pool capped by
    PATCHREG_THREADS.
    """
    if threads is None:
        threads = worker_count()

    def one(pair: EvalPair):
        if pair.ed_mask is None or pair.es_mask is None:
            return ("skip", pair.pair_id, "missing mask")
        if pair.disp_forward is not None:
            disp = pair.disp_forward
        elif model is not None:
            disp = model.register(pair.ed_image, pair.es_image).disp_forward
        else:
            return ("skip", pair.pair_id, "no model and no precomputed field")
        warped = warp_mask(pair.es_mask, disp)
        spacing = pair.spacing_mm if pair.spacing_mm else 1.0
        rows = []
        for label in STRUCTURE_LABELS:
            d = dice(pair.ed_mask, warped, label)
            try:
                hd, msd = surface_distances(pair.ed_mask, warped, label, spacing)
            except EmptyStructureError:
                hd, msd = math.nan, math.nan
            rows.append(StructureRow(pair.pair_id, LABEL_NAMES[label], d, hd, msd))
        stats = jacobian_stats(disp, pair.ed_mask, MYOCARDIUM)
        jac = jacobian_determinant(disp)
        pooled = jac[np.asarray(pair.ed_mask) == MYOCARDIUM].tolist()
        jrow = JacobianRow(pair.pair_id, stats.mean, stats.std, stats.min, stats.neg_frac)
        return ("ok", rows, jrow, pooled)

    report = EvalReport()
    if threads == 1:
        outcomes = [one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, pairs))
    for outcome in outcomes:
        if outcome[0] == "skip":
            report.skipped.append((outcome[1], outcome[2]))
        else:
            _, rows, jrow, pooled = outcome
            report.rows.extend(rows)
            report.jacobian_rows.append(jrow)
            report.pooled_jacobian.extend(pooled)
    return report
