"""Evaluation metrics and dataset-level aggregation.

Per case: PSNR and an optional perceptual distance at the reference view,
and image-image embedding similarity between novel-view renders and the
reference image.  Reports aggregate as unweighted means, overall and per
category.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .cases import case_at_resolution, load_case
from .errors import BackendError
from .losses import CaseInput
from .scene import CameraPose, RenderedView

PSNR_CAP = 99.0
METRICS = ("clip_similarity", "psnr", "lpips")


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _raster(x):
    return x.rgb if isinstance(x, RenderedView) else np.asarray(x, dtype=np.float64)


def _unit(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    return v / np.linalg.norm(v)


def clip_similarity_metric(renders, reference_image, model) -> float:
    """Mean cosine between each render's image embedding and the reference image's."""
    scores = _per_view_similarity(renders, reference_image, model)
    return float(np.mean(scores))


def _per_view_similarity(renders, reference_image, model) -> List[float]:
    renders = list(renders)
    if not renders:
        raise ValueError("at least one render is required")
    try:
        ref = _unit(model.embed_image(_raster(reference_image)))
        return [float(_unit(model.embed_image(_raster(r))) @ ref) for r in renders]
    except Exception as exc:
        raise BackendError(f"embedding model failed: {exc}") from exc


@dataclass
class CaseReport:
    clip_similarity: float
    psnr: float
    lpips: Optional[float] = None
    per_view: Dict[str, float] = field(default_factory=dict)
    category: Optional[str] = None

    def metrics(self) -> Dict[str, float]:
        out = {"clip_similarity": self.clip_similarity, "psnr": self.psnr}
        if self.lpips is not None:
            out["lpips"] = self.lpips
        return out

    def to_dict(self):
        d = self.metrics()
        d["per_view"] = dict(self.per_view)
        if self.category is not None:
            d["category"] = self.category
        return d


def evaluate_case(renders, case: CaseInput, model, perceptual: Optional[Callable] = None) -> CaseReport:
    """Score one reconstruction.

    ``renders`` maps names to rasters or views (a ``ReconstructionResult``
    is accepted too): ``"reference"`` plus one entry per novel view.
    """
    renders = getattr(renders, "renders", renders)
    if "reference" not in renders:
        raise ValueError("renders must include the reference view")
    novel = {k: v for k, v in sorted(renders.items()) if k != "reference"}
    if not novel:
        raise ValueError("renders must include at least one novel view")
    reference = _raster(renders["reference"])
    gt = case_at_resolution(case, reference.shape[0]).image
    per_view = dict(zip(novel, _per_view_similarity(novel.values(), gt, model)))
    lp = None
    if perceptual is not None:
        try:
            lp = float(perceptual(reference, gt))
        except Exception as exc:
            raise BackendError(f"perceptual metric failed: {exc}") from exc
    return CaseReport(
        clip_similarity=float(np.mean(list(per_view.values()))),
        psnr=psnr(reference, gt),
        lpips=lp,
        per_view=per_view,
        category=case.category,
    )


def _mean_metrics(reports: List[CaseReport]) -> Dict[str, float]:
    out = {}
    for key in METRICS:
        values = [r.metrics()[key] for r in reports if key in r.metrics()]
        if values:
            out[key] = float(np.mean(values))
    return out


def aggregate(reports: Dict[str, CaseReport]) -> Dict:
    if not reports:
        raise ValueError("no cases to aggregate")
    groups = defaultdict(list)
    for rep in reports.values():
        if rep.category is not None:
            groups[rep.category].append(rep)
    return {
        "per_case": {name: rep.to_dict() for name, rep in sorted(reports.items())},
        "per_category": {cat: _mean_metrics(reps) for cat, reps in sorted(groups.items())},
        "mean": _mean_metrics(list(reports.values())),
    }


def load_renders(result_dir) -> Dict[str, np.ndarray]:
    with np.load(Path(result_dir) / "renders.npz") as data:
        return {k: data[k].astype(np.float64) for k in data.files}


def evaluate_dataset(results_dir, cases_dir, model, reference_pose: CameraPose,
                     perceptual: Optional[Callable] = None) -> Dict:
    """Evaluate every ``cases_dir/<name>`` that has a matching ``results_dir/<name>/renders.npz``."""
    results_dir, cases_dir = Path(results_dir), Path(cases_dir)
    reports = {}
    for case_path in sorted(p for p in cases_dir.iterdir() if p.is_dir()):
        result_path = results_dir / case_path.name
        if not (result_path / "renders.npz").exists():
            continue
        case = load_case(case_path, reference_pose)
        reports[case_path.name] = evaluate_case(load_renders(result_path), case, model, perceptual)
    if not reports:
        raise ValueError(f"no matching cases between {results_dir} and {cases_dir}")
    return aggregate(reports)


def write_report(report: Dict, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is None:
        return
    columns = [m for m in METRICS if m in report["mean"]]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "category"] + columns)
        for name, row in report["per_case"].items():
            writer.writerow([name, row.get("category", "")] + [repr(row[c]) for c in columns])
        writer.writerow(["mean", ""] + [repr(report["mean"][c]) for c in columns])
