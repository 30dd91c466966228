"""Image assembly, quality metrics and report/curve export.

Metrics compare storage-space images (uint8 after rounding). ``mean_l1`` and
``mean_l2`` are percentages of the full pixel range: the mean absolute
difference divided by 255 and the mean squared difference divided by 255^2,
both times 100.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .data import (
    DataError,
    ImageTensor,
    InpaintingSet,
    MaskedSample,
    MaskGeometry,
    Space,
    quantize,
)

PEAK = 255.0
METRIC_CONVENTION = (
    "patch region only; storage space [0,255] after rounding; "
    "mean_l1 = 100*mean|a-b|/255; mean_l2 = 100*mean(a-b)^2/255^2; psnr peak 255"
)


# --------------------------------------------------------------------------- assembly


def assemble(masked: MaskedSample, patch: ImageTensor) -> ImageTensor:
    """Paste ``patch`` into the hole of ``masked.masked_image``."""
    g = masked.geometry
    img = masked.masked_image
    if patch.space != img.space:
        raise DataError(f"patch space {patch.space.value} != image space {img.space.value}")
    if patch.size != (g.mask_size, g.mask_size) or patch.batch != img.batch:
        raise DataError(
            f"patch {patch.data.shape} does not fit a {g.mask_size}px hole in {img.data.shape}"
        )
    if img.size != (g.image_size, g.image_size):
        raise DataError(f"image {img.size} does not match geometry {g.image_size}")
    out = img.data.copy()
    out[:, g.rows, g.cols, :] = patch.data.astype(out.dtype, copy=False)
    return ImageTensor(out, img.space)


def paste_patch(images: torch.Tensor, patch: torch.Tensor, geometry: MaskGeometry):
    """Differentiable ``assemble`` for NCHW tensors."""
    out = images.clone()
    out[:, :, geometry.rows, geometry.cols] = patch
    return out


# --------------------------------------------------------------------------- metrics


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, ImageTensor):
        a = a.require(Space.STORAGE).data
    if isinstance(b, ImageTensor):
        b = b.require(Space.STORAGE).data
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"metric shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = PEAK) -> float:
    """PSNR in dB; ``math.inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / err)


def mean_l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b))) / PEAK * 100.0


def mean_l2(a, b) -> float:
    return mse(a, b) / PEAK**2 * 100.0


class MetricRow(NamedTuple):
    source_id: str
    mean_l1: float
    mean_l2: float
    psnr_db: float


@dataclass
class MetricsReport:
    name: str
    rows: list[MetricRow]
    metadata: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> MetricRow:
        if not self.rows:
            raise DataError("empty report")
        cols = np.array([r[1:] for r in self.rows], dtype=np.float64)
        return MetricRow("mean", *(float(v) for v in cols.mean(axis=0)))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        for k, v in sorted(self.metadata.items()):
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MetricRow._fields)
        for r in self.rows:
            w.writerow([r.source_id, repr(r.mean_l1), repr(r.mean_l2), repr(r.psnr_db)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path, name: str = "") -> "MetricsReport":
        lines = Path(path).read_text().splitlines()
        meta = {}
        body = []
        for line in lines:
            if line.startswith("# "):
                k, _, v = line[2:].partition(": ")
                meta[k] = v
            else:
                body.append(line)
        reader = csv.reader(body)
        next(reader)
        rows = [MetricRow(r[0], float(r[1]), float(r[2]), float(r[3])) for r in reader]
        return cls(name, rows, meta)


def evaluate_patches(ids, predicted: np.ndarray, truth: np.ndarray, name: str = "",
                     metadata: dict | None = None) -> MetricsReport:
    """Per-image metrics between uint8 NHWC patch batches, rows sorted by id."""
    if predicted.shape != truth.shape:
        raise DataError(f"prediction {predicted.shape} vs truth {truth.shape}")
    rows = [
        MetricRow(sid, mean_l1(p, t), mean_l2(p, t), psnr(p, t))
        for sid, p, t in zip(ids, predicted, truth)
    ]
    rows.sort(key=lambda r: r.source_id)
    meta = {"convention": METRIC_CONVENTION}
    meta.update(metadata or {})
    return MetricsReport(name, rows, meta)


def format_table(reports: list[MetricsReport]) -> str:
    """Aggregate rows side by side; ``*`` marks the best value per column."""
    aggs = [r.aggregate for r in reports]
    best = {
        "mean_l1": min(a.mean_l1 for a in aggs),
        "mean_l2": min(a.mean_l2 for a in aggs),
        "psnr_db": max(a.psnr_db for a in aggs),
    }
    width = max([len(r.name) for r in reports] + [6])
    lines = [f"{'Method':<{width}} | {'Mean L1':>10} | {'Mean L2':>10} | {'PSNR':>12}"]
    lines.append("-" * len(lines[0]))
    for rep, a in zip(reports, aggs):
        cells = []
        for key, fmt in (("mean_l1", "{:.4f}"), ("mean_l2", "{:.4f}"), ("psnr_db", "{:.2f} dB")):
            v = getattr(a, key)
            mark = "*" if len(reports) > 1 and v == best[key] else " "
            cells.append(fmt.format(v) + mark)
        lines.append(f"{rep.name:<{width}} | {cells[0]:>10} | {cells[1]:>10} | {cells[2]:>12}")
    lines.append(f"({METRIC_CONVENTION})")
    return "\n".join(lines)


# --------------------------------------------------------------------------- pipeline


def _to_storage(x: torch.Tensor) -> np.ndarray:
    return quantize((x.detach().double().permute(0, 2, 3, 1).numpy() + 1.0) * 127.5)


@dataclass
class Predictions:
    ids: list[str]
    truth: np.ndarray
    coarse: np.ndarray
    polished: np.ndarray | None
    masked: np.ndarray
    originals: np.ndarray


@torch.no_grad()
def predict(cpn, fpn, dataset: InpaintingSet, mask_size: int, fill, batch_size: int = 64
            ) -> Predictions:
    """Run mask -> coarse painter -> (fine painter) in eval mode over ``dataset``.

    Patches come back as uint8 storage arrays in dataset order.
    """
    cpn.eval()
    if fpn is not None:
        fpn.eval()
    dtype = next(cpn.parameters()).dtype
    coarse, polished, truth, masked = [], [], [], []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        sample = dataset.sample(idx, mask_size, fill)
        x = torch.from_numpy(sample.masked_image.data.transpose(0, 3, 1, 2).copy()).to(dtype)
        c = cpn(x)
        coarse.append(_to_storage(c))
        if fpn is not None:
            polished.append(_to_storage(fpn(c)[1]))
        truth.append(quantize((sample.ground_truth_patch.data + 1.0) * 127.5))
        masked.append(quantize((sample.masked_image.data + 1.0) * 127.5))
    return Predictions(
        ids=list(dataset.ids),
        truth=np.concatenate(truth),
        coarse=np.concatenate(coarse),
        polished=np.concatenate(polished) if fpn is not None else None,
        masked=np.concatenate(masked),
        originals=dataset.images,
    )


def mean_psnr(predicted: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean([psnr(p, t) for p, t in zip(predicted, truth)]))


def evaluate_pipeline(cpn, fpn, test_set: InpaintingSet, mask_size: int | None = None,
                      fill=None, batch_size: int = 64, metadata: dict | None = None):
    """Table-style evaluation of the coarse and (optionally) polished pipelines.

    ``cpn`` / ``fpn`` are networks or checkpoint paths. Mask size and fill
    default to the values recorded in the coarse checkpoint. Returns a list
    with the coarse report first and, when ``fpn`` is given, the polished one.
    """
    from .checkpoint import digest, load_network

    meta = dict(metadata or {})
    recorded = {}
    if isinstance(cpn, (str, Path)):
        meta["cpn_checkpoint"] = f"{Path(cpn).name}:{digest(cpn)[:16]}"
        cpn, manifest = load_network(cpn, "cpn")
        recorded = manifest.get("extra", {})
    if isinstance(fpn, (str, Path)):
        meta["fpn_checkpoint"] = f"{Path(fpn).name}:{digest(fpn)[:16]}"
        fpn, _ = load_network(fpn, "fpn")
    if len(test_set) == 0:
        raise DataError("empty test split")
    mask_size = mask_size or recorded.get("mask_size") or cpn.spec.patch_size
    if fill is None:
        fill = recorded.get("fill", 0.0)
    if mask_size != cpn.spec.patch_size:
        raise DataError(f"mask size {mask_size} != coarse painter patch {cpn.spec.patch_size}")
    if fpn is not None and fpn.spec.patch_size != mask_size:
        raise DataError(f"fine painter patch {fpn.spec.patch_size} != mask size {mask_size}")
    if test_set.images.shape[1] != cpn.spec.input_size:
        raise DataError(
            f"test images are {test_set.images.shape[1]}px, coarse painter expects "
            f"{cpn.spec.input_size}px"
        )
    meta["geometry"] = MaskGeometry.centered(cpn.spec.input_size, mask_size).to_dict()

    pred = predict(cpn, fpn, test_set, mask_size, fill, batch_size)
    reports = [evaluate_patches(pred.ids, pred.coarse, pred.truth, "CPN", meta)]
    if pred.polished is not None:
        reports.append(evaluate_patches(pred.ids, pred.polished, pred.truth, "Residual Polish", meta))
    return reports


def panel(masked: np.ndarray, coarse: np.ndarray, polished: np.ndarray, original: np.ndarray
          ) -> np.ndarray:
    """Side-by-side HWC strip: input | coarse | polished | ground truth."""
    return np.concatenate([masked, coarse, polished, original], axis=1)


# --------------------------------------------------------------------------- curves


class CurveRow(NamedTuple):
    step: int
    epoch: int
    split: str
    metric: str
    value: float


class TrainingCurve:
    """Append-only log of (step, epoch, split, metric, value) rows."""

    HEADER = CurveRow._fields

    def __init__(self, rows=()):
        self.rows: list[CurveRow] = []
        for r in rows:
            self.append(*r)

    def append(self, step: int, epoch: int, split: str, metric: str, value: float) -> None:
        if self.rows and step < self.rows[-1].step:
            raise ValueError(f"curve step {step} precedes last logged step {self.rows[-1].step}")
        self.rows.append(CurveRow(int(step), int(epoch), split, metric, float(value)))

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, TrainingCurve) and self.rows == other.rows

    def series(self, metric: str, split: str | None = None) -> list[CurveRow]:
        return [r for r in self.rows if r.metric == metric and (split is None or r.split == split)]

    def truncate(self, step: int) -> None:
        self.rows = [r for r in self.rows if r.step <= step]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r.step, r.epoch, r.split, r.metric, repr(r.value)])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainingCurve":
        with Path(path).open(newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if tuple(header) != cls.HEADER:
                raise DataError(f"{path}: unexpected curve header {header}")
            return cls((int(s), int(e), sp, m, float(v)) for s, e, sp, m, v in reader)


def export_curves(curve: TrainingCurve, out_path, plot: bool = True) -> list[Path]:
    """Write the curve as CSV and, if matplotlib is importable, a PSNR-vs-epoch PNG."""
    if len(curve) == 0:
        raise DataError("empty curve")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = [curve.to_csv(out_path.with_suffix(".csv"))]
    if not plot:
        return written
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return written
    keys = sorted({(r.split, r.metric) for r in curve.rows if r.metric.startswith("psnr")})
    if not keys:
        return written
    fig, ax = plt.subplots(figsize=(6, 4))
    for split, metric in keys:
        pts = [r for r in curve.rows if r.split == split and r.metric == metric]
        ax.plot([r.epoch for r in pts], [r.value for r in pts], label=f"{metric} ({split})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    png = out_path.with_suffix(".png")
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(png)
    return written
