"""Dice / Jaccard evaluation on hard label maps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class EvalReport:
    dice: list[float]  # foreground classes 1..K
    ji: list[float]
    n_images: int
    meta: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def mean_ji(self) -> float:
        return float(np.mean(self.ji))

    @property
    def per_class(self) -> dict[int, tuple[float, float]]:
        return {c + 1: (d, j) for c, (d, j) in enumerate(zip(self.dice, self.ji))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dice", "ji"])
        for c, (d, j) in self.per_class.items():
            w.writerow([c, repr(d), repr(j)])
        w.writerow(["mean", repr(self.mean_dice), repr(self.mean_ji)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"mean_dice": self.mean_dice, "mean_ji": self.mean_ji, "n_images": self.n_images,
                "per_class": {str(c): {"dice": d, "ji": j} for c, (d, j) in self.per_class.items()},
                **self.meta}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def _stack(maps) -> np.ndarray:
    arr = np.asarray(maps) if not isinstance(maps, (list, tuple)) else np.stack([np.asarray(m) for m in maps])
    return arr[None] if arr.ndim == 2 else arr


def _scores(inter, p, g):
    union = p + g - inter
    both_empty = (p + g) == 0
    dice = np.where(both_empty, 1.0, 2 * inter / np.where(both_empty, 1, p + g))
    ji = np.where(both_empty, 1.0, inter / np.where(both_empty, 1, union))
    return dice, ji


def overlap_metrics(pred, gt, K: int, mode: str = "micro") -> EvalReport:
    """Per-class Dice and Jaccard for classes 1..K.

    ``micro`` pools pixel counts over all images before scoring; ``macro``
    scores each image and averages.  A class absent from both prediction and
    ground truth scores 1.
    """
    pred, gt = _stack(pred), _stack(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    classes = np.arange(1, K + 1)[:, None, None, None]
    P = pred[None] == classes
    G = gt[None] == classes
    inter = (P & G).sum(axis=(2, 3)).astype(np.float64)  # K x N
    psum = P.sum(axis=(2, 3)).astype(np.float64)
    gsum = G.sum(axis=(2, 3)).astype(np.float64)
    if mode == "micro":
        dice, ji = _scores(inter.sum(1), psum.sum(1), gsum.sum(1))
    elif mode == "macro":
        d, j = _scores(inter, psum, gsum)
        dice, ji = d.mean(1), j.mean(1)
    else:
        raise ValueError(f"unknown averaging mode {mode!r}")
    return EvalReport([float(x) for x in dice], [float(x) for x in ji], int(pred.shape[0]))


def predict_labels(params, images: Sequence[np.ndarray], batch: int = 16) -> np.ndarray:
    """Argmax of the MoS head, no perturbation."""
    from .segnet import forward

    out = []
    for i in range(0, len(images), batch):
        x = np.stack([np.asarray(im, dtype=np.float64)[None] for im in images[i:i + batch]])
        out.append(forward(params, x, heads="mos").mos.argmax(axis=1))
    return np.concatenate(out)


def evaluate_model(params, test_set, K: int, mode: str = "micro") -> EvalReport:
    """Score ``params`` (pass the teacher's for the default protocol) on labeled samples."""
    images = [s.image for s in test_set]
    gts = np.stack([s.label for s in test_set])
    return overlap_metrics(predict_labels(params, images), gts, K, mode)
