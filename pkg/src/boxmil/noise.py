"""Bounding-box noise injection: random shift-and-scale perturbation.

Each box is perturbed independently with four draws (dx, dy, dw, dh) from
U(-r, r): the center moves by (dx*w, dy*h) and the sides rescale by
(1+dw, 1+dh). Draws come from a single seeded NumPy PCG64 generator in
annotation-file order, so injection is reproducible and diffable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box, clip
from .scenes import AnnotatedDataset, Annotation, Provenance


@dataclass(frozen=True)
class NoiseSpec:
    """Box noise level r in [0, 0.5) plus the generator seed."""

    r: float
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.r < 0.5):
            raise ValueError(f"noise level must satisfy 0 <= r < 0.5, got {self.r}")


def perturb_box(box: Box, deltas) -> Box:
    """Shift-and-scale a box: returns the perturbed box in corner form."""
    dx, dy, dw, dh = (float(d) for d in deltas)
    if dw <= -1.0 or dh <= -1.0:
        raise ValueError(f"scale deltas must exceed -1, got dw={dw}, dh={dh}")
    return Box.from_center(
        box.cx + dx * box.w,
        box.cy + dy * box.h,
        (1.0 + dw) * box.w,
        (1.0 + dh) * box.h,
    )


def draw_deltas(rng: np.random.Generator, r: float, count: int = 1) -> np.ndarray:
    """(count, 4) array of perturbation draws in the fixed (dx, dy, dw, dh) order."""
    return rng.uniform(-r, r, size=(count, 4))


def perturb_dataset(
    ds: AnnotatedDataset, spec: NoiseSpec, min_size: float = 1.0
) -> AnnotatedDataset:
    """Perturb every annotation box, then clip to scene bounds.

    The input dataset is untouched; the result carries noisy provenance.
    Boxes are processed sequentially in scene/annotation order.
    """
    rng = np.random.default_rng(spec.seed)
    noisy: list[list[Annotation]] = []
    for scene, anns in zip(ds.scenes, ds.annotations):
        row = []
        for ann in anns:
            deltas = draw_deltas(rng, spec.r, 1)[0]
            box = clip(perturb_box(ann.box, deltas), scene.bounds, min_size)
            row.append(replace(ann, box=box))
        noisy.append(row)
    return AnnotatedDataset(
        scenes=list(ds.scenes),
        annotations=noisy,
        provenance=Provenance("noisy", spec.r, spec.seed),
        categories=list(ds.categories),
        extras=dict(ds.extras),
    )
