"""Read/write the COCO-style annotation JSON subset.

Supported top-level keys: "images" (id, width, height), "annotations"
(id, image_id, category_id, bbox as [x, y, w, h]), "categories" (id, name).
Files produced by this tool additionally embed the generator ground truth
under "scenes" and the noise provenance under "provenance"; plain files
without those keys are accepted (scenes come back without truth objects).
Unknown top-level keys round-trip opaquely; unknown per-record keys are
dropped with a warning.
"""

from __future__ import annotations

import json
import warnings

from .geometry import Box
from .scenes import (
    AnnotatedDataset,
    Annotation,
    Provenance,
    Scene,
    SceneObject,
)

_KNOWN_TOPLEVEL = {"images", "annotations", "categories", "scenes", "provenance"}
_IMAGE_KEYS = {"id", "width", "height"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox"}
_CAT_KEYS = {"id", "name"}


class AnnotationFormatError(ValueError):
    """Malformed or inconsistent annotation file, with position context."""

    def __init__(self, message: str, context: str = ""):
        self.context = context
        super().__init__(f"{context}: {message}" if context else message)


def _require(record: dict, key: str, context: str):
    if key not in record:
        raise AnnotationFormatError(f"missing required key {key!r}", context)
    return record[key]


def _bbox_to_box(bbox, context: str) -> Box:
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise AnnotationFormatError(f"bbox must be [x, y, w, h], got {bbox!r}", context)
    x, y, w, h = (float(v) for v in bbox)
    if w < 0 or h < 0:
        raise AnnotationFormatError(f"negative box size w={w}, h={h}", context)
    return Box(x, y, x + w, y + h)


def _box_to_bbox(box: Box) -> list[float]:
    return [box.x1, box.y1, box.w, box.h]


def _warn_extra_keys(record: dict, known: set, context: str):
    extra = sorted(set(record) - known)
    if extra:
        warnings.warn(f"{context}: dropping unsupported keys {extra}", stacklevel=3)


def read_annotations(path) -> AnnotatedDataset:
    """Parse an annotation file into an AnnotatedDataset."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(
            f"malformed JSON: {exc.msg}", f"{path}:{exc.lineno}:{exc.colno}"
        ) from exc
    if not isinstance(raw, dict):
        raise AnnotationFormatError("top level must be a JSON object", str(path))

    images = _require(raw, "images", str(path))
    anns = _require(raw, "annotations", str(path))
    cats = _require(raw, "categories", str(path))

    categories: list[tuple[int, str]] = []
    seen_cat = set()
    for i, rec in enumerate(cats):
        ctx = f"{path}: categories[{i}]"
        cid = int(_require(rec, "id", ctx))
        if cid in seen_cat:
            raise AnnotationFormatError(f"duplicate category id {cid}", ctx)
        seen_cat.add(cid)
        categories.append((cid, str(_require(rec, "name", ctx))))
        _warn_extra_keys(rec, _CAT_KEYS, ctx)

    image_order: list[int] = []
    image_bounds: dict[int, Box] = {}
    for i, rec in enumerate(images):
        ctx = f"{path}: images[{i}]"
        iid = int(_require(rec, "id", ctx))
        if iid in image_bounds:
            raise AnnotationFormatError(f"duplicate image id {iid}", ctx)
        width = float(_require(rec, "width", ctx))
        height = float(_require(rec, "height", ctx))
        if width <= 0 or height <= 0:
            raise AnnotationFormatError(f"non-positive image size {width}x{height}", ctx)
        image_order.append(iid)
        image_bounds[iid] = Box(0.0, 0.0, width, height)
        _warn_extra_keys(rec, _IMAGE_KEYS, ctx)

    cat_ids = {cid for cid, _ in categories}
    per_image: dict[int, list[Annotation]] = {iid: [] for iid in image_order}
    for i, rec in enumerate(anns):
        ctx = f"{path}: annotations[{i}]"
        iid = int(_require(rec, "image_id", ctx))
        if iid not in image_bounds:
            raise AnnotationFormatError(f"annotation references unknown image id {iid}", ctx)
        cid = int(_require(rec, "category_id", ctx))
        if cid not in cat_ids:
            raise AnnotationFormatError(f"annotation references unknown category id {cid}", ctx)
        box = _bbox_to_box(_require(rec, "bbox", ctx), ctx)
        per_image[iid].append(Annotation(box, cid))
        _warn_extra_keys(rec, _ANN_KEYS, ctx)

    truth: dict[int, tuple[tuple[SceneObject, ...], float]] = {}
    cat_index = {cid: k for k, (cid, _) in enumerate(categories)}
    for i, rec in enumerate(raw.get("scenes", [])):
        ctx = f"{path}: scenes[{i}]"
        iid = int(_require(rec, "image_id", ctx))
        if iid not in image_bounds:
            raise AnnotationFormatError(f"scene references unknown image id {iid}", ctx)
        objects = []
        for j, obj in enumerate(rec.get("objects", [])):
            octx = f"{ctx}.objects[{j}]"
            cid = int(_require(obj, "category_id", octx))
            objects.append(
                SceneObject(
                    box=_bbox_to_box(_require(obj, "bbox", octx), octx),
                    category=cat_index.get(cid, cid),
                    intensity=float(_require(obj, "intensity", octx)),
                )
            )
        truth[iid] = (tuple(objects), float(rec.get("background", 0.0)))

    scenes = []
    annotations = []
    for iid in image_order:
        objects, background = truth.get(iid, ((), 0.0))
        scenes.append(Scene(bounds=image_bounds[iid], objects=objects, background=background))
        # Categories in memory are zero-based row indices into the category table.
        annotations.append(
            [Annotation(a.box, cat_index.get(a.category, a.category)) for a in per_image[iid]]
        )

    prov_rec = raw.get("provenance", {})
    provenance = Provenance(
        kind=str(prov_rec.get("kind", "clean")),
        r=float(prov_rec.get("r", 0.0)),
        seed=int(prov_rec.get("seed", 0)),
    )
    extras = {k: raw[k] for k in raw if k not in _KNOWN_TOPLEVEL}
    return AnnotatedDataset(scenes, annotations, provenance, categories, extras)


def write_annotations(ds: AnnotatedDataset, path) -> None:
    """Serialize a dataset to the COCO-style subset (deterministic bytes)."""
    categories = ds.categories or sorted(
        {(a.category + 1, f"class_{a.category + 1}") for anns in ds.annotations for a in anns}
    )
    index_to_cid = {k: cid for k, (cid, _) in enumerate(categories)}
    images = []
    annotations = []
    scenes = []
    ann_id = 1
    for i, (scene, anns) in enumerate(zip(ds.scenes, ds.annotations)):
        iid = i + 1
        images.append({"id": iid, "width": scene.bounds.w, "height": scene.bounds.h})
        for ann in anns:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": iid,
                    "category_id": index_to_cid.get(ann.category, ann.category),
                    "bbox": _box_to_bbox(ann.box),
                }
            )
            ann_id += 1
        if scene.objects:
            scenes.append(
                {
                    "image_id": iid,
                    "background": scene.background,
                    "objects": [
                        {
                            "bbox": _box_to_bbox(o.box),
                            "category_id": index_to_cid.get(o.category, o.category),
                            "intensity": o.intensity,
                        }
                        for o in scene.objects
                    ],
                }
            )
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": cid, "name": name} for cid, name in categories],
        "provenance": {
            "kind": ds.provenance.kind,
            "r": ds.provenance.r,
            "seed": ds.provenance.seed,
        },
    }
    if scenes:
        payload["scenes"] = scenes
    payload.update(ds.extras)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
