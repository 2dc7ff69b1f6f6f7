"""Object-aware multiple instance learning over bags of box candidates.

Every annotated object becomes a positive bag of candidate instances (the
noisy box itself included); leftover background candidates form negative
bags. A selector picks the most positive instance per bag, which is merged
with the noisy ground-truth box under a confidence-controlled weight, and
the merged box supervises the instance classifier and the box generator.
Positive bags can be extended by re-proposing candidates around the merged
instance for a fixed number of rounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, clip_array, iou_matrix
from .scenes import Scene, features_for_boxes
from .detector import (
    BagTerm,
    CandidateSet,
    LossBundle,
    ProposalSpec,
    ToyDetector,
    _probs,
    classifier_logits,
    encode_deltas,
    jitter_boxes,
    selector_logits,
    smooth_l1,
)

B_STAR_RULES = ("noisy-gt", "selected", "merged")


@dataclass(frozen=True)
class OAMILConfig:
    """Hyper-parameters of the object-aware MIL objective."""

    gamma: float = 7.5              # exponent of the bounded merge weight
    theta: float = 0.85             # cap of the merge weight
    n_extend: int = 4               # extension rounds per positive bag
    balance: float = 0.1            # selector-loss weight in the total
    iou_label_threshold: float = 0.5
    assign_iou: float = 0.5         # candidate-to-object assignment threshold
    max_negative_bag: int = 16

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not (0.0 <= self.theta <= 1.0):
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.n_extend < 0:
            raise ValueError(f"n_extend must be >= 0, got {self.n_extend}")
        if self.balance <= 0:
            raise ValueError(f"balance must be positive, got {self.balance}")


@dataclass(frozen=True)
class Bag:
    """A bag of candidate instances with one polarity label."""

    label: int                      # +1 (annotated object) or -1 (background)
    boxes: np.ndarray               # (N, 4) instance boxes, corner form
    features: np.ndarray            # (N, D)
    anchor_gt: Box = None           # noisy ground-truth instance, positives only
    category: int = None            # class index, positives only
    stage: int = 0                  # 0 = initial bag, k = k-th extension

    def __post_init__(self):
        if self.boxes.shape[0] < 1:
            raise ValueError("bags must hold at least one instance")
        if (self.label > 0) != (self.anchor_gt is not None):
            raise ValueError("positive bags need anchor_gt, negative bags must not have one")
        if self.label < 0 and self.stage != 0:
            raise ValueError("negative bags are never extended")

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass(frozen=True)
class SelectionResult:
    index: int          # most positive instance
    merged: Box         # confidence-weighted merge of selection and noisy box
    weight: float       # merge weight assigned to the selected instance


def phi(x, gamma: float, theta: float):
    """Bounded exponential mapping min(x**gamma, theta) on [0, 1]."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("phi input must lie in [0, 1]")
    out = np.minimum(arr**gamma, theta)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def build_bags(
    cands: CandidateSet,
    noisy_gt: list[tuple[Box, int]],
    scene: Scene,
    cfg: OAMILConfig,
) -> list[Bag]:
    """Group candidates into one positive bag per annotated object plus
    bounded-size negative bags of the leftovers.

    Candidates go to the object of maximum IoU when that IoU reaches
    cfg.assign_iou. Every positive bag contains its noisy box as an
    instance (appended when the candidates do not already include it).
    """
    boxes, feats = cands.boxes, cands.features
    m = boxes.shape[0]
    bags: list[Bag] = []
    if noisy_gt:
        gt_arr = np.stack([b.as_array() for b, _ in noisy_gt])
        overlap = iou_matrix(boxes, gt_arr) if m else np.zeros((0, len(noisy_gt)))
        best = np.argmax(overlap, axis=1) if m else np.zeros(0, dtype=int)
        assigned = (
            overlap[np.arange(m), best] >= cfg.assign_iou if m else np.zeros(0, dtype=bool)
        )
        for g, (gt_box, category) in enumerate(noisy_gt):
            rows = np.flatnonzero(assigned & (best == g))
            bag_boxes = boxes[rows]
            bag_feats = feats[rows]
            if not np.any(np.all(bag_boxes == gt_arr[g], axis=1)):
                bag_boxes = np.concatenate([bag_boxes, gt_arr[g : g + 1]], axis=0)
                bag_feats = np.concatenate(
                    [bag_feats, features_for_boxes(scene, gt_arr[g : g + 1])], axis=0
                )
            bags.append(
                Bag(
                    label=1,
                    boxes=bag_boxes,
                    features=bag_feats,
                    anchor_gt=gt_box,
                    category=category,
                )
            )
        leftover = np.flatnonzero(~assigned)
    else:
        leftover = np.arange(m)
    for start in range(0, leftover.size, cfg.max_negative_bag):
        rows = leftover[start : start + cfg.max_negative_bag]
        bags.append(Bag(label=-1, boxes=boxes[rows], features=feats[rows]))
    return bags


def bag_selector_scores(det: ToyDetector, bag: Bag) -> np.ndarray:
    """Per-instance selector probabilities; negative bags take the most
    confident class."""
    logits = selector_logits(det, bag.features)
    if bag.label > 0:
        return _probs(logits[:, bag.category])
    return _probs(logits.max(axis=1))


def bag_classifier_scores(det: ToyDetector, bag: Bag) -> np.ndarray:
    logits = classifier_logits(det, bag.features)
    if bag.label > 0:
        return _probs(logits[:, bag.category])
    return _probs(logits.max(axis=1))


def select_most_positive(bag: Bag, scores: np.ndarray) -> int:
    """Index of the highest selector score; ties go to the lowest index."""
    scores = np.asarray(scores)
    if scores.shape[0] != len(bag):
        raise ValueError("one score per bag instance required")
    return int(np.argmax(scores))


def oa_select(bag: Bag, j_star: int, scores: np.ndarray, cfg: OAMILConfig) -> SelectionResult:
    """Merge the selected instance with the noisy ground-truth box, weighted
    by the bounded confidence mapping (coordinate-wise, corner form)."""
    if bag.label < 0:
        raise ValueError("object-aware selection applies to positive bags only")
    weight = phi(float(scores[j_star]), cfg.gamma, cfg.theta)
    merged = weight * bag.boxes[j_star] + (1.0 - weight) * bag.anchor_gt.as_array()
    return SelectionResult(index=j_star, merged=Box.from_array(merged), weight=weight)


def extend_bags(
    bags: list[Bag],
    det: ToyDetector,
    scene: Scene,
    cfg: OAMILConfig,
    proposal_spec: ProposalSpec,
    rng: np.random.Generator,
) -> list[list[Bag]]:
    """Extended family per bag: cfg.n_extend rounds of re-proposing around
    the current merged instance. Negative bags stay single-stage."""
    families: list[list[Bag]] = []
    for bag in bags:
        if bag.label < 0 or cfg.n_extend == 0:
            families.append([bag])
            continue
        stages = [bag]
        current = bag
        for k in range(1, cfg.n_extend + 1):
            scores = bag_selector_scores(det, current)
            j_star = select_most_positive(current, scores)
            merged = oa_select(current, j_star, scores, cfg).merged.as_array()
            jit = jitter_boxes(
                merged[None, :], proposal_spec.jitter, proposal_spec.jitter_count, rng
            )
            stage_boxes = np.concatenate(
                [clip_array(jit, scene.bounds, proposal_spec.min_box_size), merged[None, :]]
            )
            current = Bag(
                label=1,
                boxes=stage_boxes,
                features=features_for_boxes(scene, stage_boxes),
                anchor_gt=bag.anchor_gt,
                category=bag.category,
                stage=k,
            )
            stages.append(current)
        families.append(stages)
    return families


# ---------------------------------------------------------------------------
# Loss terms


def selector_loss(stages: list[Bag], scores_per_stage: list[np.ndarray]) -> float:
    """Hinge loss of the bag's best instance, summed over extension stages.

    Probabilities are rescaled to (-1, 1) via 2*s - 1 before the hinge.
    """
    y = stages[0].label
    total = 0.0
    for bag, scores in zip(stages, scores_per_stage):
        rescaled = 2.0 * np.asarray(scores, dtype=np.float64) - 1.0
        total += max(0.0, 1.0 - y * rescaled.max())
    return total


def label_instances(bag: Bag, b_star: Box, threshold: float = 0.5) -> np.ndarray:
    """Instance labels: +1 iff the bag is positive and IoU to the merged
    instance reaches the threshold (inclusive), else -1."""
    if bag.label < 0:
        return -np.ones(len(bag), dtype=np.int64)
    overlap = iou_matrix(bag.boxes, b_star.as_array()[None, :])[:, 0]
    return np.where(overlap >= threshold, 1, -1).astype(np.int64)


def classifier_loss(bag: Bag, labels: np.ndarray, scores: np.ndarray) -> float:
    """Binary log-loss -sum log(y*(g - 1/2) + 1/2) over bag instances."""
    g = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.log(y * (g - 0.5) + 0.5).sum())


def generator_loss(
    bags: list[Bag],
    labels_per_bag: list[np.ndarray],
    deltas_per_bag: list[np.ndarray],
    b_star_per_bag: list[Box],
    beta: float = 1.0,
) -> float:
    """Smooth-l1 between predicted deltas and the encoding of the merged
    instance, over positively labeled instances of positive bags."""
    total = 0.0
    for bag, labels, deltas, b_star in zip(bags, labels_per_bag, deltas_per_bag, b_star_per_bag):
        if bag.label < 0:
            continue
        rows = np.flatnonzero(np.asarray(labels) > 0)
        if rows.size == 0:
            continue
        anchors = bag.boxes[rows]
        targets = encode_deltas(np.tile(b_star.as_array(), (rows.size, 1)), anchors)
        total += float(smooth_l1(np.asarray(deltas)[rows] - targets, beta).sum())
    return total


def combine_terms(selector: float, classifier: float, generator: float, balance: float) -> float:
    """Overall objective: balance * selector + classifier + generator."""
    return balance * selector + classifier + generator


def select_b_star(family: list[Bag], det: ToyDetector, cfg: OAMILConfig, rule: str) -> Box:
    """Training target for a positive family under the given supervision rule.

    "noisy-gt" uses the annotation box unchanged, "selected" the raw most
    positive instance of the initial bag, and "merged" the object-aware
    merge computed on the last extension stage.
    """
    if rule not in B_STAR_RULES:
        raise ValueError(f"unknown b* rule {rule!r}")
    bag0 = family[0]
    if rule == "noisy-gt":
        return bag0.anchor_gt
    if rule == "selected":
        scores = bag_selector_scores(det, bag0)
        return Box.from_array(bag0.boxes[select_most_positive(bag0, scores)])
    last = family[-1]
    scores = bag_selector_scores(det, last)
    return oa_select(last, select_most_positive(last, scores), scores, cfg).merged


def assemble_bundle(
    families: list[list[Bag]],
    det: ToyDetector,
    cfg: OAMILConfig,
    rule: str = "merged",
    include_selector: bool = True,
) -> LossBundle:
    """Freeze selections, labels and regression targets for one step."""
    terms = []
    for family in families:
        bag0 = family[0]
        if bag0.label < 0:
            terms.append(
                BagTerm(
                    y=-1,
                    category=-1,
                    stage_features=(bag0.features,),
                    labels=np.zeros(0, dtype=np.int64),
                    reg_rows=np.zeros(0, dtype=np.int64),
                    reg_targets=np.zeros((0, 4)),
                )
            )
            continue
        b_star = select_b_star(family, det, cfg, rule)
        labels = label_instances(bag0, b_star, cfg.iou_label_threshold)
        rows = np.flatnonzero(labels > 0)
        targets = (
            encode_deltas(np.tile(b_star.as_array(), (rows.size, 1)), bag0.boxes[rows])
            if rows.size
            else np.zeros((0, 4))
        )
        terms.append(
            BagTerm(
                y=1,
                category=bag0.category,
                stage_features=tuple(b.features for b in family),
                labels=labels,
                reg_rows=rows,
                reg_targets=targets,
            )
        )
    return LossBundle(
        terms=tuple(terms), balance=cfg.balance, include_selector=include_selector
    )


def total_loss(
    families: list[list[Bag]],
    det: ToyDetector,
    cfg: OAMILConfig,
    rule: str = "merged",
    include_selector: bool = True,
):
    """Evaluate the full objective directly from the loss-term operations.

    Returns (total, breakdown). This is the reference composition; the
    optimizer uses the equivalent frozen-bundle path in the detector module.
    """
    sel_sum = 0.0
    cls_sum = 0.0
    gen_sum = 0.0
    for family in families:
        bag0 = family[0]
        if include_selector:
            sel_sum += selector_loss(
                family, [bag_selector_scores(det, b) for b in family]
            )
        if bag0.label < 0:
            labels = -np.ones(len(bag0), dtype=np.int64)
            cls_sum += classifier_loss(bag0, labels, bag_classifier_scores(det, bag0))
            continue
        b_star = select_b_star(family, det, cfg, rule)
        labels = label_instances(bag0, b_star, cfg.iou_label_threshold)
        cls_sum += classifier_loss(bag0, labels, bag_classifier_scores(det, bag0))
        deltas = bag0.features @ det.generator_w[bag0.category].T
        gen_sum += generator_loss([bag0], [labels], [deltas], [b_star])
    if not include_selector:
        sel_sum = 0.0
    total = combine_terms(sel_sum, cls_sum, gen_sum, cfg.balance)
    return total, {"selector": sel_sum, "classifier": cls_sum, "generator": gen_sum}
