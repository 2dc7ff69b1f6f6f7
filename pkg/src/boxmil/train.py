"""Optimization loop: batch scenes, rebuild bags every iteration, descend
the joint objective with SGD plus momentum.

Training modes ablate the method: "naive" supervises classifier and
generator directly on the (possibly noisy) annotation boxes; "is-loss-only"
adds the bag hinge loss and supervises on the raw selected instance;
"+oa-is" switches the supervision target to the confidence-weighted merge;
"+oa-ie" additionally extends positive bags. "clean-oracle" is the naive
recipe, meant to be run on unperturbed annotations as an upper bound.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .scenes import FEATURE_DIM, AnnotatedDataset
from .detector import (
    LossBundle,
    ProposalSpec,
    ToyDetector,
    bundle_loss_and_grads,
    new_detector,
    propose,
)
from .evaluate import DetectSpec, evaluate_detector
from .mil import OAMILConfig, assemble_bundle, build_bags, extend_bags

MODES = ("naive", "is-loss-only", "+oa-is", "+oa-ie", "clean-oracle")

_COMPONENTS = {
    "naive": frozenset(),
    "clean-oracle": frozenset(),
    "is-loss-only": frozenset({"is-loss"}),
    "+oa-is": frozenset({"is-loss", "oa-is"}),
    "+oa-ie": frozenset({"is-loss", "oa-is", "oa-ie"}),
}

TRAIN_LOG_COLUMNS = ("epoch", "total", "selector", "classifier", "generator", "val_map50")


class TrainingDivergedError(RuntimeError):
    """Total loss became non-finite; carries the offending iteration index."""

    def __init__(self, iteration: int, value: float):
        self.iteration = iteration
        super().__init__(f"non-finite total loss {value} at iteration {iteration}")


def mode_components(mode: str) -> frozenset:
    if mode not in _COMPONENTS:
        raise ValueError(f"unknown training mode {mode!r}, expected one of {MODES}")
    return _COMPONENTS[mode]


def _mode_rule(mode: str) -> str:
    comps = mode_components(mode)
    if "oa-is" in comps:
        return "merged"
    if "is-loss" in comps:
        return "selected"
    return "noisy-gt"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: str = "naive"
    oamil: OAMILConfig = field(default_factory=OAMILConfig)
    proposal: ProposalSpec = field(default_factory=ProposalSpec)
    detect: DetectSpec = field(default_factory=DetectSpec)
    val_fraction: float = 0.2
    eval_every: int = 0     # epochs between val mAP evaluations; 0 = never

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        mode_components(self.mode)


def split_dataset(n_scenes: int, val_fraction: float, seed: int):
    """Seed-stable 80/20-style split: (train_ids, val_ids), both sorted."""
    perm = np.random.default_rng([seed, 7]).permutation(n_scenes)
    n_val = int(round(val_fraction * n_scenes))
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return train, val


def train(
    dataset: AnnotatedDataset,
    cfg: TrainConfig,
    init_detector: ToyDetector | None = None,
) -> tuple[ToyDetector, list[dict]]:
    """Train a detector on the dataset's annotations.

    Deterministic for a given seed and config: fixed split, fixed batch
    order, per-scene seeded proposal streams, fixed reduction order.
    Returns the detector and one log row per epoch.
    """
    if not dataset.has_truth():
        raise ValueError("training requires scenes with embedded ground-truth geometry")
    if not any(len(a) for a in dataset.annotations):
        raise ValueError("training requires at least one annotation")
    comps = mode_components(cfg.mode)
    rule = _mode_rule(cfg.mode)
    include_selector = "is-loss" in comps
    n_extend = cfg.oamil.n_extend if "oa-ie" in comps else 0
    oamil_eff = replace(cfg.oamil, n_extend=n_extend)
    n_classes = dataset.n_classes or (
        max(a.category for anns in dataset.annotations for a in anns) + 1
    )
    det = init_detector.copy() if init_detector is not None else new_detector(
        n_classes, FEATURE_DIM, seed=cfg.seed
    )
    params = det.param_arrays()
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    train_ids, val_ids = split_dataset(len(dataset.scenes), cfg.val_fraction, cfg.seed)
    log: list[dict] = []
    iteration = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(train_ids)
        sums = {"total": 0.0, "selector": 0.0, "classifier": 0.0, "generator": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            terms = []
            for sid in batch:
                scene = dataset.scenes[sid]
                anns = dataset.annotations[sid]
                rng = np.random.default_rng([cfg.seed, 13, epoch, int(sid)])
                cands = propose(scene, [a.box for a in anns], cfg.proposal, rng)
                bags = build_bags(
                    cands, [(a.box, a.category) for a in anns], scene, oamil_eff
                )
                families = extend_bags(bags, det, scene, oamil_eff, cfg.proposal, rng)
                terms.extend(
                    assemble_bundle(families, det, oamil_eff, rule, include_selector).terms
                )
            bundle = LossBundle(
                tuple(terms), balance=oamil_eff.balance, include_selector=include_selector
            )
            total, parts, grads = bundle_loss_and_grads(det, bundle)
            if not np.isfinite(total):
                raise TrainingDivergedError(iteration, total)
            scale = cfg.learning_rate / len(batch)
            for name, grad in grads.items():
                velocity[name] = cfg.momentum * velocity[name] - scale * grad
                params[name] += velocity[name]
            sums["total"] += total
            sums["selector"] += parts["selector"]
            sums["classifier"] += parts["classifier"]
            sums["generator"] += parts["generator"]
            n_batches += 1
            iteration += 1
        row = {
            "epoch": epoch,
            "total": sums["total"] / n_batches,
            "selector": sums["selector"] / n_batches,
            "classifier": sums["classifier"] / n_batches,
            "generator": sums["generator"] / n_batches,
            "val_map50": None,
        }
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            row["val_map50"] = evaluate_detector(det, dataset, val_ids, cfg.detect)["map50"]
        log.append(row)
    return det, log


def write_train_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for row in rows:
            val = "" if row["val_map50"] is None else f"{row['val_map50']:.6f}"
            writer.writerow(
                [
                    row["epoch"],
                    f"{row['total']:.8f}",
                    f"{row['selector']:.8f}",
                    f"{row['classifier']:.8f}",
                    f"{row['generator']:.8f}",
                    val,
                ]
            )
