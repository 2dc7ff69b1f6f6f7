"""The desk-scale detector: candidate generation, scoring, regression,
and hand-written gradients of the joint training objective.

The selector and classifier are per-class squashed affine maps over scene
features; the instance generator is a per-class linear map emitting the
standard 4-value box-delta encoding. By default the selector and the
classifier share one weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Box, clip_array, iou_matrix
from .scenes import FEATURE_DIM, Scene, features_for_boxes

PROB_EPS = 1e-12


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(z, dtype=np.float64))


def smooth_l1(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    a = np.abs(x)
    return np.where(a < beta, 0.5 * x * x / beta, a - 0.5 * beta)


def smooth_l1_grad(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


@dataclass
class ToyDetector:
    """Selector, classifier and generator weights.

    When `shared` is set the selector aliases the classifier matrix, so
    both heads evaluate identically on every input.
    """

    classifier_w: np.ndarray          # (C, D)
    generator_w: np.ndarray           # (C, 4, D)
    selector_w: np.ndarray = None     # (C, D); aliases classifier_w when shared
    shared: bool = True

    def __post_init__(self):
        if self.shared:
            self.selector_w = self.classifier_w
        elif self.selector_w is None:
            raise ValueError("unshared detector requires explicit selector weights")
        for name, arr in self.param_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite weights in {name}")

    @property
    def n_classes(self) -> int:
        return self.classifier_w.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.classifier_w.shape[1]

    def param_arrays(self) -> dict[str, np.ndarray]:
        params = {"classifier_w": self.classifier_w, "generator_w": self.generator_w}
        if not self.shared:
            params["selector_w"] = self.selector_w
        return params

    def copy(self) -> "ToyDetector":
        det = ToyDetector(
            classifier_w=self.classifier_w.copy(),
            generator_w=self.generator_w.copy(),
            selector_w=None if self.shared else self.selector_w.copy(),
            shared=self.shared,
        )
        return det


def new_detector(
    n_classes: int,
    feature_dim: int = FEATURE_DIM,
    seed: int = 0,
    shared: bool = True,
    init_scale: float = 0.01,
) -> ToyDetector:
    rng = np.random.default_rng(seed)
    cls_w = init_scale * rng.standard_normal((n_classes, feature_dim))
    gen_w = init_scale * rng.standard_normal((n_classes, 4, feature_dim))
    sel_w = None if shared else init_scale * rng.standard_normal((n_classes, feature_dim))
    return ToyDetector(cls_w, gen_w, sel_w, shared)


def selector_logits(det: ToyDetector, features: np.ndarray) -> np.ndarray:
    return np.asarray(features) @ det.selector_w.T


def classifier_logits(det: ToyDetector, features: np.ndarray) -> np.ndarray:
    return np.asarray(features) @ det.classifier_w.T


def _probs(logits: np.ndarray) -> np.ndarray:
    return np.clip(sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)


# ---------------------------------------------------------------------------
# Candidate (anchor) generation


@dataclass(frozen=True)
class ProposalSpec:
    """How candidates are proposed around each noisy ground-truth box."""

    jitter_count: int = 32          # jittered boxes per object
    jitter: float = 0.3             # uniform center/size jitter magnitude
    background_count: int = 32      # background candidates per scene
    background_size: tuple[float, float] = (8.0, 56.0)
    background_max_iou: float = 0.1
    background_rounds: int = 20
    min_box_size: float = 1.0


@dataclass(frozen=True)
class CandidateSet:
    """Batch of candidates for one scene (boxes plus features, then scores)."""

    boxes: np.ndarray                       # (M, 4)
    features: np.ndarray                    # (M, FEATURE_DIM)
    n_background: int = 0
    n_background_missing: int = 0
    selector: np.ndarray = None             # (M, C) probabilities
    classifier: np.ndarray = None           # (M, C) probabilities
    regressed: np.ndarray = None            # (M, C, 4) decoded, clipped boxes

    def __len__(self) -> int:
        return self.boxes.shape[0]


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    return np.array(
        [b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64) for b in boxes],
        dtype=np.float64,
    ).reshape(-1, 4)


def jitter_boxes(boxes: np.ndarray, magnitude: float, count: int, rng) -> np.ndarray:
    """count jittered copies of each box: uniform center shift and rescale."""
    b = _as_box_array(boxes)
    n = b.shape[0]
    cx = 0.5 * (b[:, 0] + b[:, 2])
    cy = 0.5 * (b[:, 1] + b[:, 3])
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    d = rng.uniform(-magnitude, magnitude, size=(n, count, 4))
    ncx = cx[:, None] + d[:, :, 0] * w[:, None]
    ncy = cy[:, None] + d[:, :, 1] * h[:, None]
    nw = (1.0 + d[:, :, 2]) * w[:, None]
    nh = (1.0 + d[:, :, 3]) * h[:, None]
    out = np.stack(
        [ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh], axis=2
    )
    return out.reshape(n * count, 4)


def propose(
    scene: Scene, noisy_gt, spec: ProposalSpec, rng: np.random.Generator
) -> CandidateSet:
    """Candidates for one scene: per object, `jitter_count` jittered boxes
    plus the noisy box itself; then background boxes overlapping no object
    annotation by more than `background_max_iou`.
    """
    gt = _as_box_array(noisy_gt)
    chunks = []
    for g in range(gt.shape[0]):
        row = gt[g : g + 1]
        jit = jitter_boxes(row, spec.jitter, spec.jitter_count, rng)
        chunks.append(clip_array(jit, scene.bounds, spec.min_box_size))
        chunks.append(row.copy())
    n_background = 0
    missing = spec.background_count
    lo, hi = spec.background_size
    hi = min(hi, scene.bounds.w, scene.bounds.h)
    for _ in range(spec.background_rounds):
        if missing <= 0:
            break
        draw = 2 * missing
        wh = rng.uniform(lo, hi, size=(draw, 2))
        x1 = rng.uniform(0.0, scene.bounds.w - wh[:, 0]) + scene.bounds.x1
        y1 = rng.uniform(0.0, scene.bounds.h - wh[:, 1]) + scene.bounds.y1
        cand = np.stack([x1, y1, x1 + wh[:, 0], y1 + wh[:, 1]], axis=1)
        if gt.shape[0]:
            keep = iou_matrix(cand, gt).max(axis=1) < spec.background_max_iou
            cand = cand[keep]
        cand = cand[:missing]
        if cand.shape[0]:
            chunks.append(cand)
            n_background += cand.shape[0]
            missing -= cand.shape[0]
    boxes = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 4))
    return CandidateSet(
        boxes=boxes,
        features=features_for_boxes(scene, boxes),
        n_background=n_background,
        n_background_missing=missing,
    )


# ---------------------------------------------------------------------------
# Box-delta encoding (center offset, log size)


def encode_deltas(targets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression targets for moving each anchor onto its target box."""
    t = _as_box_array(targets)
    a = _as_box_array(anchors)
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if np.any(tw <= 0) or np.any(th <= 0) or np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("delta encoding requires positive box sizes")
    out = np.empty_like(t)
    out[:, 0] = (0.5 * (t[:, 0] + t[:, 2]) - 0.5 * (a[:, 0] + a[:, 2])) / aw
    out[:, 1] = (0.5 * (t[:, 1] + t[:, 3]) - 0.5 * (a[:, 1] + a[:, 3])) / ah
    out[:, 2] = np.log(tw / aw)
    out[:, 3] = np.log(th / ah)
    return out


def decode_deltas(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of encode_deltas; broadcasts deltas (..., 4) over (N, 4) anchors."""
    d = np.asarray(deltas, dtype=np.float64)
    a = _as_box_array(anchors)
    # anchors align with the leading axis of deltas
    stats_shape = (a.shape[0],) + (1,) * (d.ndim - 2)
    acx = (0.5 * (a[:, 0] + a[:, 2])).reshape(stats_shape)
    acy = (0.5 * (a[:, 1] + a[:, 3])).reshape(stats_shape)
    aw = (a[:, 2] - a[:, 0]).reshape(stats_shape)
    ah = (a[:, 3] - a[:, 1]).reshape(stats_shape)
    cx = acx + d[..., 0] * aw
    cy = acy + d[..., 1] * ah
    w = aw * np.exp(d[..., 2])
    h = ah * np.exp(d[..., 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def score_and_regress(
    det: ToyDetector, cands: CandidateSet, bounds: Box, min_size: float = 1.0
) -> CandidateSet:
    """Fill selector/classifier probabilities and per-class regressed boxes."""
    X = cands.features
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite candidate features")
    sel = _probs(selector_logits(det, X))
    cls = _probs(classifier_logits(det, X))
    deltas = np.einsum("md,ckd->mck", X, det.generator_w)
    raw = decode_deltas(deltas, cands.boxes)           # (M, C, 4)
    flat = clip_array(raw.reshape(-1, 4), bounds, min_size)
    return replace(
        cands, selector=sel, classifier=cls, regressed=flat.reshape(raw.shape)
    )


# ---------------------------------------------------------------------------
# Joint loss over a frozen bag bundle, with analytic gradients


@dataclass(frozen=True)
class BagTerm:
    """One bag family, frozen for a single optimization step.

    Selection, instance labels and regression targets are constants of the
    step; only the weight-dependent scores stay live.
    """

    y: int                                   # bag polarity, +1 or -1
    category: int                            # class row; -1 for negative bags
    stage_features: tuple[np.ndarray, ...]   # per extension stage, (Nk, D)
    labels: np.ndarray                       # (N0,) in {+1, -1}; empty for negatives
    reg_rows: np.ndarray                     # stage-0 rows with positive labels
    reg_targets: np.ndarray                  # (len(reg_rows), 4) frozen encodings


@dataclass(frozen=True)
class LossBundle:
    terms: tuple[BagTerm, ...]
    balance: float = 0.1          # weight of the selector term in the total
    include_selector: bool = True
    beta: float = 1.0             # smooth-l1 transition point


def _zero_grads(det: ToyDetector) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in det.param_arrays().items()}


def _selector_grad_name(det: ToyDetector) -> str:
    return "classifier_w" if det.shared else "selector_w"


def bundle_loss_and_grads(
    det: ToyDetector, bundle: LossBundle, want_grads: bool = True
):
    """Total loss (with per-term breakdown) and analytic weight gradients."""
    sel_sum = 0.0
    cls_sum = 0.0
    gen_sum = 0.0
    grads = _zero_grads(det) if want_grads else None
    sel_name = _selector_grad_name(det)
    wf, wg, wp = det.selector_w, det.classifier_w, det.generator_w
    for term in bundle.terms:
        x0 = term.stage_features[0]
        if term.y > 0:
            c = term.category
            # classifier: one-vs-rest binary log-loss; the bag's class uses the
            # frozen instance labels, every other class sees pure negatives
            z = x0 @ wg.T                      # (N, C)
            y = -np.ones_like(z)
            y[:, c] = term.labels
            cls_sum += softplus(-y * z).sum()
            if want_grads:
                grads["classifier_w"] += (sigmoid(z) - 0.5 * (y + 1.0)).T @ x0
            # generator: smooth-l1 to frozen targets on positive instances
            if term.reg_rows.size:
                xr = x0[term.reg_rows]
                pred = xr @ wp[c].T
                diff = pred - term.reg_targets
                gen_sum += smooth_l1(diff, bundle.beta).sum()
                if want_grads:
                    grads["generator_w"][c] += smooth_l1_grad(diff, bundle.beta).T @ xr
            if bundle.include_selector:
                for xk in term.stage_features:
                    zk = xk @ wf[c]
                    j = int(np.argmax(zk))
                    st = np.tanh(0.5 * zk[j])
                    margin = 1.0 - st
                    if margin > 0.0:
                        sel_sum += margin
                        if want_grads:
                            grads[sel_name][c] += (
                                bundle.balance * (-0.5 * (1.0 - st * st))
                            ) * xk[j]
        else:
            # negative bag: suppress the most confident class per head
            z = x0 @ wg.T                      # (N, C)
            jc = np.argmax(z, axis=1)
            rows = np.arange(x0.shape[0])
            zmax = z[rows, jc]
            cls_sum += softplus(zmax).sum()
            if want_grads:
                p = sigmoid(zmax)
                for c in np.unique(jc):
                    mask = jc == c
                    grads["classifier_w"][c] += p[mask] @ x0[mask]
            if bundle.include_selector:
                zf = x0 @ wf.T
                j, c = np.unravel_index(int(np.argmax(zf)), zf.shape)
                st = np.tanh(0.5 * zf[j, c])
                margin = 1.0 + st
                if margin > 0.0:
                    sel_sum += margin
                    if want_grads:
                        grads[sel_name][c] += (
                            bundle.balance * (0.5 * (1.0 - st * st))
                        ) * x0[j]
    total = bundle.balance * sel_sum + cls_sum + gen_sum
    parts = {"selector": sel_sum, "classifier": cls_sum, "generator": gen_sum}
    return total, parts, grads


def bundle_loss(det: ToyDetector, bundle: LossBundle):
    total, parts, _ = bundle_loss_and_grads(det, bundle, want_grads=False)
    return total, parts


def gradients(det: ToyDetector, bundle: LossBundle) -> dict[str, np.ndarray]:
    """Analytic gradient of the total loss for every weight array."""
    _, _, grads = bundle_loss_and_grads(det, bundle, want_grads=True)
    return grads


# ---------------------------------------------------------------------------
# Checkpoint I/O: flat text format "array <name> <shape...>" + value rows


def save_checkpoint(det: ToyDetector, path, meta: dict | None = None) -> None:
    lines = ["boxmil-checkpoint v1"]
    lines.append(f"meta shared {1 if det.shared else 0}")
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key} {value}")
    arrays = {"classifier_w": det.classifier_w, "generator_w": det.generator_w}
    if not det.shared:
        arrays["selector_w"] = det.selector_w
    for name in sorted(arrays):
        arr = arrays[name]
        lines.append("array " + name + " " + " ".join(str(d) for d in arr.shape))
        for row in arr.reshape(-1, arr.shape[-1]):
            lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ToyDetector, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "boxmil-checkpoint v1":
        raise ValueError(f"{path}: not a boxmil checkpoint")
    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "array":
            parts = rest.split()
            name, shape = parts[0], tuple(int(d) for d in parts[1:])
            n_rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
            rows = []
            for _ in range(n_rows):
                rows.append([float(v) for v in lines[i].split()])
                i += 1
            arrays[name] = np.array(rows, dtype=np.float64).reshape(shape)
        else:
            raise ValueError(f"{path}: unknown checkpoint record {kind!r}")
    shared = meta.pop("shared", "1") == "1"
    det = ToyDetector(
        classifier_w=arrays["classifier_w"],
        generator_w=arrays["generator_w"],
        selector_w=None if shared else arrays["selector_w"],
        shared=shared,
    )
    return det, meta
