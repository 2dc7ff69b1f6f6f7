"""boxmil: robust toy object detection under inaccurate box annotations.

Objects are treated as bags of candidate instances; a jointly trained
selector, classifier and box generator recover localization quality from
noisy supervision. Includes a synthetic scene benchmark, a box-noise
injector for COCO-style annotation files, detection evaluation, and a CLI
for reproducible experiments.
"""

from .geometry import Box, clip, convert, iou, iou_matrix
from .scenes import (
    AnnotatedDataset,
    Annotation,
    LayoutSpec,
    Scene,
    SceneObject,
    generate_scenes,
    scene_features,
)
from .annotations import AnnotationFormatError, read_annotations, write_annotations
from .noise import NoiseSpec, perturb_box, perturb_dataset
from .detector import (
    CandidateSet,
    ProposalSpec,
    ToyDetector,
    encode_deltas,
    decode_deltas,
    gradients,
    load_checkpoint,
    new_detector,
    propose,
    save_checkpoint,
    score_and_regress,
)
from .mil import (
    Bag,
    OAMILConfig,
    SelectionResult,
    build_bags,
    classifier_loss,
    extend_bags,
    generator_loss,
    label_instances,
    oa_select,
    phi,
    select_most_positive,
    selector_loss,
    total_loss,
)
from .train import MODES, TrainConfig, TrainingDivergedError, mode_components, train
from .evaluate import (
    DetectSpec,
    Detection,
    average_precision,
    cls_loc_diagnostic,
    detect,
    diagnostics,
    evaluate_detector,
    nms,
)
from .experiments import SweepSpec, run_sweep

__version__ = "0.1.0"
