"""tinysel: a selector-plus-weak-classifiers pipeline for tiny 1-D
time-series networks, with an MCU-style memory/slicing simulator."""

from .builder import (
    ArchitectureSpec,
    CompositeModel,
    build_composite,
    build_strong,
    flash_size,
    forward_with_aggregation,
    predict,
)
from .data import Dataset, gen_synthetic, load_csv, split_train_test
from .diversity import cka, correct_set, overlap_report, union_accuracy
from .kmeans import kmeans
from .layers import LayerSpec, ShapeError
from .model import ActivationTape, Model, SgdState, cross_entropy, sgd_step
from .simulator import build_schedule, estimate_cost, execute_schedule, simulate_memory
from .training import (
    LossCoefficients,
    TrainConfig,
    adversarial_train,
    composite_loss,
    evaluate,
    generate_routing_labels,
    pretrain_classifiers,
    train_baseline,
)

__version__ = "0.1.0"
