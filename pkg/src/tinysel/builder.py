"""Construction of the strong network, the selector and the classifiers,
including the cross-network feature-aggregation wiring."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .layers import LayerSpec
from .model import ActivationTape, Model
from .serialize import model_to_bytes

# conv filter counts reported for the high-capacity reference network
STRONG_FILTERS = [64, 64, 64, 32, 32, 16]
STRONG_FC = 256
DEFAULT_FILTERS = [8, 8, 4]
DEFAULT_KERNEL_WIDTH = 5
DEFAULT_POOL_WIDTH = 2


def conv_block(filters, kernel_width=DEFAULT_KERNEL_WIDTH,
               pool_width=DEFAULT_POOL_WIDTH) -> List[LayerSpec]:
    """conv -> relu -> maxpool, the unit every network here is made of."""
    return [
        LayerSpec("conv1d", out_channels=filters, kernel_width=kernel_width),
        LayerSpec("relu"),
        LayerSpec("maxpool1d", pool_width=pool_width),
    ]


@dataclass
class ArchitectureSpec:
    """Layer lists for the three network roles plus the composite sizes."""

    num_classifiers: int
    num_classes: int
    input_channels: int
    input_length: int
    selector_layers: List[LayerSpec] = field(default_factory=list)
    classifier_layers: List[LayerSpec] = field(default_factory=list)
    strong_layers: List[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        if not self.selector_layers:
            self.selector_layers = self._default_small(self.num_classifiers)
        if not self.classifier_layers:
            self.classifier_layers = self._default_small(self.num_classes)
        if not self.strong_layers:
            layers = []
            for f in STRONG_FILTERS:
                layers += conv_block(f)
            layers.append(LayerSpec("fully-connected", out_channels=STRONG_FC))
            layers.append(LayerSpec("relu"))
            layers.append(LayerSpec("fully-connected", out_channels=self.num_classes))
            self.strong_layers = layers
        self.validate()

    @staticmethod
    def _default_small(head_width, filters=DEFAULT_FILTERS):
        layers = []
        for f in filters:
            layers += conv_block(f)
        layers.append(LayerSpec("fully-connected", out_channels=head_width))
        return layers

    def validate(self):
        if self.num_classifiers < 1:
            raise ValueError("num_classifiers must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name, layers, head in (
            ("selector", self.selector_layers, self.num_classifiers),
            ("classifier", self.classifier_layers, self.num_classes),
            ("strong", self.strong_layers, self.num_classes),
        ):
            fcs = [s for s in layers if s.kind == "fully-connected"]
            if not fcs or fcs[-1].out_channels != head:
                raise ValueError(
                    f"{name} network must end in a fully-connected layer of "
                    f"width {head}")

    def to_json(self) -> dict:
        return {
            "num_classifiers": self.num_classifiers,
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "input_length": self.input_length,
            "selector_layers": [s.to_json() for s in self.selector_layers],
            "classifier_layers": [s.to_json() for s in self.classifier_layers],
            "strong_layers": [s.to_json() for s in self.strong_layers],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            num_classifiers=d["num_classifiers"],
            num_classes=d["num_classes"],
            input_channels=d["input_channels"],
            input_length=d["input_length"],
            selector_layers=[LayerSpec.from_json(s)
                             for s in d.get("selector_layers", [])],
            classifier_layers=[LayerSpec.from_json(s)
                               for s in d.get("classifier_layers", [])],
            strong_layers=[LayerSpec.from_json(s)
                           for s in d.get("strong_layers", [])],
        )

    @classmethod
    def load(cls, path) -> "ArchitectureSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)


def _conv_block_tap_points(layers: List[LayerSpec]):
    """Indices of the maxpool layers closing the first and second conv
    blocks; these post-pool outputs are the aggregation taps."""
    pools = [i for i, s in enumerate(layers) if s.kind == "maxpool1d"]
    if len(pools) < 3:
        raise ValueError("tap points require at least 3 conv+pool blocks")
    return pools[0], pools[1]


def _conv_out_channels(layers: List[LayerSpec]):
    return [s.out_channels for s in layers if s.kind == "conv1d"]


@dataclass
class CompositeModel:
    """One selector routing each input to one of ``m`` weak classifiers.

    With ``aggregation_enabled`` the selector's post-pool conv1/conv2 outputs
    are channel-concatenated into the chosen classifier after its own
    conv1/conv2 pools (its third conv block is never tapped).
    """

    selector: Model
    classifiers: List[Model]
    aggregation_enabled: bool = True

    @property
    def num_classifiers(self) -> int:
        return len(self.classifiers)

    def selector_tap_points(self):
        return _conv_block_tap_points(self.selector.specs)

    def selector_taps(self, tape: ActivationTape):
        """Tap tensors out of a recorded selector tape, in slot order."""
        p1, p2 = self.selector_tap_points()
        return [tape.outputs[p1], tape.outputs[p2]]

    def copy(self) -> "CompositeModel":
        return CompositeModel(self.selector.copy(),
                              [c.copy() for c in self.classifiers],
                              self.aggregation_enabled)


def build_strong(spec: ArchitectureSpec, seed: int = 0) -> Model:
    """High-capacity reference network used for feature extraction."""
    return Model((spec.input_channels, spec.input_length), spec.strong_layers,
                 seed=seed)


def build_selector(spec: ArchitectureSpec, seed: int = 0) -> Model:
    return Model((spec.input_channels, spec.input_length), spec.selector_layers,
                 seed=seed)


def build_classifier(spec: ArchitectureSpec, seed: int,
                     aggregation: bool) -> Model:
    tap_channels = None
    if aggregation:
        sel_out = _conv_out_channels(spec.selector_layers)
        p1, p2 = _conv_block_tap_points(spec.classifier_layers)
        tap_channels = {p1: sel_out[0], p2: sel_out[1]}
    model = Model((spec.input_channels, spec.input_length),
                  spec.classifier_layers, seed=seed, tap_channels=tap_channels)
    if aggregation:
        # weight columns that consume tapped channels start at zero, so the
        # wired classifier initially behaves exactly like a standalone one
        # and the taps grow in through training instead of injecting the
        # untrained selector's features as noise
        for tap_idx, extra in model.tap_channels.items():
            consumer = model.layers[tap_idx + 1]
            consumer.params["w"][:, -extra:, :] = 0.0
    return model


def build_composite(spec: ArchitectureSpec, seed: int = 0,
                    aggregation: bool = True) -> CompositeModel:
    """Selector plus m identically-shaped classifiers; classifier i is
    initialized from seed + i + 1 for reproducible diversity."""
    if spec.num_classifiers < 2:
        raise ValueError("a composite requires at least 2 classifiers")
    selector = build_selector(spec, seed=seed)
    classifiers = [build_classifier(spec, seed=seed + i + 1, aggregation=aggregation)
                   for i in range(spec.num_classifiers)]
    return CompositeModel(selector, classifiers, aggregation_enabled=aggregation)


def composite_forward(composite: CompositeModel, x, record_selector=False):
    """Selector pass shared by routing and classification.

    Returns (selector_tape, taps) where taps is None without aggregation.
    """
    need_record = record_selector or composite.aggregation_enabled
    tape = composite.selector.forward(x, record=need_record)
    taps = composite.selector_taps(tape) if composite.aggregation_enabled else None
    return tape, taps


def forward_with_aggregation(composite: CompositeModel, x, classifier_index: int):
    """Full inference path through the selector and one classifier.

    Returns (selector_logits, classifier_logits).
    """
    if not 0 <= classifier_index < composite.num_classifiers:
        raise IndexError(
            f"classifier index {classifier_index} out of range "
            f"[0, {composite.num_classifiers})")
    tape, taps = composite_forward(composite, x)
    single = (np.asarray(x).ndim == 2)
    cls_tape = composite.classifiers[classifier_index].forward(x, taps=taps)
    return tape.logits, cls_tape.logits


def predict(composite: CompositeModel, x):
    """Routed prediction: argmax over the selected classifier's logits.

    Returns (chosen_classifier, predicted_class) arrays for a batch, or
    scalars for a single (C, L) sample.
    """
    xb = np.asarray(x)
    single = (xb.ndim == 2)
    if single:
        xb = xb[None]
    tape, taps = composite_forward(composite, xb)
    chosen = np.argmax(tape.logits, axis=1)
    preds = np.empty(len(xb), dtype=np.int64)
    for i in np.unique(chosen):
        mask = chosen == i
        sub_taps = [t[mask] for t in taps] if taps is not None else None
        logits = composite.classifiers[i].forward(xb[mask], taps=sub_taps).logits
        preds[mask] = np.argmax(logits, axis=1)
    if single:
        return int(chosen[0]), int(preds[0])
    return chosen, preds


def flash_size(composite: CompositeModel) -> int:
    """Total serialized parameter bytes of the selector and all classifiers."""
    total = 0
    for m in [composite.selector] + list(composite.classifiers):
        total += 4 * m.param_count()
    return total


def serialized_size(composite: CompositeModel) -> int:
    """Full container byte count (headers included), for cross-checks."""
    from .serialize import composite_to_bytes

    return len(composite_to_bytes(composite))
