import numpy as np
import pytest

from tinysel.builder import (
    ArchitectureSpec,
    CompositeModel,
    build_classifier,
    build_composite,
    build_selector,
    build_strong,
    composite_forward,
    flash_size,
    forward_with_aggregation,
    predict,
    serialized_size,
)
from tinysel.serialize import model_to_bytes


SPEC = ArchitectureSpec(num_classifiers=6, num_classes=8,
                        input_channels=3, input_length=128)


def test_default_strong_architecture():
    convs = [s for s in SPEC.strong_layers if s.kind == "conv1d"]
    assert [s.out_channels for s in convs] == [64, 64, 64, 32, 32, 16]
    fcs = [s for s in SPEC.strong_layers if s.kind == "fully-connected"]
    assert [s.out_channels for s in fcs] == [256, 8]
    # every conv is followed by relu then maxpool
    kinds = [s.kind for s in SPEC.strong_layers]
    for i, k in enumerate(kinds):
        if k == "conv1d":
            assert kinds[i + 1] == "relu" and kinds[i + 2] == "maxpool1d"


def test_default_small_architecture():
    for layers, head in ((SPEC.selector_layers, 6),
                         (SPEC.classifier_layers, 8)):
        convs = [s for s in layers if s.kind == "conv1d"]
        assert [s.out_channels for s in convs] == [8, 8, 4]
        assert layers[-1].kind == "fully-connected"
        assert layers[-1].out_channels == head


def test_param_count_closed_form():
    model = build_selector(SPEC, seed=0)
    # conv: F*C*K + F; fc: out*in + out, with K=5 kernels and 3 pools
    expected = (8 * 3 * 5 + 8) + (8 * 8 * 5 + 8) + (4 * 8 * 5 + 4)
    expected += 6 * (4 * 16) + 6  # 128 -> 64 -> 32 -> 16 after three pools
    assert model.param_count() == expected


def test_arch_spec_validation():
    with pytest.raises(ValueError):
        ArchitectureSpec(num_classifiers=0, num_classes=8,
                         input_channels=3, input_length=128)
    with pytest.raises(ValueError):
        ArchitectureSpec(num_classifiers=6, num_classes=1,
                         input_channels=3, input_length=128)


def test_arch_spec_json_round_trip():
    again = ArchitectureSpec.from_json(SPEC.to_json())
    assert again.to_json() == SPEC.to_json()


def test_build_composite_minimal_and_forward():
    spec = ArchitectureSpec(num_classifiers=2, num_classes=8,
                            input_channels=3, input_length=128)
    comp = build_composite(spec, seed=0)
    x = np.random.default_rng(0).normal(size=(4, 3, 128)).astype(np.float32)
    chosen, preds = predict(comp, x)
    assert chosen.shape == (4,) and preds.shape == (4,)
    assert chosen.max() < 2 and preds.max() < 8
    with pytest.raises(ValueError):
        build_composite(ArchitectureSpec(num_classifiers=1, num_classes=8,
                                         input_channels=3, input_length=128),
                        seed=0)


def test_aggregation_widens_classifier_conv_inputs():
    comp = build_composite(SPEC, seed=0)
    cls = comp.classifiers[0]
    # classifier conv2 consumes 8 own + 8 tapped channels
    assert cls.layers[3].in_channels == 16
    # classifier conv3 consumes 8 own + 8 tapped channels
    assert cls.layers[6].in_channels == 16


def test_tap_shape_arithmetic():
    comp = build_composite(SPEC, seed=0)
    x = np.random.default_rng(1).normal(size=(2, 3, 128)).astype(np.float32)
    _, taps = composite_forward(comp, x)
    assert taps[0].shape == (2, 8, 64)
    assert taps[1].shape == (2, 8, 32)


def test_aggregation_disabled_equals_standalone_bit_exact():
    comp = build_composite(SPEC, seed=0, aggregation=False)
    x = np.random.default_rng(2).normal(size=(3, 3, 128)).astype(np.float32)
    for i, cls in enumerate(comp.classifiers):
        _, logits = forward_with_aggregation(comp, x, i)
        standalone = cls.forward(x).logits
        np.testing.assert_array_equal(logits, standalone)


def test_all_classifiers_same_param_count():
    comp = build_composite(SPEC, seed=0)
    counts = {c.param_count() for c in comp.classifiers}
    assert len(counts) == 1


def test_classifier_seeds_differ():
    comp = build_composite(SPEC, seed=0)
    w0 = comp.classifiers[0].layers[0].params["w"]
    w1 = comp.classifiers[1].layers[0].params["w"]
    assert not np.array_equal(w0, w1)


def test_flash_size_linearity():
    sel = build_selector(SPEC, seed=0)
    cls = [build_classifier(SPEC, seed=i + 1, aggregation=True)
           for i in range(3)]
    one = flash_size(CompositeModel(sel, cls[:1], aggregation_enabled=True))
    two = flash_size(CompositeModel(sel, cls[:2], aggregation_enabled=True))
    three = flash_size(CompositeModel(sel, cls, aggregation_enabled=True))
    per_cls = 4 * cls[0].param_count()
    assert one == 4 * sel.param_count() + per_cls
    assert two - one == per_cls and three - two == per_cls


def test_serialized_size_covers_flash_size():
    comp = build_composite(SPEC, seed=0)
    assert serialized_size(comp) >= flash_size(comp)
    raw = sum(len(model_to_bytes(m))
              for m in [comp.selector] + comp.classifiers)
    assert serialized_size(comp) >= raw


def test_strong_forward_shapes():
    strong = build_strong(SPEC, seed=0)
    x = np.zeros((1, 3, 128), dtype=np.float32)
    assert strong.forward(x).logits.shape == (1, 8)
