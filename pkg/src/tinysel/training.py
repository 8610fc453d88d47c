"""Classifier pre-training, routing-label generation, the alternating
selector/classifier training loop with the four-part loss, and the
baseline/ablation training modes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .builder import (
    ArchitectureSpec,
    CompositeModel,
    build_classifier,
    build_composite,
    build_selector,
    composite_forward,
    conv_block,
)
from .data import Dataset, random_assignments
from .layers import LayerSpec, softmax
from .model import (
    Model,
    SgdState,
    accumulate_grads,
    bce_multi_hot,
    cross_entropy_batch,
    sgd_step,
)

log = logging.getLogger(__name__)

PROVENANCE_SINGLE, PROVENANCE_MULTI, PROVENANCE_NONE = 0, 1, 2


@dataclass
class RoutingLabels:
    """One classifier index per training sample, plus how it was derived:
    single correct classifier, argmax-confidence among several correct ones,
    or argmin-confidence when none is correct."""

    labels: np.ndarray      # (n,) in [0, m)
    provenance: np.ndarray  # (n,) PROVENANCE_* codes


@dataclass
class LossCoefficients:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.03


@dataclass
class TrainConfig:
    iterations: int = 10
    epochs_per_phase: int = 6
    pretrain_epochs: int = 6
    batch_size: int = 16
    sgd: SgdState = field(default_factory=SgdState)
    coefficients: LossCoefficients = field(default_factory=LossCoefficients)
    seed: int = 0
    # ablations
    random_split: bool = False
    synchronous: bool = False
    no_aggregation: bool = False
    # variants
    train_taps: bool = False
    relabel_per_epoch: bool = False
    early_stop_patience: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "epochs_per_phase": self.epochs_per_phase,
            "pretrain_epochs": self.pretrain_epochs,
            "batch_size": self.batch_size,
            "sgd": {
                "learning_rate": self.sgd.learning_rate,
                "decay_factor": self.sgd.decay_factor,
                "decay_every_iterations": self.sgd.decay_every_iterations,
            },
            "coefficients": {
                "alpha": self.coefficients.alpha,
                "beta": self.coefficients.beta,
                "gamma": self.coefficients.gamma,
            },
            "seed": self.seed,
            "random_split": self.random_split,
            "synchronous": self.synchronous,
            "no_aggregation": self.no_aggregation,
            "train_taps": self.train_taps,
            "relabel_per_epoch": self.relabel_per_epoch,
            "early_stop_patience": self.early_stop_patience,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        cfg = cls()
        for k in ("iterations", "epochs_per_phase", "pretrain_epochs",
                  "batch_size", "seed", "random_split", "synchronous",
                  "no_aggregation", "train_taps", "relabel_per_epoch",
                  "early_stop_patience"):
            if k in d:
                setattr(cfg, k, d[k])
        if "sgd" in d:
            cfg.sgd = SgdState(**d["sgd"])
        if "coefficients" in d:
            cfg.coefficients = LossCoefficients(**d["coefficients"])
        return cfg


# ---------------------------------------------------------------------------
# shared helpers


def train_model(model: Model, samples, labels, epochs: int, sgd: SgdState,
                batch_size=16, seed=0, lr_iteration=0) -> Model:
    """Plain cross-entropy SGD training of a single model."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x, y = samples[idx], labels[idx]
            tape = model.forward(x, record=True)
            _, dlogits = cross_entropy_batch(tape.logits, y)
            grads = model.backward(tape, dlogits / len(idx))
            sgd_step(model, grads, sgd, lr_iteration)
    return model


def _batch_classifier_logits(composite: CompositeModel, x, taps):
    """Logits of every classifier on the same batch: (m, B, num_classes)."""
    return np.stack([c.forward(x, taps=taps).logits
                     for c in composite.classifiers])


def _all_classifier_outputs(composite: CompositeModel, dataset: Dataset,
                            batch_size=256):
    """Full-dataset selector logits plus per-classifier logits."""
    sel_logits = []
    cls_logits = []
    for start in range(0, len(dataset), batch_size):
        x = dataset.samples[start:start + batch_size]
        tape, taps = composite_forward(composite, x)
        sel_logits.append(tape.logits)
        cls_logits.append(_batch_classifier_logits(composite, x, taps))
    return np.concatenate(sel_logits, axis=0), np.concatenate(cls_logits, axis=1)


# ---------------------------------------------------------------------------
# routing labels


def routing_labels_from_logits(cls_logits, true_labels) -> RoutingLabels:
    """Single routing label per sample from (m, n, num_classes) logits.

    Exactly one correct classifier: its index. Several correct: the correct
    one with the highest true-class confidence. None correct: the classifier
    with the lowest true-class confidence.
    """
    m, n, _ = cls_logits.shape
    probs = softmax(cls_logits, axis=-1)
    conf = probs[:, np.arange(n), true_labels]          # (m, n)
    correct = cls_logits.argmax(axis=-1) == true_labels[None, :]
    n_correct = correct.sum(axis=0)
    labels = np.empty(n, dtype=np.int64)
    provenance = np.empty(n, dtype=np.int64)
    masked = np.where(correct, conf, -np.inf)
    labels[:] = np.argmax(masked, axis=0)               # single & multi cases
    none_mask = n_correct == 0
    labels[none_mask] = np.argmin(conf[:, none_mask], axis=0)
    provenance[n_correct == 1] = PROVENANCE_SINGLE
    provenance[n_correct >= 2] = PROVENANCE_MULTI
    provenance[none_mask] = PROVENANCE_NONE
    return RoutingLabels(labels=labels, provenance=provenance)


def generate_routing_labels(composite: CompositeModel,
                            train: Dataset) -> RoutingLabels:
    _, cls_logits = _all_classifier_outputs(composite, train)
    return routing_labels_from_logits(cls_logits, train.labels)


# ---------------------------------------------------------------------------
# the four-part loss


def composite_loss(selector_logits, all_classifier_logits, true_class,
                   routing_label, coefficients: LossCoefficients):
    """Per-batch loss components and the classifier gradient routing plan.

    ``all_classifier_logits`` is (m, B, num_classes). Returns
    (components, plan) where components holds ce_sel / ce_single / ce_union /
    ce_overlap / total, and plan holds:

    - ``case``: (B,) code per sample (single / multi / none correct),
    - ``weights``: (m, B) signed per-classifier cross-entropy weights whose
      weighted CE sum reproduces the alpha/beta/gamma part of the total,
    - ``assigned``: (B,) the selector's argmax choice, which receives the
      unit-weight positive CE during the classifier phase.

    Every component is averaged over the full batch; samples outside a
    component's case contribute zero to it.
    """
    cls = np.asarray(all_classifier_logits)
    m, b, _ = cls.shape
    y = np.asarray(true_class)
    r = np.asarray(routing_label)
    sel_losses, _ = cross_entropy_batch(selector_logits, r)
    ce_sel = float(sel_losses.mean())

    probs = softmax(cls, axis=-1)
    conf = probs[:, np.arange(b), y]
    correct = cls.argmax(axis=-1) == y[None, :]
    n_correct = correct.sum(axis=0)
    ce = -np.log(np.maximum(conf, np.finfo(conf.dtype).tiny))  # (m, B)

    weights = np.zeros((m, b))
    case = np.full(b, PROVENANCE_MULTI, dtype=np.int64)
    case[n_correct == 1] = PROVENANCE_SINGLE
    case[n_correct == 0] = PROVENANCE_NONE

    single_idx = np.flatnonzero(case == PROVENANCE_SINGLE)
    if len(single_idx):
        who = correct[:, single_idx].argmax(axis=0)
        weights[who, single_idx] += 1.0 / b
    ce_single = float((weights * ce).sum())

    w_union = np.zeros((m, b))
    none_idx = np.flatnonzero(case == PROVENANCE_NONE)
    if len(none_idx):
        w_union[:, none_idx] = 1.0 / (b * m)
    ce_union = float((w_union * ce).sum())

    w_overlap = np.zeros((m, b))
    multi_idx = np.flatnonzero(case == PROVENANCE_MULTI)
    for j in multi_idx:
        members = np.flatnonzero(correct[:, j])
        top = members[np.argmax(conf[members, j])]
        rest = members[members != top]
        if len(rest):
            w_overlap[rest, j] = -1.0 / (b * len(rest))
    ce_overlap = float((w_overlap * ce).sum())

    a, be, g = coefficients.alpha, coefficients.beta, coefficients.gamma
    total = ce_sel + a * ce_single + be * ce_union + g * ce_overlap
    components = {
        "ce_sel": ce_sel,
        "ce_single": ce_single,
        "ce_union": ce_union,
        "ce_overlap": ce_overlap,
        "total": total,
    }
    plan = {
        "case": case,
        "weights": a * weights + be * w_union + g * w_overlap,
        "assigned": np.argmax(np.asarray(selector_logits), axis=-1),
    }
    return components, plan


# ---------------------------------------------------------------------------
# pre-training and the alternating loop


def pretrain_classifiers(composite: CompositeModel, train: Dataset,
                         config: TrainConfig) -> CompositeModel:
    """Trains classifier i on subset i only with plain CE, then warm-starts
    the selector on the subset ids so adversarial training begins with
    routing aligned to the pretrained specialists; without the warm-up the
    selector has to learn many-way routing from scratch against moving
    relabeled targets, which is unstable for large classifier counts. The
    aggregation taps stay zero here (the selector's features are still
    noise for classification); they activate when adversarial training
    starts. Empty subsets are skipped with a warning."""
    if train.subset_ids is None:
        raise ValueError("training dataset has no subset ids; run splitting first")
    m = composite.num_classifiers
    for i in range(m):
        idx = np.flatnonzero(train.subset_ids == i)
        if len(idx) == 0:
            log.warning("subset %d is empty; classifier %d left at init", i, i)
            continue
        train_model(composite.classifiers[i], train.samples[idx],
                    train.labels[idx], epochs=config.pretrain_epochs,
                    sgd=config.sgd, batch_size=config.batch_size,
                    seed=config.seed * 1000 + i)
    train_model(composite.selector, train.samples,
                np.asarray(train.subset_ids, dtype=np.int64),
                epochs=config.pretrain_epochs, sgd=config.sgd,
                batch_size=config.batch_size, seed=config.seed * 1000 + m)
    return composite


def _selector_epoch(composite, train, routing, config, iteration, rng):
    sel = composite.selector
    n = len(train)
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        tape = sel.forward(train.samples[idx], record=True)
        losses, dlogits = cross_entropy_batch(tape.logits, routing.labels[idx])
        grads = sel.backward(tape, dlogits / len(idx))
        sgd_step(sel, grads, config.sgd, iteration)
        total += losses.sum()
    return total / n


def _classifier_epoch(composite, train, config, iteration, rng,
                      update_selector=False, routing=None):
    """One epoch of classifier updates under a frozen selector.

    With ``update_selector`` (synchronous ablation) the selector is updated
    in the same pass from its routing loss.
    """
    n = len(train)
    order = rng.permutation(n)
    comp_sums = {"ce_sel": 0.0, "ce_single": 0.0, "ce_union": 0.0,
                 "ce_overlap": 0.0, "total": 0.0}
    batches = 0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        x, y = train.samples[idx], train.labels[idx]
        b = len(idx)
        sel_tape, taps = composite_forward(composite, x)
        cls_tapes = [c.forward(x, taps=taps, record=True)
                     for c in composite.classifiers]
        cls_logits = np.stack([t.logits for t in cls_tapes])
        r = routing.labels[idx] if routing is not None else y
        components, plan = composite_loss(sel_tape.logits, cls_logits, y, r,
                                          config.coefficients)
        for k in comp_sums:
            comp_sums[k] += components[k]
        batches += 1
        weights = plan["weights"].copy()
        weights[plan["assigned"], np.arange(b)] += 1.0 / b
        sel_tap_grads = None
        for i, cls in enumerate(composite.classifiers):
            w = weights[i]
            if not np.any(w):
                continue
            _, dlogits = cross_entropy_batch(cls_logits[i], y)
            dlogits = dlogits * w[:, None]
            if config.train_taps and composite.aggregation_enabled:
                grads, _, dtaps = cls.backward(cls_tapes[i], dlogits,
                                               tap_grads=True)
                if sel_tap_grads is None:
                    sel_tap_grads = [d.copy() for d in dtaps]
                else:
                    for acc, d in zip(sel_tap_grads, dtaps):
                        acc += d
            else:
                grads = cls.backward(cls_tapes[i], dlogits)
            sgd_step(cls, grads, config.sgd, iteration)
        if update_selector or (sel_tap_grads is not None):
            sel = composite.selector
            sel_tape_rec = sel.forward(x, record=True)
            dsel = np.zeros_like(sel_tape_rec.logits)
            if update_selector and routing is not None:
                _, dsel = cross_entropy_batch(sel_tape_rec.logits,
                                              routing.labels[idx])
                dsel = dsel / b
            output_grads = None
            if sel_tap_grads is not None:
                p1, p2 = composite.selector_tap_points()
                output_grads = {p1: sel_tap_grads[0], p2: sel_tap_grads[1]}
            grads = sel.backward(sel_tape_rec, dsel, output_grads=output_grads)
            sgd_step(sel, grads, config.sgd, iteration)
    return {k: v / max(batches, 1) for k, v in comp_sums.items()}


def adversarial_train(composite: CompositeModel, train: Dataset,
                      config: TrainConfig,
                      eval_dataset: Optional[Dataset] = None):
    """Alternating freeze/train loop. Each iteration regenerates routing
    labels, trains the selector for ``epochs_per_phase`` epochs with frozen
    classifiers, then trains the classifiers with the selector frozen.

    Returns (composite, history); history has one record per iteration with
    loss components and train (or ``eval_dataset``) accuracies.
    """
    rng = np.random.default_rng(config.seed + 9176)
    history: List[dict] = []
    best_overall, since_best = -1.0, 0
    for it in range(config.iterations):
        routing = generate_routing_labels(composite, train)
        comps = {}
        if config.synchronous:
            for _ in range(config.epochs_per_phase):
                if config.relabel_per_epoch:
                    routing = generate_routing_labels(composite, train)
                comps = _classifier_epoch(composite, train, config, it, rng,
                                          update_selector=True, routing=routing)
        else:
            sel_loss = 0.0
            for _ in range(config.epochs_per_phase):
                sel_loss = _selector_epoch(composite, train, routing, config,
                                           it, rng)
            for _ in range(config.epochs_per_phase):
                if config.relabel_per_epoch:
                    routing = generate_routing_labels(composite, train)
                comps = _classifier_epoch(composite, train, config, it, rng,
                                          routing=routing)
            comps = dict(comps, selector_phase_loss=sel_loss)
        metrics = evaluate(composite, eval_dataset or train)
        history.append({
            "iteration": it,
            "learning_rate": config.sgd.lr_at(it),
            "losses": comps,
            "overall_accuracy": metrics["overall"],
            "selector_accuracy": metrics["selector"],
            "union_accuracy": metrics["union"],
        })
        if config.early_stop_patience is not None:
            if metrics["overall"] > best_overall + 1e-9:
                best_overall, since_best = metrics["overall"], 0
            else:
                since_best += 1
                if since_best >= config.early_stop_patience:
                    break
    return composite, history


# ---------------------------------------------------------------------------
# evaluation


def evaluate(composite: CompositeModel, test: Dataset) -> dict:
    """Overall / selector / union / per-classifier accuracies.

    overall: selector-chosen classifier predicts the true class.
    union: at least one classifier predicts the true class.
    selector: among samples where some classifier is correct, the fraction
    where the selector picks one of the correct ones (1.0 when vacuous).
    """
    sel_logits, cls_logits = _all_classifier_outputs(composite, test)
    n = len(test)
    chosen = sel_logits.argmax(axis=1)
    preds = cls_logits.argmax(axis=-1)                      # (m, n)
    correct = preds == test.labels[None, :]
    overall_hits = correct[chosen, np.arange(n)]
    union_hits = correct.any(axis=0)
    union_count = int(union_hits.sum())
    overall = float(overall_hits.mean())
    union = union_count / n
    selector = float(overall_hits.sum() / union_count) if union_count else 1.0
    return {
        "n": n,
        "overall": overall,
        "selector": selector,
        "union": union,
        "per_classifier": [float(c.mean()) for c in correct],
        "chosen_histogram": np.bincount(
            chosen, minlength=composite.num_classifiers).tolist(),
    }


# ---------------------------------------------------------------------------
# baselines


def build_sigcla(spec: ArchitectureSpec, seed=0) -> Model:
    """Single classifier: the selector and classifier conv stacks bolted
    together with both fully-connected heads, all weights doing
    classification."""
    layers: List[LayerSpec] = []
    for s in spec.selector_layers:
        if s.kind == "fully-connected":
            break
        layers.append(s)
    for s in spec.classifier_layers:
        if s.kind == "fully-connected":
            break
        layers.append(s)
    layers.append(LayerSpec("fully-connected",
                            out_channels=spec.num_classifiers))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("fully-connected", out_channels=spec.num_classes))
    return Model((spec.input_channels, spec.input_length), layers, seed=seed)


def _standalone_classifier(spec: ArchitectureSpec, seed: int) -> Model:
    return build_classifier(spec, seed=seed, aggregation=False)


def _accuracy_from_probs(probs, labels) -> float:
    return float((probs.argmax(axis=-1) == labels).mean())


def _model_probs(model: Model, dataset: Dataset, batch=256):
    out = []
    for start in range(0, len(dataset), batch):
        out.append(softmax(model.forward(dataset.samples[start:start + batch])
                           .logits, axis=-1))
    return np.concatenate(out, axis=0)


def train_sync_moe(spec: ArchitectureSpec, train: Dataset, config: TrainConfig,
                   seed=0):
    """Gate + experts trained jointly from scratch with one cross-entropy
    through the gate-weighted mixture of expert softmax outputs."""
    selector = build_selector(spec, seed=seed)
    classifiers = [_standalone_classifier(spec, seed=seed + i + 1)
                   for i in range(spec.num_classifiers)]
    rng = np.random.default_rng(seed + 131)
    n = len(train)
    total_epochs = config.iterations * config.epochs_per_phase
    for epoch in range(total_epochs):
        it = epoch // max(config.epochs_per_phase, 1)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = train.samples[idx], train.labels[idx]
            b = len(idx)
            sel_tape = selector.forward(x, record=True)
            g = softmax(sel_tape.logits, axis=-1)           # (B, m)
            cls_tapes = [c.forward(x, record=True) for c in classifiers]
            p = np.stack([softmax(t.logits, axis=-1) for t in cls_tapes])
            mix = np.einsum("bm,mbc->bc", g, p)
            py = np.maximum(mix[np.arange(b), y], 1e-12)
            # d(-log py)/d gate logits
            dg = -p[:, np.arange(b), y].T / py[:, None]     # (B, m)
            dsel = g * (dg - (dg * g).sum(axis=1, keepdims=True))
            grads = selector.backward(sel_tape, dsel / b)
            sgd_step(selector, grads, config.sgd, it)
            for i, c in enumerate(classifiers):
                # d(-log py)/d expert-i logits
                coef = g[:, i] * p[i, np.arange(b), y] / py  # (B,)
                dlog = p[i] * coef[:, None]
                dlog[np.arange(b), y] -= coef
                cg = c.backward(cls_tapes[i], dlog / b)
                sgd_step(c, cg, config.sgd, it)
    return selector, classifiers


def sync_moe_accuracy(selector, classifiers, dataset: Dataset) -> float:
    g = softmax(_logits(selector, dataset), axis=-1)
    p = np.stack([softmax(_logits(c, dataset), axis=-1) for c in classifiers])
    mix = np.einsum("bm,mbc->bc", g, p)
    return _accuracy_from_probs(mix, dataset.labels)


def _logits(model: Model, dataset: Dataset, batch=256):
    out = []
    for start in range(0, len(dataset), batch):
        out.append(model.forward(dataset.samples[start:start + batch]).logits)
    return np.concatenate(out, axis=0)


def train_naive_selector(spec: ArchitectureSpec, train: Dataset,
                         config: TrainConfig, seed=0):
    """Independently trained full-data classifiers plus a selector trained
    on multi-hot correctness labels with binary cross-entropy."""
    m = spec.num_classifiers
    classifiers = [_standalone_classifier(spec, seed=seed + i + 1)
                   for i in range(m)]
    epochs = max(config.iterations * config.epochs_per_phase // 2, 1)
    for i, c in enumerate(classifiers):
        train_model(c, train.samples, train.labels, epochs=epochs,
                    sgd=config.sgd, batch_size=config.batch_size,
                    seed=seed * 997 + i)
    multi_hot = np.stack(
        [(_logits(c, train).argmax(axis=-1) == train.labels) for c in
         classifiers], axis=1).astype(np.float32)
    selector = build_selector(spec, seed=seed)
    rng = np.random.default_rng(seed + 55)
    n = len(train)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            tape = selector.forward(train.samples[idx], record=True)
            _, dlogits = bce_multi_hot(tape.logits, multi_hot[idx])
            grads = selector.backward(tape, dlogits / len(idx))
            sgd_step(selector, grads, config.sgd, 0)
    return selector, classifiers


def naive_selector_accuracy(selector, classifiers, dataset: Dataset) -> float:
    chosen = _logits(selector, dataset).argmax(axis=-1)
    preds = np.stack([_logits(c, dataset).argmax(axis=-1)
                      for c in classifiers])
    n = len(dataset)
    return float((preds[chosen, np.arange(n)] == dataset.labels).mean())


def train_baseline(mode: str, spec: ArchitectureSpec, train: Dataset,
                   test: Dataset, config: TrainConfig, seed=0):
    """Trains one baseline and returns (models, test_accuracy, details)."""
    total_epochs = max(config.iterations * config.epochs_per_phase, 1)
    if mode == "sigcla":
        model = build_sigcla(spec, seed=seed)
        train_model(model, train.samples, train.labels, epochs=total_epochs,
                    sgd=config.sgd, batch_size=config.batch_size, seed=seed)
        acc = _accuracy_from_probs(_logits(model, test), test.labels)
        return [model], acc, {"param_count": model.param_count()}
    if mode == "ensemble":
        models = []
        for i in range(2):
            m = _standalone_classifier(spec, seed=seed + i)
            train_model(m, train.samples, train.labels, epochs=total_epochs,
                        sgd=config.sgd, batch_size=config.batch_size,
                        seed=seed * 31 + i)
            models.append(m)
        probs = sum(_model_probs(m, test) for m in models) / len(models)
        return models, _accuracy_from_probs(probs, test.labels), {}
    if mode == "sync_moe":
        selector, classifiers = train_sync_moe(spec, train, config, seed=seed)
        acc = sync_moe_accuracy(selector, classifiers, test)
        return [selector] + classifiers, acc, {}
    if mode == "naive_selector":
        selector, classifiers = train_naive_selector(spec, train, config,
                                                     seed=seed)
        acc = naive_selector_accuracy(selector, classifiers, test)
        return [selector] + classifiers, acc, {}
    raise ValueError(f"unknown baseline mode {mode!r}")
