"""Command-line pipeline: data generation, training, analysis, memory
planning, inference and reporting.

Every run merges a JSON config file with flag overrides, fans the global
seed out to per-stage seeds by fixed offsets, and writes a resolved-config
snapshot next to its outputs so any artifact can be regenerated.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import serialize
from .builder import (
    ArchitectureSpec,
    build_composite,
    build_strong,
    predict,
)
from .data import (
    Dataset,
    extract_features,
    gen_synthetic,
    load_csv,
    make_subsets,
    random_assignments,
    save_csv,
    split_train_test,
    subset_sizes,
)
from .diversity import cka_matrix, correct_set, mean_pairwise, overlap_report, union_accuracy
from .kmeans import kmeans
from .model import Model, SgdState
from .reports import _to_plain, write_csv_records, write_report
from .simulator import (
    build_schedule,
    estimate_cost,
    simulate_memory,
    trace_to_records,
)
from .training import (
    LossCoefficients,
    TrainConfig,
    adversarial_train,
    evaluate,
    pretrain_classifiers,
    train_baseline,
    train_model,
)

# fixed fan-out so stages can be rerun independently from one global seed
SEED_OFFSETS = {"data": 0, "strong": 1, "split": 2, "build": 3,
                "train": 4, "baseline": 5}

COMMANDS = ("gen-data", "train-strong", "split", "pretrain", "train",
            "train-baseline", "eval", "analyze", "plan-memory", "infer",
            "export")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract here is exit 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(p: _Parser):
    p.add_argument("--config", help="JSON file with defaults for any flag")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    p.add_argument("--out", help="output directory (default .)")


def _build_parser() -> _Parser:
    top = _Parser(prog="tinysel", description=__doc__)
    sub = top.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data",
                       help="generate the synthetic waveform benchmark")
    _add_common(p)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--clusters-per-class", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--signature-amp", type=float)
    p.add_argument("--ratio", type=float, help="train fraction")
    p.add_argument("--csv", action="store_true", default=None,
                   help="also write CSV copies")

    p = sub.add_parser("train-strong",
                       help="train the high-capacity feature network")
    _add_common(p)
    p.add_argument("--train", dest="train_path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--num-classifiers", type=int)

    p = sub.add_parser("split",
                       help="cluster strong-model features into subsets")
    _add_common(p)
    p.add_argument("--train", dest="train_path")
    p.add_argument("--strong", dest="strong_path")
    p.add_argument("--num-classifiers", type=int)
    p.add_argument("--random-split", action="store_true", default=None,
                   help="ablation: random subsets instead of clustering")

    p = sub.add_parser("pretrain",
                       help="pre-train each classifier on its subset")
    _add_common(p)
    p.add_argument("--train", dest="train_path")
    p.add_argument("--num-classifiers", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--no-aggregation", action="store_true", default=None)
    p.add_argument("--arch", help="JSON architecture spec file")

    p = sub.add_parser("train",
                       help="alternating selector/classifier training")
    _add_common(p)
    p.add_argument("--train", dest="train_path")
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs-per-phase", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--decay-every", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--synchronous", action="store_true", default=None)
    p.add_argument("--no-aggregation", action="store_true", default=None)
    p.add_argument("--train-taps", action="store_true", default=None)

    p = sub.add_parser("train-baseline",
                       help="train a comparison baseline")
    _add_common(p)
    p.add_argument("--mode", choices=["sigcla", "ensemble", "sync_moe",
                                      "naive_selector"])
    p.add_argument("--train", dest="train_path")
    p.add_argument("--test", dest="test_path")
    p.add_argument("--num-classifiers", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs-per-phase", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--test", dest="test_path")

    p = sub.add_parser("analyze",
                       help="representation and correct-set diversity")
    _add_common(p)
    p.add_argument("--test", dest="test_path")
    p.add_argument("--models", nargs="*", help="model container files")
    p.add_argument("--checkpoint", help="composite; analyzes its classifiers")

    p = sub.add_parser("plan-memory",
                       help="layer-by-layer memory and cost planning")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--classifier", type=int)
    p.add_argument("--sliced", action="store_true", default=None)

    p = sub.add_parser("infer", help="run routed predictions")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", dest="data_path")
    p.add_argument("--channels", type=int)
    p.add_argument("--length", type=int)

    p = sub.add_parser("export",
                       help="write a JSON manifest for a container file")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--model")

    return top


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    params = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        with open(cfg_path) as f:
            file_cfg = json.load(f)
        for k, v in file_cfg.items():
            key = k.replace("-", "_")
            if key not in params:
                raise UsageError(f"unknown config key {k!r}")
            params[key] = v
    for key in params:
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    return params


def _snapshot(params: dict, out_dir: str, command: str):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{command}.config.json")
    with open(path, "w") as f:
        json.dump({"command": command, **params}, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_dataset(path) -> Dataset:
    if path is None:
        raise UsageError("a dataset path is required")
    return serialize.load_dataset(path)


def _train_config(params: dict, seed: int) -> TrainConfig:
    sgd = SgdState(learning_rate=params.get("learning_rate", 0.001),
                   decay_factor=params.get("decay_factor", 0.5),
                   decay_every_iterations=params.get("decay_every", 5))
    coeff = LossCoefficients(alpha=params.get("alpha", 0.1),
                             beta=params.get("beta", 0.1),
                             gamma=params.get("gamma", 0.03))
    return TrainConfig(
        iterations=params.get("iterations", 10),
        epochs_per_phase=params.get("epochs_per_phase", 6),
        pretrain_epochs=params.get("pretrain_epochs", 6),
        batch_size=params.get("batch_size", 16),
        sgd=sgd, coefficients=coeff, seed=seed,
        synchronous=bool(params.get("synchronous", False)),
        no_aggregation=bool(params.get("no_aggregation", False)),
        train_taps=bool(params.get("train_taps", False)),
    )


def _arch_from_dataset(ds: Dataset, num_classifiers: int,
                       arch_path=None) -> ArchitectureSpec:
    if arch_path:
        spec = ArchitectureSpec.load(arch_path)
        if spec.num_classes != ds.num_classes:
            raise ValueError("architecture num_classes does not match dataset")
        return spec
    return ArchitectureSpec(num_classifiers=num_classifiers,
                            num_classes=ds.num_classes,
                            input_channels=ds.samples.shape[1],
                            input_length=ds.samples.shape[2])


# ---------------------------------------------------------------------------
# command bodies


def _cmd_gen_data(params, out_dir, seed):
    ds = gen_synthetic(num_classes=params["num_classes"],
                       clusters_per_class=params["clusters_per_class"],
                       channels=params["channels"], length=params["length"],
                       n=params["n"], noise_sigma=params["noise_sigma"],
                       signature_amp=params["signature_amp"],
                       seed=seed + SEED_OFFSETS["data"])
    train, test = split_train_test(ds, params["ratio"],
                                   seed=seed + SEED_OFFSETS["data"])
    serialize.save_dataset(ds, os.path.join(out_dir, "dataset.bin"))
    serialize.save_dataset(train, os.path.join(out_dir, "train.bin"))
    serialize.save_dataset(test, os.path.join(out_dir, "test.bin"))
    if params["csv"]:
        save_csv(train, os.path.join(out_dir, "train.csv"))
        save_csv(test, os.path.join(out_dir, "test.csv"))
    print(f"wrote dataset.bin train.bin test.bin to {out_dir} "
          f"(n={len(ds)}, classes={ds.num_classes})")


def _cmd_train_strong(params, out_dir, seed):
    train = _load_dataset(params["train_path"])
    spec = _arch_from_dataset(train, params["num_classifiers"])
    model = build_strong(spec, seed=seed + SEED_OFFSETS["strong"])
    sgd = SgdState(learning_rate=params["learning_rate"])
    train_model(model, train.samples, train.labels, epochs=params["epochs"],
                sgd=sgd, batch_size=params["batch_size"],
                seed=seed + SEED_OFFSETS["strong"])
    serialize.save_model(model, os.path.join(out_dir, "strong.bin"))
    cs = correct_set(model, train)
    results = {"train_accuracy": len(cs.indices) / len(train),
               "param_count": model.param_count()}
    write_report(results, out_dir, "train-strong-report", "baseline")
    print(f"strong model: train accuracy {results['train_accuracy']:.4f}")


def _cmd_split(params, out_dir, seed):
    train = _load_dataset(params["train_path"])
    m = params["num_classifiers"]
    if params["random_split"]:
        assignments = random_assignments(len(train), m,
                                         seed=seed + SEED_OFFSETS["split"])
        inertia = None
    else:
        if not params["strong_path"]:
            raise UsageError("--strong is required unless --random-split")
        strong = serialize.load_model(params["strong_path"])
        feats = extract_features(strong, train)
        km = kmeans(feats, m, seed=seed + SEED_OFFSETS["split"])
        assignments, inertia = km.assignments, km.inertia
    subsets = make_subsets(train, assignments, num_subsets=m)
    serialize.save_dataset(subsets, os.path.join(out_dir, "train-split.bin"))
    results = {"subset_sizes": subset_sizes(subsets, m),
               "inertia": inertia, "num_subsets": m}
    write_report(results, out_dir, "split-report", "analyze")
    print(f"subset sizes: {results['subset_sizes']}")


def _cmd_pretrain(params, out_dir, seed):
    train = _load_dataset(params["train_path"])
    if train.subset_ids is None:
        raise ValueError("dataset has no subset ids; run split first")
    spec = _arch_from_dataset(train, params["num_classifiers"],
                              params.get("arch"))
    cfg = _train_config(params, seed + SEED_OFFSETS["train"])
    composite = build_composite(spec, seed=seed + SEED_OFFSETS["build"],
                                aggregation=not cfg.no_aggregation)
    pretrain_classifiers(composite, train, cfg)
    path = os.path.join(out_dir, "pretrain.bin")
    serialize.save_composite(composite, path,
                             config={"train": cfg.to_json(),
                                     "arch": spec.to_json()})
    print(f"wrote {path}")


def _cmd_train(params, out_dir, seed):
    train = _load_dataset(params["train_path"])
    if not params["checkpoint"]:
        raise UsageError("--checkpoint (pretrain output) is required")
    composite, saved = serialize.load_composite(params["checkpoint"])
    cfg = _train_config(params, seed + SEED_OFFSETS["train"])
    if cfg.no_aggregation:
        composite.aggregation_enabled = False
    composite, history = adversarial_train(composite, train, cfg)
    saved = dict(saved, train=cfg.to_json())
    serialize.save_composite(composite, os.path.join(out_dir, "trained.bin"),
                             config=saved)
    with open(os.path.join(out_dir, "history.jsonl"), "w") as f:
        for rec in history:
            f.write(json.dumps(_to_plain(rec), sort_keys=True) + "\n")
    results = {"iterations": len(history),
               "final": history[-1] if history else {}}
    write_report(results, out_dir, "train-report", "train-history")
    if history:
        print(f"final train accuracy {history[-1]['overall_accuracy']:.4f}")
    else:
        print("no training iterations requested; checkpoint copied")


def _cmd_train_baseline(params, out_dir, seed):
    train = _load_dataset(params["train_path"])
    test = _load_dataset(params["test_path"])
    spec = _arch_from_dataset(train, params["num_classifiers"])
    cfg = _train_config(params, seed + SEED_OFFSETS["baseline"])
    mode = params["mode"]
    if mode is None:
        raise UsageError("--mode is required")
    models, accuracy, details = train_baseline(
        mode, spec, train, test, cfg, seed=seed + SEED_OFFSETS["baseline"])
    for i, m in enumerate(models):
        serialize.save_model(m, os.path.join(out_dir, f"{mode}-{i}.bin"))
    results = {"mode": mode, "test_accuracy": accuracy, "details": details,
               "num_models": len(models)}
    write_report(results, out_dir, f"{mode}-report", "baseline")
    print(f"{mode}: test accuracy {accuracy:.4f}")


def _cmd_eval(params, out_dir, seed):
    test = _load_dataset(params["test_path"])
    composite, _ = serialize.load_composite(params["checkpoint"])
    results = evaluate(composite, test)
    write_report(results, out_dir, "eval-report", "eval")
    print(f"overall {results['overall']:.4f}  selector "
          f"{results['selector']:.4f}  union {results['union']:.4f}")


def _cmd_analyze(params, out_dir, seed):
    test = _load_dataset(params["test_path"])
    models = []
    if params.get("checkpoint"):
        composite, _ = serialize.load_composite(params["checkpoint"])
        models = list(composite.classifiers)
    for path in params.get("models") or []:
        models.append(serialize.load_model(path))
    if not models:
        results = {"num_models": 0, "cka_matrix": [], "mean_cka": None,
                   "individual_accuracy": [], "union_accuracy": None,
                   "overlap": {}}
    else:
        feats = [extract_features(m, test) for m in models]
        mat = cka_matrix(feats)
        sets = [correct_set(m, test, model_id=i)
                for i, m in enumerate(models)]
        results = {
            "num_models": len(models),
            "cka_matrix": mat,
            "mean_cka": mean_pairwise(mat) if len(models) > 1 else None,
            "individual_accuracy": [len(s.indices) / len(test) for s in sets],
            "union_accuracy": union_accuracy(sets, len(test)),
            "overlap": overlap_report(sets) if len(models) > 1 else {},
        }
    write_report(results, out_dir, "analyze-report", "analyze")
    print(f"models={results['num_models']} union={results['union_accuracy']}")


def _cmd_plan_memory(params, out_dir, seed):
    composite, _ = serialize.load_composite(params["checkpoint"])
    idx = params["classifier"]
    schedule = build_schedule(composite, idx, sliced=bool(params["sliced"]))
    trace = simulate_memory(schedule)
    cost = estimate_cost(schedule)
    records = trace_to_records(schedule, trace)
    results = {
        "classifier": idx,
        "sliced": bool(params["sliced"]),
        "peak_bytes": trace.peak_bytes,
        "peak_step": trace.peak_step,
        "total_macs": cost.total_macs,
        "flash_traffic_bytes": cost.flash_traffic_bytes,
        "per_step_bytes": [r["live_bytes"] for r in records],
    }
    write_report(results, out_dir, "plan-memory-report", "plan-memory")
    write_csv_records(records, out_dir, "plan-memory-steps")
    print(f"peak {trace.peak_bytes} bytes at step {trace.peak_step} "
          f"({records[trace.peak_step]['name']})")
    for r in records:
        print(f"  step {r['step']:3d} {r['name']:<28s} {r['live_bytes']:>8d} B")


def _cmd_infer(params, out_dir, seed):
    path = params["data_path"]
    if path is None:
        raise UsageError("--data is required")
    if path.endswith(".csv"):
        if not (params["channels"] and params["length"]):
            raise UsageError("--channels and --length are required for CSV")
        data = load_csv(path, params["channels"], params["length"])
    else:
        data = _load_dataset(path)
    composite, _ = serialize.load_composite(params["checkpoint"])
    chosen, preds = predict(composite, data.samples)
    out_path = os.path.join(out_dir, "predictions.csv")
    with open(out_path, "w") as f:
        f.write("index,classifier,prediction\n")
        for i, (c, p) in enumerate(zip(chosen, preds)):
            f.write(f"{i},{int(c)},{int(p)}\n")
    results = {"n": len(data),
               "accuracy": float(np.mean(preds == data.labels)),
               "prediction_histogram": np.bincount(
                   preds, minlength=data.num_classes)}
    write_report(results, out_dir, "infer-report", "infer")
    print(f"wrote {out_path} (accuracy {results['accuracy']:.4f})")


def _cmd_export(params, out_dir, seed):
    if params.get("checkpoint"):
        composite, saved = serialize.load_composite(params["checkpoint"])
        nets = [("selector", composite.selector)] + [
            (f"classifier-{i}", c)
            for i, c in enumerate(composite.classifiers)]
        manifest = {"kind": "composite", "config": saved,
                    "aggregation_enabled": composite.aggregation_enabled}
    elif params.get("model"):
        model = serialize.load_model(params["model"])
        nets = [("model", model)]
        manifest = {"kind": "model"}
    else:
        raise UsageError("--checkpoint or --model is required")
    manifest["networks"] = [
        {"name": name,
         "input_shape": list(net.input_shape),
         "param_count": net.param_count(),
         "layers": [s.to_json() for s in net.specs]}
        for name, net in nets]
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {path}")


_DEFAULTS = {
    "gen-data": {"num_classes": 8, "clusters_per_class": 3, "channels": 3,
                 "length": 128, "n": 4000, "noise_sigma": 0.5,
                 "signature_amp": 0.4, "ratio": 0.8, "csv": False},
    "train-strong": {"train_path": None, "epochs": 15, "learning_rate": 0.01,
                     "batch_size": 32, "num_classifiers": 6},
    "split": {"train_path": None, "strong_path": None, "num_classifiers": 6,
              "random_split": False},
    "pretrain": {"train_path": None, "num_classifiers": 6,
                 "pretrain_epochs": 6, "batch_size": 16,
                 "learning_rate": 0.001, "no_aggregation": False,
                 "arch": None},
    "train": {"train_path": None, "checkpoint": None, "iterations": 10,
              "epochs_per_phase": 6, "batch_size": 16,
              "learning_rate": 0.001, "decay_factor": 0.5, "decay_every": 5,
              "alpha": 0.1, "beta": 0.1, "gamma": 0.03,
              "synchronous": False, "no_aggregation": False,
              "train_taps": False},
    "train-baseline": {"mode": None, "train_path": None, "test_path": None,
                       "num_classifiers": 6, "iterations": 10,
                       "epochs_per_phase": 6, "batch_size": 16,
                       "learning_rate": 0.001},
    "eval": {"checkpoint": None, "test_path": None},
    "analyze": {"test_path": None, "models": None, "checkpoint": None},
    "plan-memory": {"checkpoint": None, "classifier": 0, "sliced": False},
    "infer": {"checkpoint": None, "data_path": None, "channels": None,
              "length": None},
    "export": {"checkpoint": None, "model": None},
}

_BODIES = {
    "gen-data": _cmd_gen_data,
    "train-strong": _cmd_train_strong,
    "split": _cmd_split,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "train-baseline": _cmd_train_baseline,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "plan-memory": _cmd_plan_memory,
    "infer": _cmd_infer,
    "export": _cmd_export,
}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        params = _resolve(args, _DEFAULTS[args.command])
        seed = args.seed if args.seed is not None else 0
        out_dir = args.out or "."
        os.makedirs(out_dir, exist_ok=True)
        _snapshot({**params, "seed": seed, "out": out_dir},
                  out_dir, args.command)
        _BODIES[args.command](params, out_dir, seed)
        return 0
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
