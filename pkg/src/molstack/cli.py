"""Command-line surface: parse, train, predict, folds, stack, blend.

Every command is deterministic given its flags: all randomness flows from
explicit seeds, outputs are written atomically, and a metadata record
(seed, config hash, version) lands next to each output. Exit codes:
0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .errors import (
    DivergedLoss,
    InputError,
    MolstackError,
    NonConvergence,
    SingularSystem,
)
from .pddgn import PDConfig, load_pd_checkpoint, mol_to_pd_graph, pd_predict, pd_train, save_pd_checkpoint
from .smiles import molecule_stats, parse_smiles, perceive_rings, read_molecule_file
from .stacking import (
    BlendSpec,
    FoldSpec,
    assign_folds,
    blend_full_train,
    load_manifest,
    load_prediction_csv,
    run_stacking,
    stack_report,
    write_prediction_csv,
)
from .tokengraph import build_token_graph
from .transformer import MTConfig, load_mt_checkpoint, mt_predict, mt_train, save_mt_checkpoint
from .util import atomic_write_text, canonical_json, config_hash

_NUMERICAL_ERRORS = (DivergedLoss, NonConvergence, SingularSystem)


def _fail(category: str, detail: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": category, "detail": detail}) + "\n")
    return code


def _write_metadata(output_path, command: str, seed, config: dict, inputs: list[str]) -> None:
    record = {
        "command": command,
        "seed": seed,
        "config_hash": config_hash(config),
        "config": config,
        "inputs": [str(p) for p in inputs],
        "package_version": __version__,
    }
    atomic_write_text(str(output_path) + ".meta.json", canonical_json(record) + "\n")


def _load_config_file(path) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return doc


def _resolve_config(args, extra_flags: dict) -> dict:
    """File config first, then flags win over the file."""
    config = _load_config_file(getattr(args, "config", None))
    for key, value in extra_flags.items():
        if value is not None:
            config[key] = value
    return config


def cmd_parse(args) -> int:
    records = read_molecule_file(args.input)
    lines = []
    for record in records:
        try:
            mol = parse_smiles(record.smiles)
        except MolstackError as exc:
            raise InputError(f"line {record.line_no}: {exc}") from exc
        rings = perceive_rings(mol)
        stats = molecule_stats(mol)
        lines.append(f"{stats.heavy_atoms},{mol.n_bonds},{len(rings)}")
    atomic_write_text(args.output, "\n".join(lines) + ("\n" if lines else ""))
    _write_metadata(args.output, "parse", None, {}, [args.input])
    return 0


def _prepare_dataset(records, model_kind: str):
    dataset = []
    for record in records:
        if record.target is None:
            raise InputError(f"line {record.line_no}: training needs a target value")
        mol = parse_smiles(record.smiles)
        rings = perceive_rings(mol)
        if model_kind == "mt":
            dataset.append((build_token_graph(mol, rings), record.target))
        else:
            dataset.append((mol_to_pd_graph(mol, rings), record.target))
    return dataset


def cmd_train(args) -> int:
    overrides = {"seed": args.seed}
    if args.model == "pddgn" and args.strict_eq5 is not None:
        overrides["strict_eq5"] = args.strict_eq5 == "true"
    config = _resolve_config(args, overrides)
    records = read_molecule_file(args.input)
    dataset = _prepare_dataset(records, args.model)
    if args.model == "mt":
        cfg = MTConfig(**config)
        model, history = mt_train(dataset, cfg)
        save_mt_checkpoint(model, args.output)
    else:
        cfg = PDConfig(**config)
        model, history = pd_train(dataset, cfg)
        save_pd_checkpoint(model, args.output)
    metrics = {
        "init_mae": history["init_mae"],
        "final_mae": history["final_mae"],
        "epoch_mae": history["epoch_mae"],
        "n_examples": len(dataset),
    }
    atomic_write_text(str(args.output) + ".metrics.json", canonical_json(metrics) + "\n")
    _write_metadata(args.output, "train", cfg.seed, asdict(cfg), [args.input])
    return 0


def cmd_predict(args) -> int:
    with open(args.checkpoint, encoding="utf-8") as fh:
        kind = json.load(fh).get("kind")
    records = read_molecule_file(args.input)
    parsed = [(record, parse_smiles(record.smiles)) for record in records]
    if kind == "mt":
        model = load_mt_checkpoint(args.checkpoint)
        graphs = [build_token_graph(mol, perceive_rings(mol)) for _, mol in parsed]
        predictions = mt_predict(model, graphs)
    elif kind == "pddgn":
        model = load_pd_checkpoint(args.checkpoint)
        graphs = [mol_to_pd_graph(mol) for _, mol in parsed]
        predictions = pd_predict(model, graphs)
    else:
        raise InputError(f"{args.checkpoint}: unknown checkpoint kind {kind!r}")
    ids = np.arange(len(records))
    write_prediction_csv(args.output, ids, predictions)
    _write_metadata(args.output, "predict", model.cfg.seed, asdict(model.cfg),
                    [args.input, args.checkpoint])
    return 0


def cmd_folds(args) -> int:
    validation = tuple(int(v) for v in args.validation_folds.split(",")) if args.validation_folds else (0, 1, 2, 3)
    spec = FoldSpec(n_folds=args.folds, validation_folds=validation, seed=args.seed or 0)
    folds = assign_folds(args.n_examples, spec)
    lines = ["id,fold"] + [f"{i},{fold}" for i, fold in enumerate(folds)]
    atomic_write_text(args.output, "\n".join(lines) + "\n")
    _write_metadata(args.output, "folds", spec.seed,
                    {"n_folds": spec.n_folds, "validation_folds": list(spec.validation_folds),
                     "n_examples": args.n_examples}, [])
    return 0


def cmd_stack(args) -> int:
    manifest = load_manifest(args.input)
    if args.epsilon is not None:
        manifest.epsilon = args.epsilon
    result = run_stacking(manifest, base_dir=os.path.dirname(os.path.abspath(args.input)))
    report = stack_report(result, manifest)
    atomic_write_text(args.output, json.dumps(report, sort_keys=True, indent=2) + "\n")
    if result.test_predictions is not None and args.predictions:
        write_prediction_csv(args.predictions, result.test_ids, result.test_predictions)
    _write_metadata(args.output, "stack", None,
                    {"epsilon": manifest.epsilon, "ridge": manifest.ridge,
                     "validation_folds": list(manifest.validation_folds)}, [args.input])
    sys.stdout.write(f"mean OOF MAE: {result.cv.mean_mae!r}\n")
    return 0


def cmd_blend(args) -> int:
    with open(args.input, encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(args.input))

    def resolve(rel):
        return rel if os.path.isabs(rel) else os.path.join(base, rel)

    try:
        ensemble_file = doc["ensemble"]
        extras = [(e["file"], float(e["weight"])) for e in doc["extras"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.input}: malformed blend manifest ({exc})") from None
    ensemble = load_prediction_csv(resolve(ensemble_file))
    ids = sorted(ensemble)
    base_vec = np.asarray([ensemble[i] for i in ids])
    extra_vecs = []
    for path, _weight in extras:
        table = load_prediction_csv(resolve(path))
        missing = [i for i in ids if i not in table]
        if missing:
            raise InputError(f"{path}: missing ids {missing[:5]}...")
        extra_vecs.append(np.asarray([table[i] for i in ids]))
    spec = BlendSpec(weights=tuple(w for _, w in extras))
    blended = blend_full_train(base_vec, extra_vecs, spec)
    write_prediction_csv(args.output, np.asarray(ids), blended)
    _write_metadata(args.output, "blend", None, {"weights": list(spec.weights)}, [args.input])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molstack",
                                     description="Molecular property toolkit: parsing, models, stacking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="summarize molecules as atoms,bonds,rings per line")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("train", help="train a model on SMILES<TAB>target lines")
    p.add_argument("--model", choices=("mt", "pddgn"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON config file; flags win over file values")
    p.add_argument("--seed", type=int)
    p.add_argument("--strict-eq5", dest="strict_eq5", choices=("true", "false"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("folds", help="write a fold assignment file")
    p.add_argument("--n-examples", type=int, required=True)
    p.add_argument("--folds", type=int, default=24)
    p.add_argument("--validation-folds", default="0,1,2,3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("stack", help="run the OOF stacking pipeline from a manifest")
    p.add_argument("--input", required=True, help="stacking manifest JSON")
    p.add_argument("--output", required=True, help="meta-model report JSON")
    p.add_argument("--predictions", help="optional test-prediction CSV output")
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("blend", help="blend ensemble predictions with full-train extras")
    p.add_argument("--input", required=True, help="blend manifest JSON")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_blend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _NUMERICAL_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc), 2)
    except MolstackError as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except FileNotFoundError as exc:
        return _fail("FileNotFound", str(exc), 1)
    except json.JSONDecodeError as exc:
        return _fail("InvalidJSON", str(exc), 1)
    except (ValueError, TypeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
