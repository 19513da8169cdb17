"""Command-line entry point.

Configuration resolves flags over an optional JSON config file over
built-in defaults, and every artifact-producing run writes the resolved
configuration next to its outputs so it can be replayed bit-exactly.
Query commands print JSON to stdout.  Exit codes: 0 success, 1 runtime
failure (single-line error on stderr), 2 usage.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cam import compute_cam, emit_overlay, interior_crop
from .classifier import (FinetuneConfig, build_downstream, finetune,
                         predict_patch)
from .data import (CLASS_NAMES, entries_for_patients, generate_corpus,
                   load_manifest, risk_group, split_by_patient)
from .imageio import read_pgm, write_pgm
from .lbp import (LbpConfig, extract_texture_map, texture_histogram,
                  write_codes_csv, write_histograms_csv, write_normalized_pgm)
from .metrics import evaluate_run
from .nn import (FORMAT_VERSION, CheckpointError, NetworkSpec, build_network,
                 load_blobs_into, load_checkpoint, network_blobs,
                 save_checkpoint)
from .nn.gradcheck import run_suite
from .pretrain import PretrainConfig, pretrain, write_trajectory_csv
from .rng import Stream
from .sweep import label_fraction_study, lbp_sweep
from .vote import (PatchPredictionMatrix, VoteConfig, cross_vote,
                   heat_matrix_export, predict_volume, read_matrix_csv)

_VERSION_LINE = f"ctl {__version__} (checkpoint format {FORMAT_VERSION})"


class CliError(Exception):
    """Runtime failure surfaced as a one-line exit-1 diagnostic."""


def _add(parser, name, **kwargs):
    # Defaults stay out of argparse so a config file can fill the gaps;
    # the real defaults live in _DEFAULTS.
    parser.add_argument(name, default=None, **kwargs)


_DEFAULTS = {
    "gen-data": {"seed": 0, "patients": 15, "frames": 10, "frame_width": 128,
                 "patch_size": 64, "stride": None},
    "extract-lbp": {"lbp_p": 32, "lbp_r": 4.0},
    "pretrain": {"seed": 0, "epochs": 30, "batch": 32, "tau": 0.5,
                 "lbp_p": 32, "lbp_r": 4.0, "lr": 1e-2, "weight_decay": 1e-6},
    "finetune": {"seed": 0, "epochs": 30, "batch": 32, "label_fraction": 1.0,
                 "lbp_p": 32, "lbp_r": 4.0, "lr": 1e-3, "momentum": 0.9,
                 "freeze_encoder": False, "head_warmup": 5},
    "predict": {"lbp_p": 32, "lbp_r": 4.0},
    "predict-volume": {"lbp_p": 32, "lbp_r": 4.0, "patch_size": 64, "stride": None,
                       "threshold": 0.8, "run": 3},
    "vote": {"threshold": 0.8, "run": 3},
    "eval": {"task": "binary"},
    "cam": {"lbp_p": 32, "lbp_r": 4.0, "alpha": 0.5, "class_index": None},
    "sweep-lbp": {"seed": 0, "r": "1,2,4", "p": "8,16,32", "epochs": 5,
                  "finetune_epochs": 10, "batch": 32, "seeds": 1},
    "study-labels": {"seed": 0, "fractions": "0.25,0.5,0.75,1.0", "seeds": 3,
                     "epochs": 10, "batch": 32, "lbp_p": 32, "lbp_r": 4.0},
    "gradcheck": {"seed": 2024, "samples": 24},
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="ctl", description=__doc__)
    parser.add_argument("--version", action="version", version=_VERSION_LINE)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    _add(p, "--config")
    _add(p, "--seed", type=int)
    _add(p, "--out", required=True)
    _add(p, "--patients", type=int)
    _add(p, "--frames", type=int)
    _add(p, "--frame-width", type=int)
    _add(p, "--patch-size", type=int)
    _add(p, "--stride", type=int)

    p = sub.add_parser("extract-lbp", help="texture map artifacts for one image")
    _add(p, "--config")
    _add(p, "--image", required=True)
    _add(p, "--out", required=True, help="output stem; writes .pgm/.csv/.hist.csv")
    _add(p, "--lbp-p", type=int)
    _add(p, "--lbp-r", type=float)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    _add(p, "--config")
    _add(p, "--manifest", required=True)
    _add(p, "--out", required=True)
    _add(p, "--seed", type=int)
    _add(p, "--epochs", type=int)
    _add(p, "--batch", type=int)
    _add(p, "--tau", type=float)
    _add(p, "--lr", type=float)
    _add(p, "--weight-decay", type=float)
    _add(p, "--lbp-p", type=int)
    _add(p, "--lbp-r", type=float)

    p = sub.add_parser("finetune", help="train the five-class head")
    _add(p, "--config")
    _add(p, "--manifest", required=True)
    _add(p, "--init", required=True, help="checkpoint path or the word 'random'")
    _add(p, "--out", required=True)
    _add(p, "--seed", type=int)
    _add(p, "--epochs", type=int)
    _add(p, "--batch", type=int)
    _add(p, "--label-fraction", type=float)
    _add(p, "--lr", type=float)
    _add(p, "--momentum", type=float)
    p.add_argument("--freeze-encoder", action="store_true", default=None)
    _add(p, "--head-warmup", type=int, help="head-only epochs before full updates")
    _add(p, "--lbp-p", type=int)
    _add(p, "--lbp-r", type=float)

    p = sub.add_parser("predict", help="classify one patch image")
    _add(p, "--config")
    _add(p, "--model", required=True)
    _add(p, "--image", required=True)
    _add(p, "--lbp-p", type=int)
    _add(p, "--lbp-r", type=float)

    p = sub.add_parser("predict-volume", help="window frames, score, vote")
    _add(p, "--config")
    _add(p, "--model", required=True)
    _add(p, "--frames", required=True, help="directory of PGM frames")
    _add(p, "--out", required=True, help="matrix CSV path; .ppm heat image beside it")
    _add(p, "--patch-size", type=int)
    _add(p, "--stride", type=int)
    _add(p, "--threshold", type=float)
    _add(p, "--run", type=int)
    _add(p, "--lbp-p", type=int)
    _add(p, "--lbp-r", type=float)

    p = sub.add_parser("vote", help="vote an existing matrix CSV")
    _add(p, "--config")
    _add(p, "--matrix", required=True)
    _add(p, "--threshold", type=float)
    _add(p, "--run", type=int)

    p = sub.add_parser("eval", help="metric report from prediction/truth CSVs")
    _add(p, "--config")
    _add(p, "--pred", required=True)
    _add(p, "--truth", required=True)
    _add(p, "--task", choices=["binary", "five"])

    p = sub.add_parser("cam", help="class activation overlay for one patch")
    _add(p, "--config")
    _add(p, "--model", required=True)
    _add(p, "--image", required=True)
    _add(p, "--out", required=True)
    _add(p, "--class", type=int, dest="class_index")
    _add(p, "--alpha", type=float)
    _add(p, "--lbp-p", type=int)
    _add(p, "--lbp-r", type=float)

    p = sub.add_parser("sweep-lbp", help="texture parameter grid sweep")
    _add(p, "--config")
    _add(p, "--manifest", required=True)
    _add(p, "--out", required=True)
    _add(p, "--r", help="comma-separated radii")
    _add(p, "--p", help="comma-separated neighbor counts")
    _add(p, "--epochs", type=int, help="pretraining epochs per cell")
    _add(p, "--finetune-epochs", type=int)
    _add(p, "--batch", type=int)
    _add(p, "--seeds", type=int, help="number of seeds per cell")
    _add(p, "--seed", type=int, help="first seed")

    p = sub.add_parser("study-labels", help="pretrained vs random per label budget")
    _add(p, "--config")
    _add(p, "--manifest", required=True)
    _add(p, "--ckpt", required=True)
    _add(p, "--out", required=True)
    _add(p, "--fractions")
    _add(p, "--seeds", type=int)
    _add(p, "--seed", type=int)
    _add(p, "--epochs", type=int)
    _add(p, "--batch", type=int)
    _add(p, "--lbp-p", type=int)
    _add(p, "--lbp-r", type=float)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    _add(p, "--config")
    _add(p, "--seed", type=int)
    _add(p, "--samples", type=int)

    return parser


def _resolve(args, command):
    """flags > config file > defaults, as a plain dict."""
    resolved = dict(_DEFAULTS.get(command, {}))
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise CliError("config file must hold a JSON object")
        for key, value in file_values.items():
            resolved[key.replace("-", "_")] = value
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            resolved[key] = value
    resolved["command"] = command
    return resolved


def _write_resolved_config(resolved, anchor_path):
    anchor = Path(anchor_path)
    target = anchor / "config.json" if anchor.is_dir() else anchor.with_suffix(
        anchor.suffix + ".config.json")
    with open(target, "w") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _lbp_config(resolved):
    return LbpConfig(neighbors=int(resolved["lbp_p"]), radius=float(resolved["lbp_r"]))


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v != ""]


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v != ""]


def _load_model(path, head):
    try:
        checkpoint = load_checkpoint(path)
    except CheckpointError as err:
        raise CliError(f"cannot load {path}: {err}") from err
    network = build_network(NetworkSpec(head=head), Stream(0, "load"))
    load_blobs_into(network, checkpoint.blobs)
    return network, checkpoint


def _print_json(payload):
    json.dump(payload, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


# -- subcommand bodies -----------------------------------------------------------


def _cmd_gen_data(resolved):
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_corpus(out, int(resolved["seed"]),
                               patients_per_class=int(resolved["patients"]),
                               frames_per_volume=int(resolved["frames"]),
                               frame_width=int(resolved["frame_width"]),
                               patch_size=int(resolved["patch_size"]),
                               stride=resolved["stride"] and int(resolved["stride"]))
    _write_resolved_config(resolved, out)
    print(f"wrote {len(manifest.entries)} patches under {out}")
    return 0


def _cmd_extract_lbp(resolved):
    stem = Path(resolved["out"])
    config = _lbp_config(resolved)
    texture = extract_texture_map(read_pgm(resolved["image"]), config)
    write_normalized_pgm(stem.with_suffix(".pgm"), texture)
    write_codes_csv(stem.with_suffix(".csv"), texture)
    write_histograms_csv(stem.with_suffix(".hist.csv"),
                         [(stem.name, texture_histogram(texture))])
    _write_resolved_config(resolved, stem.with_suffix(".pgm"))
    return 0


def _cmd_pretrain(resolved):
    manifest = load_manifest(Path(resolved["manifest"]))
    config = PretrainConfig(temperature=float(resolved["tau"]),
                            batch_size=int(resolved["batch"]),
                            epochs=int(resolved["epochs"]),
                            learning_rate=float(resolved["lr"]),
                            weight_decay=float(resolved["weight_decay"]))
    network, trajectory = pretrain(manifest, config, _lbp_config(resolved),
                                   int(resolved["seed"]))
    out = Path(resolved["out"])
    save_checkpoint(out, network_blobs(network), seed=int(resolved["seed"]))
    write_trajectory_csv(out.with_suffix(out.suffix + ".loss.csv"), trajectory)
    _write_resolved_config(resolved, out)
    print(f"final mean loss {trajectory[-1]:.6f} over {len(trajectory) - 1} epochs")
    return 0


def _cmd_finetune(resolved):
    manifest = load_manifest(Path(resolved["manifest"]))
    init = resolved["init"]
    if init == "random":
        blobs, mode = None, "random"
    else:
        try:
            blobs, mode = load_checkpoint(init).blobs, "from_checkpoint"
        except CheckpointError as err:
            raise CliError(f"cannot load {init}: {err}") from err
    network = build_downstream(seed=int(resolved["seed"]), checkpoint_blobs=blobs)
    config = FinetuneConfig(epochs=int(resolved["epochs"]),
                            batch_size=int(resolved["batch"]),
                            learning_rate=float(resolved["lr"]),
                            momentum=float(resolved["momentum"]),
                            label_fraction=float(resolved["label_fraction"]),
                            init=mode,
                            freeze_encoder=bool(resolved["freeze_encoder"]),
                            head_warmup_epochs=int(resolved["head_warmup"]))
    split = split_by_patient(manifest, 0.8, int(resolved["seed"]))
    train_entries = entries_for_patients(manifest, split.train_patient_ids)
    history = finetune(network, manifest, train_entries, config,
                       _lbp_config(resolved), int(resolved["seed"]))
    out = Path(resolved["out"])
    save_checkpoint(out, network_blobs(network), seed=int(resolved["seed"]))
    _write_resolved_config(resolved, out)
    loss, accuracy = history[-1]
    print(f"final train loss {loss:.6f}, train accuracy {accuracy:.4f}")
    return 0


def _cmd_predict(resolved):
    network, _ = _load_model(resolved["model"], head="gap_linear")
    result = predict_patch(network, read_pgm(resolved["image"]), _lbp_config(resolved))
    _print_json({
        "probabilities": {name: float(p) for name, p in zip(CLASS_NAMES, result.p)},
        "predicted_label": result.predicted_label,
        "predicted_risk_group": risk_group(result.predicted_label),
        "high_risk_prob": result.high_risk_prob,
    })
    return 0


def _cmd_predict_volume(resolved):
    network, _ = _load_model(resolved["model"], head="gap_linear")
    frames_dir = Path(resolved["frames"])
    frame_paths = sorted(frames_dir.glob("*.pgm"))
    if not frame_paths:
        raise CliError(f"no PGM frames under {frames_dir}")
    frames = [read_pgm(p) for p in frame_paths]
    vote_config = VoteConfig(threshold=float(resolved["threshold"]),
                             run_length=int(resolved["run"]))
    result, matrix = predict_volume(
        network, frames, _lbp_config(resolved), vote_config,
        patch_size=int(resolved["patch_size"]),
        stride=resolved["stride"] and int(resolved["stride"]),
        volume_id=frames_dir.name)
    out = Path(resolved["out"])
    heat_matrix_export(matrix, csv_path=out, ppm_path=out.with_suffix(".ppm"))
    _write_resolved_config(resolved, out)
    _print_json({"volume_id": matrix.volume_id,
                 "verdict": "POSITIVE" if result.positive else "NEGATIVE",
                 "witness": [list(c) for c in result.witness],
                 "matrix_shape": list(matrix.probs.shape)})
    return 0


def _cmd_vote(resolved):
    matrix = read_matrix_csv(resolved["matrix"])
    config = VoteConfig(threshold=float(resolved["threshold"]),
                        run_length=int(resolved["run"]))
    result = cross_vote(matrix, config)
    _print_json({"verdict": "POSITIVE" if result.positive else "NEGATIVE",
                 "witness": [list(c) for c in result.witness]})
    return 0


def _read_pred_csv(path):
    ids, probs = [], []
    with open(path) as fh:
        for line in fh:
            parts = [p.strip() for p in line.strip().split(",") if p.strip() != ""]
            if not parts:
                continue
            ids.append(parts[0])
            values = [float(v) for v in parts[1:]]
            if len(values) != len(CLASS_NAMES):
                raise CliError(f"prediction row for {parts[0]} needs "
                               f"{len(CLASS_NAMES)} probabilities")
            probs.append(values)
    return ids, np.array(probs)


def _read_truth_csv(path):
    truth = {}
    with open(path) as fh:
        for line in fh:
            parts = [p.strip() for p in line.strip().split(",") if p.strip() != ""]
            if not parts:
                continue
            if len(parts) != 2:
                raise CliError("truth rows must be 'sample_id,label'")
            label = parts[1]
            if label.isdigit():
                index = int(label)
                if not 0 <= index < len(CLASS_NAMES):
                    raise CliError(f"label index {index} out of range")
            else:
                if label not in CLASS_NAMES:
                    raise CliError(f"unknown label {label!r}")
                index = CLASS_NAMES.index(label)
            truth[parts[0]] = index
    return truth


def _cmd_eval(resolved):
    ids, probs = _read_pred_csv(resolved["pred"])
    truth = _read_truth_csv(resolved["truth"])
    missing = [i for i in ids if i not in truth]
    if missing:
        raise CliError(f"truth file lacks labels for {missing[:3]}...")
    truths = [truth[i] for i in ids]
    if resolved["task"] == "five":
        report = evaluate_run([int(p.argmax()) for p in probs], truths, "five_class")
    else:
        scores = probs[:, 3] + probs[:, 4]
        flags = [t >= 3 for t in truths]
        report = evaluate_run(scores, flags, "binary")
    _print_json(report)
    return 0


def _cmd_cam(resolved):
    if resolved["class_index"] is None:
        raise CliError("--class is required (0..4)")
    network, _ = _load_model(resolved["model"], head="gap_linear")
    lbp_config = _lbp_config(resolved)
    image = read_pgm(resolved["image"])
    amap = compute_cam(network, image, int(resolved["class_index"]), lbp_config)
    out = Path(resolved["out"])
    emit_overlay(interior_crop(image, lbp_config), amap,
                 float(resolved["alpha"]), path=out)
    _write_resolved_config(resolved, out)
    return 0


def _cmd_sweep_lbp(resolved):
    manifest = load_manifest(Path(resolved["manifest"]))
    first = int(resolved["seed"])
    seeds = list(range(first, first + int(resolved["seeds"])))
    result = lbp_sweep(manifest,
                       r_values=_float_list(resolved["r"]),
                       p_values=_int_list(resolved["p"]),
                       seeds=seeds,
                       pretrain_epochs=int(resolved["epochs"]),
                       finetune_epochs=int(resolved["finetune_epochs"]),
                       batch_size=int(resolved["batch"]))
    out = Path(resolved["out"])
    result.write_csv(out)
    _write_resolved_config(resolved, out)
    print(f"wrote {len(result.rows)} sweep rows to {out}")
    return 0


def _cmd_study_labels(resolved):
    manifest = load_manifest(Path(resolved["manifest"]))
    try:
        checkpoint = load_checkpoint(resolved["ckpt"])
    except CheckpointError as err:
        raise CliError(f"cannot load {resolved['ckpt']}: {err}") from err
    first = int(resolved["seed"])
    seeds = list(range(first, first + int(resolved["seeds"])))
    result = label_fraction_study(manifest, checkpoint.blobs,
                                  fractions=_float_list(resolved["fractions"]),
                                  seeds=seeds,
                                  lbp_config=_lbp_config(resolved),
                                  finetune_epochs=int(resolved["epochs"]),
                                  batch_size=int(resolved["batch"]))
    out = Path(resolved["out"])
    result.write_csv(out)
    _write_resolved_config(resolved, out)
    print(f"wrote {len(result.rows)} study rows to {out}")
    return 0


def _cmd_gradcheck(resolved):
    results = run_suite(seed=int(resolved["seed"]), samples=int(resolved["samples"]))
    failed = False
    for name, error, passed in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {error:.3e}")
        failed = failed or not passed
    return 1 if failed else 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "extract-lbp": _cmd_extract_lbp,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "predict": _cmd_predict,
    "predict-volume": _cmd_predict_volume,
    "vote": _cmd_vote,
    "eval": _cmd_eval,
    "cam": _cmd_cam,
    "sweep-lbp": _cmd_sweep_lbp,
    "study-labels": _cmd_study_labels,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return exit_.code if exit_.code is not None else 0
    try:
        resolved = _resolve(args, args.command)
        return _COMMANDS[args.command](resolved)
    except (CliError, CheckpointError, ValueError, KeyError, OSError) as err:
        message = str(err).replace("\n", " ")
        print(f"ctl: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
