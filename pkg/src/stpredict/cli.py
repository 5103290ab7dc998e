"""``stpredict`` command line.

JSON on stdout, logs on stderr. Exit codes: 0 ok, 2 config error, 3 data
error, 4 numeric abort.
"""
import argparse
import json
import logging
import math
import os
import sys

import jsonschema
import numpy as np

from . import data as D
from .evaluation import emit_report, evaluate_model, run_ablation, summarize
from .network import (
    CheckpointError, ConfigError, VariantSpec, build_model, count_flops, count_params,
    load_checkpoint, read_checkpoint_header, save_checkpoint, table_variants,
)
from .training import MetaConfig, NumericAbort, meta_train, supervised_train

log = logging.getLogger("stpredict")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "scenario": {"enum": sorted(D.SCENARIOS) + sorted(D.SCENARIO_ALIASES)},
                "bursts": {"type": "integer", "minimum": 1},
                "delay_taps": {"type": "integer", "minimum": 1},
                "n_antennas": {"type": "integer", "minimum": 1},
                "carrier_hz": {"type": "number", "exclusiveMinimum": 0},
                "burst_interval_s": {"type": "number", "exclusiveMinimum": 0},
                "max_doppler_hz": {"type": "number", "minimum": 0, "maximum": D.MAX_DOPPLER_HZ},
                "n_paths": {"type": "integer", "minimum": 1},
                "stationary_segments": {"type": "array", "items": {
                    "type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}},
                "seed": {"type": "integer", "minimum": 0},
                "path_lifetime": {"type": "number", "minimum": 0},
                "fade_bursts": {"type": "integer", "minimum": 0},
                "tx_drift": {"type": "number", "minimum": 0},
                "rx_drift": {"type": "number", "minimum": 0},
                "rolloff": {"type": "number", "minimum": 0, "maximum": 1},
                "delay_decay": {"type": "number", "exclusiveMinimum": 0},
                "ratios": {"type": "array", "items": {"type": "number", "minimum": 0},
                           "minItems": 3, "maxItems": 3},
                "split_seed": _INT,
            },
        },
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "base": {"enum": ["convlstm", "stlstm", "calstm"]},
                "ta": _BOOL, "sta": _BOOL, "ghu": _BOOL,
                "channels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "ghu_channels": {"type": "integer", "minimum": 1},
                "kernel": {"enum": [1, 3, 5, 7]},
            },
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "iters": {"type": "integer", "minimum": 0},
                "batch": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "J": {"type": "integer", "minimum": 1},
                "K": {"type": "integer", "minimum": 0},
                "val_every": {"type": "integer", "minimum": 1},
            },
        },
        "meta": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "student_lr": {"type": "number", "exclusiveMinimum": 0},
                "teacher_lr": {"type": "number", "exclusiveMinimum": 0},
                "labeled_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "adaptive": _BOOL,
                "feedback_clip": {"type": "number", "minimum": 0},
                "observed_prefix": _BOOL,
                "student_optimizer": {"enum": ["sgd", "adam"]},
                "teacher_supervised": _BOOL,
            },
        },
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "out_dir": {"type": "string"},
                "scenarios": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "seeds": {"type": "array", "items": _INT, "minItems": 1},
                "variants": {"enum": ["table", "model"]},
            },
        },
    },
}

DEFAULTS = {
    "data": {"ratios": [7, 1, 2], "split_seed": None},
    "model": VariantSpec().to_dict(),
    "train": {"iters": 10000, "batch": 8, "lr": 1e-3, "seed": 0, "J": 10, "K": 10, "val_every": 100},
    "meta": MetaConfig().to_dict(),
    "eval": {"out_dir": "report", "scenarios": ["S1", "S2", "S3"], "seeds": [0], "variants": "table"},
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _pointer(path):
    return "/" + "/".join(str(p) for p in path)


def resolve_config(raw):
    """Validate against :data:`SCHEMA` and fill defaults; errors name a JSON pointer."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        raise CliError(f"config error at {_pointer(e.absolute_path)}: {e.message}", EXIT_CONFIG) from None
    cfg = {}
    for section, defaults in DEFAULTS.items():
        merged = dict(defaults)
        merged.update(raw.get(section, {}))
        cfg[section] = merged
    data_kw = {k: v for k, v in cfg["data"].items() if k not in ("ratios", "split_seed")}
    try:
        scenario = D.ScenarioConfig(**data_kw)
    except D.DataError as e:
        raise CliError(f"config error at /data: {e}", EXIT_CONFIG) from None
    cfg["data"].update(scenario.to_dict())
    if sum(cfg["data"]["ratios"]) <= 0:
        raise CliError("config error at /data/ratios: ratios must have a positive sum", EXIT_CONFIG)
    try:
        VariantSpec.from_dict(cfg["model"])
        MetaConfig(**cfg["meta"])
    except (ConfigError, ValueError) as e:
        section = "/model" if isinstance(e, ConfigError) else "/meta"
        raise CliError(f"config error at {section}: {e}", EXIT_CONFIG) from None
    return cfg


def load_config(path):
    if path is None:
        return resolve_config({})
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise CliError(f"cannot read config {path!r}: {e}", EXIT_CONFIG) from None
    except json.JSONDecodeError as e:
        raise CliError(f"config {path!r} is not valid JSON: {e}", EXIT_CONFIG) from None
    if not isinstance(raw, dict):
        raise CliError("config error at /: expected a JSON object", EXIT_CONFIG)
    return resolve_config(raw)


def scenario_of(cfg, **override):
    kw = {k: v for k, v in cfg["data"].items() if k not in ("ratios", "split_seed")}
    target = D.SCENARIO_ALIASES.get(override.get("scenario"), override.get("scenario"))
    if target and target != kw["scenario"]:
        # fields still at the base scenario's preset follow the new scenario's preset
        for k, v in D.SCENARIOS[kw["scenario"]].items():
            if kw.get(k) == v:
                kw[k] = None
    kw.update(override)
    return D.ScenarioConfig(**kw)


def _load_data(path):
    try:
        return D.load_dataset(path)
    except (OSError, D.DataError, KeyError) as e:
        raise CliError(f"cannot load dataset {path!r}: {e}", EXIT_DATA) from None


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    try:
        ds = D.build_dataset(scenario_of(cfg), tuple(cfg["data"]["ratios"]), cfg["data"]["split_seed"])
    except D.DataError as e:
        raise CliError(str(e), EXIT_DATA) from None
    digest = D.save_dataset(ds, args.out, {"ratios": cfg["data"]["ratios"]})
    _emit({"out": args.out, "dataset_hash": digest,
           "counts": {k: int(len(getattr(ds, k))) for k in D.SPLITS}})


def _model_for(cfg, ds, seed):
    spec = VariantSpec.from_dict(cfg["model"])
    return build_model(spec, ds.train.shape[2], ds.train.shape[-1], seed=seed)


def _train_kw(cfg, args):
    t = dict(cfg["train"])
    if getattr(args, "iters", None) is not None:
        t["iters"] = args.iters
    return t


def cmd_train(args, cfg):
    ds = _load_data(args.data)
    t = _train_kw(cfg, args)
    model = _model_for(cfg, ds, t["seed"])
    os.makedirs(args.out, exist_ok=True)
    res = supervised_train(model, ds, iters=t["iters"], batch=t["batch"], lr=t["lr"], seed=t["seed"],
                           J=t["J"], K=t["K"], val_every=t["val_every"],
                           history_path=os.path.join(args.out, "history.jsonl"))
    ckpt = os.path.join(args.out, "model.stck")
    save_checkpoint(model, ckpt)
    last = res.history[-1] if len(res.history) else {}
    _emit({"checkpoint": ckpt, "iters": t["iters"], "final": last})


def split_labeled(windows, fraction, seed):
    """Seeded labeled/unlabeled partition of a window set."""
    n = len(windows)
    k = max(1, int(math.ceil(fraction * n)))
    perm = np.random.default_rng(seed).permutation(n)
    return windows[np.sort(perm[:k])], windows[np.sort(perm[k:])]


def cmd_meta_train(args, cfg):
    lab_ds = _load_data(args.labeled)
    unl_ds = _load_data(args.unlabeled)
    t = _train_kw(cfg, args)
    mc = dict(cfg["meta"])
    if args.adaptive:
        mc["adaptive"] = True
    meta = MetaConfig(**mc)
    labeled, rest = split_labeled(lab_ds.train, meta.labeled_fraction, t["seed"])
    unlabeled = np.concatenate([rest[:, :t["J"]], unl_ds.train[:, :t["J"]]])
    teacher = _model_for(cfg, lab_ds, t["seed"] + 1000)
    student = _model_for(cfg, lab_ds, t["seed"])
    os.makedirs(args.out, exist_ok=True)
    meta_train(teacher, student, labeled, unlabeled, meta, iters=t["iters"], seed=t["seed"], batch=t["batch"],
               J=t["J"], K=t["K"], val_set=lab_ds.val, val_every=t["val_every"],
               history_path=os.path.join(args.out, "history.jsonl"))
    ckpt = os.path.join(args.out, "student.stck")
    save_checkpoint(student, ckpt)
    save_checkpoint(teacher, os.path.join(args.out, "teacher.stck"))
    _emit({"checkpoint": ckpt, "iters": t["iters"], "labeled": int(len(labeled)),
           "unlabeled": int(len(unlabeled)), "adaptive": meta.adaptive})


def _file_sha1(path):
    with open(path, "rb") as fh:
        return D.git_blob_sha1(fh.read())


def cmd_eval(args, cfg):
    ds = _load_data(args.data)
    try:
        header, _, _ = read_checkpoint_header(args.checkpoint)
        expect = VariantSpec.from_dict(cfg["model"]) if args.config else None
        model = load_checkpoint(args.checkpoint, expect_variant=expect)
    except ConfigError as e:
        raise CliError(str(e), EXIT_CONFIG) from None
    except (OSError, CheckpointError) as e:
        raise CliError(f"cannot load checkpoint {args.checkpoint!r}: {e}", EXIT_DATA) from None
    split = getattr(ds, args.split)
    if len(split) == 0:
        raise CliError(f"split {args.split!r} of {args.data!r} is empty", EXIT_DATA)
    J, K = cfg["train"]["J"], cfg["train"]["K"]
    geo = ds.config.scenario if ds.config else ""
    rec = evaluate_model(model, split, J, K, geo, geo, header.get("seed", 0))
    if args.out:
        emit_report([rec], args.out, {"dataset_hash": D.dataset_hash(args.data),
                                         "checkpoint_sha1": _file_sha1(args.checkpoint)})
    _emit({"variant": rec.variant, "split": args.split, "nmse_linear": rec.nmse_linear,
           "nmse_db": rec.nmse_db, "nmae_linear": rec.nmae_linear, "nmae_db": rec.nmae_db,
           "per_step_nmse": rec.per_step_nmse})


def cmd_ablate(args, cfg):
    model_cfg = cfg["model"]
    if cfg["eval"]["variants"] == "table":
        variants = table_variants(model_cfg["channels"], model_cfg["ghu_channels"], model_cfg["kernel"])
    else:
        variants = [VariantSpec.from_dict(model_cfg)]
    t = _train_kw(cfg, args)
    built, scenarios, hashes = {}, {}, {}

    def dataset(name):
        if name not in built:
            try:
                ds = D.build_dataset(scenario_of(cfg, scenario=name), tuple(cfg["data"]["ratios"]),
                                     cfg["data"]["split_seed"])
            except D.DataError as e:
                raise CliError(str(e), EXIT_DATA) from None
            built[name] = ds
            hashes[ds.config.scenario] = D.git_blob_sha1(
                b"".join(np.ascontiguousarray(getattr(ds, k)).tobytes() for k in D.SPLITS))
        return built[name]

    for name in cfg["eval"]["scenarios"]:
        # "A->B" trains on scenario A and tests on B's test split
        parts = [s.strip() for s in name.split("->")]
        if len(parts) == 1:
            scenarios[dataset(parts[0]).config.scenario] = dataset(parts[0])
        elif len(parts) == 2:
            scenarios["->".join(parts)] = (dataset(parts[0]), dataset(parts[1]))
        else:
            raise CliError(f"config error at /eval/scenarios: cannot parse {name!r}", EXIT_CONFIG)
    records = run_ablation(variants, scenarios, cfg["eval"]["seeds"], iters=t["iters"], batch=t["batch"],
                           lr=t["lr"], J=t["J"], K=t["K"])
    out = args.out or cfg["eval"]["out_dir"]
    emit_report(records, out, {"config": cfg, "dataset_hashes": hashes})
    _emit({"out": out, "rows": len(variants),
           "grid": [len(variants), len(scenarios), len(cfg["eval"]["seeds"])],
           "mean_nmse_db": [{"variant": k[0], "train_geo": k[1], "test_geo": k[2], "nmse_db": v}
                            for k, v in summarize(records).items()]})


def cmd_params(args, cfg):
    D_ = cfg["data"]["delay_taps"]
    S = 2 * cfg["data"]["n_antennas"]
    L = cfg["train"]["J"] + cfg["train"]["K"]
    specs = table_variants(cfg["model"]["channels"], cfg["model"]["ghu_channels"], cfg["model"]["kernel"]) \
        if args.all else [VariantSpec.from_dict(cfg["model"])]
    rows = []
    for spec in specs:
        m = build_model(spec, D_, S)
        row = {"variant": spec.name, "params": count_params(m)}
        if not args.no_flops:
            row["flops"] = count_flops(m, L=L)
        rows.append(row)
    _emit({"input": [D_, S, S], "L": L, "models": rows})


# -- entry point -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="stpredict", description="Spatiotemporal CSI prediction toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and preprocess a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="supervised training")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("meta-train", help="meta pseudo-label training")
    m.add_argument("--config")
    m.add_argument("--labeled", required=True)
    m.add_argument("--unlabeled", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--iters", type=int)
    m.add_argument("--adaptive", action="store_true", help="weighted MSE on labeled data")
    m.set_defaults(func=cmd_meta_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--split", choices=D.SPLITS, default="test")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation grid")
    a.add_argument("--config")
    a.add_argument("--out")
    a.add_argument("--iters", type=int)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("params", help="parameter and FLOP counts")
    c.add_argument("--config")
    c.add_argument("--all", action="store_true", help="all seven ablation variants")
    c.add_argument("--no-flops", action="store_true")
    c.set_defaults(func=cmd_params)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        args.func(args, cfg)
    except CliError as e:
        log.error("%s", e)
        return e.code
    except NumericAbort as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC
    except (D.DataError, CheckpointError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
