"""Command-line front end.

Subcommands: `phantom gen`, `train`, `eval`, `saliency`, `sweep`, `report`.
Each command validates its full configuration before touching the output
directory, echoes the merged effective config there, and writes every
artifact via write-then-rename. Exit codes: 0 success, 2 validation error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import encoder as enc
from . import evalstats as ev
from . import gradram as gr
from . import phantom as ph
from . import rnc
from . import train as tr
from .augment import AugmentConfig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

SWEEP_AXES = ("batch-size", "resolution", "depth")


class ValidationFailure(Exception):
    pass


@dataclass
class ExperimentConfig:
    """Unified configuration document; sections mirror the module configs."""
    phantom: ph.PhantomConfig = field(default_factory=ph.PhantomConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    rnc: rnc.RncConfig = field(default_factory=rnc.RncConfig)
    training: tr.TrainingConfig = field(default_factory=tr.TrainingConfig)
    gradram: gr.GradramConfig = field(default_factory=gr.GradramConfig)
    seed: int = 0

    def validate(self) -> None:
        self.phantom.validate()
        self.augment.validate()
        self.encoder.validate()
        self.rnc.validate()
        self.training.validate()
        self.gradram.validate()
        if tuple(self.encoder.input_dims) != tuple(self.phantom.dims):
            raise ValidationFailure(
                f"encoder input dims {self.encoder.input_dims} != "
                f"phantom dims {self.phantom.dims}")

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name))
             for name in ("phantom", "augment", "encoder", "rnc", "training", "gradram")}
        d["seed"] = self.seed
        return d


_SECTION_TYPES = {
    "phantom": ph.PhantomConfig,
    "augment": AugmentConfig,
    "encoder": enc.EncoderConfig,
    "rnc": rnc.RncConfig,
    "training": tr.TrainingConfig,
    "gradram": gr.GradramConfig,
}

# JSON gives lists where the dataclasses expect tuples
_TUPLE_FIELDS = {"dims", "input_dims", "widths", "ventricle_axes", "milestones",
                 "gain_range", "distractor_intensity_range", "blob_labels"}


def load_experiment_config(path: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValidationFailure(f"{path}: config document must be a JSON object")
    for key, value in doc.items():
        if key == "seed":
            cfg.seed = int(value)
            continue
        if key not in _SECTION_TYPES:
            raise ValidationFailure(f"{path}: unknown config section {key!r}")
        section_type = _SECTION_TYPES[key]
        known = {f.name for f in dataclasses.fields(section_type)}
        unknown = set(value) - known
        if unknown:
            raise ValidationFailure(
                f"{path}: unknown keys {sorted(unknown)} in section {key!r}")
        fixed = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
                 for k, v in value.items()}
        setattr(cfg, key, section_type(**fixed))
    return cfg


def apply_seed(cfg: ExperimentConfig, seed: int | None) -> None:
    if seed is None:
        return
    cfg.seed = int(seed)
    cfg.phantom.seed = int(seed)
    cfg.training.seed = int(seed)
    cfg.encoder.init_seed = int(seed)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.seed,
            "version": __version__}


def prepare_out_dir(out: str, force: bool) -> None:
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise ValidationFailure(
            f"output directory {out!r} is not empty; pass --force to reuse it")
    os.makedirs(out, exist_ok=True)


def echo_config(cfg: ExperimentConfig, out: str) -> None:
    doc = cfg.to_dict()
    doc["provenance"] = provenance(cfg)
    path = os.path.join(out, "effective_config.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# model file helpers


def save_model(path: str, encoder: "enc.Encoder", head: "enc.RegressionHead",
               cfg: ExperimentConfig, meta: dict) -> None:
    arrays = enc.encoder_state_arrays(encoder, head)
    enc.save_checkpoint(path, arrays, cfg.to_dict(), 0, meta)


def load_model(path: str):
    """Returns (encoder, head, experiment config, meta)."""
    arrays, cfg_dict, _, meta = enc.load_checkpoint(path)
    ecd = dict(cfg_dict["encoder"])
    for k in ("input_dims", "widths"):
        ecd[k] = tuple(ecd[k])
    encoder_cfg = enc.EncoderConfig(**ecd)
    encoder, head = enc.restore_encoder_state(arrays, encoder_cfg)
    return encoder, head, cfg_dict, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom_gen(args) -> int:
    cfg = load_experiment_config(args.config)
    apply_seed(cfg, args.seed)
    cfg.validate()
    if args.n < 10:
        raise ValidationFailure(f"dataset size must be >= 10, got {args.n}")
    prepare_out_dir(args.out, args.force)
    echo_config(cfg, args.out)

    samples = ph.generate_dataset(args.n, cfg.phantom, args.out, seed=cfg.seed,
                                  group=args.group, age_offset=args.age_offset)
    counts = {s: 0 for s in ph.SPLITS}
    for smp in samples:
        counts[smp.split] += 1
    print(f"wrote {len(samples)} volumes to {args.out}")
    print("split counts: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _param_count(encoder: "enc.Encoder") -> int:
    return sum(int(np.prod(p.shape)) for p in encoder.params.values())


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    apply_seed(cfg, args.seed)
    if args.pipeline:
        cfg.training.pipeline = args.pipeline
    cfg.validate()
    if not os.path.exists(os.path.join(args.data, "manifest.json")):
        raise ValidationFailure(f"no manifest.json under {args.data!r}")
    prepare_out_dir(args.out, args.force or args.resume)
    echo_config(cfg, args.out)

    data = tr.load_dataset(args.data)
    probe = enc.Encoder(cfg.encoder)
    print(f"pipeline {cfg.training.pipeline}; encoder parameters: {_param_count(probe)}")
    result = tr.run_training(data, cfg.encoder, cfg.rnc, cfg.augment,
                             cfg.training, out_dir=args.out, resume=args.resume)

    prov = provenance(cfg)
    tr.write_history_csv(os.path.join(args.out, "history.csv"), result.history,
                         provenance=json.dumps(prov, sort_keys=True))
    save_model(os.path.join(args.out, "model.bin"), result.encoder, result.head,
               cfg, {"provenance": prov, **result.meta})
    print(f"trained {cfg.training.pipeline}; model written to "
          f"{os.path.join(args.out, 'model.bin')}")
    return EXIT_OK


def _split_data(data_dir: str, split: str) -> "tr.SplitData":
    data = tr.load_dataset(data_dir)
    if split not in data or not data[split].volumes:
        raise ValidationFailure(f"split {split!r} missing or empty in {data_dir!r}")
    return data[split]


def cmd_eval(args) -> int:
    if not args.model:
        raise ValidationFailure("at least one --model is required")
    prepare_out_dir(args.out, args.force)
    split = _split_data(args.data, args.split)
    ages = np.asarray(split.ages)

    preds, cfgs = {}, {}
    for path in args.model:
        encoder, head, cfg_dict, meta = load_model(path)
        model_id = meta.get("model_id") or cfg_dict["training"]["pipeline"]
        if model_id in preds:
            model_id = f"{model_id}:{os.path.basename(path)}"
        preds[model_id] = enc.predict_age(encoder, head, split.volumes)
        cfgs[model_id] = cfg_dict

    paths = {}
    for model_id, p in preds.items():
        others = {k: v for k, v in preds.items() if k != model_id}
        cfg_dict = cfgs[model_id]
        prov = {"config_hash": hashlib.sha256(
                    json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16],
                "seed": cfg_dict["seed"], "version": __version__,
                "temperature": cfg_dict["rnc"]["temperature"],
                "similarity": cfg_dict["rnc"]["similarity"],
                "relu_mode": cfg_dict["gradram"]["relu_mode"],
                "split": args.split}
        covariates = {"age": ages}
        report = ev.build_report(split.ids, ages, p, model_id, prov,
                                 correlations=covariates, paired=others)
        stem = "eval" if len(preds) == 1 else f"eval_{model_id.replace(':', '_')}"
        paths[model_id] = ev.emit_report(report, args.out, stem=stem)
        print(f"{model_id}: MAE {report['mae']:.3f} +/- {report['abs_error_std']:.3f}, "
              f"R2 {report['r2']:.4f}, mean BAG {report['bag_mean']:.3f}")
    print(f"reports written to {args.out}")
    return EXIT_OK


def _assign_groups(split: "tr.SplitData", group_by: str) -> list[str]:
    if group_by == "age":
        return [gr.age_bin_name(a) for a in split.ages]
    if group_by == "sex":
        return [f"sex{int(s)}" for s in split.sexes]
    if group_by == "group":
        return [str(g) for g in split.groups]
    raise ValidationFailure(f"unknown grouping {group_by!r}")


def cmd_saliency(args) -> int:
    cfg = load_experiment_config(args.config)
    apply_seed(cfg, args.seed)
    cfg.validate()
    prepare_out_dir(args.out, args.force)
    encoder, head, cfg_dict, meta = load_model(args.model)
    split = _split_data(args.data, args.split)
    echo_config(cfg, args.out)

    model_id = meta.get("model_id") or cfg_dict["training"]["pipeline"]
    # rigidly align each subject map to the canonical atlas frame so the
    # group averages and parcel scores are not smeared by center offsets
    maps = [gr.recenter_map(
                gr.gradram(encoder, head, v, target_layer=cfg.gradram.target_layer,
                           relu_mode=cfg.gradram.relu_mode, model_id=model_id,
                           tag=str(i)),
                gr.estimate_center_offset(v))
            for i, v in zip(split.ids, split.volumes)]
    groups = _assign_groups(split, args.group_by)

    atlas = ph.reference_atlas(cfg.phantom)
    averaged = gr.group_average(maps, groups)
    emitted = 0
    for name, (gmap, size) in averaged.items():
        if size == 0:
            print(f"warning: empty group {name!r} skipped", file=sys.stderr)
            continue
        safe = str(name).replace("/", "_")
        gr.save_map(os.path.join(args.out, f"saliency_{safe}.rvol"), gmap)
        rows = gr.parcel_scores(gmap, atlas, cfg.gradram.relevance_threshold)
        gr.write_parcel_csv(os.path.join(args.out, f"parcels_{safe}.csv"), rows)
        frac = gr.informative_mass_fraction(gmap, atlas)
        print(f"group {name}: n={size}, informative mass fraction {frac:.3f}")
        emitted += 1
    print(f"{emitted} group heatmaps written to {args.out}")
    return EXIT_OK


def _sweep_value_config(cfg: ExperimentConfig, axis: str, value: int) -> ExperimentConfig:
    out = load_experiment_config(None)
    for name in _SECTION_TYPES:
        setattr(out, name, dataclasses.replace(getattr(cfg, name)))
    out.seed = cfg.seed
    if axis == "batch-size":
        out.training = dataclasses.replace(out.training, batch_size=int(value))
    elif axis == "resolution":
        dims = (int(value),) * 3
        out.phantom = dataclasses.replace(out.phantom, dims=dims)
        out.encoder = dataclasses.replace(out.encoder, input_dims=dims)
    elif axis == "depth":
        out.encoder = dataclasses.replace(out.encoder, blocks_per_stage=int(value))
    else:
        raise ValidationFailure(f"unknown sweep axis {axis!r}; have {SWEEP_AXES}")
    return out


def cmd_sweep(args) -> int:
    cfg = load_experiment_config(args.config)
    apply_seed(cfg, args.seed)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as e:
        raise ValidationFailure(f"bad --values {args.values!r}: {e}")
    if not values:
        raise ValidationFailure("--values must list at least one integer")
    # validate every point before any training starts
    configs = [_sweep_value_config(cfg, args.axis, v) for v in values]
    for c in configs:
        c.validate()
    if args.axis != "resolution" and not os.path.exists(
            os.path.join(args.data or "", "manifest.json")):
        raise ValidationFailure("--data with a manifest is required for this axis")
    prepare_out_dir(args.out, args.force)
    echo_config(cfg, args.out)

    rows = []
    for idx, (value, vcfg) in enumerate(zip(values, configs)):
        run_dir = os.path.join(args.out, f"run_{idx:02d}_{args.axis}_{value}")
        os.makedirs(run_dir, exist_ok=True)
        if args.axis == "resolution":
            data_dir = os.path.join(run_dir, "data")
            ph.generate_dataset(args.n, vcfg.phantom, data_dir, seed=vcfg.seed)
        else:
            data_dir = args.data
        data = tr.load_dataset(data_dir)
        result = tr.run_training(data, vcfg.encoder, vcfg.rnc, vcfg.augment,
                                 vcfg.training, out_dir=run_dir)
        test = data["test"]
        pred = enc.predict_age(result.encoder, result.head, test.volumes)
        mae, err_std, r2 = ev.mae_r2(pred, np.asarray(test.ages))
        rows.append({"index": idx, "axis": args.axis, "value": value,
                     "mae": mae, "abs_error_std": err_std, "r2": r2})
        print(f"[{idx}] {args.axis}={value}: MAE {mae:.3f}, R2 {r2:.4f}")

    path = os.path.join(args.out, "summary.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "axis", "value", "mae", "abs_error_std", "r2"])
        for r in rows:
            w.writerow([r["index"], r["axis"], r["value"], repr(r["mae"]),
                        repr(r["abs_error_std"]), repr(r["r2"])])
    os.replace(tmp, path)
    print(f"summary written to {path}")
    return EXIT_OK


def _markdown_eval(doc: dict) -> str:
    lines = [f"# Evaluation report: {doc['model_id']}", "",
             f"- samples: {doc['n']}",
             f"- MAE: {doc['mae']:.4f} +/- {doc['abs_error_std']:.4f}",
             f"- R2: {doc['r2']:.4f}",
             f"- mean BAG: {doc['bag_mean']:.4f} +/- {doc['bag_std']:.4f} "
             f"(t={doc['bag_ttest']['statistic']:.3f}, p={doc['bag_ttest']['p']:.4g})",
             ""]
    if doc.get("correlations"):
        lines += ["| covariate | Pearson r | p | Spearman rho | p |",
                  "|---|---|---|---|---|"]
        for c in doc["correlations"]:
            lines.append(f"| {c['covariate']} | {c['pearson_r']:.4f} | "
                         f"{c['pearson_p']:.4g} | {c['spearman_rho']:.4f} | "
                         f"{c['spearman_p']:.4g} |")
        lines.append("")
    if doc.get("paired_tests"):
        lines += ["| versus | t | df | p |", "|---|---|---|---|"]
        for t in doc["paired_tests"]:
            lines.append(f"| {t['versus']} | {t['statistic']:.4f} | "
                         f"{t['df']:.1f} | {t['p']:.4g} |")
        lines.append("")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    with open(args.input) as f:
        doc = json.load(f)
    prepare_out_dir(args.out, args.force)
    if "pipelines" in doc:       # benchmark report
        from .benchmark import render_markdown
        text = render_markdown(doc)
    elif "model_id" in doc:
        text = _markdown_eval(doc)
    else:
        raise ValidationFailure(f"{args.input}: unrecognized report document")
    path = os.path.join(args.out, "report.md")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)
    print(f"report written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phantomage",
                                description="Contrastive volumetric age "
                                "estimation on synthetic aging phantoms")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON experiment config; flags override")
        sp.add_argument("--seed", type=int, help="override every section seed")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true",
                            help="allow a nonempty output directory")

    pg = sub.add_parser("phantom", help="phantom dataset commands")
    pgsub = pg.add_subparsers(dest="phantom_command", required=True)
    g = pgsub.add_parser("gen", help="generate a phantom dataset")
    common(g)
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--group", default="NC", help="cohort tag stored per sample")
    g.add_argument("--age-offset", type=float, default=0.0,
                   help="geometry age shift for accelerated-aging cohorts")
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--pipeline", choices=tr.PIPELINES)
    t.add_argument("--resume", action="store_true",
                   help="resume from the checkpoint in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate trained models")
    common(e)
    e.add_argument("--model", action="append", required=True,
                   help="model file; repeat for paired comparisons")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=ph.SPLITS)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("saliency", help="group saliency maps and parcel scores")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=ph.SPLITS)
    s.add_argument("--group-by", default="age", choices=("age", "sex", "group"))
    s.set_defaults(func=cmd_saliency)

    w = sub.add_parser("sweep", help="train/eval across one hyperparameter axis")
    common(w)
    w.add_argument("--axis", required=True, choices=SWEEP_AXES)
    w.add_argument("--values", required=True, help="comma-separated integers")
    w.add_argument("--data", help="dataset directory (batch-size/depth axes)")
    w.add_argument("--n", type=int, default=120,
                   help="dataset size per value for the resolution axis")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="render a JSON report as markdown")
    common(r)
    r.add_argument("--input", required=True, help="eval or benchmark JSON")
    r.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ValidationFailure, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # runtime failures after validation
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
