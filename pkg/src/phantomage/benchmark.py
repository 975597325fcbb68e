"""Desk-scale benchmark: trains the contrastive two-stage pipeline and the
end-to-end baseline on identical data and augmentation streams across
several seeds, then compares accuracy, embedding ordering, brain-age-gap
shifts on an accelerated-aging cohort, and saliency localization.

Every quantity in the report is regenerable from (spec, seed) alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from . import evalstats as ev
from . import gradram as gr
from . import phantom as ph
from . import rnc
from . import train as tr
from .augment import AugmentConfig

PIPELINE_RNC = "rnc-two-stage"
PIPELINE_E2E = "end-to-end"


@dataclass
class BenchmarkSpec:
    n_train: int = 600
    n_val: int = 75
    n_test: int = 75
    seeds: tuple = (0, 1, 2)
    delta: float = 8.0          # accelerated-cohort geometry age shift, years
    n_cohort: int = 40          # accelerated and null cohort sizes
    batch_size: int = 8
    stage1_epochs: int = 60     # reduced from the full-scale schedule to fit CPU
    stage2_epochs: int = 50
    baseline_epochs: int = 40
    patience: int = 15
    saliency_layer: str = "stage1"   # finest feature grid: sharpest localization
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    rnc: rnc.RncConfig = field(default_factory=rnc.RncConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    phantom: ph.PhantomConfig = field(default_factory=ph.PhantomConfig)

    def validate(self) -> None:
        if len(self.seeds) < 2:
            raise ValueError("comparative claims need >= 2 seeds")
        if self.n_cohort < 10:
            raise ValueError("cohort size must be >= 10")
        self.encoder.validate()
        self.rnc.validate()
        self.augment.validate()
        self.phantom.validate()

    def training_config(self, pipeline: str, seed: int) -> tr.TrainingConfig:
        return tr.TrainingConfig(
            pipeline=pipeline, batch_size=self.batch_size,
            stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs,
            baseline_epochs=self.baseline_epochs, patience=self.patience,
            seed=seed, augment_seed=seed)   # shared stream across pipelines

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


def pairwise_order_spearman(embeddings: np.ndarray, ages: np.ndarray) -> float:
    """Rank correlation between |age_i - age_j| and embedding distance over
    all unordered pairs; the ordered-representation score."""
    ages = np.asarray(ages, dtype=np.float64)
    iu = np.triu_indices(len(ages), 1)
    dy = np.abs(ages[:, None] - ages[None, :])[iu]
    diff = embeddings[:, None, :].astype(np.float64) - embeddings[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))[iu]
    rho, _ = ev.correlate(dy, dist, "spearman")
    return rho


def _untrained_model(spec: BenchmarkSpec, seed: int):
    """Fresh encoder + random head as the chance-level control."""
    cfg = dataclasses.replace(spec.encoder, init_seed=seed + 9000)
    encoder = enc.Encoder(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9001]))
    head = enc.RegressionHead(
        rng.normal(0, 1, size=cfg.embedding_dim).astype(np.float32), 60.0)
    return encoder, head


def _mean_saliency_fraction(encoder, head, volumes, atlas, layer=None,
                            relu_mode="weighted-sum"):
    # maps are rigidly aligned to the canonical atlas frame before averaging
    maps = [gr.recenter_map(
                gr.gradram(encoder, head, v, target_layer=layer,
                           relu_mode=relu_mode, tag=str(i)),
                gr.estimate_center_offset(v))
            for i, v in enumerate(volumes)]
    avg = gr.group_average(maps, ["all"] * len(maps))["all"][0]
    return gr.informative_mass_fraction(avg, atlas), avg


def _seed_dirs(out: str, seed: int) -> dict:
    base = os.path.join(out, f"seed_{seed}")
    return {"base": base,
            "data": os.path.join(base, "data"),
            "accel": os.path.join(base, "accel"),
            "null": os.path.join(base, "null"),
            "rnc": os.path.join(base, PIPELINE_RNC),
            "e2e": os.path.join(base, PIPELINE_E2E)}


def run_seed(spec: BenchmarkSpec, out: str, seed: int, log=print) -> dict:
    dirs = _seed_dirs(out, seed)
    phantom_cfg = dataclasses.replace(spec.phantom, seed=seed)
    n_total = spec.n_train + spec.n_val + spec.n_test
    ratios = (spec.n_train / n_total, spec.n_val / n_total, spec.n_test / n_total)

    t0 = time.time()
    if not os.path.exists(os.path.join(dirs["data"], "manifest.json")):
        ph.generate_dataset(n_total, phantom_cfg, dirs["data"], ratios=ratios,
                            seed=seed)
    if not os.path.exists(os.path.join(dirs["accel"], "manifest.json")):
        ph.generate_dataset(spec.n_cohort, phantom_cfg, dirs["accel"],
                            seed=seed + 101, group="ACC", age_offset=spec.delta)
    if not os.path.exists(os.path.join(dirs["null"], "manifest.json")):
        ph.generate_dataset(spec.n_cohort, phantom_cfg, dirs["null"],
                            seed=seed + 202, group="NULL", age_offset=0.0)
    log(f"[seed {seed}] data ready ({time.time() - t0:.0f}s)")

    data = tr.load_dataset(dirs["data"])
    test = data["test"]
    ages = np.asarray(test.ages)

    t0 = time.time()
    res_rnc = tr.train_rnc_two_stage(data, spec.encoder, spec.rnc, spec.augment,
                                     spec.training_config(PIPELINE_RNC, seed),
                                     out_dir=dirs["rnc"], resume=True)
    log(f"[seed {seed}] {PIPELINE_RNC} trained ({time.time() - t0:.0f}s)")
    t0 = time.time()
    res_e2e = tr.train_end_to_end(data, spec.encoder, spec.augment,
                                  spec.training_config(PIPELINE_E2E, seed),
                                  out_dir=dirs["e2e"], resume=True)
    log(f"[seed {seed}] {PIPELINE_E2E} trained ({time.time() - t0:.0f}s)")

    pred_rnc = enc.predict_age(res_rnc.encoder, res_rnc.head, test.volumes)
    pred_e2e = enc.predict_age(res_e2e.encoder, res_e2e.head, test.volumes)
    mae_rnc, std_rnc, r2_rnc = ev.mae_r2(pred_rnc, ages)
    mae_e2e, std_e2e, r2_e2e = ev.mae_r2(pred_e2e, ages)
    paired = ev.paired_abs_error_ttest(pred_rnc, pred_e2e, ages)

    # ordered-representation scores on held-out pairs
    emb_trained = enc.embed(res_rnc.encoder, test.volumes)
    untrained_enc, untrained_head = _untrained_model(spec, seed)
    emb_untrained = enc.embed(untrained_enc, test.volumes)
    rho_trained = pairwise_order_spearman(emb_trained, ages)
    rho_untrained = pairwise_order_spearman(emb_untrained, ages)

    # brain-age-gap study on the accelerated and null cohorts (RNC model)
    def cohort_bag(cohort_dir):
        cohort = tr.load_dataset(cohort_dir)
        vols = [v for split in ph.SPLITS for v in cohort[split].volumes]
        labels = np.concatenate([cohort[s].ages for s in ph.SPLITS])
        pred = enc.predict_age(res_rnc.encoder, res_rnc.head, vols)
        return pred - labels

    bag_control = pred_rnc - ages
    bag_accel = cohort_bag(dirs["accel"])
    bag_null = cohort_bag(dirs["null"])
    accel_t = ev.one_sample_ttest(bag_accel)
    accel_vs_control = ev.welch_ttest(bag_accel, bag_control)
    null_vs_control = ev.welch_ttest(bag_null, bag_control)

    # saliency localization, trained vs chance-level control
    atlas = ph.reference_atlas(phantom_cfg)
    frac_trained, avg_map = _mean_saliency_fraction(
        res_rnc.encoder, res_rnc.head, test.volumes, atlas, spec.saliency_layer)
    frac_untrained, _ = _mean_saliency_fraction(
        untrained_enc, untrained_head, test.volumes, atlas, spec.saliency_layer)
    gr.save_map(os.path.join(dirs["base"], "saliency_test_mean.rvol"), avg_map)
    log(f"[seed {seed}] mae rnc {mae_rnc:.3f} e2e {mae_e2e:.3f}, "
        f"rho {rho_trained:.3f}/{rho_untrained:.3f}, "
        f"saliency {frac_trained:.3f}/{frac_untrained:.3f}")

    return {
        "seed": seed,
        "rnc": {"mae": mae_rnc, "abs_error_std": std_rnc, "r2": r2_rnc},
        "e2e": {"mae": mae_e2e, "abs_error_std": std_e2e, "r2": r2_e2e},
        "paired_abs_error_ttest": {"statistic": paired.statistic, "df": paired.df,
                                   "p": paired.p_value},
        "spearman_trained": rho_trained,
        "spearman_untrained": rho_untrained,
        "bag": {
            "control_mean": float(bag_control.mean()),
            "accel_mean": float(bag_accel.mean()),
            "null_mean": float(bag_null.mean()),
            "accel_minus_control": float(bag_accel.mean() - bag_control.mean()),
            "accel_p_vs_zero": accel_t.p_value,
            "accel_p_vs_control": accel_vs_control.p_value,
            "null_p_vs_control": null_vs_control.p_value,
        },
        "saliency": {"trained_fraction": frac_trained,
                     "untrained_fraction": frac_untrained},
    }


def run_benchmark(spec: BenchmarkSpec, out: str, log=print) -> dict:
    spec.validate()
    os.makedirs(out, exist_ok=True)
    per_seed = [run_seed(spec, out, s, log=log) for s in spec.seeds]

    def mean_over(path):
        vals = []
        for row in per_seed:
            v = row
            for k in path:
                v = v[k]
            vals.append(v)
        return float(np.mean(vals))

    report = {
        "spec": spec.to_dict(),
        "pipelines": [PIPELINE_RNC, PIPELINE_E2E],
        "per_seed": per_seed,
        "mean": {
            "rnc_mae": mean_over(("rnc", "mae")),
            "e2e_mae": mean_over(("e2e", "mae")),
            "rnc_r2": mean_over(("rnc", "r2")),
            "e2e_r2": mean_over(("e2e", "r2")),
            "spearman_trained": mean_over(("spearman_trained",)),
            "spearman_untrained": mean_over(("spearman_untrained",)),
            "bag_accel_minus_control": mean_over(("bag", "accel_minus_control")),
            "saliency_trained_fraction": mean_over(("saliency", "trained_fraction")),
            "saliency_untrained_fraction": mean_over(("saliency", "untrained_fraction")),
        },
    }
    path = os.path.join(out, "benchmark.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)

    md_path = os.path.join(out, "benchmark.md")
    tmp = md_path + ".tmp"
    with open(tmp, "w") as f:
        f.write(render_markdown(report))
    os.replace(tmp, md_path)
    log(f"benchmark report written to {path}")
    return report


def render_markdown(report: dict) -> str:
    lines = ["# Benchmark report", "",
             f"Pipelines: {', '.join(report['pipelines'])}", "",
             "| seed | pipeline | MAE | std abs err | R2 | paired t | p |",
             "|---|---|---|---|---|---|---|"]
    for row in report["per_seed"]:
        t = row["paired_abs_error_ttest"]
        lines.append(f"| {row['seed']} | rnc-two-stage | {row['rnc']['mae']:.3f} | "
                     f"{row['rnc']['abs_error_std']:.3f} | {row['rnc']['r2']:.4f} | "
                     f"{t['statistic']:.3f} | {t['p']:.4g} |")
        lines.append(f"| {row['seed']} | end-to-end | {row['e2e']['mae']:.3f} | "
                     f"{row['e2e']['abs_error_std']:.3f} | {row['e2e']['r2']:.4f} "
                     f"| | |")
    m = report["mean"]
    lines += ["| mean | rnc-two-stage | %.3f | | %.4f | | |" % (m["rnc_mae"], m["rnc_r2"]),
              "| mean | end-to-end | %.3f | | %.4f | | |" % (m["e2e_mae"], m["e2e_r2"]),
              "",
              "## Embedding ordering (pairwise Spearman)", "",
              "| seed | trained | untrained |", "|---|---|---|"]
    for row in report["per_seed"]:
        lines.append(f"| {row['seed']} | {row['spearman_trained']:.3f} | "
                     f"{row['spearman_untrained']:.3f} |")
    lines += ["",
              "## Brain age gap (accelerated cohort)", "",
              "| seed | control mean | accel mean | accel-control | p vs zero | null p vs control |",
              "|---|---|---|---|---|---|"]
    for row in report["per_seed"]:
        b = row["bag"]
        lines.append(f"| {row['seed']} | {b['control_mean']:.3f} | {b['accel_mean']:.3f} "
                     f"| {b['accel_minus_control']:.3f} | {b['accel_p_vs_zero']:.4g} "
                     f"| {b['null_p_vs_control']:.4g} |")
    lines += ["",
              "## Saliency localization (informative mass fraction)", "",
              "| seed | trained | untrained |", "|---|---|---|"]
    for row in report["per_seed"]:
        s = row["saliency"]
        lines.append(f"| {row['seed']} | {s['trained_fraction']:.3f} | "
                     f"{s['untrained_fraction']:.3f} |")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="phantomage-benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated, default 0,1,2")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--stage1-epochs", type=int, default=None)
    p.add_argument("--baseline-epochs", type=int, default=None)
    args = p.parse_args(argv)
    spec = BenchmarkSpec()
    if args.seeds:
        spec.seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.n_train:
        scale = args.n_train / spec.n_train
        spec.n_train = args.n_train
        spec.n_val = max(10, int(round(spec.n_val * scale)))
        spec.n_test = max(10, int(round(spec.n_test * scale)))
    if args.stage1_epochs:
        spec.stage1_epochs = args.stage1_epochs
    if args.baseline_epochs:
        spec.baseline_epochs = args.baseline_epochs
    run_benchmark(spec, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
