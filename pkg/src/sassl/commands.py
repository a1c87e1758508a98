"""Implementations behind the CLI subcommands.

One output root holds a single shared dataset plus one run directory
per (ssl_method, adversary on/off) combination:

    <out>/dataset/...                     written by synth
    <out>/runs/<method>-<base|sassl>/     logs, checkpoints, reports
    <out>/report.csv, <out>/report.md     cross-run comparison

Every report is CSV plus a rendered Markdown twin, and every emitted
byte is a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import transfer
from .adversary import Discriminator, SasslPretrainer
from .checkpoint import load_checkpoint, prefixed, save_checkpoint, split_by_prefix
from .config import RunConfig, config_hash, data_fingerprint
from .contrastive import (MomentumInfoNceFramework, PredictorHead,
                          SimSiamFramework)
from .errors import DataError
from .metrics import (classification_scores, linear_probe, regression_scores,
                      segmentation_scores)
from .nn import Encoder, ProjectionHead
from .patchio import PatchSet, load_split, write_split
from .rng import derive_seed
from .synth import AugmentConfig, BatchSampler, generate_patches
from .transfer import DualEncoder, LabeledSampler, evaluation_views, make_head

# substream tags for the independent RNG consumers of one run seed
_SEED_ENCODER = 1
_SEED_PROJECTOR = 2
_SEED_PREDICTOR = 3
_SEED_DISC = 4
_SEED_QUEUE = 5
_SEED_SAMPLER = 6
_SEED_FT_SAMPLER = 7
_SEED_HEAD = 8
_SEED_DUAL = 9
_SEED_PROBE = 10
_SPLIT_TRAIN = 1
_SPLIT_TEST = 2


def dataset_dir(out: Path) -> Path:
    return out / "dataset"


def run_name(cfg: RunConfig) -> str:
    suffix = "sassl" if cfg.pretrain.sassl_enabled else "base"
    return f"{cfg.pretrain.ssl_method}-{suffix}"


def run_dir(out: Path, cfg: RunConfig) -> Path:
    return out / "runs" / run_name(cfg)


def pretrain_ckpt_dir(out: Path, cfg: RunConfig) -> Path:
    return run_dir(out, cfg) / "checkpoints" / "pretrain"


def finetune_ckpt_dir(out: Path, cfg: RunConfig, task: str) -> Path:
    return run_dir(out, cfg) / "checkpoints" / f"finetune_{task}"


def reports_dir(out: Path, cfg: RunConfig) -> Path:
    return run_dir(out, cfg) / "reports"


def effective_lambda(cfg: RunConfig) -> float:
    return cfg.pretrain.lambda_adv if cfg.pretrain.sassl_enabled else 0.0


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})


def _write_markdown_table(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["| " + " | ".join(fieldnames) + " |",
             "| " + " | ".join("---" for _ in fieldnames) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(_fmt(row.get(k)) for k in fieldnames) + " |")
    path.write_text("\n".join(lines) + "\n")


def _write_report_pair(stem: Path, fieldnames: list[str], rows: list[dict]) -> None:
    _write_csv(stem.with_suffix(".csv"), fieldnames, rows)
    _write_markdown_table(stem.with_suffix(".md"), fieldnames, rows)


def deepest_tap_size(crop: int) -> int:
    t = crop
    for _ in range(3):
        t = (t - 3) // 2 + 1
    return t


def build_framework(cfg: RunConfig, seed: int):
    m, p = cfg.model, cfg.pretrain
    encoder = Encoder(m.embed_dim, derive_seed(seed, _SEED_ENCODER))
    projector = ProjectionHead(m.embed_dim, derive_seed(seed, _SEED_PROJECTOR))
    if p.ssl_method == "simsiam":
        predictor = PredictorHead(m.embed_dim, derive_seed(seed, _SEED_PREDICTOR))
        return SimSiamFramework(encoder, projector, predictor)
    return MomentumInfoNceFramework(encoder, projector, p.temperature,
                                    p.key_momentum, p.queue_size,
                                    derive_seed(seed, _SEED_QUEUE))


def build_pretrainer(cfg: RunConfig, seed: int, train: PatchSet) -> SasslPretrainer:
    p = cfg.pretrain
    aug = AugmentConfig(crop=p.crop, flip_prob=p.flip_prob, jitter=p.jitter,
                        channel_jitter=p.channel_jitter, erase=p.erase)
    sampler = BatchSampler(train.images, train.slide_ids, p.batch_size,
                           p.group_size, aug, derive_seed(seed, _SEED_SAMPLER))
    framework = build_framework(cfg, seed)
    disc = Discriminator(cfg.model.embed_dim, derive_seed(seed, _SEED_DISC))
    return SasslPretrainer(framework, disc, sampler, effective_lambda(cfg),
                           p.tau_affinity, lr_g=p.lr, lr_d=p.lr_d,
                           sgd_momentum=p.sgd_momentum, disc_steps=p.disc_steps)


def _check_dataset(cfg: RunConfig, out: Path) -> None:
    meta_path = dataset_dir(out) / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"no dataset at {dataset_dir(out)}; run 'sassl synth' first")
    meta = json.loads(meta_path.read_text())
    if meta.get("data_fingerprint") != data_fingerprint(cfg):
        raise DataError(
            f"dataset at {dataset_dir(out)} was generated with a different "
            f"[data] config or seed; rerun 'sassl synth'")


def _load_train(cfg: RunConfig, out: Path) -> PatchSet:
    _check_dataset(cfg, out)
    return load_split(dataset_dir(out) / "train")


def _load_test(cfg: RunConfig, out: Path) -> PatchSet:
    _check_dataset(cfg, out)
    return load_split(dataset_dir(out) / "test")


def _restore_generic_encoder(cfg: RunConfig, out: Path) -> Encoder:
    ckpt = pretrain_ckpt_dir(out, cfg)
    if not (ckpt / "manifest.json").is_file():
        raise DataError(f"no pretrain checkpoint at {ckpt}; run 'sassl pretrain' first")
    arrays, _ = load_checkpoint(ckpt)
    encoder = Encoder(cfg.model.embed_dim, derive_seed(cfg.seed, _SEED_ENCODER))
    encoder.load_state_arrays(split_by_prefix(arrays, "encoder"))
    return encoder


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    d = cfg.data
    train = generate_patches(cfg.seed, d.n_slides, d.train_patches, d.patch_size,
                             d.perturbation, d.n_classes, split_tag=_SPLIT_TRAIN)
    test = generate_patches(cfg.seed, d.n_slides, d.test_patches, d.patch_size,
                            d.perturbation, d.n_classes, split_tag=_SPLIT_TEST)
    write_split(dataset_dir(out) / "train", train)
    write_split(dataset_dir(out) / "test", test)
    _write_json(dataset_dir(out) / "meta.json", {
        "data_fingerprint": data_fingerprint(cfg),
        "seed": cfg.seed,
        "n_slides": d.n_slides,
        "patch_size": d.patch_size,
        "perturbation": d.perturbation,
        "train_patches": d.train_patches,
        "test_patches": d.test_patches,
    })
    print(f"synth: wrote {len(train)} train / {len(test)} test patches "
          f"({d.n_slides} slides, perturbation {d.perturbation}) to {dataset_dir(out)}")


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    p = cfg.pretrain
    train = _load_train(cfg, out)
    trainer = build_pretrainer(cfg, cfg.seed, train)
    rows = []
    for _ in range(p.steps):
        stats = trainer.step()
        if stats["step"] % p.log_every == 0 or stats["step"] == p.steps:
            rows.append(stats)
            print(f"pretrain[{run_name(cfg)}] step {stats['step']}/{p.steps} "
                  f"ssl={stats['ssl_loss']:.4f}"
                  + (f" d={stats['d_loss']:.4f}" if stats["d_loss"] is not None else ""))
    columns = ["step", "ssl_loss", "gen_loss"]
    if p.sassl_enabled:
        columns.append("disc_loss")
        for row in rows:
            row["disc_loss"] = row["d_loss"]
    _write_csv(run_dir(out, cfg) / "logs" / "pretrain.csv", columns, rows)
    arrays = {}
    for name, module in trainer.framework.trainable_modules():
        arrays.update(prefixed(name, module.state_arrays()))
    arrays.update(prefixed("discriminator", trainer.discriminator.state_arrays()))
    save_checkpoint(pretrain_ckpt_dir(out, cfg), arrays, meta={
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "kind": "pretrain",
        "ssl_method": p.ssl_method,
        "sassl": p.sassl_enabled,
        "lambda_adv": effective_lambda(cfg),
        "steps": p.steps,
        "crop": p.crop,
    })
    _write_json(run_dir(out, cfg) / "meta.json", {
        "run": run_name(cfg),
        "ssl_method": p.ssl_method,
        "sassl": p.sassl_enabled,
        "lambda_adv": effective_lambda(cfg),
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
    })
    print(f"pretrain: saved checkpoint to {pretrain_ckpt_dir(out, cfg)}")


def cmd_finetune(cfg: RunConfig, out: Path) -> None:
    ft = cfg.finetune
    train = _load_train(cfg, out)
    generic = _restore_generic_encoder(cfg, out)
    dual = DualEncoder(generic, ft.init, derive_seed(cfg.seed, _SEED_DUAL))
    head = make_head(ft.task, cfg.model.embed_dim, cfg.data.n_classes,
                     cfg.pretrain.crop, deepest_tap_size(cfg.pretrain.crop),
                     derive_seed(cfg.seed, _SEED_HEAD))
    aug = AugmentConfig(crop=cfg.pretrain.crop, flip_prob=ft.flip_prob,
                        jitter=ft.jitter, channel_jitter=ft.channel_jitter,
                        erase=ft.erase)
    sampler = LabeledSampler(train, ft.batch_size, aug,
                             derive_seed(cfg.seed, _SEED_FT_SAMPLER))
    logs = transfer.finetune(dual, head, ft.task, sampler, ft.steps, ft.lr,
                             ft.sgd_momentum)
    _write_csv(run_dir(out, cfg) / "logs" / f"finetune_{ft.task}.csv",
               ["step", "loss"], logs)
    arrays = {}
    arrays.update(prefixed("generic", dual.generic.state_arrays()))
    arrays.update(prefixed("special", dual.special.state_arrays()))
    arrays.update(prefixed("head", head.state_arrays()))
    save_checkpoint(finetune_ckpt_dir(out, cfg, ft.task), arrays, meta={
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "kind": "finetune",
        "task": ft.task,
        "init": ft.init,
        "steps": ft.steps,
    })
    final = logs[-1]["loss"] if logs else float("nan")
    print(f"finetune[{ft.task}]: {ft.steps} steps, final loss {final:.4f}; "
          f"checkpoint at {finetune_ckpt_dir(out, cfg, ft.task)}")


def cmd_probe(cfg: RunConfig, out: Path) -> None:
    test = _load_test(cfg, out)
    encoder = _restore_generic_encoder(cfg, out)
    views, _ = evaluation_views(test, cfg.pretrain.crop)
    emb = transfer.embed_views(encoder, views)
    split_seed = derive_seed(cfg.seed, _SEED_PROBE)
    stain_acc = linear_probe(emb, test.slide_ids, split_seed)
    content_acc = linear_probe(emb, test.class_ids, split_seed)
    rows = [
        {"probe": "stain", "accuracy": stain_acc, "chance": 1.0 / cfg.data.n_slides},
        {"probe": "content", "accuracy": content_acc, "chance": 1.0 / cfg.data.n_classes},
    ]
    _write_report_pair(reports_dir(out, cfg) / "probe",
                       ["probe", "accuracy", "chance"], rows)
    print(f"probe[{run_name(cfg)}]: stain accuracy {stain_acc:.4f}, "
          f"content accuracy {content_acc:.4f}")


_EVAL_COLUMNS = {
    "regression": ("mae", "mse", "r2"),
    "segmentation": ("pa", "dice", "miou"),
}


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    ft = cfg.finetune
    test = _load_test(cfg, out)
    ckpt = finetune_ckpt_dir(out, cfg, ft.task)
    if not (ckpt / "manifest.json").is_file():
        raise DataError(f"no finetune checkpoint at {ckpt}; run 'sassl finetune' first")
    arrays, meta = load_checkpoint(ckpt)
    if meta.get("task") != ft.task:
        raise DataError(f"checkpoint task '{meta.get('task')}' does not match "
                        f"configured task '{ft.task}'")
    generic = Encoder(cfg.model.embed_dim, derive_seed(cfg.seed, _SEED_ENCODER))
    generic.load_state_arrays(split_by_prefix(arrays, "generic"))
    dual = DualEncoder(generic, "zero", derive_seed(cfg.seed, _SEED_DUAL))
    dual.special.load_state_arrays(split_by_prefix(arrays, "special"))
    head = make_head(ft.task, cfg.model.embed_dim, cfg.data.n_classes,
                     cfg.pretrain.crop, deepest_tap_size(cfg.pretrain.crop),
                     derive_seed(cfg.seed, _SEED_HEAD))
    head.load_state_arrays(split_by_prefix(arrays, "head"))
    views, masks = evaluation_views(test, cfg.pretrain.crop)
    preds = transfer.predict(ft.task, dual, head, views)
    if ft.task == "classification":
        scores = classification_scores(test.class_ids, preds, cfg.data.n_classes)
        row = {"qwk": scores["qwk"], "acc": scores["accuracy"],
               "f1_micro": scores["micro_f1"]}
        for c, f1 in enumerate(scores["f1_per_class"]):
            row[f"f1_{c}"] = f1
        columns = ["qwk", "acc"] + [f"f1_{c}" for c in
                                    range(cfg.data.n_classes)] + ["f1_micro"]
    elif ft.task == "regression":
        fractions = masks.reshape(len(masks), -1).mean(axis=1)
        scores = regression_scores(fractions, preds)
        row = dict(scores)
        columns = list(_EVAL_COLUMNS["regression"])
    else:
        scores = segmentation_scores(masks, preds)
        row = {"pa": scores["pixel_accuracy"], "dice": scores["dice"],
               "miou": scores["miou"]}
        columns = list(_EVAL_COLUMNS["segmentation"])
    _write_report_pair(reports_dir(out, cfg) / f"eval_{ft.task}", columns, [row])
    line = ", ".join(f"{k}={row[k]:.4f}" for k in columns)
    print(f"eval[{ft.task}]: {line}")


def _read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def cmd_report(cfg: RunConfig, out: Path) -> None:
    runs_root = out / "runs"
    run_dirs = sorted(p for p in runs_root.glob("*") if p.is_dir()) \
        if runs_root.is_dir() else []
    if len(run_dirs) < 2:
        raise DataError(f"report needs at least 2 completed runs under {runs_root}, "
                        f"found {len(run_dirs)}")
    rows = []
    eval_columns: list[str] = []
    for rd in run_dirs:
        meta_path = rd / "meta.json"
        if not meta_path.is_file():
            raise DataError(f"run '{rd.name}' has no meta.json; run 'sassl pretrain'")
        meta = json.loads(meta_path.read_text())
        probe_path = rd / "reports" / "probe.csv"
        if not probe_path.is_file():
            raise DataError(f"run '{rd.name}' is missing reports/probe.csv; "
                            f"run 'sassl probe'")
        probes = {r["probe"]: float(r["accuracy"]) for r in _read_csv_rows(probe_path)}
        row = {
            "run": rd.name,
            "ssl_method": meta["ssl_method"],
            "sassl": "on" if meta["sassl"] else "off",
            "stain_probe": probes["stain"],
            "content_probe": probes["content"],
        }
        for eval_path in sorted((rd / "reports").glob("eval_*.csv")):
            task = eval_path.stem[len("eval_"):]
            for name, value in _read_csv_rows(eval_path)[0].items():
                col = f"{task}_{name}"
                row[col] = float(value)
                if col not in eval_columns:
                    eval_columns.append(col)
        rows.append(row)

    base_stain = {r["ssl_method"]: r["stain_probe"] for r in rows if r["sassl"] == "off"}
    for r in rows:
        base = base_stain.get(r["ssl_method"])
        r["delta_stain"] = (r["stain_probe"] - base) if base is not None else ""

    columns = (["run", "ssl_method", "sassl", "stain_probe", "content_probe"]
               + sorted(eval_columns) + ["delta_stain"])
    _write_report_pair(out / "report", columns, rows)
    for r in rows:
        print(f"report: {r['run']} stain={r['stain_probe']:.4f} "
              f"content={r['content_probe']:.4f} delta={_fmt(r['delta_stain'])}")
    print(f"report: wrote {out / 'report.csv'} and {out / 'report.md'}")
