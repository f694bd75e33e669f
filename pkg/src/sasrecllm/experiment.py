"""Experiment orchestration: configs, run dispatch, reports, verification.

A run directory is the unit of bookkeeping: `prepare` writes the split
bundle, `train` writes per-seed epoch logs / predictions / checkpoints,
`evaluate` writes a report whose every number is recomputable from the
logged per-sample (label, score) pairs, and `verify` actually recomputes
them. Relative improvement between two reports is the mean over AUC and
UAUC of (candidate - reference) / reference.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig, baseline_mc, baseline_mf, baseline_ncf, baseline_rnn
from .data import (
    DataError,
    SplitBundle,
    binarize,
    build_warm_cold,
    parse_amazon_books,
    parse_movielens,
    reduce_amazon,
    split_8_1_1,
    train_histories,
)
from .fusion import MappingConfig, MappingLayer, build_prompt
from .llm import LlmConfig, TinyDecoder, Vocab
from .metrics import METRIC_COLUMNS, MetricReport, ScoredExample, evaluate_examples
from .rng import RngStream
from .sasrec import SasrecConfig, SasrecModel
from .synthetic import SyntheticConfig, generate_synthetic
from .training import (
    EPOCH_LOG_COLUMNS,
    ConfigError,
    FreezeMask,
    HybridSystem,
    Runner,
    TrainConfig,
    dual_stage_orchestrate,
    load_checkpoint,
    pretrain_sasrec,
    set_freeze,
)

LLM_MODELS = ("sasrecllm", "tallrec_variant", "icl_variant")
ALL_MODELS = LLM_MODELS + ("sasrec", "mf", "ncf", "mc", "rnn")

REPORT_COLUMNS = ["model", "seed", "split"] + METRIC_COLUMNS + ["seconds", "config_hash"]

# desk profile targets < 30 min CPU end to end; the full-scale profile mirrors
# the reference experimental setup and is not expected to run on a desk
PROFILES = {
    "desk": dict(d1=32, d2=64, llm_layers=2, stage_a_batch=128, max_epochs=40),
    "full": dict(d1=64, d2=128, llm_layers=4, stage_a_batch=1028, max_epochs=300),
}


@dataclass(frozen=True)
class ExperimentConfig:
    # [data]
    dataset: str = "synthetic"
    ratings_path: str = ""
    movies_path: str = ""
    csv_path: str = ""
    bundle_path: str = ""
    synthetic_users: int = 120
    synthetic_items: int = 60
    synthetic_groups: int = 4
    synthetic_cold_fraction: float = 0.25
    collab_strength: float = 2.0
    text_strength: float = 1.2
    data_seed: int = 0
    # [model]
    model: str = "sasrecllm"
    d1: int = 32
    n: int = 25
    blocks: int = 2
    heads: int = 4
    dropout: float = 0.2
    d2: int = 64
    llm_layers: int = 2
    llm_heads: int = 4
    context_len: int = 160
    lora_rank: int = 16
    lora_alpha: float = 16.0
    proj_token_num: int = 1
    d_exp: int = 0  # 0 = default (2 * d2)
    desk_scale: bool = True
    # [train]
    seeds: tuple[int, ...] = (0,)
    batch_size: int = 16
    stage_a_batch: int = 128
    stage_a_epochs: int = 60
    stage_b_epochs: int = 30
    stage_c_epochs: int = 30
    baseline_epochs: int = 60
    checkpoint_every: int = 8
    early_stop_patience: int = 10
    monitor: str = "auc"
    peak_lr: float = 1e-2
    stage_a_lr: float = 5e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    # [eval]
    baseline_report: str = ""

    def __post_init__(self):
        if self.dataset not in ("movielens", "amazon", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.model not in ALL_MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            num_users=self.synthetic_users,
            num_items=self.synthetic_items,
            groups=self.synthetic_groups,
            cold_fraction=self.synthetic_cold_fraction,
            collab_strength=self.collab_strength,
            text_strength=self.text_strength,
            seed=self.data_seed,
        )

    def canonical(self) -> str:
        pairs = []
        for f in fields(self):
            pairs.append(f"{f.name}={getattr(self, f.name)!r}")
        return "\n".join(pairs)


_SECTION_FIELDS = {
    "data": ("dataset", "ratings_path", "movies_path", "csv_path", "bundle_path",
             "synthetic_users", "synthetic_items", "synthetic_groups",
             "synthetic_cold_fraction", "collab_strength", "text_strength", "data_seed"),
    "model": ("model", "d1", "n", "blocks", "heads", "dropout", "d2", "llm_layers",
              "llm_heads", "context_len", "lora_rank", "lora_alpha",
              "proj_token_num", "d_exp", "desk_scale"),
    "train": ("seeds", "batch_size", "stage_a_batch", "stage_a_epochs",
              "stage_b_epochs", "stage_c_epochs", "baseline_epochs",
              "checkpoint_every", "early_stop_patience", "monitor", "peak_lr",
              "stage_a_lr", "warmup_frac", "weight_decay", "grad_clip"),
    "eval": ("baseline_report",),
}


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """INI `key = value` sections [data] [model] [train] [eval]."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(path.read_text(encoding="utf-8"))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    defaults = ExperimentConfig()
    values: dict = {}
    known = {name: f for f in fields(ExperimentConfig) for name in [f.name]}
    for section, names in _SECTION_FIELDS.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = _parse_value(raw, getattr(defaults, key), key)
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"{path}: unknown section [{section}]")
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in known:
                raise ConfigError(f"unknown override {key!r}")
            values[key] = val
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def apply_profile(config: ExperimentConfig, profile: str) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    changes = dict(PROFILES[profile])
    max_epochs = changes.pop("max_epochs")
    return replace(config, **changes,
                   desk_scale=(profile == "desk"),
                   stage_a_epochs=min(config.stage_a_epochs, max_epochs) if profile == "desk"
                   else max_epochs)


# -- data preparation -----------------------------------------------------------


def prepare_bundle(config: ExperimentConfig) -> SplitBundle:
    if config.dataset == "movielens":
        records, _ = parse_movielens(config.ratings_path, config.movies_path)
    elif config.dataset == "amazon":
        records, _ = parse_amazon_books(config.csv_path)
        records = reduce_amazon(records)
    else:
        records = generate_synthetic(config.synthetic_config())
    return build_warm_cold(split_8_1_1(binarize(records)))


def cmd_prepare(config: ExperimentConfig, run_dir: str | Path) -> dict:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bundle = prepare_bundle(config)
    bundle_path = Path(config.bundle_path) if config.bundle_path else run_dir / "bundle.tsv"
    bundle.save(bundle_path)
    stats = bundle.stats()
    lines = [f"{k}={v}" for k, v in stats.items()]
    (run_dir / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return stats


def load_bundle(config: ExperimentConfig, run_dir: str | Path) -> SplitBundle:
    bundle_path = Path(config.bundle_path) if config.bundle_path else Path(run_dir) / "bundle.tsv"
    return SplitBundle.load(bundle_path)


def config_hash(config: ExperimentConfig, bundle_path: str | Path | None = None) -> str:
    """Pins every hyperparameter plus the dataset bytes."""
    h = hashlib.sha256(config.canonical().encode())
    if bundle_path is not None and Path(bundle_path).exists():
        h.update(Path(bundle_path).read_bytes())
    return h.hexdigest()[:16]


# -- system construction ----------------------------------------------------------


def build_vocab(bundle: SplitBundle, config: ExperimentConfig) -> Vocab:
    titles = sorted({e.title for e in bundle.all_examples()}
                    | {t for e in bundle.all_examples() for _, t in e.history})
    template = build_prompt(["x"], "x", 0, 0).render(include_ids=True)
    return Vocab.build(titles + [template])


def build_system(config: ExperimentConfig, bundle: SplitBundle, seed: int) -> HybridSystem:
    vocab = build_vocab(bundle, config)
    rng = RngStream(seed)
    sasrec = SasrecModel(
        SasrecConfig(num_items=bundle.num_items, d1=config.d1, n=config.n,
                     blocks=config.blocks, heads=config.heads, dropout=config.dropout),
        rng.spawn("sasrec"),
    )
    llm = TinyDecoder(
        LlmConfig(vocab_size=len(vocab), d2=config.d2, layers=config.llm_layers,
                  heads=config.llm_heads, context_len=config.context_len),
        rng.spawn("llm"),
    )
    llm.attach_lora(rank=config.lora_rank, alpha=config.lora_alpha, rng=rng.spawn("lora"))
    mapping = MappingLayer(
        MappingConfig(d1=config.d1, d2=config.d2,
                      d_exp=config.d_exp or None,
                      proj_token_num=config.proj_token_num),
        rng.spawn("mapping"),
    )
    titles: dict[int, str] = {}
    for e in bundle.all_examples():
        titles.setdefault(e.item, e.title)
        for i, t in e.history:
            titles.setdefault(i, t)
    system = HybridSystem(sasrec, mapping, llm, vocab, item_titles=titles)
    system.sasrec.user_histories = train_histories(bundle.train)
    return system


def stage_configs(config: ExperimentConfig, seed: int) -> tuple[TrainConfig, TrainConfig, TrainConfig]:
    base = TrainConfig(
        batch_size=config.batch_size, checkpoint_every=config.checkpoint_every,
        early_stop_patience=config.early_stop_patience, monitor=config.monitor,
        peak_lr=config.peak_lr, warmup_frac=config.warmup_frac,
        weight_decay=config.weight_decay, grad_clip=config.grad_clip, seed=seed,
    )
    stage_a = replace(base, batch_size=config.stage_a_batch,
                      max_epochs=config.stage_a_epochs, peak_lr=config.stage_a_lr)
    stage_b = replace(base, max_epochs=config.stage_b_epochs)
    stage_c = replace(base, max_epochs=config.stage_c_epochs)
    return stage_a, stage_b, stage_c


# -- file emission ------------------------------------------------------------------


def write_epoch_log(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EPOCH_LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


PREDICTION_COLUMNS = ["stage", "epoch", "split", "user", "item", "label", "score"]


def write_predictions(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PREDICTION_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["score"] = repr(float(row["score"]))
            writer.writerow(out)


def read_predictions(path: Path) -> list[dict]:
    with path.open(encoding="utf-8", newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def write_report(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_report(path: Path) -> list[dict]:
    if not Path(path).exists():
        raise DataError(f"missing report: {path}")
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def report_row(model: str, seed, split: str, report: MetricReport,
               seconds: float, chash: str) -> dict:
    row = {"model": model, "seed": seed, "split": split,
           "seconds": f"{seconds:.3f}", "config_hash": chash}
    for col, val in zip(METRIC_COLUMNS, report.csv_row()):
        row[col] = val
    return row


def aggregate_rows(model: str, split: str, reports: list[MetricReport],
                   seconds: float, chash: str) -> list[dict]:
    """mean and stddev rows across seeds (population stddev)."""
    out = []
    for stat in ("mean", "std"):
        row = {"model": model, "seed": stat, "split": split,
               "seconds": f"{seconds:.3f}", "config_hash": chash}
        for col in METRIC_COLUMNS:
            vals = [getattr(r, col) for r in reports]
            vals = [v for v in vals if not (isinstance(v, float) and math.isnan(v))]
            if not vals:
                row[col] = ""
            elif stat == "mean":
                row[col] = f"{float(np.mean(vals)):.6f}"
            else:
                row[col] = f"{float(np.std(vals)):.6f}"
        out.append(row)
    return out


# -- training dispatch -----------------------------------------------------------


def train_one_seed(config: ExperimentConfig, bundle: SplitBundle, seed: int,
                   seed_dir: Path, chash: str, resume: bool = False) -> dict:
    """Train config.model for one seed; returns summary info."""
    seed_dir.mkdir(parents=True, exist_ok=True)
    stage_a, stage_b, stage_c = stage_configs(config, seed)
    t0 = time.perf_counter()
    log_rows: list[dict] = []
    predictions: list[dict] = []
    stages_meta: list[str] = []

    if config.model in LLM_MODELS or config.model == "sasrec":
        system = build_system(config, bundle, seed)
        system.vocab.save(seed_dir / "vocab.txt")

    if config.model == "sasrecllm":
        skip_stage_a = False
        ckpt_a = seed_dir / "checkpoints" / "stage_a" / "best"
        if resume and (ckpt_a / "manifest.txt").exists():
            load_checkpoint(ckpt_a, system, components=("sasrec",))
            stages_meta.append("stage_a resumed_from_best=1")
            skip_stage_a = True
        results = dual_stage_orchestrate(system, bundle, seed_dir / "checkpoints",
                                         stage_a, stage_b, stage_c,
                                         skip_stage_a=skip_stage_a)
        offset = 0
        for name in ("stage_a", "stage_b", "stage_c"):
            res = results[name]
            log_rows.extend(res.state.log_rows)
            predictions.extend(res.predictions)
            epochs = res.state.epoch
            stages_meta.append(
                f"{name} first_epoch={offset + 1} last_epoch={offset + epochs} "
                f"best_epoch={offset + res.state.best_epoch} "
                f"best_value={res.state.best_value!r}"
            )
            offset += epochs
    elif config.model == "tallrec_variant":
        set_freeze(system, FreezeMask(lora=True))
        runner = Runner(system, stage_b, encode="textual", stage="stage_b",
                        run_dir=seed_dir / "checkpoints" / "stage_b")
        state = runner.fit(bundle.train, bundle.validation)
        load_checkpoint(seed_dir / "checkpoints" / "stage_b" / "best", system)
        log_rows.extend(state.log_rows)
        predictions.extend(runner.predictions)
        stages_meta.append(
            f"stage_b first_epoch=1 last_epoch={state.epoch} "
            f"best_epoch={state.best_epoch} best_value={state.best_value!r}"
        )
    elif config.model == "icl_variant":
        # untrained: persist the initialized system so evaluate can load it
        from .training import save_checkpoint

        save_checkpoint(seed_dir / "checkpoints" / "init", system, 0,
                        config.monitor, float("nan"))
        stages_meta.append("icl no_training=1")
    elif config.model == "sasrec":
        state = pretrain_sasrec(system, bundle, stage_a,
                                seed_dir / "checkpoints" / "stage_a")
        load_checkpoint(seed_dir / "checkpoints" / "stage_a" / "best", system,
                        components=("sasrec",))
        log_rows.extend(state.log_rows)
        stages_meta.append(
            f"stage_a first_epoch=1 last_epoch={state.epoch} "
            f"best_epoch={state.best_epoch} best_value={state.best_value!r}"
        )
    else:
        return _train_baseline(config, bundle, seed, seed_dir, chash, t0)

    write_epoch_log(seed_dir / "epochs.csv", log_rows)
    write_predictions(seed_dir / "predictions.csv", predictions)
    (seed_dir / "stages.txt").write_text("\n".join(stages_meta) + "\n", encoding="utf-8")
    return {"seconds": time.perf_counter() - t0, "stages": stages_meta}


def _baseline_eval_splits(bundle: SplitBundle) -> dict:
    return {"test": bundle.test, "warm_test": bundle.warm_test,
            "cold_test": bundle.cold_test, "validation": bundle.validation}


def _train_baseline(config: ExperimentConfig, bundle: SplitBundle, seed: int,
                    seed_dir: Path, chash: str, t0: float) -> dict:
    bcfg = BaselineConfig(epochs=config.baseline_epochs, seed=seed,
                          lr=config.peak_lr if config.model != "mc" else 0.0,
                          max_history=config.n)
    splits = _baseline_eval_splits(bundle)
    if config.model == "mf":
        model, reports = baseline_mf(bundle.train, splits, bcfg,
                                     bundle.num_users, bundle.num_items)
    elif config.model == "ncf":
        model, reports = baseline_ncf(bundle.train, splits, bcfg,
                                      bundle.num_users, bundle.num_items)
    elif config.model == "mc":
        model, reports = baseline_mc(bundle.train, splits, bundle.num_items)
    elif config.model == "rnn":
        model, reports = baseline_rnn(bundle.train, splits, bcfg, bundle.num_items)
    else:
        raise ConfigError(f"unknown baseline {config.model!r}")
    predictions = []
    for split_name, split in splits.items():
        for e in split:
            predictions.append({
                "stage": "final", "epoch": 0, "split": split_name,
                "user": e.user, "item": e.item, "label": e.label,
                "score": model.predict_proba(e),
            })
    write_predictions(seed_dir / "predictions_eval.csv", predictions)
    seconds = time.perf_counter() - t0
    rows = []
    for split_name in ("test", "warm_test", "cold_test", "validation"):
        if split_name in reports:
            rows.append(report_row(config.model, seed, split_name,
                                   reports[split_name], seconds, chash))
    write_report(seed_dir / "report.csv", rows)
    (seed_dir / "stages.txt").write_text(
        f"baseline epochs={config.baseline_epochs}\n", encoding="utf-8")
    return {"seconds": seconds, "stages": ["baseline"]}


def cmd_train(config: ExperimentConfig, run_dir: str | Path, resume: bool = False) -> dict:
    run_dir = Path(run_dir)
    bundle = load_bundle(config, run_dir)
    chash = config_hash(config, bundle_path=config.bundle_path or run_dir / "bundle.tsv")
    (run_dir / "config_hash.txt").write_text(chash + "\n", encoding="utf-8")
    out = {}
    for seed in config.seeds:
        seed_dir = run_dir / f"seed_{seed}"
        if resume and (seed_dir / "stages.txt").exists():
            out[seed] = {"seconds": 0.0, "stages": ["already complete, skipped"]}
            continue
        out[seed] = train_one_seed(config, bundle, seed, seed_dir, chash, resume=resume)
    return out


# -- evaluation -----------------------------------------------------------------


def _rebuild_trained_system(config: ExperimentConfig, bundle: SplitBundle,
                            seed: int, seed_dir: Path) -> HybridSystem:
    system = build_system(config, bundle, seed)
    ckpt_root = seed_dir / "checkpoints"
    if config.model == "sasrecllm":
        load_checkpoint(ckpt_root / "stage_c" / "best", system)
    elif config.model == "tallrec_variant":
        load_checkpoint(ckpt_root / "stage_b" / "best", system)
    elif config.model == "icl_variant":
        load_checkpoint(ckpt_root / "init", system)
    elif config.model == "sasrec":
        load_checkpoint(ckpt_root / "stage_a" / "best", system, components=("sasrec",))
    return system


def evaluate_system(system: HybridSystem, config: ExperimentConfig,
                    bundle: SplitBundle) -> tuple[dict[str, MetricReport], list[dict]]:
    from .training import predict_example
    from .tensor import no_grad

    encode = "hybrid" if config.model == "sasrecllm" else "textual"
    reports: dict[str, MetricReport] = {}
    predictions: list[dict] = []
    for split_name, split in _baseline_eval_splits(bundle).items():
        if not split:
            continue
        scored = []
        with no_grad():
            for e in split:
                if config.model == "sasrec":
                    score = system.sasrec.predict_proba(
                        system.sasrec.user_histories.get(e.user, []), e.item)
                else:
                    score = float(predict_example(system, e, encode,
                                                  history_source="snapshot").data)
                scored.append(ScoredExample(user=e.user, label=e.label, score=score))
                predictions.append({
                    "stage": "final", "epoch": 0, "split": split_name,
                    "user": e.user, "item": e.item, "label": e.label, "score": score,
                })
        reports[split_name] = evaluate_examples(scored)
    return reports, predictions


def cmd_evaluate(config: ExperimentConfig, run_dir: str | Path) -> list[dict]:
    run_dir = Path(run_dir)
    bundle = load_bundle(config, run_dir)
    chash = config_hash(config, bundle_path=config.bundle_path or run_dir / "bundle.tsv")
    rows: list[dict] = []
    per_split: dict[str, list[MetricReport]] = {}
    t0 = time.perf_counter()
    for seed in config.seeds:
        seed_dir = run_dir / f"seed_{seed}"
        if config.model in ("mf", "ncf", "mc", "rnn"):
            seed_rows = read_report(seed_dir / "report.csv")
            rows.extend(seed_rows)
            for row in seed_rows:
                report = MetricReport(**{c: float(row[c]) if row[c] else float("nan")
                                         for c in METRIC_COLUMNS})
                per_split.setdefault(row["split"], []).append(report)
            continue
        system = _rebuild_trained_system(config, bundle, seed, seed_dir)
        reports, predictions = evaluate_system(system, config, bundle)
        write_predictions(seed_dir / "predictions_eval.csv", predictions)
        for split_name, report in reports.items():
            rows.append(report_row(config.model, seed, split_name, report,
                                   time.perf_counter() - t0, chash))
            per_split.setdefault(split_name, []).append(report)
    for split_name, reports_ in sorted(per_split.items()):
        rows.extend(aggregate_rows(config.model, split_name, reports_,
                                   time.perf_counter() - t0, chash))
    write_report(run_dir / "report.csv", rows)
    if config.baseline_report:
        base_rows = read_report(config.baseline_report)
        imp = rel_improvement_from_rows(rows, base_rows, split="test")
        (run_dir / "rel_improvement.txt").write_text(f"{imp:.6f}\n", encoding="utf-8")
    return rows


def rel_improvement(cand_auc: float, cand_uauc: float,
                    ref_auc: float, ref_uauc: float) -> float:
    """Mean over AUC and UAUC of (candidate - reference) / reference."""
    return 0.5 * ((cand_auc - ref_auc) / ref_auc + (cand_uauc - ref_uauc) / ref_uauc)


def _mean_row(rows: list[dict], split: str) -> dict:
    for row in rows:
        if row["split"] == split and row["seed"] == "mean":
            return row
    for row in rows:
        if row["split"] == split:
            return row
    raise DataError(f"no report row for split {split!r}")


def rel_improvement_from_rows(cand_rows: list[dict], ref_rows: list[dict],
                              split: str = "test") -> float:
    cand = _mean_row(cand_rows, split)
    ref = _mean_row(ref_rows, split)
    if cand.get("config_hash") and ref.get("config_hash") and \
            cand["config_hash"] != ref["config_hash"]:
        raise ConfigError(
            "refusing Rel. Imp. between reports with different config hashes "
            f"({cand['config_hash']} vs {ref['config_hash']})"
        )
    return rel_improvement(float(cand["auc"]), float(cand["uauc"]),
                           float(ref["auc"]), float(ref["uauc"]))


# -- ablation, figure data, verification -------------------------------------------


ABLATION_COLUMNS = ["category", "model", "logloss", "precision", "recall",
                    "f1", "accuracy", "auc", "uauc", "rel_imp_vs_benchmark"]


def cmd_ablate(run_dirs: dict[str, str | Path], out_path: str | Path,
               benchmark: str = "icl_variant") -> list[dict]:
    """Three-way comparison (encoder-only, text-only, hybrid) vs a benchmark."""
    categories = {"sasrec": "sequential", "tallrec_variant": "llm",
                  "sasrecllm": "hybrid", "icl_variant": "llm"}
    reports = {name: read_report(Path(d) / "report.csv") for name, d in run_dirs.items()}
    if benchmark not in reports:
        raise DataError(f"ablation benchmark {benchmark!r} has no run dir")
    hashes = {r[0]["config_hash"] for r in reports.values() if r}
    bench = _mean_row(reports[benchmark], "test")
    rows = []
    for name, rep in reports.items():
        mean = _mean_row(rep, "test")
        row = {"category": categories.get(name, "other"), "model": name}
        for col in ("logloss", "precision", "recall", "f1", "accuracy", "auc", "uauc"):
            row[col] = mean[col]
        row["rel_imp_vs_benchmark"] = (
            "" if name == benchmark else
            f"{rel_improvement(float(mean['auc']), float(mean['uauc']), float(bench['auc']), float(bench['uauc'])):.6f}"
        )
        rows.append(row)
    if len(hashes) > 1:
        raise ConfigError(f"ablation members ran on different configs: {sorted(hashes)}")
    with Path(out_path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_report(run_dir: str | Path, out_dir: str | Path | None = None) -> dict:
    """Plot-ready CSVs: training curves, score histograms, warm/cold bars."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    emitted = {}

    curve_rows = []
    boundary_rows = []
    for seed_dir in sorted(run_dir.glob("seed_*")):
        epochs_path = seed_dir / "epochs.csv"
        if not epochs_path.exists():
            continue
        with epochs_path.open(encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        seen_stages: list[str] = []
        global_epoch = 0
        last_stage_epoch: dict[str, int] = {}
        for row in rows:
            if row["stage"] not in seen_stages:
                seen_stages.append(row["stage"])
            if row["split"] == "train":
                global_epoch += 1
            out = dict(row)
            out["seed_dir"] = seed_dir.name
            out["global_epoch"] = global_epoch
            out["stage_index"] = seen_stages.index(row["stage"])
            curve_rows.append(out)
            last_stage_epoch[row["stage"]] = global_epoch
        start = 1
        for stage in seen_stages:
            boundary_rows.append({
                "seed_dir": seed_dir.name, "stage": stage,
                "first_global_epoch": start,
                "last_global_epoch": last_stage_epoch[stage],
            })
            start = last_stage_epoch[stage] + 1
    if curve_rows:
        path = out_dir / "training_curves.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["seed_dir", "global_epoch", "stage_index"] + EPOCH_LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(curve_rows)
        emitted["training_curves"] = path
        bpath = out_dir / "stage_boundaries.csv"
        with bpath.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["seed_dir", "stage",
                                                    "first_global_epoch",
                                                    "last_global_epoch"])
            writer.writeheader()
            writer.writerows(boundary_rows)
        emitted["stage_boundaries"] = bpath

    hist_rows = []
    bins = np.linspace(0.0, 1.0, 21)
    for seed_dir in sorted(run_dir.glob("seed_*")):
        pred_path = seed_dir / "predictions_eval.csv"
        if not pred_path.exists():
            continue
        preds = read_predictions(pred_path)
        by_key: dict[tuple, list[float]] = {}
        for p in preds:
            by_key.setdefault((p["split"], p["label"]), []).append(float(p["score"]))
        for (split, label), scores in sorted(by_key.items()):
            counts, _ = np.histogram(np.clip(scores, 0.0, 1.0 - 1e-12), bins=bins)
            for lo, count in zip(bins[:-1], counts):
                hist_rows.append({
                    "seed_dir": seed_dir.name, "split": split, "label": label,
                    "bin_low": f"{lo:.2f}", "count": int(count),
                })
    if hist_rows:
        path = out_dir / "prediction_histogram.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["seed_dir", "split", "label",
                                                    "bin_low", "count"])
            writer.writeheader()
            writer.writerows(hist_rows)
        emitted["prediction_histogram"] = path

    report_path = run_dir / "report.csv"
    if report_path.exists():
        rows = read_report(report_path)
        bar_rows = [r for r in rows if r["split"] in ("warm_test", "cold_test")]
        path = out_dir / "warm_cold_bars.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(bar_rows)
        emitted["warm_cold_bars"] = path
    return emitted


class VerificationError(RuntimeError):
    pass


def cmd_verify(run_dir: str | Path, tolerance: float = 1e-6) -> int:
    """Recompute every reported metric from the logged (label, score) pairs."""
    run_dir = Path(run_dir)
    checked = 0

    def recompute(preds: list[dict]) -> MetricReport:
        return evaluate_examples([
            ScoredExample(user=int(p["user"]), label=int(p["label"]),
                          score=float(p["score"]))
            for p in preds
        ])

    report_path = run_dir / "report.csv"
    if report_path.exists():
        report_rows = read_report(report_path)
        for seed_dir in sorted(run_dir.glob("seed_*")):
            pred_path = seed_dir / "predictions_eval.csv"
            if not pred_path.exists():
                continue
            preds = read_predictions(pred_path)
            seed = seed_dir.name.removeprefix("seed_")
            by_split: dict[str, list[dict]] = {}
            for p in preds:
                by_split.setdefault(p["split"], []).append(p)
            for row in report_rows:
                if row["seed"] != seed or row["split"] not in by_split:
                    continue
                fresh = recompute(by_split[row["split"]])
                for col in METRIC_COLUMNS:
                    if row[col] == "":
                        continue
                    got = getattr(fresh, col)
                    want = float(row[col])
                    if not math.isfinite(got) or abs(got - want) > tolerance:
                        raise VerificationError(
                            f"{report_path}: {row['model']} seed {seed} "
                            f"{row['split']}.{col} = {want}, recomputed {got}"
                        )
                    checked += 1

    for seed_dir in sorted(run_dir.glob("seed_*")):
        epochs_path = seed_dir / "epochs.csv"
        pred_path = seed_dir / "predictions.csv"
        if not epochs_path.exists() or not pred_path.exists():
            continue
        preds = read_predictions(pred_path)
        by_key: dict[tuple, list[dict]] = {}
        for p in preds:
            by_key.setdefault((p["stage"], p["epoch"], p["split"]), []).append(p)
        with epochs_path.open(encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["stage"], row["epoch"], row["split"])
                if key not in by_key or row["split"] == "train":
                    continue
                fresh = recompute(by_key[key])
                for col in METRIC_COLUMNS:
                    if row[col] == "":
                        continue
                    got = getattr(fresh, col)
                    want = float(row[col])
                    if not math.isfinite(got) or abs(got - want) > tolerance:
                        raise VerificationError(
                            f"{epochs_path}: epoch {row['epoch']} {row['split']}.{col} "
                            f"= {want}, recomputed {got}"
                        )
                    checked += 1
    if checked == 0:
        raise VerificationError(f"{run_dir}: nothing to verify")
    return checked
