"""Training orchestration: staged runs, freezing, checkpoints, early stopping.

The system bundles four parameter groups - the sequential encoder, the
mapping MLP, the LoRA adapters, and the frozen LM base - and every stage is
just a freeze mask plus an encoding choice. Dual-stage training runs the
encoder pretrain (stage A), LoRA-only tuning on slot-free text prompts
(stage B), then joint encoder+mapping fine-tuning on hybrid prompts with
LoRA frozen (stage C). Checkpoints are a text manifest plus raw little-endian
float32 tensors, so a save/load/save round trip is byte-identical.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import LabeledExample, SplitBundle, build_sequences, train_histories
from .fusion import MappingLayer, build_prompt, hybrid_encode, textual_encode
from .llm import TinyDecoder, Vocab, predict_yes_prob
from .metrics import MetricReport, ScoredExample, evaluate_examples
from .optim import AdamW, cosine_lr
from .rng import RngStream
from .sasrec import SasrecModel, pretrain_step
from .tensor import Parameter, bce_loss, no_grad

EPOCH_LOG_COLUMNS = [
    "epoch", "stage", "split", "loss", "auc", "uauc", "logloss",
    "precision", "recall", "f1", "accuracy", "lr", "seconds",
]

COMPONENTS = ("sasrec", "mapping", "lora", "llm_base")

CHECKPOINT_FORMAT = "sasrecllm-checkpoint-v1"


class ConfigError(ValueError):
    pass


class TrainingAbort(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FreezeMask:
    """True = trainable. The LM base never unfreezes after initialization."""

    sasrec: bool = False
    mapping: bool = False
    lora: bool = False
    llm_base: bool = False

    def trainable_components(self) -> list[str]:
        return [c for c in COMPONENTS if getattr(self, c)]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 300
    checkpoint_every: int = 8
    early_stop_patience: int = 10
    monitor: str = "auc"
    peak_lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.checkpoint_every < 1 or self.early_stop_patience < 1:
            raise ConfigError("checkpoint_every and early_stop_patience must be >= 1")
        if self.monitor not in MONITOR_DIRECTION:
            raise ConfigError(f"unknown monitor metric {self.monitor!r}")


MONITOR_DIRECTION = {"auc": 1.0, "uauc": 1.0, "logloss": -1.0}


class HybridSystem:
    """The full model set plus the vocabulary, addressable by component."""

    def __init__(self, sasrec: SasrecModel, mapping: MappingLayer,
                 llm: TinyDecoder, vocab: Vocab,
                 item_titles: dict[int, str] | None = None):
        self.sasrec = sasrec
        self.mapping = mapping
        self.llm = llm
        self.vocab = vocab
        self.item_titles = item_titles or {}

    def component_named_params(self, component: str) -> list[tuple[str, Parameter]]:
        if component == "sasrec":
            return self.sasrec.named_parameters()
        if component == "mapping":
            return self.mapping.named_parameters()
        if component == "lora":
            return self.llm.named_lora_parameters()
        if component == "llm_base":
            return self.llm.named_parameters()
        raise CheckpointError(f"unknown component {component!r}")

    def all_named_params(self) -> list[tuple[str, Parameter]]:
        out = []
        for component in COMPONENTS:
            for name, p in self.component_named_params(component):
                out.append((f"{component}/{name}", p))
        return out

    def trainable_params(self) -> list[Parameter]:
        return [p for _, p in self.all_named_params() if p.trainable]

    def structure_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.all_named_params():
            h.update(f"{name}:{','.join(map(str, p.data.shape))}\n".encode())
        return h.hexdigest()[:16]

    def component_bytes(self, component: str) -> bytes:
        return b"".join(
            p.data.astype("<f4").tobytes() for _, p in self.component_named_params(component)
        )


def set_freeze(system: HybridSystem, mask: FreezeMask) -> None:
    """Apply trainability flags; rejects all-frozen and unfreezing the LM base."""
    if not mask.trainable_components():
        raise ConfigError("freeze mask leaves nothing trainable")
    if mask.llm_base:
        raise ConfigError("the LM base stays frozen after initialization")
    for component in COMPONENTS:
        flag = getattr(mask, component)
        for _, p in system.component_named_params(component):
            p.trainable = flag


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, system: HybridSystem, epoch: int,
                    monitor: str, monitor_value: float,
                    components: tuple[str, ...] = COMPONENTS) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = [
        f"format={CHECKPOINT_FORMAT}",
        f"config_hash={system.structure_hash()}",
        f"epoch={epoch}",
        f"monitor={monitor}",
        f"monitor_value={monitor_value!r}",
        f"components={','.join(components)}",
    ]
    blobs = []
    for component in components:
        for name, p in system.component_named_params(component):
            shape = ",".join(map(str, p.data.shape)) or "0"
            manifest.append(f"tensor={component}/{name} shape={shape}")
            dims = p.data.shape
            blobs.append(struct.pack("<I", len(dims)))
            blobs.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
            blobs.append(p.data.astype("<f4").tobytes())
    (path / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    (path / "tensors.bin").write_bytes(b"".join(blobs))


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    manifest_path = path / "manifest.txt"
    if not manifest_path.exists():
        raise CheckpointError(f"missing manifest: {manifest_path}")
    meta: dict = {"tensors": []}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key == "tensor":
            name, _, shape = value.partition(" shape=")
            dims = tuple(int(d) for d in shape.split(",") if shape != "0")
            meta["tensors"].append((name, dims))
        else:
            meta[key] = value
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unrecognized checkpoint format {meta.get('format')!r}")
    return meta


def load_checkpoint(path: str | Path, system: HybridSystem,
                    components: tuple[str, ...] | None = None) -> dict:
    """Load all or a subset of components; every guard names the field."""
    path = Path(path)
    meta = read_manifest(path)
    if meta.get("config_hash") != system.structure_hash():
        raise CheckpointError(
            f"{path}: config_hash {meta.get('config_hash')} does not match "
            f"this system ({system.structure_hash()})"
        )
    stored = set(meta["components"].split(","))
    wanted = components if components is not None else tuple(sorted(stored))
    for component in wanted:
        if component not in stored:
            raise CheckpointError(f"{path}: component {component!r} not in checkpoint")
    params = {name: p for name, p in system.all_named_params()}
    blob = (path / "tensors.bin").read_bytes()
    offset = 0
    for name, dims in meta["tensors"]:
        ndim = struct.unpack_from("<I", blob, offset)[0]
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
        offset += 4 * ndim
        if tuple(shape) != dims:
            raise CheckpointError(f"{path}: tensor {name} shape header {shape} != manifest {dims}")
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        component = name.split("/", 1)[0]
        if component not in wanted:
            continue
        if name not in params:
            raise CheckpointError(f"{path}: unknown tensor {name}")
        p = params[name]
        if p.data.shape != tuple(shape):
            raise CheckpointError(
                f"{path}: tensor {name} shape {tuple(shape)} does not match model {p.data.shape}"
            )
        p.data = data.astype(p.data.dtype).copy()
    return meta


def pnp_load(path: str | Path, component: str, system: HybridSystem) -> dict:
    """Swap in exactly one component from a checkpoint (plug-and-play)."""
    if component not in COMPONENTS:
        raise CheckpointError(f"unknown component {component!r}")
    return load_checkpoint(path, system, components=(component,))


# -- early stopping -----------------------------------------------------------


@dataclass
class RunnerState:
    epoch: int = 0
    best_value: float | None = None
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    log_rows: list[dict] = field(default_factory=list)

    def record(self, value: float, direction: float) -> bool:
        """Track a new monitor value; True when it strictly improves."""
        improved = (
            self.best_value is None
            or direction * value > direction * self.best_value
        )
        if improved:
            self.best_value = value
            self.best_epoch = self.epoch
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return improved


def early_stop_check(state: RunnerState, patience: int) -> str:
    """'stop' once the monitor has not improved for `patience` evaluations."""
    if state.best_value is None:
        raise ConfigError("early stopping needs at least one recorded evaluation")
    return "stop" if state.epochs_since_improvement >= patience else "continue"


# -- the Runner ---------------------------------------------------------------


def example_context(system: HybridSystem, example: LabeledExample,
                    history_source: str) -> tuple[list[int], list[str]]:
    """The user history visible to the model for this example.

    Training uses the example's own strictly-earlier events; evaluation uses
    the train-split snapshot, which is all a trained system knows about a
    user (and what makes the cold split cold).
    """
    if history_source == "example":
        return example.history_items(), example.history_titles()
    if history_source == "snapshot":
        items = system.sasrec.user_histories.get(example.user, [])
        return list(items), [system.item_titles.get(i, f"item {i}") for i in items]
    raise ConfigError(f"unknown history source {history_source!r}")


def predict_example(system: HybridSystem, example: LabeledExample, encode: str,
                    mode: str = "eval", rng: RngStream | None = None,
                    history_source: str = "example"):
    """Scalar probability tensor for one example via the chosen encoding."""
    hist_items, hist_titles = example_context(system, example, history_source)
    prompt = build_prompt(
        hist_titles, example.title, example.user, example.item,
        history_items=hist_items,
    )
    if encode == "hybrid":
        seq = hybrid_encode(prompt, system.sasrec, system.mapping, system.llm,
                            system.vocab, mode=mode, rng=rng)
    elif encode == "textual":
        seq = textual_encode(prompt, system.llm, system.vocab)
    else:
        raise ConfigError(f"unknown encoding {encode!r}")
    return predict_yes_prob(seq.embeddings, system.llm, mode=mode, rng=rng)


class Runner:
    """Train/eval loop for the LM-based paths (hybrid or textual encoding)."""

    def __init__(self, system: HybridSystem, config: TrainConfig, encode: str,
                 stage: str, run_dir: str | Path | None = None):
        self.system = system
        self.config = config
        self.encode = encode
        self.stage = stage
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.state = RunnerState()
        self.optimizer: AdamW | None = None
        self.global_step = 0
        self.total_steps = 0
        self.predictions: list[dict] = []

    def _log(self, split: str, loss: float, report: MetricReport | None,
             lr: float, seconds: float) -> None:
        row = {c: "" for c in EPOCH_LOG_COLUMNS}
        row.update(epoch=self.state.epoch, stage=self.stage, split=split,
                   loss=f"{loss:.6f}", lr=f"{lr:.6g}", seconds=f"{seconds:.3f}")
        if report is not None:
            for col, val in zip(["auc", "uauc", "logloss", "precision",
                                 "recall", "f1", "accuracy"], report.csv_row()):
                row[col] = val
        self.state.log_rows.append(row)

    def train_epoch(self, split: list[LabeledExample], rng: RngStream) -> float:
        """One pass of shuffled mini-batches; returns the mean sample loss."""
        if not split:
            raise TrainingAbort("empty training split")
        cfg = self.config
        order = rng.spawn(f"shuffle-{self.state.epoch}").permutation(len(split))
        drop_rng = rng.spawn(f"dropout-{self.state.epoch}")
        total_loss = 0.0
        count = 0
        lr = cfg.peak_lr
        for start in range(0, len(split), cfg.batch_size):
            batch = [split[i] for i in order[start : start + cfg.batch_size]]
            self.optimizer.zero_grad()
            batch_loss = 0.0
            for example in batch:
                y_hat = predict_example(self.system, example, self.encode,
                                        mode="train", rng=drop_rng)
                loss = bce_loss(y_hat, float(example.label))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingAbort(
                        f"non-finite loss at epoch {self.state.epoch}, "
                        f"batch index {start // cfg.batch_size}, lr {lr:.3g}"
                    )
                loss.backward(seed=1.0 / len(batch))
                batch_loss += value
                self.predictions.append({
                    "stage": self.stage, "epoch": self.state.epoch, "split": "train",
                    "user": example.user, "item": example.item,
                    "label": example.label, "score": float(y_hat.data),
                })
            if cfg.grad_clip > 0:
                self.optimizer.clip_grad_norm(cfg.grad_clip)
            lr = cosine_lr(min(self.global_step, self.total_steps - 1),
                           max(1, int(cfg.warmup_frac * self.total_steps)),
                           self.total_steps, cfg.peak_lr)
            self.optimizer.step(lr)
            self.global_step += 1
            total_loss += batch_loss
            count += len(batch)
        self._last_lr = lr
        return total_loss / count

    def evaluate(self, split: list[LabeledExample], split_name: str = "validation",
                 log_predictions: bool = True) -> MetricReport:
        scored = []
        with no_grad():
            for example in split:
                y_hat = float(predict_example(self.system, example, self.encode,
                                              history_source="snapshot").data)
                scored.append(ScoredExample(user=example.user, label=example.label,
                                            score=y_hat))
                if log_predictions:
                    self.predictions.append({
                        "stage": self.stage, "epoch": self.state.epoch,
                        "split": split_name, "user": example.user,
                        "item": example.item, "label": example.label, "score": y_hat,
                    })
        return evaluate_examples(scored)

    def fit(self, train_split: list[LabeledExample],
            val_split: list[LabeledExample]) -> RunnerState:
        """Epoch loop with periodic + best checkpoints and early stopping."""
        cfg = self.config
        set_count = max(1, (len(train_split) + cfg.batch_size - 1) // cfg.batch_size)
        self.total_steps = max(2, cfg.max_epochs * set_count)
        self.optimizer = AdamW(self.system.trainable_params(), lr=cfg.peak_lr,
                               weight_decay=cfg.weight_decay)
        rng = RngStream(cfg.seed).spawn(f"runner-{self.stage}")
        direction = MONITOR_DIRECTION[cfg.monitor]
        for epoch in range(1, cfg.max_epochs + 1):
            self.state.epoch = epoch
            tic = time.perf_counter()
            loss = self.train_epoch(train_split, rng)
            self._log("train", loss, None, self._last_lr, time.perf_counter() - tic)
            tic = time.perf_counter()
            report = self.evaluate(val_split, "validation")
            value = getattr(report, cfg.monitor)
            improved = self.state.record(0.0 if value != value else value, direction)
            self._log("validation", report.logloss, report, self._last_lr,
                      time.perf_counter() - tic)
            if self.run_dir is not None:
                if epoch % cfg.checkpoint_every == 0:
                    save_checkpoint(self.run_dir / f"epoch_{epoch}", self.system,
                                    epoch, cfg.monitor, value)
                if improved:
                    save_checkpoint(self.run_dir / "best", self.system,
                                    epoch, cfg.monitor, value)
            if early_stop_check(self.state, cfg.early_stop_patience) == "stop":
                break
        return self.state


# -- encoder pretraining (stage A) ---------------------------------------------


def pretrain_sasrec(system: HybridSystem, bundle: SplitBundle, config: TrainConfig,
                    run_dir: str | Path | None = None,
                    stage: str = "stage_a") -> RunnerState:
    """Next-item pretraining of the encoder with AUC-monitored early stop."""
    sequences = build_sequences(bundle.train, system.sasrec.config.n)
    if not sequences:
        raise TrainingAbort("no training sequences (need users with >= 2 liked items)")
    system.sasrec.user_histories = train_histories(bundle.train)
    set_freeze(system, FreezeMask(sasrec=True))
    optimizer = AdamW([p for _, p in system.sasrec.named_parameters()],
                      lr=config.peak_lr, weight_decay=config.weight_decay)
    rng = RngStream(config.seed).spawn("sasrec-pretrain")
    state = RunnerState()
    run_dir = Path(run_dir) if run_dir is not None else None
    direction = MONITOR_DIRECTION[config.monitor]
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        tic = time.perf_counter()
        order = rng.spawn(f"shuffle-{epoch}").permutation(len(sequences))
        losses = []
        for start in range(0, len(sequences), config.batch_size):
            batch = [sequences[i] for i in order[start : start + config.batch_size]]
            losses.append(pretrain_step(batch, system.sasrec, optimizer, rng))
        train_loss = float(np.mean(losses))
        train_seconds = time.perf_counter() - tic

        tic = time.perf_counter()
        scored = [
            ScoredExample(
                user=e.user, label=e.label,
                score=system.sasrec.predict_proba(
                    system.sasrec.user_histories.get(e.user, []), e.item))
            for e in bundle.validation
        ]
        report = evaluate_examples(scored)
        value = getattr(report, config.monitor)
        improved = state.record(0.0 if value != value else value, direction)
        eval_seconds = time.perf_counter() - tic

        for split, loss, rep, secs in (("train", train_loss, None, train_seconds),
                                       ("validation", report.logloss, report, eval_seconds)):
            row = {c: "" for c in EPOCH_LOG_COLUMNS}
            row.update(epoch=epoch, stage=stage, split=split, loss=f"{loss:.6f}",
                       lr=f"{config.peak_lr:.6g}", seconds=f"{secs:.3f}")
            if rep is not None:
                for col, val in zip(["auc", "uauc", "logloss", "precision",
                                     "recall", "f1", "accuracy"], rep.csv_row()):
                    row[col] = val
            state.log_rows.append(row)

        if run_dir is not None:
            if epoch % config.checkpoint_every == 0:
                save_checkpoint(run_dir / f"epoch_{epoch}", system, epoch,
                                config.monitor, value)
            if improved:
                save_checkpoint(run_dir / "best", system, epoch, config.monitor, value)
        if early_stop_check(state, config.early_stop_patience) == "stop":
            break
    return state


# -- the dual-stage strategy ----------------------------------------------------


@dataclass
class StageResult:
    name: str
    state: RunnerState
    checkpoint: Path
    predictions: list = field(default_factory=list)


def dual_stage_orchestrate(
    system: HybridSystem,
    bundle: SplitBundle,
    run_dir: str | Path,
    stage_a: TrainConfig,
    stage_b: TrainConfig,
    stage_c: TrainConfig,
    skip_stage_a: bool = False,
) -> dict[str, StageResult]:
    """Stage A: encoder pretraining. Stage B: LoRA on textual prompts with
    everything else frozen. Stage C: encoder + mapping on hybrid prompts with
    LoRA frozen at its stage-B best."""
    run_dir = Path(run_dir)
    results: dict[str, StageResult] = {}

    if not skip_stage_a:
        dir_a = run_dir / "stage_a"
        state_a = pretrain_sasrec(system, bundle, stage_a, dir_a)
        if not (dir_a / "best" / "manifest.txt").exists():
            raise TrainingAbort("stage A produced no best checkpoint")
        load_checkpoint(dir_a / "best", system, components=("sasrec",))
        results["stage_a"] = StageResult("stage_a", state_a, dir_a / "best")

    if not system.llm.adapters:
        raise TrainingAbort("stage B needs LoRA adapters attached")
    system.sasrec.user_histories = train_histories(bundle.train)
    set_freeze(system, FreezeMask(lora=True))
    dir_b = run_dir / "stage_b"
    runner_b = Runner(system, stage_b, encode="textual", stage="stage_b", run_dir=dir_b)
    state_b = runner_b.fit(bundle.train, bundle.validation)
    if not (dir_b / "best" / "manifest.txt").exists():
        raise TrainingAbort("stage B produced no best checkpoint")
    load_checkpoint(dir_b / "best", system, components=("lora",))
    results["stage_b"] = StageResult("stage_b", state_b, dir_b / "best",
                                     runner_b.predictions)

    set_freeze(system, FreezeMask(sasrec=True, mapping=True))
    dir_c = run_dir / "stage_c"
    runner_c = Runner(system, stage_c, encode="hybrid", stage="stage_c", run_dir=dir_c)
    state_c = runner_c.fit(bundle.train, bundle.validation)
    if not (dir_c / "best" / "manifest.txt").exists():
        raise TrainingAbort("stage C produced no best checkpoint")
    load_checkpoint(dir_c / "best", system)
    results["stage_c"] = StageResult("stage_c", state_c, dir_c / "best",
                                     runner_c.predictions)
    return results
