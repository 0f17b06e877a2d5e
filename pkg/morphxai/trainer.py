"""
MorphXAI training loop.
batch -> forward -> per-layer Hungarian match -> total loss -> AdamW step,
one JSON-lines record per step, periodic validation, last/best checkpoints,
seeded determinism, and the lambda ablation sweep.
"""

import json
import math
import random
import sys
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import ParasiteDataset, collate
from .errors import ConfigError, DatasetIOError, TrainingAborted
from .logger import RunLogger
from .losses import make_denoising_queries, total_loss
from .matching import match_batch
from .metrics import EvaluationSummary, compare_latency, evaluate_detections
from .model import DenoisingQueries, Detection, MorphologicalDetector, build_model
from .schema import AnnotatedInstance, AttributeVocabulary, build_vocabulary


# ── Reproducibility ───────────────────────────────────────────────────────────

def set_deterministic(seed: int, strict_determinism: bool = True) -> None:
    """Seed every RNG before any stochastic op."""
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.cuda.manual_seed_all(seed)

    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False

    # may warn for ops without a deterministic kernel
    if strict_determinism:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _seed_worker(worker_id: int) -> None:
    worker_seed = torch.initial_seed() % 2 ** 32
    np.random.seed(worker_seed)
    random.seed(worker_seed)


def resolve_device(name: str) -> torch.device:
    if name.startswith("cuda") and not torch.cuda.is_available():
        raise ConfigError(f"device '{name}' requested but CUDA is not available")
    return torch.device(name)


def build_optimizer(model: torch.nn.Module, config: RunConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ConfigError("No trainable parameters found in model!")
    return torch.optim.AdamW(params, lr=config.optim.lr, weight_decay=config.optim.weight_decay)


def build_scheduler(optimizer: torch.optim.Optimizer, total_steps: int, warmup_fraction: float):
    """Linear warm-up over the first warmup_fraction of steps, then cosine decay to 10%."""
    warmup = int(round(total_steps * warmup_fraction))

    def factor(step: int) -> float:
        if warmup and step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


# ── Data helpers ──────────────────────────────────────────────────────────────

def open_split(config: RunConfig, split: str, vocab: AttributeVocabulary) -> ParasiteDataset:
    root = config.path("data_dir")
    if not (root / "manifest.json").exists():
        raise DatasetIOError(f"no dataset at {root} (manifest.json missing); run gen-data first")
    return ParasiteDataset(root / split, vocab)


def _loader(dataset, config: RunConfig, vocab, shuffle: bool, generator: Optional[torch.Generator] = None):
    return DataLoader(
        dataset,
        batch_size=config.train.batch_size,
        shuffle=shuffle,
        generator=generator,
        collate_fn=partial(collate, vocab=vocab),
        num_workers=config.data.loader_workers,
        worker_init_fn=_seed_worker,
    )


@dataclass
class Predictions:
    detections: Dict[int, List[Detection]]
    ground_truths: Dict[int, List[AnnotatedInstance]]
    sizes: Dict[int, Tuple[int, int]]


@torch.no_grad()
def predict_dataset(
    model: MorphologicalDetector,
    dataset: ParasiteDataset,
    vocab: AttributeVocabulary,
    score_threshold: float,
    batch_size: int = 8,
) -> Predictions:
    device = next(model.parameters()).device
    out = Predictions({}, {}, {})
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, collate_fn=partial(collate, vocab=vocab))
    for batch in loader:
        detections = model.detect(batch.images.to(device), vocab, score_threshold)
        for k, image_id in enumerate(batch.image_ids):
            out.detections[image_id] = detections[k]
            out.ground_truths[image_id] = batch.instances[k]
            out.sizes[image_id] = (batch.images.shape[2], batch.images.shape[1])
    return out


def evaluate_model(
    model: MorphologicalDetector,
    dataset: ParasiteDataset,
    vocab: AttributeVocabulary,
    config: RunConfig,
    score_threshold: Optional[float] = None,
    latency: bool = False,
) -> EvaluationSummary:
    threshold = config.eval.score_threshold if score_threshold is None else score_threshold
    preds = predict_dataset(model, dataset, vocab, threshold, config.train.batch_size)
    timing = None
    if latency:
        if len(dataset) == 0:
            raise ConfigError("latency measurement needs at least one image")
        device = next(model.parameters()).device
        images = [dataset[i].image.to(device) for i in range(min(len(dataset), config.eval.latency_images))]
        timing = compare_latency(
            model, images, warmup=config.eval.latency_warmup, min_images=config.eval.latency_images
        )
    return evaluate_detections(
        preds.detections, preds.ground_truths, preds.sizes, vocab, config.eval.iou_min, latency=timing
    )


def write_summary(summary: EvaluationSummary, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ── Trainer ───────────────────────────────────────────────────────────────────

@dataclass
class TrainResult:
    steps: int
    epochs: int
    initial_loss: Optional[float]
    final_loss: Optional[float]
    best_ap_50: Optional[float]
    last_checkpoint: Path
    best_checkpoint: Optional[Path]
    log_path: Path
    summary: Optional[EvaluationSummary] = None


class Trainer:
    def __init__(self, config: RunConfig, vocab: AttributeVocabulary = None):
        self.config = config
        self.vocab = vocab or build_vocabulary()
        self.device = resolve_device(config.train.device)
        self.run_dir = config.path("run_dir")
        self.last_path = config.checkpoint_dir / "last.pt"
        self.best_path = config.checkpoint_dir / "best.pt"
        self.logger = RunLogger(config.log_file, max_log_lines=config.train.max_log_lines)

    def _abort(self, step: int, batch_ids: Sequence[int], record: dict) -> None:
        dump = self.run_dir / f"nan_dump_step{step}.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"step": step, "batch_ids": list(batch_ids), "breakdown": record}, indent=2) + "\n")
        self.logger.log({**record, "event": "abort", "dump": str(dump)})
        raise TrainingAborted(
            f"non-finite loss at step {step} (batch ids {list(batch_ids)}); diagnostics in {dump}", dump_path=dump
        )

    def _validate(self, model, dataset, step: int, epoch: int) -> Optional[EvaluationSummary]:
        if dataset is None or len(dataset) == 0:
            return None
        summary = evaluate_model(model, dataset, self.vocab, self.config)
        model.train()
        record = {"event": "eval", "step": step, "epoch": epoch}
        for key in ("ap_50_95", "ap_50", "ap_75", "ar_50_95", "matched"):
            record[f"eval/{key}"] = getattr(summary, key)
        for name, value in summary.attribute_accuracy.items():
            record[f"eval/acc/{name}"] = value
        self.logger.log(record)
        ap = "n/a" if summary.ap_50 is None else f"{summary.ap_50:.3f}"
        print(f"[MorphXAI] epoch {epoch} step {step}: AP.50={ap}, matched={summary.matched}")
        return summary

    def fit(self, resume: bool = False) -> TrainResult:
        config = self.config
        set_deterministic(config.seed, config.train.deterministic)

        train_set = open_split(config, "train", self.vocab)
        if len(train_set) == 0:
            raise ConfigError("training split is empty (data.n_train = 0)")
        eval_set = train_set if config.train.eval_split == "train" else open_split(config, "val", self.vocab)

        model = build_model(config.model, self.vocab).to(self.device)
        generator = torch.Generator()
        loader = _loader(train_set, config, self.vocab, shuffle=True, generator=generator)
        total_steps = config.train.epochs * len(loader)
        if config.train.max_steps:
            total_steps = min(total_steps, config.train.max_steps)
        optimizer = build_optimizer(model, config)
        scheduler = build_scheduler(optimizer, total_steps, config.optim.warmup_fraction)

        step, start_epoch, best_ap = 0, 0, None
        if resume and self.last_path.exists():
            state = load_checkpoint(self.last_path, self.vocab, map_location=self.device)
            model.load_state_dict(state.model.state_dict())
            if state.optimizer_state is not None:
                optimizer.load_state_dict(state.optimizer_state)
            if state.scheduler_state is not None:
                scheduler.load_state_dict(state.scheduler_state)
            step, start_epoch = state.step, state.epoch
            best_ap = state.metrics.get("best_ap_50")
            print(f"[MorphXAI] resuming from {self.last_path} at step {step}, epoch {start_epoch}")
        else:
            self.logger.reset()
            # checkpoints from an earlier run must not outlive a fresh one
            self.best_path.unlink(missing_ok=True)
            self.last_path.unlink(missing_ok=True)
        config.save(str(self.run_dir / "resolved_config.json"))

        dn_generator = torch.Generator().manual_seed(config.seed + 1)
        initial_loss = final_loss = None
        summary = None
        epoch = start_epoch
        model.train()
        with tqdm(total=total_steps, initial=step, disable=not config.train.progress, desc="train") as bar:
            while step < total_steps and epoch < config.train.epochs:
                # shuffle order depends on (seed, epoch) only
                generator.manual_seed(config.seed + epoch)
                for batch in loader:
                    if step >= total_steps:
                        break
                    batch = batch.to(self.device)
                    denoising = None
                    if config.loss.dn_enabled:
                        denoising = [
                            make_denoising_queries(t, config.loss, config.model.num_species, dn_generator)
                            for t in batch.targets
                        ]
                        denoising = [None if g is None else _to(g, self.device) for g in denoising]
                    output = model(batch.images, denoising=denoising)
                    assignments = match_batch(
                        output, batch.targets, config.matching, config.train.rematch_per_layer
                    )
                    breakdown = total_loss(output, assignments, batch, config.loss)
                    record = breakdown.to_record()
                    record.update({
                        "event": "step",
                        "step": step,
                        "epoch": epoch,
                        "lr": optimizer.param_groups[0]["lr"],
                        "batch_ids": list(batch.image_ids),
                    })
                    if not breakdown.is_finite():
                        self._abort(step, batch.image_ids, record)

                    optimizer.zero_grad(set_to_none=True)
                    breakdown.total.backward()
                    if config.optim.grad_clip > 0:
                        torch.nn.utils.clip_grad_norm_(model.parameters(), config.optim.grad_clip)
                    optimizer.step()
                    scheduler.step()

                    self.logger.log(record)
                    if initial_loss is None:
                        initial_loss = record["loss/total"]
                    final_loss = record["loss/total"]
                    step += 1
                    bar.update(1)
                    bar.set_postfix(loss=f"{final_loss:.4f}")
                epoch += 1

                done = step >= total_steps or epoch >= config.train.epochs
                every = config.train.eval_every
                if done or (every and epoch % every == 0):
                    summary = self._validate(model, eval_set, step, epoch) or summary
                    if summary is not None and summary.ap_50 is not None and (best_ap is None or summary.ap_50 > best_ap):
                        best_ap = summary.ap_50
                        save_checkpoint(self.best_path, model, step=step, epoch=epoch, metrics={"ap_50": best_ap})
                    save_checkpoint(
                        self.last_path, model, optimizer, scheduler, step=step, epoch=epoch,
                        metrics={"best_ap_50": best_ap},
                    )

        if not self.last_path.exists():
            save_checkpoint(self.last_path, model, optimizer, scheduler, step=step, epoch=epoch)
        print(f"[MorphXAI] trained {step} steps; checkpoint {self.last_path}")
        return TrainResult(
            steps=step,
            epochs=epoch,
            initial_loss=initial_loss,
            final_loss=final_loss,
            best_ap_50=best_ap,
            last_checkpoint=self.last_path,
            best_checkpoint=self.best_path if self.best_path.exists() else None,
            log_path=self.logger.log_path,
            summary=summary,
        )


def _to(queries: DenoisingQueries, device) -> DenoisingQueries:
    return DenoisingQueries(
        queries.boxes.to(device), queries.labels.to(device), queries.target_index.to(device)
    )


# ── Lambda ablation ───────────────────────────────────────────────────────────

ABLATION_COLUMNS = (
    ("lambda", "λ"),
    ("ap_50_95", "AP.50:.95"),
    ("ap_50", "AP.50"),
    ("ap_75", "AP.75"),
    ("ar_50_95", "AR.50:.95"),
    ("shape_type", "Shape"),
    ("curvature", "Curvature"),
    ("dot_count", "Dot count"),
    ("flagellum_present", "Flagellum"),
    ("development_stage", "Dev. stage"),
    ("peak_morph_weighted", "peak λ·L_morph"),
)


def ablation_markdown(rows: Sequence[dict]) -> str:
    def fmt(key: str, value) -> str:
        if value is None:
            return "n/a"
        if key == "lambda":
            return f"{value:g}"
        if key == "peak_morph_weighted":
            return f"{value:.4f}"
        return f"{100.0 * value:.1f}"

    lines = [
        "| " + " | ".join(title for _, title in ABLATION_COLUMNS) + " |",
        "|" + "---|" * len(ABLATION_COLUMNS),
    ]
    for row in rows:
        lines.append("| " + " | ".join(fmt(key, row.get(key)) for key, _ in ABLATION_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def ablate_lambda(config: RunConfig, lambdas: Sequence[float], out_dir: Optional[Path] = None) -> List[dict]:
    """Train and evaluate once per lambda with identical seeds and data."""
    if not lambdas:
        raise ConfigError("ablate-lambda needs at least one lambda")
    base = config.to_flat_dict()
    out = (Path(out_dir) if out_dir else config.path("run_dir") / "ablation").resolve()
    vocab = build_vocabulary()
    rows = []
    for lam in lambdas:
        run_config = RunConfig.from_dict({
            **base,
            "loss.lambda_morph": float(lam),
            "paths.run_dir": str(out / f"lambda_{lam:g}"),
        })
        run_config.validate()
        print(f"[MorphXAI] ablation: training with lambda={lam:g}", file=sys.stderr)
        trainer = Trainer(run_config, vocab)
        trainer.fit()
        state = load_checkpoint(trainer.last_path, vocab, map_location=trainer.device)
        eval_set = open_split(run_config, run_config.train.eval_split, vocab)
        summary = evaluate_model(state.model, eval_set, vocab, run_config)
        write_summary(summary, run_config.path("run_dir") / "eval.json")
        steps = trainer.logger.read("step")
        row = {
            "lambda": float(lam),
            "ap_50_95": summary.ap_50_95,
            "ap_50": summary.ap_50,
            "ap_75": summary.ap_75,
            "ar_50_95": summary.ar_50_95,
            **summary.attribute_accuracy,
            "peak_morph_weighted": max((r["loss/morph_weighted"] for r in steps), default=0.0),
            "run_dir": str(run_config.path("run_dir")),
        }
        rows.append(row)

    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    (out / "ablation.md").write_text(ablation_markdown(rows))
    return rows
