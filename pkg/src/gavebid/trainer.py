"""Offline training loop: sample windows, compute the loss terms, AdamW."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import diffcore as dc
from .dataset import Corpus, DatasetError, variant_corpus
from .model import DecisionModel, ModelConfig, TrainVariant, batch_tensors, compute_losses
from .score import Variant

log = logging.getLogger(__name__)

METRIC_COLUMNS = {
    TrainVariant.GAVE: ("step", "L_r", "L_a", "L_e", "L_v", "L_o", "w_mean", "beta_mean"),
    TrainVariant.GAVE_V: ("step", "L_r", "L_a", "L_w", "L_o", "w_mean", "beta_mean"),
    TrainVariant.GAVE_VA: ("step", "L_r", "L_a", "L_o"),
    TrainVariant.DT: ("step", "L_r", "L_a", "L_o"),
}

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_steps: int = 20_000
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    variant: str = "gave"
    dtype: str = "float64"

    def __post_init__(self):
        TrainVariant(self.variant)
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: Path | None = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainResult:
    model: DecisionModel
    corpus: Corpus  # the corpus actually trained on (after the variant's RTG switch)
    metrics: list[dict]
    checkpoints: list[tuple[int, float | None]]  # (step, validation score)
    best_step: int
    variant: TrainVariant


def build_model(config: ModelConfig, seed: int = 0, dtype=dc.DEFAULT_DTYPE) -> DecisionModel:
    torch.manual_seed(seed)
    return DecisionModel(config).to(dtype)


def corpus_for_variant(corpus: Corpus, variant: TrainVariant | str) -> Corpus:
    """The DT ablation models plain value sums; every other variant keeps the corpus RTG."""
    if TrainVariant(variant) is TrainVariant.DT:
        return variant_corpus(corpus, Variant.S1)
    return corpus


def snapshot_params(model: DecisionModel) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def load_params(model: DecisionModel, params: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(params[name].to(p.dtype))


def train(corpus: Corpus, model_config: ModelConfig, config: TrainConfig, out_dir: str | Path | None = None,
          validate: Callable[[DecisionModel, Corpus], float] | None = None) -> TrainResult:
    """Run the offline optimization loop.

    ``validate`` scores a model on held-out simulated rounds; when given,
    the parameters of the best-scoring checkpoint are restored at the end.
    """
    if corpus.context != model_config.context:
        raise DatasetError(f"dataset was built with M={corpus.context}, model config has M={model_config.context}")
    variant = TrainVariant(config.variant)
    corpus = corpus_for_variant(corpus, variant)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    dtype = config.torch_dtype
    model = build_model(model_config, config.seed, dtype)
    params = list(model.parameters())
    names = [n for n, _ in model.named_parameters()]
    opt = dc.OptimizerState(lr=config.learning_rate, weight_decay=config.weight_decay)
    data = batch_tensors(corpus.normalization.apply(corpus.windows()), dtype)
    n_windows = data["rtgs"].shape[0]
    rng = np.random.default_rng(config.seed)
    columns = METRIC_COLUMNS[variant]

    metrics: list[dict] = []
    checkpoints: list[tuple[int, float | None]] = []
    best = (-math.inf, 0, snapshot_params(model))
    writer = fh = None
    if out is not None:
        fh = (out / "metrics.csv").open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(columns)
    try:
        for step in range(1, config.max_steps + 1):
            idx = torch.as_tensor(rng.integers(0, n_windows, size=config.batch_size))
            batch = {k: v[idx] for k, v in data.items()}
            for p in params:
                p.grad = None
            comps = compute_losses(model, batch, variant)
            loss = comps["L_o"]
            if not torch.isfinite(loss):
                snap = None
                if out is not None:
                    snap = dc.save_checkpoint(out / "diverged.json", model.named_tensors(), opt,
                                              {"step": step, "components": _row(comps, columns, step)})
                raise TrainingDiverged(f"non-finite loss at step {step}: {_row(comps, columns, step)}", snap)
            dc.backward(loss)
            dc.clip_grad_norm([p.grad for p in params], config.grad_clip)
            dc.adamw_step(params, [p.grad for p in params], opt)
            row = _row(comps, columns, step)
            metrics.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in columns])
            if step % config.checkpoint_every == 0 or step == config.max_steps:
                if not all(bool(torch.isfinite(p).all()) for p in params):
                    raise TrainingDiverged(f"non-finite parameters at step {step}")
                score = validate(model, corpus) if validate is not None else None
                checkpoints.append((step, score))
                if out is not None:
                    meta = {"step": step, "variant": variant.value, "model_config": model_config.to_dict(),
                            "train_config": config.to_dict(), "validation_score": score,
                            "normalization": corpus.normalization.to_dict(),
                            "score_config": corpus.score_config.to_dict()}
                    dc.save_checkpoint(out / f"checkpoint_{step:07d}.json", dict(zip(names, params)), opt, meta)
                if score is not None and score > best[0]:
                    best = (score, step, snapshot_params(model))
                log.info("step %d L_o=%.5f validation=%s", step, row["L_o"], score)
    finally:
        if fh is not None:
            fh.close()

    best_step = config.max_steps
    if validate is not None:
        best_step = best[1]
        load_params(model, best[2])
    if out is not None:
        _write_final(out, model, model_config, config, corpus, variant, best_step, checkpoints)
    return TrainResult(model, corpus, metrics, checkpoints, best_step, variant)


def _row(comps: dict, columns, step: int) -> dict:
    row = {"step": step}
    for c in columns[1:]:
        v = comps[c]
        row[c] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    return row


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def _write_final(out: Path, model, model_config, config, corpus, variant, best_step, checkpoints):
    meta = {"step": best_step, "variant": variant.value, "model_config": model_config.to_dict(),
            "train_config": config.to_dict(), "normalization": corpus.normalization.to_dict(),
            "score_config": corpus.score_config.to_dict(),
            "target_anchor": corpus_score_anchor(corpus),
            "checkpoints": [{"step": s, "validation_score": v} for s, v in checkpoints]}
    dc.save_checkpoint(out / "final.json", model.named_tensors(), None, meta)
    (out / "checkpoints.json").write_text(json.dumps(meta["checkpoints"], indent=2))


def corpus_score_anchor(corpus: Corpus) -> dict:
    """Per-unit-budget episode scores used to set inference RTG targets."""
    scores = corpus.episode_scores()
    budgets = np.array([t.budget for t in corpus.trajectories])
    ok = budgets > 0
    return {"score_per_budget": (scores[ok] / budgets[ok]).tolist()}


def load_trained(path: str | Path, dtype=torch.float64):
    """Load ``final.json`` (or any checkpoint) into a model plus its metadata."""
    params, _, meta = dc.load_checkpoint(path, dtype)
    if "model_config" not in meta:
        raise dc.CheckpointError(f"{path} carries no model configuration")
    model = DecisionModel(ModelConfig.from_dict(meta["model_config"])).to(dtype)
    load_params(model, params)
    model.eval()
    return model, meta
