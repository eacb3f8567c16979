"""Round-robin evaluation, the constant-λ oracle and experiment suites."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .dataset import Corpus, variant_corpus
from .model import DecisionModel, ModelConfig, RunningContext, TrainVariant, predict_action
from .score import PrefixStats, ScoreConfig, Variant, compute_cpa, score_at
from .sim import ConstantLambda, EnvConfig, Policy, default_roster, run_episode
from .trainer import TrainConfig, corpus_score_anchor, train

log = logging.getLogger(__name__)

VARIANTS = (Variant.S1, Variant.S2, Variant.S3)


def config_hash(*parts) -> str:
    blob = json.dumps([p.to_dict() if hasattr(p, "to_dict") else p for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EvalConfig:
    budget_ratios: tuple[float, ...] = (1.0,)
    rounds: int = 3
    target_rtg_quantile: float = 0.95
    variant: str = "S2"
    seed: int = 10_000
    roster_seed: int = 1234

    def __post_init__(self):
        self.budget_ratios = tuple(float(r) for r in self.budget_ratios)
        Variant(self.variant)
        if not self.budget_ratios or any(r <= 0 for r in self.budget_ratios):
            raise ValueError("budget ratios must be positive")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.target_rtg_quantile <= 1:
            raise ValueError("target_rtg_quantile must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budget_ratios"] = list(self.budget_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "EvalConfig":
        d = self.to_dict()
        d.update(changes)
        return EvalConfig.from_dict(d)


# ---------------------------------------------------------------------------
# model agent
# ---------------------------------------------------------------------------


class ModelAgent:
    """Bids with a trained model, conditioning on the score still to earn.

    After every step the target drops by the step's score increment under
    the model's own RTG variant, floored at zero.
    """

    name = "model"

    def __init__(self, model: DecisionModel, norm, score_config: ScoreConfig, target_rtg: float):
        self.model = model
        self.norm = norm
        self.score_config = score_config
        self.target_rtg = float(target_rtg)
        self.reset()

    def reset(self):
        self.context = RunningContext()
        self.rtg = self.target_rtg
        self.rtg_trace: list[float] = []
        self._cum_cost = 0.0
        self._cum_value = 0.0
        self._score = 0.0
        self._pending = None

    def act(self, state, step):
        lam = predict_action(self.model, self.norm, self.context, state, self.rtg, step)
        self._pending = (self.rtg, np.asarray(state, dtype=np.float64), lam, step)
        return lam

    def observe(self, cost, value):
        rtg, state, lam, step = self._pending
        M = self.model.config.context
        ctx = self.context
        ctx.rtgs.append(rtg)
        ctx.states.append(state)
        ctx.actions.append(lam)
        ctx.timesteps.append(step)
        if len(ctx.rtgs) > M:
            for seq in (ctx.rtgs, ctx.states, ctx.actions, ctx.timesteps):
                del seq[: len(seq) - M]
        self._cum_cost += cost
        self._cum_value += value
        score = score_at(PrefixStats(self._cum_cost, self._cum_value), self.score_config)
        self.rtg = max(0.0, self.rtg - (score - self._score))
        self._score = score
        self.rtg_trace.append(self.rtg)


@dataclass
class TrainedPolicy:
    """A trained model with what it needs at inference time."""

    model: DecisionModel
    corpus_norm: object
    score_config: ScoreConfig  # RTG variant the model was trained with
    score_per_budget: np.ndarray

    @classmethod
    def from_training(cls, model: DecisionModel, corpus: Corpus) -> "TrainedPolicy":
        anchor = corpus_score_anchor(corpus)
        return cls(model, corpus.normalization, corpus.score_config, np.asarray(anchor["score_per_budget"]))

    @classmethod
    def from_checkpoint_meta(cls, model: DecisionModel, meta: dict) -> "TrainedPolicy":
        from .dataset import NormalizationStats

        sc = meta["score_config"]
        return cls(model, NormalizationStats.from_dict(meta["normalization"]),
                   ScoreConfig(sc["cpa_limit"], Variant(sc["variant"]), sc["gamma"]),
                   np.asarray(meta["target_anchor"]["score_per_budget"]))

    def target_rtg(self, budget: float, quantile: float) -> float:
        return float(np.quantile(self.score_per_budget, quantile)) * budget

    def factory(self, quantile: float) -> Callable[[float], Policy]:
        return lambda budget: ModelAgent(self.model, self.corpus_norm, self.score_config,
                                         self.target_rtg(budget, quantile))


def infer_episode(trained: TrainedPolicy, env_config: EnvConfig, slot: int, target_rtg: float,
                  roster: Sequence[Policy] | None = None, budget_ratio: float = 1.0, seed: int | None = None):
    """Play one episode with the model in ``slot``; returns (logs, agent)."""
    roster = list(roster) if roster is not None else default_roster(env_config)
    agent = ModelAgent(trained.model, trained.corpus_norm, trained.score_config, target_rtg)
    policies = list(roster)
    policies[slot] = agent
    budgets = np.full(env_config.num_agents, env_config.budget)
    budgets[slot] *= budget_ratio
    return run_episode(env_config, policies, budgets, seed=seed), agent


# ---------------------------------------------------------------------------
# round robin
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict]
    variant: str
    env_hash: str = ""
    eval_hash: str = ""
    seeds: list[int] = field(default_factory=list)
    label: str = ""

    COLUMNS = ("label", "budget_ratio", "round", "seed", "slot", "score", "score_S1", "score_S2", "score_S3",
               "cpa", "value", "cost", "budget")

    def scores(self, budget_ratio: float | None = None, variant: str | None = None) -> np.ndarray:
        key = "score" if variant is None else f"score_{Variant(variant).value}"
        return np.array([r[key] for r in self.rows if budget_ratio is None or r["budget_ratio"] == budget_ratio])

    def mean(self, budget_ratio: float | None = None, variant: str | None = None) -> float:
        return float(self.scores(budget_ratio, variant).mean())

    def summary(self) -> list[dict]:
        out = []
        for ratio in sorted({r["budget_ratio"] for r in self.rows}):
            sel = [r for r in self.rows if r["budget_ratio"] == ratio]
            s = np.array([r["score"] for r in sel])
            out.append({
                "label": self.label,
                "budget_ratio": ratio,
                "score": float(s.mean()),
                "score_std": float(s.std()),
                "value": float(np.mean([r["value"] for r in sel])),
                "cost": float(np.mean([r["cost"] for r in sel])),
                "cpa": float(np.mean([min(r["cpa"], 1e9) for r in sel])),
                "n": len(sel),
                "env_hash": self.env_hash,
                "eval_hash": self.eval_hash,
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "label": self.label})
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"label": self.label, "variant": self.variant, "env_hash": self.env_hash,
                "eval_hash": self.eval_hash, "seeds": self.seeds, "summary": self.summary(), "rows": self.rows}


def _row(log, ratio, rnd, seed, slot, variant: Variant) -> dict:
    stats_ = PrefixStats(log.total_cost, log.total_value)
    scores = {f"score_{v.value}": score_at(stats_, ScoreConfig.for_variant(v, log.cpa_limit)) for v in VARIANTS}
    return {
        "budget_ratio": ratio,
        "round": rnd,
        "seed": seed,
        "slot": slot,
        "score": scores[f"score_{variant.value}"],
        **scores,
        "cpa": compute_cpa(stats_),
        "value": log.total_value,
        "cost": log.total_cost,
        "budget": log.budget,
    }


def round_robin(policy_factory: Callable[[float], Policy], env_config: EnvConfig, eval_config: EvalConfig,
                roster: Sequence[Policy] | None = None, label: str = "", slots: Sequence[int] | None = None,
                ratios: Sequence[float] | None = None) -> EvalReport:
    """Swap the test policy into every slot in turn against the scripted roster.

    ``policy_factory(budget)`` builds a fresh test policy for the slot's
    budget.  Every (ratio, round) uses the same episode seed for all slots
    and all test policies.
    """
    if env_config.num_agents < 2:
        raise ValueError("round robin needs at least two agents")
    roster = list(roster) if roster is not None else default_roster(env_config, eval_config.roster_seed)
    variant = Variant(eval_config.variant)
    slots = range(env_config.num_agents) if slots is None else slots
    ratios = eval_config.budget_ratios if ratios is None else ratios
    rows, seeds = [], []
    for ratio in ratios:
        for rnd in range(eval_config.rounds):
            seed = eval_config.seed + rnd
            seeds.append(seed)
            for slot in slots:
                budgets = np.full(env_config.num_agents, env_config.budget)
                budgets[slot] *= ratio
                policies = list(roster)
                policies[slot] = policy_factory(budgets[slot])
                logs = run_episode(env_config, policies, budgets, seed=seed)
                rows.append(_row(logs[slot], ratio, rnd, seed, slot, variant))
    return EvalReport(rows, variant.value, config_hash(env_config), config_hash(eval_config),
                      sorted(set(seeds)), label)


def evaluate_model(trained: TrainedPolicy, env_config: EnvConfig, eval_config: EvalConfig,
                   label: str = "model", **kwargs) -> EvalReport:
    return round_robin(trained.factory(eval_config.target_rtg_quantile), env_config, eval_config, label=label,
                       **kwargs)


def default_lambda_grid(env_config: EnvConfig, size: int = 50) -> np.ndarray:
    return env_config.cpa_limit * np.geomspace(0.25, 4.0, size)


@dataclass
class OracleResult:
    budget_ratio: float
    best_lambda: float
    best_score: float
    grid: list[float]
    scores: list[float]


def oracle_constant_lambda(env_config: EnvConfig, grid: Sequence[float], eval_config: EvalConfig,
                           budget_ratio: float = 1.0) -> OracleResult:
    """Best single constant λ by brute force over ``grid`` (same seeds)."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("oracle grid must not be empty")
    scores = []
    for lam in grid:
        report = round_robin(lambda budget, lam=lam: ConstantLambda(lam), env_config, eval_config,
                             ratios=[budget_ratio])
        scores.append(report.mean())
    best = int(np.argmax(scores))
    return OracleResult(budget_ratio, grid[best], scores[best], grid, scores)


def make_validator(env_config: EnvConfig, eval_config: EvalConfig, rounds: int = 2, seed: int = 900_000):
    """Checkpoint-selection score on rounds disjoint from evaluation seeds.

    Models are scored under their own training RTG variant.
    """
    val_cfg = eval_config.replace(rounds=rounds, seed=seed, budget_ratios=[1.0])

    def validate(model: DecisionModel, corpus: Corpus) -> float:
        model.eval()
        trained = TrainedPolicy.from_training(model, corpus)
        cfg = val_cfg.replace(variant=corpus.score_config.variant.value)
        return evaluate_model(trained, env_config, cfg).mean()

    return validate


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


@dataclass
class SuiteSettings:
    env_config: EnvConfig
    model_config: ModelConfig
    train_config: TrainConfig
    eval_config: EvalConfig
    seeds: tuple[int, ...] = tuple(range(10))
    select_checkpoint: bool = True
    cache_dir: Path | None = None


def train_and_evaluate(corpus: Corpus, settings: SuiteSettings, variant: str, seed: int,
                       rtg_variant: Variant | None = None, tag: str = "") -> dict:
    """One training run followed by a round-robin evaluation (cached on disk)."""
    if rtg_variant is not None:
        corpus = variant_corpus(corpus, rtg_variant)
    tc = TrainConfig.from_dict({**settings.train_config.to_dict(), "variant": variant, "seed": seed})
    key = config_hash(settings.env_config, settings.model_config, tc, settings.eval_config,
                      corpus.score_config, settings.select_checkpoint, len(corpus.trajectories),
                      corpus.env_seed, corpus.normalization.rtg_mean)
    cache = None
    if settings.cache_dir is not None:
        cache = Path(settings.cache_dir) / f"{tag or variant}_{corpus.score_config.variant.value}_{seed}_{key}.json"
        if cache.exists():
            return json.loads(cache.read_text())
    validate = make_validator(settings.env_config, settings.eval_config) if settings.select_checkpoint else None
    result = train(corpus, settings.model_config, tc, validate=validate)
    result.model.eval()
    trained = TrainedPolicy.from_training(result.model, result.corpus)
    report = evaluate_model(trained, settings.env_config, settings.eval_config, label=f"{variant}/{seed}")
    w = [m["w_mean"] for m in result.metrics if "w_mean" in m]
    # headline numbers at 100% budget when that ratio is evaluated
    ratios = settings.eval_config.budget_ratios
    head = 1.0 if 1.0 in ratios else None
    record = {
        "variant": variant,
        "rtg_variant": result.corpus.score_config.variant.value,
        "seed": seed,
        "best_step": result.best_step,
        "checkpoints": result.checkpoints,
        "scores": {v.value: report.mean(head, variant=v.value) for v in VARIANTS},
        "by_ratio": {str(r): report.mean(r) for r in ratios},
        "score": report.mean(head),
        "cpa": float(np.mean([min(r["cpa"], 1e9) for r in report.rows if head is None or r["budget_ratio"] == head])),
        "first_w_mean": float(np.mean(w[:100])) if w else None,
        "final_w_mean": float(np.mean(w[-1000:])) if w else None,
        "final_beta_mean": float(np.mean([m["beta_mean"] for m in result.metrics[-1000:]])) if w else None,
        "hash": key,
    }
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(json.dumps(record, indent=2))
    return record


ABLATION_VARIANTS = ("gave", "gave-v", "gave-va", "dt")


@dataclass
class AblationResult:
    runs: list[dict]
    summary: list[dict]
    ttest_gave_vs_dt: tuple[float, float]
    settings_hash: str

    def means(self) -> dict[str, float]:
        return {row["variant"]: row["mean"] for row in self.summary}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("variant", "mean", "std", "n", "seeds", "config_hash"))
        for row in self.summary:
            w.writerow((row["variant"], repr(row["mean"]), repr(row["std"]), row["n"], row["seeds"],
                        self.settings_hash))
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("variant", "seed", "score", "best_step", "config_hash"))
        for r in self.runs:
            w.writerow((r["variant"], r["seed"], repr(r["score"]), r["best_step"], self.settings_hash))
        return buf.getvalue()


def run_ablation_suite(corpus: Corpus, settings: SuiteSettings,
                       variants: Sequence[str] = ABLATION_VARIANTS) -> AblationResult:
    """Train every variant on every seed; summarize mean/std of the score."""
    runs = [train_and_evaluate(corpus, settings, v, s) for v in variants for s in settings.seeds]
    summary = []
    for v in variants:
        s = np.array([r["score"] for r in runs if r["variant"] == v])
        summary.append({"variant": v, "mean": float(s.mean()), "std": float(s.std(ddof=1)) if len(s) > 1 else 0.0,
                        "n": len(s), "seeds": " ".join(str(x) for x in settings.seeds)})
    by = {v: [r["score"] for r in runs if r["variant"] == v] for v in variants}
    if "gave" in by and "dt" in by and len(by["gave"]) > 1:
        t = stats.ttest_ind(by["gave"], by["dt"])
        ttest = (float(t.statistic), float(t.pvalue))
    else:
        ttest = (float("nan"), float("nan"))
    h = config_hash(settings.env_config, settings.model_config, settings.train_config, settings.eval_config,
                    list(settings.seeds))
    return AblationResult(runs, summary, ttest, h)


@dataclass
class AlignmentResult:
    matrix: np.ndarray  # rows: training RTG variant, columns: evaluation metric
    runs: list[dict]
    settings_hash: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("train\\eval", *(v.value for v in VARIANTS), "config_hash"))
        for i, v in enumerate(VARIANTS):
            w.writerow((v.value, *(repr(float(x)) for x in self.matrix[i]), self.settings_hash))
        return buf.getvalue()


def run_alignment_matrix(corpus: Corpus, settings: SuiteSettings) -> AlignmentResult:
    """GAVE trained with each RTG variant, scored under each metric."""
    runs = []
    matrix = np.zeros((3, 3))
    for i, train_v in enumerate(VARIANTS):
        recs = [train_and_evaluate(corpus, settings, "gave", s, rtg_variant=train_v) for s in settings.seeds]
        runs.extend(recs)
        for j, eval_v in enumerate(VARIANTS):
            matrix[i, j] = float(np.mean([r["scores"][eval_v.value] for r in recs]))
    h = config_hash(settings.env_config, settings.model_config, settings.train_config, settings.eval_config,
                    list(settings.seeds), "align")
    return AlignmentResult(matrix, runs, h)
