"""Command-line entry point: gen-data, train, eval, ablate, align.

Exit codes: 0 success, 2 input error, 3 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import diffcore as dc
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, build_corpus, load_corpus, save_corpus
from .evaluation import (EvalReport, SuiteSettings, TrainedPolicy, config_hash, default_lambda_grid,
                         evaluate_model, make_validator, oracle_constant_lambda, run_ablation_suite,
                         run_alignment_matrix)
from .score import ScoreConfig, Variant
from .sim import collect_episodes
from .trainer import TrainingDiverged, load_trained, train

log = logging.getLogger("gavebid")

OUT_ENV = "GAVEBID_OUT"
MANIFEST_NAME = "run_manifest.json"
EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    artifacts: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    tool_version: str = ""
    config: dict = field(default_factory=dict)

    def write(self, out: Path) -> Path:
        path = out / MANIFEST_NAME
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True))
        return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _overrides(args) -> dict:
    ov: dict = {}
    if getattr(args, "seed", None) is not None:
        seed = args.seed
        if args.command == "gen-data":
            ov["data"] = {"seed": seed}
        elif args.command == "train":
            ov["train"] = {"seed": seed}
        elif args.command == "eval":
            ov["eval"] = {"seed": seed}
        else:
            ov["suite"] = {"seeds": [seed]}
    if getattr(args, "variant", None) is not None:
        if args.command == "gen-data":
            ov.setdefault("data", {})["variant"] = args.variant
        elif args.command == "eval":
            ov.setdefault("eval", {})["variant"] = args.variant
        else:
            ov.setdefault("train", {})["variant"] = args.variant
    if getattr(args, "budget_ratio", None) is not None:
        ov.setdefault("eval", {})["budget_ratios"] = args.budget_ratio
    return ov


def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{args.command}-{cfg.hash()}"


def _need_dataset(path: str | None, M: int):
    if path is None:
        raise InputError("--data is required")
    if not Path(path).exists():
        raise InputError(f"dataset not found: {path}")
    return load_corpus(path, expect_context=M)


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> tuple[list[str], dict]:
    logs = collect_episodes(cfg.env, cfg.data.episodes, seed=cfg.data.seed)
    sc = ScoreConfig.for_variant(cfg.data.variant, cfg.env.cpa_limit)
    corpus = build_corpus(logs, sc, cfg.model.context, env_config=cfg.env.to_dict(), env_seed=cfg.data.seed)
    save_corpus(corpus, out)
    log.info("wrote %d trajectories to %s", len(corpus.trajectories), out)
    return ["trajectories.jsonl", "manifest.json"], {"data": cfg.data.seed}


def cmd_train(args, cfg: RunConfig, out: Path):
    corpus = _need_dataset(args.data, cfg.model.context)
    validate = make_validator(cfg.env, cfg.eval) if cfg.suite.select_checkpoint else None
    torch.set_num_threads(1)
    result = train(corpus, cfg.model, cfg.train, out_dir=out, validate=validate)
    log.info("trained %s, kept step %d", result.variant.value, result.best_step)
    arts = sorted(p.name for p in out.iterdir() if p.name != MANIFEST_NAME)
    return arts, {"train": cfg.train.seed}


def _load_checkpoint(path: str | None):
    if path is None:
        raise InputError("--checkpoint is required")
    p = Path(path)
    if p.is_dir():
        p = p / "final.json"
    if not p.exists():
        raise InputError(f"checkpoint not found: {path}")
    model, meta = load_trained(p, torch.float64)
    if "target_anchor" not in meta:
        raise InputError(f"{p} is not a final checkpoint (no RTG anchor); use final.json")
    return model, meta


def cmd_eval(args, cfg: RunConfig, out: Path, explicit_context: bool):
    model, meta = _load_checkpoint(args.checkpoint)
    M = model.config.context
    if explicit_context and cfg.model.context != M:
        raise InputError(f"checkpoint has M={M}, configuration has M={cfg.model.context}")
    trained = TrainedPolicy.from_checkpoint_meta(model, meta)
    report = evaluate_model(trained, cfg.env, cfg.eval, label=meta.get("variant", "model"))
    summary = report.summary()
    oracle_rows = []
    if args.oracle:
        grid = default_lambda_grid(cfg.env, 50)
        for ratio in cfg.eval.budget_ratios:
            o = oracle_constant_lambda(cfg.env, grid, cfg.eval, ratio)
            oracle_rows.append({"label": "oracle", "budget_ratio": ratio, "score": o.best_score,
                                "best_lambda": o.best_lambda, "env_hash": report.env_hash,
                                "eval_hash": report.eval_hash})
    cols = ("label", "budget_ratio", "score", "score_std", "value", "cost", "cpa", "n", "best_lambda",
            "env_hash", "eval_hash")
    lines = [",".join(cols)]
    for row in summary + oracle_rows:
        lines.append(",".join(_cell(row.get(c, "")) for c in cols))
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    (out / "slots.csv").write_text(report.to_csv())
    (out / "report.json").write_text(json.dumps({**report.to_json(), "oracle": oracle_rows}, indent=2))
    return ["report.csv", "slots.csv", "report.json"], {"eval": cfg.eval.seed, "rounds": cfg.eval.rounds}


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _settings(cfg: RunConfig, out: Path) -> SuiteSettings:
    return SuiteSettings(cfg.env, cfg.model, cfg.train, cfg.eval, cfg.suite.seeds, cfg.suite.select_checkpoint,
                         cache_dir=out / "cache")


def cmd_ablate(args, cfg: RunConfig, out: Path):
    corpus = _need_dataset(args.data, cfg.model.context)
    torch.set_num_threads(1)
    res = run_ablation_suite(corpus, _settings(cfg, out))
    (out / "ablation.csv").write_text(res.to_csv())
    (out / "ablation_runs.csv").write_text(res.runs_csv())
    (out / "ablation.json").write_text(json.dumps({"summary": res.summary, "ttest_gave_vs_dt": res.ttest_gave_vs_dt,
                                                   "config_hash": res.settings_hash, "runs": res.runs}, indent=2))
    return ["ablation.csv", "ablation_runs.csv", "ablation.json", "cache"], {"training": list(cfg.suite.seeds)}


def cmd_align(args, cfg: RunConfig, out: Path):
    corpus = _need_dataset(args.data, cfg.model.context)
    torch.set_num_threads(1)
    res = run_alignment_matrix(corpus, _settings(cfg, out))
    (out / "alignment.csv").write_text(res.to_csv())
    (out / "alignment.json").write_text(json.dumps({"matrix": res.matrix.tolist(), "config_hash": res.settings_hash,
                                                    "runs": res.runs}, indent=2))
    return ["alignment.csv", "alignment.json", "cache"], {"training": list(cfg.suite.seeds)}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _ratios(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty budget ratio list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gavebid", description="Score-based RTG auto-bidding toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant_choices=None):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>-<hash>)")
        if variant_choices:
            sp.add_argument("--variant", choices=variant_choices)

    common(sub.add_parser("gen-data", help="collect scripted-agent episodes into a dataset"),
           [v.value for v in Variant])
    sp = sub.add_parser("train", help="train one model on a dataset")
    common(sp, ["gave", "gave-v", "gave-va", "dt"])
    sp.add_argument("--data", help="dataset directory")
    sp = sub.add_parser("eval", help="round-robin evaluation of a trained checkpoint")
    common(sp, [v.value for v in Variant])
    sp.add_argument("--checkpoint", help="final.json or a training output directory")
    sp.add_argument("--budget-ratio", type=_ratios, help="comma-separated budget ratios, e.g. 0.5,1.0,1.5")
    sp.add_argument("--oracle", action="store_true", help="add the constant-lambda grid oracle row")
    for name, desc in (("ablate", "train and score GAVE, GAVE-V, GAVE-VA and DT over seeds"),
                       ("align", "3x3 train/eval RTG-variant matrix")):
        sp = sub.add_parser(name, help=desc)
        common(sp)
        sp.add_argument("--data", help="dataset directory")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "ablate": cmd_ablate, "align": cmd_align}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        cfg = load_config(args.config, _overrides(args))
        out = _out_dir(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "eval":
            explicit = args.config is not None and "context" in ((_raw_yaml(args.config).get("model")) or {})
            arts, seeds = cmd_eval(args, cfg, out, explicit)
        else:
            arts, seeds = COMMANDS[args.command](args, cfg, out)
    except (InputError, ConfigError, DatasetError, dc.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDiverged, FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    RunManifest(args.command, cfg.hash(), seeds, arts, started, _now(), tool_version(), cfg.to_dict()).write(out)
    print(out)
    return EXIT_OK


def _raw_yaml(path: str) -> dict:
    import yaml

    return yaml.safe_load(Path(path).read_text()) or {}


if __name__ == "__main__":
    sys.exit(main())
