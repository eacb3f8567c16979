"""Offline trajectories, context windows, normalization and persistence."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .score import ScoreConfig, Variant, rtg_from_scores, score_arrays
from .sim import NUM_FEATURES, EpisodeLog

FORMAT_VERSION = 1
DATA_FILE = "trajectories.jsonl"
MANIFEST_FILE = "manifest.json"


class DatasetError(ValueError):
    """Raised when a stored dataset is unreadable or incompatible."""


@dataclass
class Trajectory:
    states: np.ndarray  # (T, 16)
    actions: np.ndarray  # raw λ, (T,)
    rewards: np.ndarray
    costs: np.ndarray
    rtgs: np.ndarray
    budget: float
    agent: int = 0
    seed: int = 0

    @property
    def num_steps(self) -> int:
        return len(self.actions)

    def with_rtg(self, score_config: ScoreConfig) -> "Trajectory":
        return Trajectory(self.states, self.actions, self.rewards, self.costs,
                          trajectory_rtg(self.rewards, self.costs, score_config),
                          self.budget, self.agent, self.seed)

    def to_record(self) -> dict:
        return {
            "agent": self.agent,
            "seed": self.seed,
            "budget": self.budget,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "costs": self.costs.tolist(),
            "rtgs": self.rtgs.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        arr = lambda key: np.asarray(rec[key], dtype=np.float64)  # noqa: E731
        return cls(arr("states").reshape(-1, NUM_FEATURES), arr("actions"), arr("rewards"), arr("costs"),
                   arr("rtgs"), float(rec["budget"]), int(rec["agent"]), int(rec["seed"]))


def trajectory_rtg(rewards: np.ndarray, costs: np.ndarray, score_config: ScoreConfig) -> np.ndarray:
    scores = score_arrays(np.cumsum(costs), np.cumsum(rewards), score_config)
    return rtg_from_scores(scores)


def episodes_to_trajectories(logs: Sequence[EpisodeLog], score_config: ScoreConfig,
                             num_steps: int | None = None) -> list[Trajectory]:
    out = []
    for log in logs:
        if num_steps is not None and log.num_steps != num_steps:
            raise ValueError(f"incomplete episode: {log.num_steps} of {num_steps} steps")
        if log.num_steps == 0 or log.states.shape != (log.num_steps, NUM_FEATURES):
            raise ValueError("incomplete episode log")
        out.append(Trajectory(
            states=log.states.copy(),
            actions=log.actions.copy(),
            rewards=log.rewards.copy(),
            costs=log.costs.copy(),
            rtgs=trajectory_rtg(log.rewards, log.costs, score_config),
            budget=log.budget,
            agent=log.agent,
            seed=log.seed,
        ))
    return out


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryWindow:
    """``M + 1`` consecutive steps ending at ``timesteps[-1]``.

    Positions before the episode start are zero-padded with ``mask`` False
    and negative timesteps.  ``label_rtgs[k]`` is the RTG one step after
    position ``k`` (0 past the final step).
    """

    rtgs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    label_actions: np.ndarray
    label_rtgs: np.ndarray
    timesteps: np.ndarray
    mask: np.ndarray


@dataclass
class WindowBatch:
    """Stacked windows, leading axis = window index."""

    rtgs: np.ndarray  # (N, L)
    states: np.ndarray  # (N, L, 16)
    actions: np.ndarray  # (N, L)
    label_rtgs: np.ndarray  # (N, L)
    timesteps: np.ndarray  # (N, L) int
    mask: np.ndarray  # (N, L) bool

    def __len__(self) -> int:
        return self.rtgs.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.rtgs[idx], self.states[idx], self.actions[idx], self.label_rtgs[idx],
                           self.timesteps[idx], self.mask[idx])

    @property
    def label_actions(self) -> np.ndarray:
        return self.actions


def _window_index(T: int, M: int):
    ends = np.arange(T)[:, None]
    steps = ends - M + np.arange(M + 1)[None, :]
    return steps, steps >= 0


def stack_windows(trajectories: Sequence[Trajectory], M: int) -> WindowBatch:
    if M < 0:
        raise ValueError("context length M must be >= 0")
    parts = []
    for traj in trajectories:
        T = traj.num_steps
        steps, valid = _window_index(T, M)
        idx = np.where(valid, steps, 0)
        label_src = np.append(traj.rtgs[1:], 0.0)
        z = lambda a: np.where(valid, a[idx], 0.0)  # noqa: E731
        parts.append(WindowBatch(
            rtgs=z(traj.rtgs),
            states=np.where(valid[..., None], traj.states[idx], 0.0),
            actions=z(traj.actions),
            label_rtgs=z(label_src),
            timesteps=steps,
            mask=valid,
        ))
    return WindowBatch(*(np.concatenate([getattr(p, name) for p in parts])
                         for name in ("rtgs", "states", "actions", "label_rtgs", "timesteps", "mask")))


def make_windows(trajectory: Trajectory, M: int) -> list[TrajectoryWindow]:
    batch = stack_windows([trajectory], M)
    return [TrajectoryWindow(batch.rtgs[i], batch.states[i], batch.actions[i], batch.actions[i].copy(),
                             batch.label_rtgs[i], batch.timesteps[i], batch.mask[i])
            for i in range(len(batch))]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class NormalizationStats:
    state_mean: np.ndarray
    state_scale: np.ndarray
    rtg_mean: float
    rtg_scale: float
    action_scale: float

    def __post_init__(self):
        self.state_mean = np.asarray(self.state_mean, dtype=np.float64)
        self.state_scale = np.asarray(self.state_scale, dtype=np.float64)
        if np.any(self.state_scale <= 0) or self.rtg_scale <= 0 or self.action_scale <= 0:
            raise ValueError("normalization scales must be positive")

    def states(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_scale

    def rtg(self, r):
        return (np.asarray(r) - self.rtg_mean) / self.rtg_scale

    def actions(self, a):
        return np.asarray(a) / self.action_scale

    def invert_states(self, z):
        return np.asarray(z) * self.state_scale + self.state_mean

    def invert_rtg(self, z):
        return np.asarray(z) * self.rtg_scale + self.rtg_mean

    def invert_actions(self, z):
        return np.asarray(z) * self.action_scale

    def apply(self, batch: WindowBatch) -> WindowBatch:
        """Normalize a window batch; padded positions stay exactly zero."""
        m = batch.mask
        return WindowBatch(
            rtgs=np.where(m, self.rtg(batch.rtgs), 0.0),
            states=np.where(m[..., None], self.states(batch.states), 0.0),
            actions=np.where(m, self.actions(batch.actions), 0.0),
            label_rtgs=np.where(m, self.rtg(batch.label_rtgs), 0.0),
            timesteps=batch.timesteps,
            mask=m,
        )

    def to_dict(self) -> dict:
        return {
            "state_mean": self.state_mean.tolist(),
            "state_scale": self.state_scale.tolist(),
            "rtg_mean": self.rtg_mean,
            "rtg_scale": self.rtg_scale,
            "action_scale": self.action_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(d["state_mean"], d["state_scale"], float(d["rtg_mean"]), float(d["rtg_scale"]),
                   float(d["action_scale"]))


def _scale(std):
    std = np.asarray(std, dtype=np.float64)
    return np.where(std > 0, std, 1.0)


def fit_normalization(trajectories: Sequence[Trajectory]) -> NormalizationStats:
    if not trajectories:
        raise ValueError("cannot fit normalization on an empty corpus")
    states = np.concatenate([t.states for t in trajectories])
    rtgs = np.concatenate([t.rtgs for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    lam_max = float(actions.max())
    return NormalizationStats(
        state_mean=states.mean(axis=0),
        state_scale=_scale(states.std(axis=0)),
        rtg_mean=float(rtgs.mean()),
        rtg_scale=float(_scale(rtgs.std())),
        action_scale=lam_max if lam_max > 0 else 1.0,
    )


# ---------------------------------------------------------------------------
# corpus persistence
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    trajectories: list[Trajectory]
    score_config: ScoreConfig
    context: int  # M
    normalization: NormalizationStats
    env_config: dict = field(default_factory=dict)
    env_seed: int = 0

    def windows(self) -> WindowBatch:
        return stack_windows(self.trajectories, self.context)

    def episode_scores(self, score_config: ScoreConfig | None = None) -> np.ndarray:
        """Total score of every trajectory (``r_1``) under a score variant."""
        cfg = score_config or self.score_config
        return np.array([trajectory_rtg(t.rewards, t.costs, cfg)[0] for t in self.trajectories])

    def with_variant(self, score_config: ScoreConfig) -> "Corpus":
        """Same corpus with RTGs recomputed under another score variant."""
        trajs = [t.with_rtg(score_config) for t in self.trajectories]
        return Corpus(trajs, score_config, self.context, fit_normalization(trajs), self.env_config, self.env_seed)


def build_corpus(logs: Sequence[EpisodeLog], score_config: ScoreConfig, M: int, env_config: dict | None = None,
                 env_seed: int = 0) -> Corpus:
    trajs = episodes_to_trajectories(logs, score_config)
    return Corpus(trajs, score_config, M, fit_normalization(trajs), dict(env_config or {}), env_seed)


def _manifest(corpus: Corpus, digest: str) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "trajectory-corpus",
        "score_config": corpus.score_config.to_dict(),
        "context": corpus.context,
        "normalization": corpus.normalization.to_dict(),
        "env_config": corpus.env_config,
        "env_seed": corpus.env_seed,
        "count": len(corpus.trajectories),
        "data_sha256": digest,
    }


def save_corpus(corpus: Corpus, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = "".join(json.dumps(t.to_record()) + "\n" for t in corpus.trajectories)
    (path / DATA_FILE).write_text(lines)
    digest = hashlib.sha256(lines.encode()).hexdigest()
    (path / MANIFEST_FILE).write_text(json.dumps(_manifest(corpus, digest), indent=2, sort_keys=True))
    return path


def load_corpus(path: str | Path, expect_context: int | None = None) -> Corpus:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text())
        raw = (path / DATA_FILE).read_text()
    except FileNotFoundError as exc:
        raise DatasetError(f"missing dataset file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupted manifest: {exc}") from None
    try:
        if manifest["format_version"] != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset format version {manifest['format_version']}")
        if hashlib.sha256(raw.encode()).hexdigest() != manifest["data_sha256"]:
            raise DatasetError("dataset file does not match manifest checksum")
        score_config = ScoreConfig(**{k: manifest["score_config"][k] for k in ("cpa_limit", "variant", "gamma")})
        context = int(manifest["context"])
        norm = NormalizationStats.from_dict(manifest["normalization"])
        trajs = [Trajectory.from_record(json.loads(line)) for line in raw.splitlines() if line.strip()]
        if len(trajs) != manifest["count"]:
            raise DatasetError("trajectory count does not match manifest")
        env_config, env_seed = manifest["env_config"], int(manifest["env_seed"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"corrupted manifest: {exc!r}") from None
    if expect_context is not None and expect_context != context:
        raise DatasetError(f"dataset was built with M={context}, configuration asks for M={expect_context}")
    return Corpus(trajs, score_config, context, norm, env_config, env_seed)


def variant_corpus(corpus: Corpus, variant: Variant | str) -> Corpus:
    if Variant(variant) is corpus.score_config.variant:
        return corpus
    return corpus.with_variant(ScoreConfig.for_variant(variant, corpus.score_config.cpa_limit))
