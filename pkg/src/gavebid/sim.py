"""Simulated second-price ad auctions with budget enforcement.

Each time step draws a Poisson number of impressions; every agent has its
own private value for each impression and bids ``lambda * value``.  The
platform charges the winner the second-highest bid and refuses a win the
winner can no longer pay for (one re-auction pass among the others).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numba
import numpy as np

NUM_FEATURES = 16
FEATURE_NAMES = (
    "time_elapsed",
    "time_remaining",
    "budget_remaining",
    "spend_rate_3",
    "spend_total",
    "cpa_ratio",
    "win_rate_last",
    "win_rate_3",
    "win_cost_last",
    "win_cost_3",
    "imp_value_last",
    "imp_value_3",
    "lambda_last",
    "lambda_3",
    "reward_last",
    "value_cum",
)
_HISTORY = 3
_CLAMP = 4.0


@dataclass
class EnvConfig:
    num_steps: int = 48
    impressions_mean: float = 200.0
    num_agents: int = 8
    budget: float = 500.0
    cpa_limit: float = 1.0
    value_alpha: float = 2.0
    value_beta: float = 5.0
    sparse_mode: bool = False
    sparse_scale: float = 0.1
    lambda_max: float = 4.0
    budget_jitter: tuple[float, float] = (0.5, 1.5)  # data collection only
    seed: int = 0

    def __post_init__(self):
        self.budget_jitter = tuple(float(x) for x in self.budget_jitter)
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.impressions_mean < 1:
            raise ValueError("impressions_mean must be >= 1")
        if self.num_agents < 1:
            raise ValueError("num_agents must be >= 1")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.cpa_limit <= 0:
            raise ValueError("cpa_limit must be positive")
        if self.value_alpha <= 0 or self.value_beta <= 0:
            raise ValueError("value distribution parameters must be positive")
        if self.lambda_max <= 0:
            raise ValueError("lambda_max must be positive")
        lo, hi = self.budget_jitter
        if not 0 < lo <= hi:
            raise ValueError(f"budget_jitter must satisfy 0 < lo <= hi, got {self.budget_jitter}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budget_jitter"] = list(self.budget_jitter)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "EnvConfig":
        d = self.to_dict()
        d.update(changes)
        return EnvConfig.from_dict(d)


# ---------------------------------------------------------------------------
# auction mechanics
# ---------------------------------------------------------------------------


@dataclass
class AuctionOutcome:
    """Result of a single-impression auction.

    ``ranking`` lists bidder indices by descending bid (ties: lowest index
    first) and is kept so the platform can re-auction without the winner.
    """

    winner: int | None
    cost: float
    x: np.ndarray
    bids: np.ndarray = field(repr=False)
    ranking: tuple[int, ...] = field(default=(), repr=False)


def _rank(bids: np.ndarray, excluded: Sequence[int] = ()) -> list[int]:
    order = sorted(range(len(bids)), key=lambda k: (-bids[k], k))
    return [k for k in order if k not in excluded]


def _outcome_from_ranking(bids: np.ndarray, ranking: list[int]) -> AuctionOutcome:
    x = np.zeros(len(bids), dtype=np.int8)
    if not ranking or bids[ranking[0]] <= 0:
        return AuctionOutcome(None, 0.0, x, bids, tuple(ranking))
    winner = ranking[0]
    cost = float(bids[ranking[1]]) if len(ranking) > 1 else 0.0
    x[winner] = 1
    return AuctionOutcome(winner, cost, x, bids, tuple(ranking))


def run_gsp_auction(bids: Sequence[float]) -> AuctionOutcome:
    """Highest positive bid wins and pays the second-highest bid."""
    b = np.asarray(bids, dtype=np.float64)
    if b.ndim != 1 or b.size == 0:
        raise ValueError("run_gsp_auction needs a non-empty 1-d bid list")
    if np.any(b < 0) or not np.all(np.isfinite(b)):
        raise ValueError("bids must be finite and nonnegative")
    return _outcome_from_ranking(b, _rank(b))


def enforce_budget(outcome: AuctionOutcome, remaining_budget) -> AuctionOutcome:
    """Refuse a win the winner cannot pay for and re-auction once.

    ``remaining_budget`` is either one number (the winner's budget) or a
    per-agent array, which is needed to check the re-auction winner too.
    """
    if outcome.winner is None:
        return outcome
    per_agent = np.ndim(remaining_budget) > 0
    budgets = np.asarray(remaining_budget, dtype=np.float64) if per_agent else None
    winner_budget = budgets[outcome.winner] if per_agent else float(remaining_budget)
    if winner_budget < 0:
        raise ValueError("remaining budget must be nonnegative")
    if outcome.cost <= winner_budget:
        return outcome
    retry = _outcome_from_ranking(outcome.bids, [k for k in outcome.ranking if k != outcome.winner])
    if retry.winner is not None and per_agent and retry.cost > budgets[retry.winner]:
        x = np.zeros_like(retry.x)
        return AuctionOutcome(None, 0.0, x, outcome.bids, retry.ranking)
    return retry


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    """Per-agent totals for one time step."""

    costs: np.ndarray
    values: np.ndarray  # realized reward: sum of won values (or conversions)
    wins: np.ndarray
    num_impressions: int
    mean_values: np.ndarray  # mean private value over the step's impressions
    second_price_total: float  # sum over impressions of the second-highest bid


@numba.njit(cache=True)
def _auction_kernel(bids, gain, left):
    num_agents, n = bids.shape
    cost = np.zeros(num_agents)
    reward = np.zeros(num_agents)
    wins = np.zeros(num_agents, dtype=np.int64)
    price_total = 0.0
    for i in range(n):
        # top three bids; strict comparison keeps the lowest index on ties
        i1, i2 = -1, -1
        b1, b2, b3 = -1.0, -1.0, -1.0
        for k in range(num_agents):
            b = bids[k, i] if left[k] > 0 else 0.0
            if b > b1:
                b3, b2, i2 = b2, b1, i1
                b1, i1 = b, k
            elif b > b2:
                b3 = b2
                b2, i2 = b, k
            elif b > b3:
                b3 = b
        second = b2 if b2 > 0 else 0.0
        third = b3 if b3 > 0 else 0.0
        price_total += second
        if b1 <= 0:
            continue
        winner, price = i1, second
        if price > left[winner]:
            if i2 < 0 or b2 <= 0 or third > left[i2]:
                continue
            winner, price = i2, third
        left[winner] -= price
        cost[winner] += price
        reward[winner] += gain[winner, i]
        wins[winner] += 1
    return cost, reward, wins, price_total


def resolve_impressions(values: np.ndarray, lambdas: np.ndarray, remaining: np.ndarray,
                        conversions: np.ndarray | None = None):
    """Auction every impression of one step in arrival order.

    ``values`` is agents x impressions.  Agents with no budget left sit out.
    Each impression goes through ``run_gsp_auction`` then ``enforce_budget``
    (compiled loop, same rules).  Returns per-agent cost, reward and win
    count plus the total of second prices.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    bids = np.ascontiguousarray(np.asarray(lambdas, dtype=np.float64)[:, None] * values)
    gain = values if conversions is None else np.ascontiguousarray(conversions, dtype=np.float64)
    left = np.array(remaining, dtype=np.float64)
    return _auction_kernel(bids, gain, left)


class AgentHistory:
    """Per-agent step records used to build state features."""

    def __init__(self, num_steps: int, budget: float):
        self.budget = float(budget)
        self.num_steps = num_steps
        self.t = 0
        self.costs = np.zeros(num_steps)
        self.rewards = np.zeros(num_steps)
        self.wins = np.zeros(num_steps)
        self.impressions = np.zeros(num_steps)
        self.mean_values = np.zeros(num_steps)
        self.lambdas = np.zeros(num_steps)

    @property
    def spent(self) -> float:
        return float(self.costs[: self.t].sum())

    @property
    def remaining(self) -> float:
        return max(self.budget - self.spent, 0.0)

    def record(self, lam, cost, reward, wins, impressions, mean_value):
        t = self.t
        self.lambdas[t] = lam
        self.costs[t] = cost
        self.rewards[t] = reward
        self.wins[t] = wins
        self.impressions[t] = impressions
        self.mean_values[t] = mean_value
        self.t += 1


def build_state_features(history: AgentHistory, cpa_limit: float, lambda_max: float) -> np.ndarray:
    """Fixed 16-feature description of an agent's situation before step ``t``."""
    t, T, B = history.t, history.num_steps, history.budget
    f = np.zeros(NUM_FEATURES)
    f[0] = t / T
    f[1] = (T - t) / T
    if B > 0:
        spent = history.spent
        f[2] = max(B - spent, 0.0) / B
        f[4] = spent / B
    if t == 0:
        return f
    k = min(_HISTORY, t)
    recent = slice(t - k, t)
    last = t - 1
    if B > 0:
        f[3] = min(history.costs[recent].sum() / B * T / k, _CLAMP)
    cum_cost = history.costs[:t].sum()
    cum_value = history.rewards[:t].sum()
    if cum_value > 0:
        f[5] = min(cum_cost / cum_value / cpa_limit, _CLAMP)
    elif cum_cost > 0:
        f[5] = _CLAMP
    imps = history.impressions
    f[6] = history.wins[last] / imps[last] if imps[last] > 0 else 0.0
    f[7] = history.wins[recent].sum() / imps[recent].sum() if imps[recent].sum() > 0 else 0.0
    if history.wins[last] > 0:
        f[8] = history.costs[last] / history.wins[last] / cpa_limit
    if history.wins[recent].sum() > 0:
        f[9] = history.costs[recent].sum() / history.wins[recent].sum() / cpa_limit
    f[10] = history.mean_values[last]
    f[11] = history.mean_values[recent].mean()
    f[12] = history.lambdas[last] / lambda_max
    f[13] = history.lambdas[recent].mean() / lambda_max
    best = history.rewards[:t].max()
    if best > 0:
        f[14] = history.rewards[last] / best
        f[15] = cum_value / (t * best)
    return f


class AuctionEnv:
    """One delivery period shared by ``num_agents`` bidders."""

    def __init__(self, config: EnvConfig, budgets: Sequence[float] | None = None, seed: int | None = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        if budgets is None:
            budgets = np.full(config.num_agents, config.budget)
        self.budgets = np.asarray(budgets, dtype=np.float64)
        if self.budgets.shape != (config.num_agents,):
            raise ValueError("need one budget per agent")
        if np.any(self.budgets < 0):
            raise ValueError("budgets must be nonnegative")
        streams = np.random.SeedSequence(self.seed).spawn(2)
        self._imp_rng = np.random.default_rng(streams[0])
        self._conv_rng = np.random.default_rng(streams[1])
        self.t = 0
        self.histories = [AgentHistory(config.num_steps, b) for b in self.budgets]
        self.second_price_total = 0.0

    @property
    def done(self) -> bool:
        return self.t >= self.config.num_steps

    def states(self) -> np.ndarray:
        cfg = self.config
        return np.stack([build_state_features(h, cfg.cpa_limit, cfg.lambda_max) for h in self.histories])

    def remaining(self) -> np.ndarray:
        return np.array([h.remaining for h in self.histories])

    def sample_impressions(self) -> np.ndarray:
        """Private values (agents x impressions) for the current step."""
        cfg = self.config
        n = int(self._imp_rng.poisson(cfg.impressions_mean))
        values = self._imp_rng.beta(cfg.value_alpha, cfg.value_beta, size=(cfg.num_agents, n))
        return np.clip(values, 0.0, 1.0)

    def step(self, lambdas: Sequence[float], values: np.ndarray | None = None) -> StepResult:
        if self.done:
            raise RuntimeError("episode already finished")
        cfg = self.config
        lam = np.asarray(lambdas, dtype=np.float64)
        if lam.shape != (cfg.num_agents,):
            raise ValueError(f"expected {cfg.num_agents} lambdas, got shape {lam.shape}")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("lambdas must be finite and nonnegative")
        if values is None:
            values = self.sample_impressions()
        values = np.asarray(values, dtype=np.float64)
        n = values.shape[1]
        conversions = None
        if cfg.sparse_mode:
            draws = self._conv_rng.random(values.shape)
            conversions = (draws < values * cfg.sparse_scale).astype(np.float64)
        cost, reward, wins, price_total = resolve_impressions(values, lam, self.remaining(), conversions)
        mean_values = values.mean(axis=1) if n else np.zeros(cfg.num_agents)
        for k, h in enumerate(self.histories):
            h.record(lam[k], cost[k], reward[k], wins[k], n, mean_values[k])
        self.second_price_total += price_total
        self.t += 1
        return StepResult(cost, reward, wins, n, mean_values, price_total)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


class Policy(Protocol):
    def reset(self) -> None: ...

    def act(self, state: np.ndarray, step: int) -> float: ...

    def observe(self, cost: float, value: float) -> None: ...


class ScriptedPolicy:
    name = "scripted"

    def reset(self) -> None:
        pass

    def observe(self, cost: float, value: float) -> None:
        pass

    def describe(self) -> dict:
        return {"kind": self.name, **{k: v for k, v in vars(self).items() if not k.startswith("_")}}


class ConstantLambda(ScriptedPolicy):
    name = "constant"

    def __init__(self, lam: float):
        self.lam = float(lam)

    def act(self, state, step):
        return self.lam


class LinearPacing(ScriptedPolicy):
    """λ moves linearly from ``start`` to ``end`` across the period."""

    name = "linear-pacing"

    def __init__(self, start: float, end: float, num_steps: int = 48):
        self.start = float(start)
        self.end = float(end)
        self.num_steps = int(num_steps)

    def act(self, state, step):
        frac = step / max(self.num_steps - 1, 1)
        return max(self.start + (self.end - self.start) * frac, 0.0)


class RandomWalkLambda(ScriptedPolicy):
    """Log-space random walk around an initial λ."""

    name = "random-walk"

    def __init__(self, start: float, step_size: float = 0.1, seed: int = 0, low: float = 0.0, high: float = math.inf):
        self.start = float(start)
        self.step_size = float(step_size)
        self.seed = int(seed)
        self.low = float(low)
        self.high = float(high)
        self.reset()

    def reset(self):
        self._rng = np.random.default_rng(self.seed)
        self._lam = self.start

    def act(self, state, step):
        if step > 0:
            self._lam *= math.exp(self.step_size * self._rng.standard_normal())
        self._lam = min(max(self._lam, self.low), self.high)
        return self._lam


class PidPacing(ScriptedPolicy):
    """Steers λ so the budget is spent uniformly over the period.

    The error is spent fraction minus elapsed fraction; overspending
    lowers λ multiplicatively.
    """

    name = "pid-pacing"

    def __init__(self, base: float, kp: float = 2.0, ki: float = 0.2, kd: float = 0.5, high: float = math.inf):
        self.base = float(base)
        self.kp = float(kp)
        self.ki = float(ki)
        self.kd = float(kd)
        self.high = float(high)
        self.reset()

    def reset(self):
        self._integral = 0.0
        self._prev_error = 0.0

    def act(self, state, step):
        error = float(state[4] - state[0])
        self._integral += error
        derivative = error - self._prev_error
        self._prev_error = error
        control = self.kp * error + self.ki * self._integral + self.kd * derivative
        return min(self.base * math.exp(-control), self.high)


POLICY_KINDS: dict[str, Callable[..., ScriptedPolicy]] = {
    "constant": ConstantLambda,
    "linear-pacing": LinearPacing,
    "random-walk": RandomWalkLambda,
    "pid-pacing": PidPacing,
}


def scripted_policy(kind: str, **params) -> ScriptedPolicy:
    try:
        factory = POLICY_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown policy kind {kind!r}; expected one of {sorted(POLICY_KINDS)}") from None
    return factory(**params)


def sample_policy(rng: np.random.Generator, config: EnvConfig) -> ScriptedPolicy:
    """Random scripted opponent for data collection.

    Base λ is log-uniform over ``[0.4 C, 3 C]`` so the corpus contains both
    conservative and CPA-violating behavior.
    """
    C = config.cpa_limit
    base = C * math.exp(rng.uniform(math.log(0.4), math.log(3.0)))
    kind = ("constant", "linear-pacing", "random-walk", "pid-pacing")[rng.integers(4)]
    if kind == "constant":
        return ConstantLambda(base)
    if kind == "linear-pacing":
        end = base * math.exp(rng.uniform(-0.7, 0.7))
        return LinearPacing(base, end, config.num_steps)
    if kind == "random-walk":
        return RandomWalkLambda(base, float(rng.uniform(0.05, 0.25)), int(rng.integers(2**31)), high=config.lambda_max)
    return PidPacing(base, kp=float(rng.uniform(0.5, 4.0)), ki=float(rng.uniform(0.0, 0.5)),
                     kd=float(rng.uniform(0.0, 1.0)), high=config.lambda_max)


def default_roster(config: EnvConfig, seed: int = 1234) -> list[ScriptedPolicy]:
    """Fixed opponent population for evaluation, one policy per slot."""
    rng = np.random.default_rng(seed)
    return [sample_policy(rng, config) for _ in range(config.num_agents)]


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class EpisodeLog:
    """One agent's record of a full delivery period."""

    agent: int
    budget: float
    cpa_limit: float
    states: np.ndarray  # (T, 16), observed before acting
    actions: np.ndarray  # (T,)
    rewards: np.ndarray
    costs: np.ndarray
    wins: np.ndarray
    impressions: np.ndarray
    policy: str = ""
    seed: int = 0

    @property
    def num_steps(self) -> int:
        return len(self.actions)

    @property
    def cum_cost(self) -> np.ndarray:
        return np.cumsum(self.costs)

    @property
    def cum_value(self) -> np.ndarray:
        return np.cumsum(self.rewards)

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())

    @property
    def total_value(self) -> float:
        return float(self.rewards.sum())

    def to_record(self) -> dict:
        return {
            "agent": self.agent,
            "seed": self.seed,
            "policy": self.policy,
            "budget": self.budget,
            "cpa_limit": self.cpa_limit,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "costs": self.costs.tolist(),
            "wins": self.wins.tolist(),
            "impressions": self.impressions.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EpisodeLog":
        return cls(
            agent=int(rec["agent"]),
            budget=float(rec["budget"]),
            cpa_limit=float(rec["cpa_limit"]),
            states=np.asarray(rec["states"], dtype=np.float64).reshape(-1, NUM_FEATURES),
            actions=np.asarray(rec["actions"], dtype=np.float64),
            rewards=np.asarray(rec["rewards"], dtype=np.float64),
            costs=np.asarray(rec["costs"], dtype=np.float64),
            wins=np.asarray(rec["wins"], dtype=np.float64),
            impressions=np.asarray(rec["impressions"], dtype=np.float64),
            policy=rec.get("policy", ""),
            seed=int(rec.get("seed", 0)),
        )

    def __eq__(self, other):
        if not isinstance(other, EpisodeLog):
            return NotImplemented
        return self.to_record() == other.to_record()


def run_episode(config: EnvConfig, policies: Sequence[Policy], budgets: Sequence[float] | None = None,
                seed: int | None = None) -> list[EpisodeLog]:
    """Play one delivery period; deterministic given the seed."""
    if len(policies) != config.num_agents:
        raise ValueError(f"need {config.num_agents} policies, got {len(policies)}")
    env = AuctionEnv(config, budgets=budgets, seed=seed)
    T = config.num_steps
    states = np.zeros((config.num_agents, T, NUM_FEATURES))
    for p in policies:
        p.reset()
    while not env.done:
        t = env.t
        s = env.states()
        states[:, t] = s
        lam = np.array([max(float(p.act(s[k], t)), 0.0) for k, p in enumerate(policies)])
        result = env.step(lam)
        for k, p in enumerate(policies):
            p.observe(float(result.costs[k]), float(result.values[k]))
    logs = []
    for k, h in enumerate(env.histories):
        logs.append(EpisodeLog(
            agent=k,
            budget=h.budget,
            cpa_limit=config.cpa_limit,
            states=states[k],
            actions=h.lambdas.copy(),
            rewards=h.rewards.copy(),
            costs=h.costs.copy(),
            wins=h.wins.copy(),
            impressions=h.impressions.copy(),
            policy=getattr(policies[k], "name", type(policies[k]).__name__),
            seed=env.seed,
        ))
    return logs


def sample_budgets(rng: np.random.Generator, config: EnvConfig) -> np.ndarray:
    lo, hi = config.budget_jitter
    return config.budget * rng.uniform(lo, hi, size=config.num_agents)


def write_episode_logs(path: str | Path, logs: Sequence[EpisodeLog], config: EnvConfig) -> None:
    """Newline-delimited JSON records plus a ``.manifest.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for log in logs:
            fh.write(json.dumps(log.to_record()) + "\n")
    manifest = {"kind": "episode-logs", "env_config": config.to_dict(), "seed": config.seed, "count": len(logs)}
    path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_episode_logs(path: str | Path) -> list[EpisodeLog]:
    with Path(path).open() as fh:
        return [EpisodeLog.from_record(json.loads(line)) for line in fh if line.strip()]


def collect_episodes(config: EnvConfig, num_episodes: int, seed: int | None = None) -> list[EpisodeLog]:
    """Offline corpus: scripted agents with random strategies and budgets."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    logs: list[EpisodeLog] = []
    for _ in range(num_episodes):
        policies = [sample_policy(rng, config) for _ in range(config.num_agents)]
        budgets = sample_budgets(rng, config)
        episode_seed = int(rng.integers(2**31))
        logs.extend(run_episode(config, policies, budgets, seed=episode_seed))
    return logs
