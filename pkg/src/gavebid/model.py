"""Causal transformer decision model with value-guided action exploration.

Tokens are interleaved per step as (rtg, state, action).  The coefficient,
action and value heads read the state-token outputs; the next-RTG head reads
the action-token outputs, so it sees the action it is evaluating.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .sim import NUM_FEATURES


class TrainVariant(str, enum.Enum):
    GAVE = "gave"
    GAVE_V = "gave-v"
    GAVE_VA = "gave-va"
    DT = "dt"

    @property
    def explores(self) -> bool:
        return self in (TrainVariant.GAVE, TrainVariant.GAVE_V)


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    width: int = 32
    context: int = 19  # M; windows hold M + 1 steps
    max_timestep: int = 48
    state_dim: int = NUM_FEATURES
    alpha_r: float = 1.0
    tau: float = 0.99
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    beta_range: tuple[float, float] = (0.5, 1.5)
    # the explore pass scores ã with a frozen copy of the RTG predictor, so the
    # guidance losses move β̂ and never reshape the critic that judges it
    freeze_critic: bool = True
    # False keeps the guidance losses (L_v / L_w) out of the shared trunk: the
    # β head then reads a frozen copy of the state-token features
    guide_trunk: bool = True

    def __post_init__(self):
        self.loss_weights = tuple(float(a) for a in self.loss_weights)
        self.beta_range = tuple(float(b) for b in self.beta_range)
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if len(self.loss_weights) != 4 or any(a < 0 for a in self.loss_weights):
            raise ValueError("loss_weights must be four nonnegative numbers")
        if self.alpha_r < 0:
            raise ValueError("alpha_r must be nonnegative")
        if self.beta_range != (0.5, 1.5):
            raise ValueError("beta_range is fixed at (0.5, 1.5)")
        if self.context < 0 or self.layers < 1:
            raise ValueError("invalid context or layer count")

    @property
    def window(self) -> int:
        return self.context + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["beta_range"] = list(self.beta_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def scale_sigma(x):
    """Sigmoid shifted into (0.5, 1.5)."""
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x) + 0.5
    return 1.0 / (1.0 + math.exp(-x)) + 0.5 if x > -700 else 0.5


def explore_actions(beta_hat: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    return dc.mul(beta_hat, actions)


def weight_w(r_tilde: torch.Tensor, r_hat: torch.Tensor, alpha_r: float) -> torch.Tensor:
    """Gradient-free mixing weight between label and explored action."""
    with torch.no_grad():
        return torch.sigmoid(alpha_r * (dc.freeze(r_tilde) - dc.freeze(r_hat)))


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, zero: bool = False):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        w = torch.zeros(n_in, n_out) if zero else torch.empty(n_in, n_out).uniform_(-bound, bound)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(n_out))

    def forward(self, x):
        return dc.add(dc.matmul(x, self.weight), self.bias)


class LayerNorm(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x):
        return dc.layer_norm(x, self.weight, self.bias)


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = LayerNorm(width)
        self.qkv = Linear(width, 3 * width)
        self.proj = Linear(width, width)
        self.ln2 = LayerNorm(width)
        self.fc = Linear(width, 4 * width)
        self.out = Linear(4 * width, width)

    def attend(self, x, allowed):
        B, N, W = x.shape
        h, d = self.heads, W // self.heads
        q, k, v = self.qkv(x).split(W, dim=-1)
        q, k, v = (t.reshape(B, N, h, d).transpose(1, 2) for t in (q, k, v))
        att = dc.masked_softmax(q @ k.transpose(-2, -1) / math.sqrt(d), allowed[:, None].expand(B, h, N, N))
        y = (att @ v).transpose(1, 2).reshape(B, N, W)
        return self.proj(y)

    def forward(self, x, allowed):
        x = x + self.attend(self.ln1(x), allowed)
        return x + self.out(dc.gelu(self.fc(self.ln2(x))))


@dataclass
class ForwardOutputs:
    beta_hat: torch.Tensor  # (B, L)
    a_hat: torch.Tensor
    v_hat: torch.Tensor
    r_hat: torch.Tensor


class DecisionModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        W = config.width
        self.embed_rtg = Linear(1, W)
        self.embed_state = Linear(config.state_dim, W)
        self.embed_action = Linear(1, W)
        self.embed_time = nn.Parameter(torch.randn(config.max_timestep, W) * 0.02)
        self.ln_in = LayerNorm(W)
        self.blocks = nn.ModuleList(Block(W, config.heads) for _ in range(config.layers))
        self.ln_out = LayerNorm(W)
        self.head_beta = Linear(W, 1, zero=True)
        self.head_action = Linear(W, 1)
        self.head_value = Linear(W, 1)
        self.head_rtg = Linear(W, 1)

    # -- trunk ---------------------------------------------------------------

    def _attention_mask(self, mask: torch.Tensor) -> torch.Tensor:
        B, L = mask.shape
        n = 3 * L
        causal = torch.ones(n, n, dtype=torch.bool).tril()
        keys = mask.repeat_interleave(3, dim=1)
        eye = torch.eye(n, dtype=torch.bool)
        # padded queries attend to themselves only, so no row is empty
        return (causal[None] & keys[:, None, :]) | eye[None]

    def trunk(self, rtgs, states, actions, timesteps, mask):
        B, L = rtgs.shape
        if L > self.config.window:
            raise ValueError(f"context of {L} steps exceeds M + 1 = {self.config.window}")
        t = dc.embedding(self.embed_time, timesteps.clamp(0, self.config.max_timestep - 1))
        tokens = torch.stack([
            self.embed_rtg(rtgs[..., None]) + t,
            self.embed_state(states) + t,
            self.embed_action(actions[..., None]) + t,
        ], dim=2).reshape(B, 3 * L, -1)
        x = self.ln_in(tokens)
        allowed = self._attention_mask(mask)
        for block in self.blocks:
            x = block(x, allowed)
        x = self.ln_out(x).reshape(B, L, 3, -1)
        return x[:, :, 1], x[:, :, 2]

    # -- heads ---------------------------------------------------------------

    def forward_teacher(self, batch: dict) -> ForwardOutputs:
        h_state, h_action = self.trunk(batch["rtgs"], batch["states"], batch["actions"], batch["timesteps"],
                                       batch["mask"])
        return ForwardOutputs(
            beta_hat=scale_sigma(self.head_beta(h_state if self.config.guide_trunk else dc.freeze(h_state))[..., 0]),
            a_hat=self.head_action(h_state)[..., 0],
            v_hat=self.head_value(h_state)[..., 0],
            r_hat=self.head_rtg(h_action)[..., 0],
        )

    def forward(self, batch: dict, explored: torch.Tensor | None = None):
        if explored is None:
            return self.forward_teacher(batch)
        _, h_action = self.trunk(batch["rtgs"], batch["states"], explored, batch["timesteps"], batch["mask"])
        return self.head_rtg(h_action)[..., 0]

    def forward_explore(self, batch: dict, explored: torch.Tensor,
                        critic: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
        """Next-RTG predictions with every action token replaced by ``explored``.

        With ``critic`` (a name -> tensor dict) the pass runs on those
        parameters instead of the live ones.
        """
        if explored.shape != batch["actions"].shape:
            raise ValueError("explored actions must match the action stream")
        if critic is None:
            return self(batch, explored)
        return torch.func.functional_call(self, critic, (batch, explored))

    def critic_snapshot(self) -> dict[str, torch.Tensor]:
        return {k: dc.freeze(v) for k, v in self.named_parameters()}

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_r(r_hat, label_rtgs, mask):
    return dc.masked_mean((r_hat - label_rtgs) ** 2, mask)


def loss_a(a_hat, actions, explored_frozen, w_frozen, mask):
    bc = (a_hat - actions) ** 2
    ex = (a_hat - explored_frozen) ** 2
    return dc.masked_mean((1 - w_frozen) * bc + w_frozen * ex, mask)


def loss_e(v_hat, label_rtgs, tau, mask):
    return dc.expectile_loss(v_hat, label_rtgs, tau, mask)


def loss_v(r_tilde, v_hat_frozen, mask):
    return dc.masked_mean((r_tilde - v_hat_frozen) ** 2, mask)


def loss_w_ablation(r_tilde, r_hat_frozen, alpha_r, mask):
    return dc.masked_mean(1 - torch.sigmoid(alpha_r * (r_tilde - r_hat_frozen)), mask)


def loss_total(components: dict, weights) -> torch.Tensor:
    a1, a2, a3, a4 = weights
    total = a1 * components["L_r"] + a2 * components["L_a"]
    if "L_e" in components:
        total = total + a3 * components["L_e"]
    if "L_v" in components:
        total = total + a4 * components["L_v"]
    if "L_w" in components:
        total = total + a4 * components["L_w"]
    return total


def frozen_values(model: DecisionModel, batch: dict, variant: TrainVariant | str = TrainVariant.GAVE) -> dict:
    """Every stop-gradient quantity of ``compute_losses`` at the current parameters.

    Passing the result back as ``frozen=`` holds those quantities constant,
    which is what a finite-difference check of the losses must do.
    """
    variant = TrainVariant(variant)
    with torch.no_grad():
        out = model.forward_teacher(batch)
        explored = explore_actions(out.beta_hat, batch["actions"])
        critic = model.critic_snapshot() if model.config.freeze_critic else None
        r_tilde = model.forward_explore(batch, explored, critic)
        w = weight_w(r_tilde, out.r_hat, model.config.alpha_r)
    return {"explored": explored, "w": w, "v_hat": out.v_hat, "r_hat": out.r_hat,
            "critic": {k: v.clone() for k, v in critic.items()} if critic is not None else None}


def compute_losses(model: DecisionModel, batch: dict, variant: TrainVariant | str = TrainVariant.GAVE,
                   detach_explored: bool = False, frozen: dict | None = None) -> dict:
    """All loss terms of one batch plus diagnostics.

    Returns a dict holding tensors ``L_*`` and ``L_o`` and floats
    ``w_mean`` / ``beta_mean`` for exploring variants.  ``frozen`` overrides
    the stop-gradient quantities (see ``frozen_values``).
    """
    variant = TrainVariant(variant)
    cfg = model.config
    mask = batch["mask"]
    labels = batch["label_rtgs"]
    actions = batch["actions"]
    out = model.forward_teacher(batch)
    comps = {"L_r": loss_r(out.r_hat, labels, mask)}
    if variant.explores:
        explored = explore_actions(out.beta_hat, actions)
        if frozen is not None:
            critic = frozen["critic"]
        else:
            critic = model.critic_snapshot() if cfg.freeze_critic else None
        r_tilde = model.forward_explore(batch, dc.freeze(explored) if detach_explored else explored, critic)
        if frozen is not None:
            explored_f, w, v_f, r_f = frozen["explored"], frozen["w"], frozen["v_hat"], frozen["r_hat"]
        else:
            explored_f, v_f, r_f = dc.freeze(explored), dc.freeze(out.v_hat), dc.freeze(out.r_hat)
            w = weight_w(r_tilde, out.r_hat, cfg.alpha_r)
        comps["L_a"] = loss_a(out.a_hat, actions, explored_f, w, mask)
        if variant is TrainVariant.GAVE:
            comps["L_e"] = loss_e(out.v_hat, labels, cfg.tau, mask)
            comps["L_v"] = loss_v(r_tilde, v_f, mask)
        else:
            comps["L_w"] = loss_w_ablation(r_tilde, r_f, cfg.alpha_r, mask)
        m = mask.to(w.dtype)
        comps["w_mean"] = float((w * m).sum() / m.sum())
        comps["beta_mean"] = float((out.beta_hat.detach() * m).sum() / m.sum())
    else:
        zeros = torch.zeros_like(actions)
        comps["L_a"] = loss_a(out.a_hat, actions, zeros, zeros, mask)
    comps["L_o"] = loss_total(comps, cfg.loss_weights)
    return comps


def loss_gradcheck(model: DecisionModel, batch: dict, variant: TrainVariant | str = TrainVariant.GAVE,
                   names=("L_r", "L_a", "L_e", "L_v", "L_o"), step: float = 1e-3) -> dict[str, float]:
    """Worst per-tensor relative error between autograd and central differences.

    Stop-gradient quantities are evaluated once at the current parameters and
    held fixed, matching what autograd differentiates.
    """
    frozen = frozen_values(model, batch, variant)
    params = dict(model.named_parameters())
    analytic = {}
    for name in names:
        for p in params.values():
            p.grad = None
        loss = compute_losses(model, batch, variant, frozen=frozen)[name]
        if loss.requires_grad:
            dc.backward(loss)
        analytic[name] = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                          for k, p in params.items()}
    worst = {n: 0.0 for n in names}
    with torch.no_grad():
        for pname, p in params.items():
            flat = p.view(-1)
            numeric = {n: torch.zeros(flat.numel(), dtype=p.dtype) for n in names}
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = compute_losses(model, batch, variant, frozen=frozen)
                flat[i] = orig - step
                lo = compute_losses(model, batch, variant, frozen=frozen)
                flat[i] = orig
                for n in names:
                    numeric[n][i] = (float(hi[n]) - float(lo[n])) / (2 * step)
            for n in names:
                worst[n] = max(worst[n], dc.relative_error(analytic[n][pname].reshape(-1), numeric[n]))
    return worst


def batch_tensors(windows, dtype=dc.DEFAULT_DTYPE) -> dict:
    """Torch views of a normalized ``WindowBatch``."""
    f = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
    return {
        "rtgs": f(windows.rtgs),
        "states": f(windows.states),
        "actions": f(windows.actions),
        "label_rtgs": f(windows.label_rtgs),
        "timesteps": torch.as_tensor(np.asarray(windows.timesteps), dtype=torch.int64),
        "mask": torch.as_tensor(np.asarray(windows.mask), dtype=torch.bool),
    }


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class RunningContext:
    """Raw (unnormalized) history of the current episode."""

    rtgs: list = field(default_factory=list)
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    timesteps: list = field(default_factory=list)


@torch.no_grad()
def predict_action(model: DecisionModel, norm, context: RunningContext, state: np.ndarray, rtg: float,
                   timestep: int) -> float:
    """Raw λ for the current step given up to M previous steps of context."""
    cfg = model.config
    M = cfg.context
    rtgs = (context.rtgs + [rtg])[-(M + 1):]
    states = (context.states + [np.asarray(state, dtype=np.float64)])[-(M + 1):]
    actions = (context.actions + [0.0])[-(M + 1):]
    steps = (context.timesteps + [timestep])[-(M + 1):]
    n, L = len(rtgs), M + 1
    pad = L - n
    dtype = next(model.parameters()).dtype
    mask = np.zeros(L, dtype=bool)
    mask[pad:] = True
    r = np.zeros(L)
    r[pad:] = norm.rtg(np.asarray(rtgs))
    s = np.zeros((L, cfg.state_dim))
    s[pad:] = norm.states(np.stack(states))
    a = np.zeros(L)
    a[pad:] = norm.actions(np.asarray(actions))
    a[-1] = 0.0
    ts = np.arange(L) - L + 1 + steps[-1]
    batch = {
        "rtgs": torch.as_tensor(r[None], dtype=dtype),
        "states": torch.as_tensor(s[None], dtype=dtype),
        "actions": torch.as_tensor(a[None], dtype=dtype),
        "timesteps": torch.as_tensor(ts[None], dtype=torch.int64),
        "mask": torch.as_tensor(mask[None]),
    }
    out = model.forward_teacher(batch)
    lam = float(norm.invert_actions(float(out.a_hat[0, -1])))
    return max(lam, 0.0)
