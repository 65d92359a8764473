"""Behavior heads and losses: actor, twohot critics, reward/continue heads.

The actor and critic only ever see world-model features. The actor trains on
imagined trajectories with scaled-advantage policy gradients; the critic
regresses twohot-encoded lambda-returns and is regularized toward (and
bootstrapped from) a slow-moving copy of itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import TwohotCodec, unimix


@dataclass
class BehaviorConfig:
    feature_dim: int
    action_dim: int
    hidden: int = 256
    mlp_layers: int = 2
    bins: int = 255
    bin_low: float = -20.0
    bin_high: float = 20.0
    unimix_ratio: float = 0.01

    def __post_init__(self):
        if self.feature_dim <= 0 or self.action_dim <= 0:
            raise ValueError("feature_dim and action_dim must be positive")


def _mlp(in_dim: int, hidden: int, out_dim: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(depth):
        layers += [nn.Linear(d, hidden), nn.LayerNorm(hidden), nn.SiLU()]
        d = hidden
    out = nn.Linear(d, out_dim)
    # zero-initialized outputs: value/reward predictions start at the bin
    # mean (~0) and the policy starts uniform
    nn.init.zeros_(out.weight)
    nn.init.zeros_(out.bias)
    layers.append(out)
    return nn.Sequential(*layers)


class BehaviorHeads(nn.Module):
    def __init__(self, cfg: BehaviorConfig):
        super().__init__()
        self.cfg = cfg
        self.codec = TwohotCodec(cfg.bins, cfg.bin_low, cfg.bin_high, "symexp")
        self.actor = _mlp(cfg.feature_dim, cfg.hidden, cfg.action_dim, cfg.mlp_layers)
        self.critic = _mlp(cfg.feature_dim, cfg.hidden, cfg.bins, cfg.mlp_layers)
        self.critic_slow = _mlp(cfg.feature_dim, cfg.hidden, cfg.bins, cfg.mlp_layers)
        self.reward = _mlp(cfg.feature_dim, cfg.hidden, cfg.bins, cfg.mlp_layers)
        self.cont = _mlp(cfg.feature_dim, cfg.hidden, 1, cfg.mlp_layers)
        self.critic_slow.load_state_dict(self.critic.state_dict())
        for p in self.critic_slow.parameters():
            p.requires_grad_(False)

    # ----------------------------------------------------------------- actor

    def action_probs(self, features: torch.Tensor) -> torch.Tensor:
        probs = torch.softmax(self.actor(features), dim=-1)
        return unimix(probs, self.cfg.unimix_ratio)

    def act(self, features: torch.Tensor, generator: torch.Generator | None = None,
            mode: bool = False) -> torch.Tensor:
        """Sample (or argmax, with mode=True) a one-hot action."""
        with torch.no_grad():
            probs = self.action_probs(features)
            if mode:
                idx = probs.argmax(-1)
            else:
                idx = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        return F.one_hot(idx, self.cfg.action_dim).to(features.dtype)

    def policy_stats(self, features: torch.Tensor, actions: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor]:
        """Log-probabilities of taken one-hot actions, and policy entropy."""
        probs = self.action_probs(features)
        logp = (actions * torch.log(probs)).sum(-1)
        entropy = -(probs * torch.log(probs)).sum(-1)
        return logp, entropy

    # ---------------------------------------------------------------- critic

    def value(self, features: torch.Tensor, slow: bool = False) -> torch.Tensor:
        net = self.critic_slow if slow else self.critic
        return self.codec.mean_from_logits(net(features))

    def reward_pred(self, features: torch.Tensor) -> torch.Tensor:
        return self.codec.mean_from_logits(self.reward(features))

    def cont_prob(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.cont(features)).squeeze(-1)

    def update_slow(self, rate: float = 0.02) -> None:
        with torch.no_grad():
            for fast, slow in zip(self.critic.parameters(),
                                  self.critic_slow.parameters()):
                slow.lerp_(fast, rate)


# ------------------------------------------------------------------- returns

def lambda_returns(rewards: torch.Tensor, continues: torch.Tensor,
                   values: torch.Tensor, discount: float,
                   lam: float) -> torch.Tensor:
    """Bootstrapped lambda-returns along the leading time axis.

    rewards/continues cover N transitions; values has N+1 entries, the last
    being the bootstrap. Returns N+1 entries: the last equals the bootstrap
    value and R_t = r_t + discount * c_t * ((1-lam)*v_{t+1} + lam*R_{t+1}).
    """
    n = rewards.shape[0]
    if continues.shape[0] != n or values.shape[0] != n + 1:
        raise ValueError(
            "lambda_returns: rewards/continues need N entries and values N+1"
        )
    out = [values[-1]]
    for t in range(n - 1, -1, -1):
        blend = (1.0 - lam) * values[t + 1] + lam * out[-1]
        out.append(rewards[t] + discount * continues[t] * blend)
    out.reverse()
    return torch.stack(out)


# --------------------------------------------------------------------- losses

def world_model_losses(dyn: torch.Tensor, rep: torch.Tensor,
                       rec_raw: torch.Tensor,
                       rec_res: torch.Tensor | None = None,
                       free_bits: float = 1.0,
                       dyn_scale: float = 1.0, rep_scale: float = 0.1,
                       rec_scale: float = 1.0
                       ) -> tuple[torch.Tensor, dict[str, float]]:
    """Combine one layer's loss pieces with free bits and fixed scales.

    KL terms are clamped from below at `free_bits` per sample, which zeroes
    their gradient wherever the constraint is already met.
    """
    dyn_c = dyn.clamp(min=free_bits).mean()
    rep_c = rep.clamp(min=free_bits).mean()
    rec = rec_raw.mean() + (rec_res.mean() if rec_res is not None else 0.0)
    total = dyn_scale * dyn_c + rep_scale * rep_c + rec_scale * rec
    metrics = {
        "dyn_kl": float(dyn.mean().detach()),
        "rep_kl": float(rep.mean().detach()),
        "rec_raw": float(rec_raw.mean().detach()),
    }
    if rec_res is not None:
        metrics["rec_res"] = float(rec_res.mean().detach())
    return total, metrics


def actor_loss(log_probs: torch.Tensor, entropy: torch.Tensor,
               returns: torch.Tensor, values: torch.Tensor,
               scale: float, entropy_coeff: float = 3e-4) -> torch.Tensor:
    """Scaled-advantage policy gradient; higher entropy lowers the loss.

    returns/values are treated as constants; the divisor is clamped to >= 1
    so small return spreads never amplify the advantages.
    """
    adv = (returns.detach() - values.detach()) / max(1.0, scale)
    return -(adv * log_probs).mean() - entropy_coeff * entropy.mean()


def critic_loss(codec: TwohotCodec, logits: torch.Tensor,
                targets: torch.Tensor, slow_values: torch.Tensor,
                slow_reg_scale: float = 1.0) -> torch.Tensor:
    """Twohot NLL against the return targets plus a slow-copy regularizer."""
    nll = -codec.log_prob(logits, targets.detach()).mean()
    reg = -codec.log_prob(logits, slow_values.detach()).mean()
    return nll + slow_reg_scale * reg


def heads_loss(codec: TwohotCodec, reward_logits: torch.Tensor,
               rewards: torch.Tensor, cont_logits: torch.Tensor,
               continues: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Reward twohot NLL and continue-flag binary cross-entropy."""
    r = -codec.log_prob(reward_logits, rewards.detach()).mean()
    c = F.binary_cross_entropy_with_logits(
        cont_logits.squeeze(-1), continues.detach()
    )
    return r, c
