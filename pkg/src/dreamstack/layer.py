"""A single world-model layer: recurrent state, latent codes, image heads.

Each layer is a self-contained recurrent state-space model. At every step it
encodes an (enhanced) observation into stochastic categorical codes given its
deterministic state, predicts the same codes from the deterministic state
alone, decodes image heads, and advances the deterministic state with the
taken action. Layers know nothing about each other; stacking and
communication live in `hierarchy.py`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import unimix


@dataclass
class LayerConfig:
    action_dim: int
    input_channels: int
    h_size: int = 256
    groups: int = 16
    classes: int = 16
    cnn_base: int = 16
    hidden: int = 256
    image_size: int = 32
    decode_raw: bool = True
    decode_residual: bool = False
    unimix_ratio: float = 0.01

    def __post_init__(self):
        size = self.image_size
        if size < 8 or (size & (size - 1)) != 0:
            raise ValueError("image_size must be a power of two, at least 8")
        if not (self.decode_raw or self.decode_residual):
            raise ValueError("layer must decode at least one head")
        for name in ("action_dim", "input_channels", "h_size", "groups",
                     "classes", "cnn_base", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def latent_dim(self) -> int:
        return self.groups * self.classes

    @property
    def conv_stages(self) -> int:
        # stride-2 stages from image_size down to a 4x4 grid
        return int(math.log2(self.image_size // 4))


@dataclass
class LayerState:
    """Recurrent state: deterministic vector + straight-through latent code."""

    h: torch.Tensor  # (B, h_size)
    z: torch.Tensor  # (B, groups, classes)

    @property
    def batch(self) -> int:
        return self.h.shape[0]

    def detach(self) -> "LayerState":
        return LayerState(self.h.detach(), self.z.detach())


@dataclass
class DecodeHeads:
    raw: torch.Tensor | None = None
    residual: torch.Tensor | None = None


@dataclass
class LayerStepOut:
    """Everything a single observe step produces besides the next state."""

    post: torch.Tensor      # (B, G, C) posterior probabilities
    prior: torch.Tensor     # (B, G, C) predictor probabilities
    z: torch.Tensor         # (B, G, C) straight-through posterior sample
    decode: DecodeHeads     # heads decoded from (h_t, z_t)
    feature: torch.Tensor   # (B, h_size + G*C), the behavior feature at t


@dataclass
class RolloutResult:
    """Open-loop foresight frames decoded along a prior rollout."""

    raw: torch.Tensor | None        # (F, B, 3, H, W) if the raw head exists
    residual: torch.Tensor | None   # (F, B, 3, H, W) if the residual head exists
    transitions: int                # number of sequence-model advances taken


def sample_latent(probs: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Sample one-hot codes per group with a straight-through gradient.

    Forward value is the exact one-hot sample; the backward pass treats the
    sample as the identity of `probs`, so d(sample)/d(probs) == I.
    """
    groups, classes = probs.shape[-2], probs.shape[-1]
    flat = probs.detach().reshape(-1, classes)
    idx = torch.multinomial(flat, 1, generator=generator).squeeze(-1)
    onehot = F.one_hot(idx, classes).to(probs.dtype).reshape(probs.shape)
    # parenthesized so the forward correction is an exact elementwise zero
    return onehot + (probs - probs.detach())


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, H, W) maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class WorldModelLayer(nn.Module):
    def __init__(self, cfg: LayerConfig):
        super().__init__()
        self.cfg = cfg

        # input embedding + gated recurrent cell (update/reset gating with
        # layer norm over the embedded concat of latent code and action)
        self.embed_in = nn.Sequential(
            nn.Linear(cfg.latent_dim + cfg.action_dim, cfg.hidden),
            nn.LayerNorm(cfg.hidden),
            nn.SiLU(),
        )
        self.cell_lin = nn.Linear(cfg.hidden + cfg.h_size, 3 * cfg.h_size, bias=False)
        self.cell_norm = nn.LayerNorm(3 * cfg.h_size)

        # stride-2 conv encoder down to 4x4
        stages = []
        ch_in = cfg.input_channels
        for i in range(cfg.conv_stages):
            ch_out = cfg.cnn_base * (2 ** i)
            stages += [
                nn.Conv2d(ch_in, ch_out, 4, stride=2, padding=1),
                ChannelLayerNorm(ch_out),
                nn.SiLU(),
            ]
            ch_in = ch_out
        self.encoder_cnn = nn.Sequential(*stages)
        self._conv_out = ch_in * 4 * 4

        self.post_net = nn.Sequential(
            nn.Linear(self._conv_out + cfg.h_size, cfg.hidden),
            nn.LayerNorm(cfg.hidden),
            nn.SiLU(),
            nn.Linear(cfg.hidden, cfg.latent_dim),
        )
        self.prior_net = nn.Sequential(
            nn.Linear(cfg.h_size, cfg.hidden),
            nn.LayerNorm(cfg.hidden),
            nn.SiLU(),
            nn.Linear(cfg.hidden, cfg.latent_dim),
        )

        # decoder trunk mirrors the encoder, with one transposed-conv output
        # stage per image head
        top = cfg.cnn_base * (2 ** (cfg.conv_stages - 1))
        self.decoder_in = nn.Linear(cfg.h_size + cfg.latent_dim, top * 4 * 4)
        trunk = []
        ch_in = top
        for i in range(cfg.conv_stages - 1, 0, -1):
            ch_out = cfg.cnn_base * (2 ** (i - 1))
            trunk += [
                nn.ConvTranspose2d(ch_in, ch_out, 4, stride=2, padding=1),
                ChannelLayerNorm(ch_out),
                nn.SiLU(),
            ]
            ch_in = ch_out
        self.decoder_trunk = nn.Sequential(*trunk)
        self.raw_head = (
            nn.ConvTranspose2d(ch_in, 3, 4, stride=2, padding=1)
            if cfg.decode_raw else None
        )
        self.residual_head = (
            nn.ConvTranspose2d(ch_in, 3, 4, stride=2, padding=1)
            if cfg.decode_residual else None
        )

    # ------------------------------------------------------------------ ops

    def initial_state(self, batch: int) -> LayerState:
        p = next(self.parameters())
        return LayerState(
            h=torch.zeros(batch, self.cfg.h_size, dtype=p.dtype, device=p.device),
            z=torch.zeros(batch, self.cfg.groups, self.cfg.classes,
                          dtype=p.dtype, device=p.device),
        )

    def sequence_step(self, h: torch.Tensor, z: torch.Tensor,
                      action: torch.Tensor) -> torch.Tensor:
        """Advance the deterministic state with update/reset gating."""
        x = self.embed_in(torch.cat([z.flatten(1), action], dim=-1))
        parts = self.cell_norm(self.cell_lin(torch.cat([x, h], dim=-1)))
        reset, cand, update = parts.chunk(3, dim=-1)
        reset = torch.sigmoid(reset)
        cand = torch.tanh(reset * cand)
        update = torch.sigmoid(update - 1.0)
        return update * cand + (1.0 - update) * h

    def encode(self, h: torch.Tensor, obs: torch.Tensor) -> torch.Tensor:
        """Posterior code probabilities from the enhanced observation and h."""
        if obs.shape[1] != self.cfg.input_channels:
            raise ValueError(
                f"encode: expected {self.cfg.input_channels} channels, "
                f"got {obs.shape[1]}"
            )
        emb = self.encoder_cnn(obs).flatten(1)
        logits = self.post_net(torch.cat([emb, h], dim=-1))
        return self._logits_to_probs(logits)

    def predict(self, h: torch.Tensor) -> torch.Tensor:
        """Prior code probabilities from the deterministic state alone."""
        return self._logits_to_probs(self.prior_net(h))

    def _logits_to_probs(self, logits: torch.Tensor) -> torch.Tensor:
        shaped = logits.reshape(-1, self.cfg.groups, self.cfg.classes)
        return unimix(torch.softmax(shaped, dim=-1), self.cfg.unimix_ratio)

    def decode(self, h: torch.Tensor, z: torch.Tensor) -> DecodeHeads:
        x = self.decoder_in(torch.cat([h, z.flatten(1)], dim=-1))
        top = self.cfg.cnn_base * (2 ** (self.cfg.conv_stages - 1))
        x = self.decoder_trunk(x.reshape(-1, top, 4, 4))
        return DecodeHeads(
            raw=self.raw_head(x) if self.raw_head is not None else None,
            residual=self.residual_head(x) if self.residual_head is not None else None,
        )

    def feature(self, state: LayerState) -> torch.Tensor:
        return torch.cat([state.h, state.z.flatten(1)], dim=-1)

    def observe_step(self, state: LayerState, obs: torch.Tensor,
                     action: torch.Tensor,
                     generator: torch.Generator | None = None
                     ) -> tuple[LayerState, LayerStepOut]:
        """Encode obs at the current state, decode, then advance with action."""
        out = self.encode_stage(state, obs, generator)
        next_state = self.advance_stage(state, out, action)
        return next_state, out

    def encode_stage(self, state: LayerState, obs: torch.Tensor,
                     generator: torch.Generator | None = None) -> LayerStepOut:
        post = self.encode(state.h, obs)
        prior = self.predict(state.h)
        z = sample_latent(post, generator)
        decode = self.decode(state.h, z)
        feature = torch.cat([state.h, z.flatten(1)], dim=-1)
        return LayerStepOut(post=post, prior=prior, z=z, decode=decode,
                            feature=feature)

    def advance_stage(self, state: LayerState, out: LayerStepOut,
                      action: torch.Tensor) -> LayerState:
        return LayerState(self.sequence_step(state.h, out.z, action), out.z)

    @torch.no_grad()
    def open_loop_rollout(self, state: LayerState, action_provider,
                          frames: int, stride: int,
                          generator: torch.Generator | None = None,
                          first_offset: int = 0) -> RolloutResult:
        """Roll the prior forward and decode evenly strided foresight frames.

        Starting from the given state, the latent code is re-sampled from the
        predictor (never the encoder), frames are decoded at offsets
        first_offset + {0, stride, ..., (frames-1)*stride}, and the state
        advances with actions from `action_provider(offset, state)`. With
        first_offset == 0 the first frame is the prior-decode of the current
        step and frames*stride - 1 transitions are taken.
        """
        if frames < 1 or stride < 1:
            raise ValueError("open_loop_rollout: frames and stride must be >= 1")
        h, z = state.h, state.z
        raw_frames: list[torch.Tensor] = []
        res_frames: list[torch.Tensor] = []
        transitions = 0
        decoded = 0
        last_offset = first_offset + (frames * stride - 1)
        for offset in range(last_offset + 1):
            if offset == 0 and first_offset == 0:
                z = sample_latent(self.predict(h), generator)
            if offset > 0:
                action = action_provider(offset - 1, LayerState(h, z))
                h = self.sequence_step(h, z, action)
                z = sample_latent(self.predict(h), generator)
                transitions += 1
            if offset >= first_offset and (offset - first_offset) % stride == 0 \
                    and decoded < frames:
                heads = self.decode(h, z)
                decoded += 1
                if heads.raw is not None:
                    raw_frames.append(heads.raw)
                if heads.residual is not None:
                    res_frames.append(heads.residual)
        return RolloutResult(
            raw=torch.stack(raw_frames) if raw_frames else None,
            residual=torch.stack(res_frames) if res_frames else None,
            transitions=transitions,
        )
