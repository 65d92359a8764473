"""The layer stack: residuals flow up, foresight rollouts flow down.

Layer 0 watches the raw image. Each layer above watches what the layer below
could not reconstruct: a per-channel normalized residual of the lower layer's
reconstruction error. Before encoding a new observation, all layers jointly
roll their priors open-loop and decode a short strip of foresight frames;
each layer's strip is summed with the strip of the layer above and stacked
into the observation as "hint" channels. Every tensor that crosses a layer
boundary (hints down, residuals up) passes through a stop-gradient, so layers
are trained independently and only trade *values*, never gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .layer import (
    LayerConfig,
    LayerState,
    LayerStepOut,
    WorldModelLayer,
    sample_latent,
)
from .numerics import EmaNormalizer, categorical_kl


@dataclass
class HierarchyConfig:
    action_dim: int
    image_size: int = 32
    layers: int = 2
    h_size: int = 256
    groups: int = 16
    classes: int = 16
    cnn_base: int = 16
    hidden: int = 256
    unimix_ratio: float = 0.01
    foresight_frames: int = 4      # F: decoded hint frames per rollout
    foresight_stride: int = 1      # D: steps between decoded frames
    use_hints: bool = True
    hint_from_next_step: bool = False  # decode hints starting one step ahead
    normalizer_decay: float = 0.99
    # ablation switches
    only_residual_hints: bool = False
    no_residual: bool = False
    stacked_state_heads: bool = False
    dreamer_plus_rollout: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.foresight_frames < 1 or self.foresight_stride < 1:
            raise ValueError("foresight_frames and foresight_stride must be >= 1")
        if self.dreamer_plus_rollout and (self.layers != 1 or not self.use_hints):
            raise ValueError(
                "dreamer_plus_rollout is the single-layer-with-hints preset; "
                "set layers=1 and use_hints=true"
            )
        if self.only_residual_hints and self.no_residual:
            raise ValueError("only_residual_hints conflicts with no_residual")

    @property
    def horizon(self) -> int:
        return self.foresight_frames * self.foresight_stride

    def has_residual_channel(self, k: int) -> bool:
        return k > 0 and not self.no_residual

    def decodes_residual(self, k: int) -> bool:
        return self.has_residual_channel(k)

    def input_channels(self, k: int) -> int:
        """Channel budget of layer k's stacked observation."""
        hint = 3 * self.foresight_frames if self.use_hints else 0
        residual = 3 if self.has_residual_channel(k) else 0
        return hint + 3 + residual

    def feature_dim(self) -> int:
        per_layer = self.h_size + self.groups * self.classes
        return per_layer * (self.layers if self.stacked_state_heads else 1)


@dataclass
class HierarchyState:
    """Per-sequence recurrent state plus the shared residual normalizers.

    The normalizer entries are references to the single instances owned by
    the hierarchy module (running statistics have one writer, the trainer);
    serializing a state captures them, but batched states never copy them.
    """

    layers: list[LayerState]
    normalizers: list[EmaNormalizer]

    def __post_init__(self):
        if len(self.normalizers) != len(self.layers) - 1:
            raise ValueError(
                f"{len(self.layers)} layer states need exactly "
                f"{len(self.layers) - 1} residual normalizers, "
                f"got {len(self.normalizers)}"
            )

    @property
    def batch(self) -> int:
        return self.layers[0].batch

    def detach(self) -> "HierarchyState":
        return HierarchyState([s.detach() for s in self.layers], self.normalizers)

    def reset_rows(self, mask: torch.Tensor) -> "HierarchyState":
        """Zero the state of sequences whose current step starts an episode."""
        if not mask.any():
            return self
        keep = (~mask).float()
        out = []
        for s in self.layers:
            out.append(LayerState(
                h=s.h * keep.unsqueeze(-1),
                z=s.z * keep.reshape(-1, 1, 1),
            ))
        return HierarchyState(out, self.normalizers)


@dataclass
class CommRecord:
    """Values exchanged across layer boundaries during one observe step.

    All tensors are detached. `sent_down[k]` holds the foresight frames layer
    k+1 decoded for layer k, shaped (F, B, 3, H, W); `sent_up[k]` holds the
    normalized residual layer k produced for layer k+1, shaped (B, 3, H, W).
    """

    hints: list[torch.Tensor | None] = field(default_factory=list)
    sent_down: list[torch.Tensor | None] = field(default_factory=list)
    sent_up: list[torch.Tensor] = field(default_factory=list)
    own_frames: list[torch.Tensor | None] = field(default_factory=list)
    raw_recons: list[torch.Tensor] = field(default_factory=list)
    residual_recons: list[torch.Tensor | None] = field(default_factory=list)
    residual_inputs: list[torch.Tensor | None] = field(default_factory=list)
    enhanced: list[torch.Tensor] = field(default_factory=list)


@dataclass
class ObserveDiagnostics:
    cross_layer_elements: int
    rollout_transitions: int
    posts: list[torch.Tensor]
    priors: list[torch.Tensor]
    feature: torch.Tensor | None = None       # behavior feature at t, attached
    states_t: list[LayerState] | None = None  # detached (h_t, z_t) per layer
    comms: CommRecord | None = None


@dataclass
class PendingObserve:
    """Output of the encode half of an observe step, before the advance."""

    outs: list[LayerStepOut]
    losses: list[dict[str, torch.Tensor]]
    diag: ObserveDiagnostics
    feature: torch.Tensor


@dataclass
class ImaginedTrajectory:
    features: torch.Tensor  # (steps+1, B, feature_dim), detached
    actions: torch.Tensor   # (steps, B, action_dim), one-hot


def build_residual(target: torch.Tensor, recon: torch.Tensor,
                   normalizer: EmaNormalizer, train: bool) -> torch.Tensor:
    """Normalized reconstruction error passed up to the next layer.

    In train mode the raw difference first updates the normalizer's running
    moments, then is normalized with them; in eval mode the statistics stay
    frozen. The result carries no gradient.
    """
    diff = (target - recon).detach()
    if train:
        normalizer.update(diff)
    return normalizer.normalize(diff)


def build_hint(own: torch.Tensor | None,
               upper: torch.Tensor | None) -> torch.Tensor or None:
    """Sum own and upper foresight frames and stack them along channels.

    Inputs are (F, B, 3, H, W); the result is (B, 3F, H, W) in time order.
    Either input may be absent (top layer has no upper strip; an
    upper-only ablation drops the own strip).
    """
    if own is None and upper is None:
        return None
    frames = own if upper is None else (upper if own is None else own + upper)
    f, b, c, h, w = frames.shape
    return frames.permute(1, 0, 2, 3, 4).reshape(b, f * c, h, w)


def assemble_enhanced(hint: torch.Tensor | None, raw: torch.Tensor,
                      residual: torch.Tensor | None) -> torch.Tensor:
    """Stack [hint | raw | residual] channels and cut all gradients."""
    parts = [p for p in (hint, raw, residual) if p is not None]
    return torch.cat(parts, dim=1).detach()


class Hierarchy(torch.nn.Module):
    def __init__(self, cfg: HierarchyConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        for k in range(cfg.layers):
            blocks.append(WorldModelLayer(LayerConfig(
                action_dim=cfg.action_dim,
                input_channels=cfg.input_channels(k),
                h_size=cfg.h_size,
                groups=cfg.groups,
                classes=cfg.classes,
                cnn_base=cfg.cnn_base,
                hidden=cfg.hidden,
                image_size=cfg.image_size,
                decode_raw=True,
                decode_residual=cfg.decodes_residual(k),
                unimix_ratio=cfg.unimix_ratio,
            )))
        self.blocks = torch.nn.ModuleList(blocks)
        self.normalizers = [
            EmaNormalizer(channels=3, decay=cfg.normalizer_decay)
            for _ in range(cfg.layers - 1)
        ]

    # ----------------------------------------------------------- state utils

    def initial_state(self, batch: int) -> HierarchyState:
        return HierarchyState(
            [b.initial_state(batch) for b in self.blocks], self.normalizers
        )

    def state_feature(self, layer_states: list[LayerState]) -> torch.Tensor:
        if self.cfg.stacked_state_heads:
            return torch.cat([b.feature(s) for b, s in
                              zip(self.blocks, layer_states)], dim=-1)
        return self.blocks[0].feature(layer_states[0])

    def _out_feature(self, state: HierarchyState,
                     outs: list[LayerStepOut]) -> torch.Tensor:
        # behavior feature at time t: (h_t, z_t), i.e. the pre-advance h
        # paired with the freshly encoded code
        states = [LayerState(s.h, o.z) for s, o in zip(state.layers, outs)]
        return self.state_feature(states)

    # -------------------------------------------------------------- rollouts

    @torch.no_grad()
    def joint_rollout(self, state: HierarchyState, rollout_policy,
                      generator: torch.Generator | None = None
                      ) -> tuple[list[torch.Tensor | None], list[torch.Tensor | None], int]:
        """Roll every layer open-loop in lockstep and decode hint strips.

        All layers share the action sequence, sampled per step by
        `rollout_policy` from the rolled state's behavior feature. Returns
        (raw strips, residual strips, transitions per layer); strips are
        (F, B, 3, H, W) or None where a head does not exist.
        """
        cfg = self.cfg
        first = 1 if cfg.hint_from_next_step else 0
        hs = [s.h for s in state.layers]
        zs = [s.z for s in state.layers]
        raw_strips: list[list[torch.Tensor]] = [[] for _ in self.blocks]
        res_strips: list[list[torch.Tensor]] = [[] for _ in self.blocks]
        transitions = 0
        decoded = 0
        last_offset = first + (cfg.horizon - 1)
        for offset in range(last_offset + 1):
            if offset == 0 and first == 0:
                zs = [sample_latent(b.predict(h), generator)
                      for b, h in zip(self.blocks, hs)]
            if offset > 0:
                states = [LayerState(h, z) for h, z in zip(hs, zs)]
                action = rollout_policy(self.state_feature(states))
                hs = [b.sequence_step(h, z, action)
                      for b, h, z in zip(self.blocks, hs, zs)]
                zs = [sample_latent(b.predict(h), generator)
                      for b, h in zip(self.blocks, hs)]
                transitions += 1
            on_grid = offset >= first and (offset - first) % cfg.foresight_stride == 0
            if on_grid and decoded < cfg.foresight_frames:
                decoded += 1
                for k, b in enumerate(self.blocks):
                    heads = b.decode(hs[k], zs[k])
                    if heads.raw is not None:
                        raw_strips[k].append(heads.raw)
                    if heads.residual is not None:
                        res_strips[k].append(heads.residual)
        raws = [torch.stack(s) if s else None for s in raw_strips]
        ress = [torch.stack(s) if s else None for s in res_strips]
        return raws, ress, transitions

    def _hint_strips(self, raws, ress) -> list[torch.Tensor | None]:
        """Per-layer own/upper strip selection, including the ablations."""
        cfg = self.cfg
        hints: list[torch.Tensor | None] = []
        for k in range(cfg.layers):
            own = raws[k] if (k == 0 or cfg.no_residual) else ress[k]
            if k + 1 < cfg.layers:
                upper = raws[k + 1] if cfg.no_residual else ress[k + 1]
            else:
                upper = None
            if cfg.only_residual_hints:
                # hint is the upper residual strip alone; the top layer has
                # no upper strip, so its hint channels are zeros
                hint = build_hint(None, upper)
                if hint is None:
                    hint = torch.zeros_like(build_hint(own, None))
            else:
                hint = build_hint(own, upper)
            hints.append(hint)
        return hints

    # --------------------------------------------------------------- observe

    def observe(self, state: HierarchyState, action: torch.Tensor,
                obs: torch.Tensor, mode: str = "train",
                rollout_policy=None, generator: torch.Generator | None = None,
                comm_override: CommRecord | None = None,
                want_comms: bool = False
                ) -> tuple[HierarchyState, list[dict[str, torch.Tensor]], ObserveDiagnostics]:
        """One full observation step: hints, encode, decode, advance.

        `action` is the action taken at this step (the sequence advance runs
        after encoding, mirroring the per-layer observe_step). `mode` is
        "train" (normalizer statistics update) or "eval" (frozen).
        `comm_override` replays previously recorded cross-layer tensors in
        place of freshly computed ones, for isolation checks and
        degeneration tests.
        """
        pending = self.observe_stage(state, obs, mode, rollout_policy,
                                     generator, comm_override, want_comms)
        next_state = self.advance(state, pending, action)
        return next_state, pending.losses, pending.diag

    def observe_stage(self, state: HierarchyState, obs: torch.Tensor,
                      mode: str = "train", rollout_policy=None,
                      generator: torch.Generator | None = None,
                      comm_override: CommRecord | None = None,
                      want_comms: bool = False) -> PendingObserve:
        cfg = self.cfg
        if mode not in ("train", "eval"):
            raise ValueError(f"observe: unknown mode {mode!r}")
        if obs.shape[-2:] != (cfg.image_size, cfg.image_size) or obs.shape[1] != 3:
            raise ValueError(
                f"observe: expected (B, 3, {cfg.image_size}, {cfg.image_size}) "
                f"images, got {tuple(obs.shape)}"
            )
        train = mode == "train"
        if rollout_policy is None:
            rollout_policy = self._uniform_policy(generator)

        transitions = 0
        hints: list[torch.Tensor | None]
        if cfg.use_hints:
            raws, ress, transitions = self.joint_rollout(
                state, rollout_policy, generator)
            hints = self._hint_strips(raws, ress)
        else:
            raws = [None] * cfg.layers
            ress = [None] * cfg.layers
            hints = [None] * cfg.layers
        if comm_override is not None and comm_override.hints:
            hints = [o if o is not None else h
                     for h, o in zip(hints, comm_override.hints)]

        comms = CommRecord() if (want_comms or comm_override is not None) else None
        traffic = 0
        outs: list[LayerStepOut] = []
        losses: list[dict[str, torch.Tensor]] = []
        residual_in: torch.Tensor | None = None
        for k, block in enumerate(self.blocks):
            if comm_override is not None and k < len(comm_override.residual_inputs) \
                    and comm_override.residual_inputs[k] is not None:
                residual_in = comm_override.residual_inputs[k]
            enhanced = assemble_enhanced(
                hints[k], obs, residual_in if cfg.has_residual_channel(k) else None
            )
            out = block.encode_stage(state.layers[k], enhanced, generator)
            outs.append(out)

            raw_target = obs.detach()
            res_target = residual_in if cfg.has_residual_channel(k) else None
            loss = {
                "dyn": categorical_kl(out.post.detach(), out.prior),
                "rep": categorical_kl(out.post, out.prior.detach()),
                "rec_raw": _sum_sq(out.decode.raw, raw_target),
            }
            if res_target is not None:
                loss["rec_res"] = _sum_sq(out.decode.residual, res_target)
            losses.append(loss)

            if comms is not None:
                comms.hints.append(None if hints[k] is None else hints[k].detach())
                comms.raw_recons.append(out.decode.raw.detach())
                comms.residual_recons.append(
                    None if out.decode.residual is None
                    else out.decode.residual.detach())
                comms.residual_inputs.append(
                    None if res_target is None else res_target.detach())
                comms.enhanced.append(enhanced)
                own = raws[k] if (k == 0 or cfg.no_residual) else ress[k]
                comms.own_frames.append(None if own is None else own.detach())

            # residual handed to the layer above, and traffic accounting
            if k + 1 < cfg.layers:
                sent_down = raws[k + 1] if cfg.no_residual else ress[k + 1]
                if sent_down is not None:
                    traffic += sent_down.numel() // sent_down.shape[1]
                if comms is not None:
                    comms.sent_down.append(
                        None if sent_down is None else sent_down.detach())
                if cfg.no_residual:
                    residual_in = None
                else:
                    up_target = obs.detach() if k == 0 else residual_in
                    up_recon = out.decode.raw if k == 0 else out.decode.residual
                    residual_in = build_residual(
                        up_target, up_recon, self.normalizers[k], train)
                    traffic += residual_in.numel() // residual_in.shape[0]
                    if comms is not None:
                        comms.sent_up.append(residual_in)

        feature = self._out_feature(state, outs)
        diag = ObserveDiagnostics(
            cross_layer_elements=traffic,
            rollout_transitions=transitions,
            posts=[o.post.detach() for o in outs],
            priors=[o.prior.detach() for o in outs],
            feature=feature,
            states_t=[LayerState(s.h.detach(), o.z.detach())
                      for s, o in zip(state.layers, outs)],
            comms=comms,
        )
        return PendingObserve(outs=outs, losses=losses, diag=diag,
                              feature=feature)

    def advance(self, state: HierarchyState, pending: PendingObserve,
                action: torch.Tensor) -> HierarchyState:
        nxt = [block.advance_stage(s, out, action)
               for block, s, out in zip(self.blocks, state.layers, pending.outs)]
        return HierarchyState(nxt, self.normalizers)

    def _uniform_policy(self, generator: torch.Generator | None):
        def policy(features: torch.Tensor) -> torch.Tensor:
            n = features.shape[0]
            idx = torch.randint(0, self.cfg.action_dim, (n,), generator=generator,
                                device=features.device)
            return torch.nn.functional.one_hot(
                idx, self.cfg.action_dim).to(features.dtype)
        return policy

    # --------------------------------------------------------------- imagine

    @torch.no_grad()
    def imagine(self, state: HierarchyState, policy, steps: int,
                generator: torch.Generator | None = None) -> ImaginedTrajectory:
        """Roll the prior with the behavior policy; returns detached features.

        The trajectory is steps+1 states and steps actions. Gradients never
        flow through the dynamics here: the discrete actor learns from
        log-probabilities re-evaluated on these features.
        """
        if steps < 1:
            raise ValueError("imagine: steps must be >= 1")
        layer_states = [LayerState(s.h.detach(), s.z.detach())
                        for s in state.layers]
        feats = [self.state_feature(layer_states)]
        actions = []
        for _ in range(steps):
            action = policy(feats[-1])
            actions.append(action)
            new_states = []
            for block, s in zip(self.blocks, layer_states):
                h = block.sequence_step(s.h, s.z, action)
                z = sample_latent(block.predict(h), generator)
                new_states.append(LayerState(h, z))
            layer_states = new_states
            feats.append(self.state_feature(layer_states))
        return ImaginedTrajectory(
            features=torch.stack(feats), actions=torch.stack(actions)
        )


def _sum_sq(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Unit-variance Gaussian reconstruction error, summed over pixels."""
    return ((pred - target.detach()) ** 2).flatten(1).sum(-1)
