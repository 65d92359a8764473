"""Training pipeline: collector + trainer over a shared replay buffer.

The trainer samples replay chunks, runs the hierarchy over them to learn the
world model, then trains the actor-critic on imagined trajectories starting
from the replayed posterior states. The collector steps the environment(s)
with a periodically refreshed parameter snapshot and appends to replay.

`run(cfg)` wires both together, either strictly alternating on one thread
(synchronous mode, bit-reproducible) or concurrently with a rate limiter
that holds the replayed-steps-per-env-step ratio near `train.train_ratio`.
"""

from __future__ import annotations

import copy
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import arrayio
from .behavior import (BehaviorConfig, BehaviorHeads, actor_loss, critic_loss,
                       heads_loss, lambda_returns, world_model_losses)
from .config import Config, config_hash, to_dict
from .hierarchy import Hierarchy, HierarchyState
from .layer import LayerState
from .numerics import ReturnScale
from .replay import ReplayBuffer, StepRecord


class NonFiniteLossError(RuntimeError):
    """A training loss went NaN/inf; details were dumped next to the logs."""


def _to_obs(images: np.ndarray, device) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> float32 (..., 3, H, W) in [-0.5, 0.5]."""
    t = torch.from_numpy(np.ascontiguousarray(images)).to(device)
    t = t.float().div_(255.0).sub_(0.5)
    return t.movedim(-1, -3)


def _one_hot(actions, count: int) -> torch.Tensor:
    idx = torch.as_tensor(actions, dtype=torch.long)
    return torch.nn.functional.one_hot(idx, count).float()


class Agent(torch.nn.Module):
    """World model plus behavior heads; the unit that checkpoints move."""

    def __init__(self, cfg: Config, action_dim: int):
        super().__init__()
        self.hierarchy = Hierarchy(cfg.hierarchy_config(action_dim))
        self.heads = BehaviorHeads(BehaviorConfig(
            feature_dim=self.hierarchy.cfg.feature_dim(),
            action_dim=action_dim, bins=cfg.train.bins,
            bin_low=cfg.train.bin_low, bin_high=cfg.train.bin_high,
            unimix_ratio=cfg.model.unimix_ratio))
        self.action_dim = action_dim

    def copy_from(self, other: "Agent") -> None:
        self.load_state_dict(other.state_dict())
        for mine, theirs in zip(self.hierarchy.normalizers,
                                other.hierarchy.normalizers):
            mine.load_state_arrays(theirs.state_arrays())


@dataclass
class Counters:
    env_steps: int = 0
    train_steps: int = 0
    replayed_steps: int = 0
    episodes: int = 0
    quota: float = 0.0  # replayed-step budget earned by collection

    def to_dict(self) -> dict:
        return {"env_steps": self.env_steps, "train_steps": self.train_steps,
                "replayed_steps": self.replayed_steps,
                "episodes": self.episodes, "quota": self.quota}

    @classmethod
    def from_dict(cls, data: dict) -> "Counters":
        return cls(**data)


class MetricsWriter:
    """Append-only JSON-lines metrics log."""

    def __init__(self, path: Path, wallclock: bool = True):
        self.path = Path(path)
        self.wallclock = wallclock
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", buffering=1)
        self._lock = threading.Lock()

    def write(self, kind: str, step: int, **fields) -> None:
        record = {"kind": kind, "step": step}
        if self.wallclock:
            record["wallclock"] = time.time()
        for key, value in fields.items():
            if isinstance(value, (np.floating, np.integer)):
                value = value.item()
            record[key] = value
        with self._lock:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------- trainer


class Trainer:
    def __init__(self, cfg: Config, agent: Agent, buffer: ReplayBuffer,
                 seed: int, device: str = "cpu"):
        self.cfg = cfg
        self.agent = agent
        self.buffer = buffer
        self.device = device
        t = cfg.train
        self.gen = torch.Generator(device).manual_seed(seed)
        self.sample_rng = np.random.default_rng(seed + 1)
        self.return_scale = ReturnScale(decay=t.return_scale_decay)
        self.counters = Counters()
        self.lock = threading.Lock()  # parameter mutation vs snapshot copy
        self.opts: dict[str, torch.optim.Adam] = {}
        self.groups: dict[str, list[torch.nn.Parameter]] = {}
        hier = agent.hierarchy
        for k, block in enumerate(hier.blocks):
            self._add_group(f"layer{k}", list(block.parameters()))
        heads = agent.heads
        self._add_group("heads", list(heads.reward.parameters())
                        + list(heads.cont.parameters()))
        self._add_group("actor", list(heads.actor.parameters()))
        self._add_group("critic", list(heads.critic.parameters()))

    def _add_group(self, name: str, params) -> None:
        self.groups[name] = params
        self.opts[name] = torch.optim.Adam(params, lr=self.cfg.train.lr)

    # ------------------------------------------------------------- batches

    def _fetch_states(self, keys) -> HierarchyState:
        hier = self.agent.hierarchy
        state = hier.initial_state(len(keys))
        stored = [self.buffer.fetch_state(k) for k in keys]
        for b, arrays in enumerate(stored):
            if arrays is None:
                continue
            for k, layer in enumerate(state.layers):
                layer.h[b] = torch.from_numpy(arrays[f"h{k}"])
                layer.z[b] = torch.from_numpy(arrays[f"z{k}"])
        return state

    def _store_states(self, keys, state: HierarchyState) -> None:
        for b, (stream, start) in enumerate(keys):
            arrays = {}
            for k, layer in enumerate(state.layers):
                arrays[f"h{k}"] = layer.h[b].detach().numpy().copy()
                arrays[f"z{k}"] = layer.z[b].detach().numpy().copy()
            self.buffer.store_state(
                (stream, start + self.cfg.train.batch_length), arrays)

    # ---------------------------------------------------------- train step

    def train_step(self) -> dict:
        cfg = self.cfg
        t = cfg.train
        hier, heads = self.agent.hierarchy, self.agent.heads
        chunk = self.buffer.sample(t.batch_size, t.batch_length,
                                   self.sample_rng)
        T, B = t.batch_length, t.batch_size
        obs = _to_obs(chunk.image, self.device).movedim(1, 0)     # (T,B,3,H,W)
        actions = _one_hot(chunk.action, self.agent.action_dim).movedim(1, 0)
        rewards = torch.from_numpy(chunk.reward).movedim(1, 0)    # (T,B)
        conts = torch.from_numpy(chunk.cont).movedim(1, 0)
        is_first = torch.from_numpy(chunk.is_first).movedim(1, 0)

        rollout_policy = (lambda feats: heads.act(feats, self.gen))
        state = self._fetch_states(chunk.keys)
        features = []
        entry_states: list[list[LayerState]] = []
        acc: list[dict[str, list[torch.Tensor]]] = [
            {} for _ in range(cfg.model.layers)]
        for step in range(T):
            state = state.reset_rows(is_first[step])
            state, losses, diag = hier.observe(
                state, actions[step], obs[step], mode="train",
                rollout_policy=rollout_policy, generator=self.gen)
            features.append(diag.feature)
            entry_states.append(diag.states_t)
            for k, layer_losses in enumerate(losses):
                for name, value in layer_losses.items():
                    acc[k].setdefault(name, []).append(value)
        self._store_states(chunk.keys, state)
        features = torch.stack(features)                           # (T,B,F)

        # world model + reward/continue heads share one backward pass
        def flat(k, name):
            return torch.cat(acc[k][name]) if name in acc[k] else None
        wm_total = obs.new_zeros(())
        metrics: dict[str, float] = {}
        for k in range(cfg.model.layers):
            total_k, m_k = world_model_losses(
                flat(k, "dyn"), flat(k, "rep"), flat(k, "rec_raw"),
                flat(k, "rec_res"), free_bits=t.free_bits,
                dyn_scale=t.dyn_scale, rep_scale=t.rep_scale,
                rec_scale=t.rec_scale)
            wm_total = wm_total + total_k
            for name, value in m_k.items():
                metrics[f"layer{k}/{name}"] = value
        r_logits = heads.reward(features)
        c_logits = heads.cont(features)
        r_nll, c_bce = heads_loss(heads.codec, r_logits, rewards,
                                  c_logits, conts)
        model_loss = wm_total + r_nll + c_bce
        for name in ("heads", *(f"layer{k}" for k in range(cfg.model.layers))):
            self.opts[name].zero_grad()
        model_loss.backward()
        with self.lock:
            for name in ("heads",
                         *(f"layer{k}" for k in range(cfg.model.layers))):
                norm = torch.nn.utils.clip_grad_norm_(
                    self.groups[name], t.grad_clip)
                metrics[f"grad_norm/{name}"] = float(norm)
                self.opts[name].step()
        metrics["loss/world_model"] = float(wm_total.detach())
        metrics["loss/reward"] = float(r_nll.detach())
        metrics["loss/continue"] = float(c_bce.detach())

        # imagination starts from every replayed posterior state
        picks = range(0, T, t.entry_stride)
        entry = HierarchyState(
            layers=[LayerState(
                h=torch.cat([entry_states[i][k].h for i in picks]),
                z=torch.cat([entry_states[i][k].z for i in picks]))
                for k in range(cfg.model.layers)],
            normalizers=hier.normalizers)
        policy = (lambda feats: heads.act(feats, self.gen))
        traj = hier.imagine(entry, policy, t.imagination_horizon, self.gen)
        feats = traj.features                         # (H+1, N, feat)
        with torch.no_grad():
            im_rewards = heads.reward_pred(feats[1:])
            im_conts = heads.cont_prob(feats[1:])
            im_values = heads.value(feats)
        rets = lambda_returns(im_rewards, im_conts, im_values,
                              t.discount, t.return_lambda)
        self.return_scale.update(rets[:-1])
        scale = self.return_scale.scale()

        log_probs, entropy = heads.policy_stats(
            feats[:-1].reshape(-1, feats.shape[-1]),
            traj.actions.reshape(-1, self.agent.action_dim))
        a_loss = actor_loss(log_probs, entropy, rets[:-1].reshape(-1),
                            im_values[:-1].reshape(-1), scale,
                            t.entropy_coeff)
        self.opts["actor"].zero_grad()
        a_loss.backward()
        with self.lock:
            metrics["grad_norm/actor"] = float(
                torch.nn.utils.clip_grad_norm_(self.groups["actor"],
                                               t.grad_clip))
            self.opts["actor"].step()

        # critic: imagined-trajectory targets plus a replay-anchored term
        crit_feats = feats[:-1].reshape(-1, feats.shape[-1])
        with torch.no_grad():
            slow_values = heads.value(crit_feats, slow=True)
        c_loss = critic_loss(heads.codec, heads.critic(crit_feats),
                             rets[:-1].reshape(-1), slow_values,
                             t.slow_reg_scale)
        rep_feats = features.detach()
        with torch.no_grad():
            v_slow = heads.value(rep_feats, slow=True)
        rep_rets = lambda_returns(rewards[1:], conts[1:], v_slow,
                                  t.discount, t.return_lambda)
        rep_logits = heads.critic(rep_feats[:-1].reshape(-1,
                                                         feats.shape[-1]))
        rep_nll = -heads.codec.log_prob(
            rep_logits, rep_rets[:-1].reshape(-1)).mean()
        total_critic = c_loss + t.replay_value_scale * rep_nll
        self.opts["critic"].zero_grad()
        total_critic.backward()
        with self.lock:
            metrics["grad_norm/critic"] = float(
                torch.nn.utils.clip_grad_norm_(self.groups["critic"],
                                               t.grad_clip))
            self.opts["critic"].step()
            heads.update_slow(t.slow_critic_rate)

        metrics["loss/actor"] = float(a_loss.detach())
        metrics["loss/critic"] = float(c_loss.detach())
        metrics["loss/replay_value"] = float(rep_nll.detach())
        metrics["actor/entropy"] = float(entropy.mean().detach())
        metrics["critic/value_mean"] = float(im_values.mean())
        metrics["return/scale"] = float(scale)
        metrics["comm/cross_layer_elements"] = diag.cross_layer_elements
        metrics["comm/rollout_transitions"] = diag.rollout_transitions
        self.counters.train_steps += 1
        self.counters.replayed_steps += B * T
        self._check_finite(metrics)
        return metrics

    def _check_finite(self, metrics: dict) -> None:
        bad = {k: v for k, v in metrics.items()
               if isinstance(v, float) and not math.isfinite(v)}
        if not bad:
            return
        dump = {"counters": self.counters.to_dict(), "metrics": metrics,
                "non_finite": sorted(bad)}
        path = Path(self.cfg.run.logdir) / "nonfinite_dump.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dump, indent=2, default=str))
        raise NonFiniteLossError(
            f"non-finite training losses {sorted(bad)}; dump at {path}")


# -------------------------------------------------------------- collector


@dataclass
class _StreamState:
    env: object
    state: HierarchyState
    pending: StepRecord | None = None  # record awaiting its action
    score: float = 0.0
    length: int = 0


class Collector:
    """Steps environments with a snapshot policy, appends to replay."""

    def __init__(self, cfg: Config, snapshot: Agent, buffer: ReplayBuffer,
                 envs: list, seed: int, metrics: MetricsWriter | None = None):
        self.cfg = cfg
        self.snapshot = snapshot
        self.buffer = buffer
        self.metrics = metrics
        self.gen = torch.Generator().manual_seed(seed)
        self.action_rng = np.random.default_rng(seed + 1)
        self.episode_returns: list[float] = []
        self.streams = []
        for i, env in enumerate(envs):
            self.streams.append(_StreamState(
                env=env, state=snapshot.hierarchy.initial_state(1)))
        self.snapshot.eval()

    def _begin_episode(self, i: int) -> None:
        s = self.streams[i]
        step = s.env.reset()
        s.state = self.snapshot.hierarchy.initial_state(1)
        s.pending = StepRecord(image=step.image, action=0, reward=step.reward,
                               is_first=True, is_terminal=False)
        s.score, s.length = 0.0, 0

    def reset_all(self) -> None:
        for i in range(len(self.streams)):
            self._begin_episode(i)

    def collect_step(self, stream: int, counters: Counters,
                     random_actions: bool = False) -> None:
        """Advance one stream by one environment step (one replay append)."""
        s = self.streams[stream]
        if s.pending is None:
            self._begin_episode(stream)
        rec = s.pending
        if random_actions:
            action = int(self.action_rng.integers(s.env.action_count))
        else:
            obs = _to_obs(rec.image[None], "cpu")
            with torch.no_grad():
                pending = self.snapshot.hierarchy.observe_stage(
                    s.state, obs, mode="eval",
                    rollout_policy=lambda f: self.snapshot.heads.act(
                        f, self.gen),
                    generator=self.gen)
                action_vec = self.snapshot.heads.act(pending.feature,
                                                     self.gen)
            action = int(action_vec.argmax(-1).item())
        rec.action = action
        self.buffer.append(rec, stream)
        if not random_actions:
            with torch.no_grad():
                onehot = _one_hot(np.array([action]),
                                  self.snapshot.action_dim)
                s.state = self.snapshot.hierarchy.advance(
                    s.state, pending, onehot)
        env_step = s.env.step(action)
        s.score += env_step.reward
        s.length += 1
        counters.env_steps += 1
        if env_step.is_last or env_step.is_terminal:
            self.buffer.append(StepRecord(
                image=env_step.image, action=0, reward=env_step.reward,
                is_first=False, is_terminal=env_step.is_terminal), stream)
            counters.episodes += 1
            success = s.env.episode_success(s.length, env_step.is_terminal)
            self.episode_returns.append(s.score)
            if self.metrics is not None:
                self.metrics.write("episode", counters.env_steps,
                                   score=round(s.score, 6), length=s.length,
                                   success=bool(success), stream=stream)
            s.pending = None
        else:
            s.pending = StepRecord(image=env_step.image, action=0,
                                   reward=env_step.reward, is_first=False,
                                   is_terminal=False)


# ------------------------------------------------------------ evaluation


def run_eval(agent: Agent, cfg: Config, seed: int, episodes: int) -> dict:
    """Frozen-parameter greedy episodes; returns aggregate + per-episode."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    from .config import build_env
    agent = copy.deepcopy(agent)
    agent.eval()
    gen = torch.Generator().manual_seed(seed)
    records = []
    for ep in range(episodes):
        env = build_env(cfg, seed=seed * 7919 + ep)
        step = env.reset()
        state = agent.hierarchy.initial_state(1)
        score, length = 0.0, 0
        while True:
            obs = _to_obs(step.image[None], "cpu")
            with torch.no_grad():
                pending = agent.hierarchy.observe_stage(
                    state, obs, mode="eval",
                    rollout_policy=lambda f: agent.heads.act(f, gen),
                    generator=gen)
                action_vec = agent.heads.act(pending.feature, gen, mode=True)
                onehot = action_vec
                state = agent.hierarchy.advance(state, pending, onehot)
            action = int(action_vec.argmax(-1).item())
            step = env.step(action)
            score += step.reward
            length += 1
            if step.is_last or step.is_terminal:
                break
        records.append({"score": round(score, 6), "length": length,
                        "success": bool(env.episode_success(
                            length, step.is_terminal))})
    return {
        "episodes": episodes,
        "success_rate": sum(r["success"] for r in records) / episodes,
        "mean_score": sum(r["score"] for r in records) / episodes,
        "mean_length": sum(r["length"] for r in records) / episodes,
        "records": records,
    }


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path: Path, trainer: Trainer, collector: Collector,
                    cfg: Config) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in trainer.agent.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    for name, opt in trainer.opts.items():
        state = opt.state_dict()["state"]
        for pi, entry in state.items():
            for key, value in entry.items():
                tag = f"opt/{name}/{pi}/{key}"
                if isinstance(value, torch.Tensor):
                    arrays[tag] = value.detach().cpu().numpy()
                else:
                    arrays[tag] = np.asarray(value)
    for k, norm in enumerate(trainer.agent.hierarchy.normalizers):
        for key, value in norm.state_arrays().items():
            arrays[f"normalizer/{k}/{key}"] = value
    for key, value in trainer.return_scale.state_arrays().items():
        arrays[f"return_scale/{key}"] = value
    arrays["rng/trainer_torch"] = trainer.gen.get_state().numpy()
    arrays["rng/collector_torch"] = collector.gen.get_state().numpy()
    manifest = {
        "format": 1,
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "counters": trainer.counters.to_dict(),
        "rng_numpy": {
            "trainer_sample": _rng_state(trainer.sample_rng),
            "collector_action": _rng_state(collector.action_rng),
        },
    }
    arrayio.write_arrays(path / "arrays.bin", arrays, {"kind": "checkpoint"})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=str))


def _restore_rng(rng: np.random.Generator, data: dict) -> None:
    state = json.loads(json.dumps(data))
    inner = state.get("state", {})
    for key in ("state", "inc"):
        if key in inner and isinstance(inner[key], str):
            inner[key] = int(inner[key])
    for key in ("has_uint32", "uinteger"):
        if key in state and isinstance(state[key], str):
            state[key] = int(state[key])
    rng.bit_generator.state = state


def load_agent(path: str | Path) -> tuple[Agent, Config, dict]:
    """Rebuild an agent (params + normalizers) from a checkpoint directory."""
    from .config import from_dict
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = from_dict(manifest["config"])
    arrays, _ = arrayio.read_arrays(path / "arrays.bin")
    from .config import build_env
    probe = build_env(cfg)
    agent = Agent(cfg, probe.action_count)
    agent.load_state_dict({
        name[len("param/"):]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items() if name.startswith("param/")})
    for k, norm in enumerate(agent.hierarchy.normalizers):
        norm.load_state_arrays({
            key: arrays[f"normalizer/{k}/{key}"]
            for key in ("mean", "var", "initialized")})
    return agent, cfg, manifest


def load_checkpoint(path: Path, trainer: Trainer,
                    collector: Collector | None = None) -> dict:
    """Restore params/optimizers/rng/counters; returns the manifest."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    arrays, _ = arrayio.read_arrays(path / "arrays.bin")
    state_dict = {name[len("param/"):]: torch.from_numpy(arr.copy())
                  for name, arr in arrays.items()
                  if name.startswith("param/")}
    trainer.agent.load_state_dict(state_dict)
    for name, opt in trainer.opts.items():
        sd = opt.state_dict()
        state: dict = {}
        prefix = f"opt/{name}/"
        for tag, arr in arrays.items():
            if not tag.startswith(prefix):
                continue
            _, _, pi, key = tag.split("/", 3)
            entry = state.setdefault(int(pi), {})
            entry[key] = (torch.from_numpy(arr.copy())
                          if arr.ndim > 0 else
                          torch.as_tensor(arr.item()))
        sd["state"] = state
        opt.load_state_dict(sd)
    for k, norm in enumerate(trainer.agent.hierarchy.normalizers):
        norm.load_state_arrays({
            key: arrays[f"normalizer/{k}/{key}"]
            for key in ("mean", "var", "initialized")})
    trainer.return_scale.load_state_arrays({
        key[len("return_scale/"):]: arr for key, arr in arrays.items()
        if key.startswith("return_scale/")})
    trainer.gen.set_state(torch.from_numpy(
        arrays["rng/trainer_torch"].copy()))
    trainer.counters = Counters.from_dict(manifest["counters"])
    _restore_rng(trainer.sample_rng, manifest["rng_numpy"]["trainer_sample"])
    if collector is not None:
        collector.gen.set_state(torch.from_numpy(
            arrays["rng/collector_torch"].copy()))
        _restore_rng(collector.action_rng,
                     manifest["rng_numpy"]["collector_action"])
        collector.snapshot.copy_from(trainer.agent)
    return manifest


# --------------------------------------------------------------- run loop


def run(cfg: Config, resume: str | None = None) -> dict:
    cfg.validate()
    run_cfg = cfg.run
    logdir = Path(run_cfg.logdir)
    logdir.mkdir(parents=True, exist_ok=True)
    (logdir / "config.json").write_text(json.dumps(to_dict(cfg), indent=2))
    if run_cfg.synchronous:
        torch.set_num_threads(1)
    torch.manual_seed(run_cfg.seed)

    from .config import build_env
    envs = [build_env(cfg, seed=run_cfg.seed * 9973 + 101 + i)
            for i in range(cfg.env.parallel)]
    action_dim = envs[0].action_count
    with torch.random.fork_rng():
        torch.manual_seed(run_cfg.seed)
        agent = Agent(cfg, action_dim)
        snapshot = Agent(cfg, action_dim)
    snapshot.copy_from(agent)

    buffer = ReplayBuffer(cfg.train.buffer_capacity,
                          streams=cfg.env.parallel)
    metrics = MetricsWriter(logdir / "metrics.jsonl",
                            wallclock=not run_cfg.synchronous)
    trainer = Trainer(cfg, agent, buffer, seed=run_cfg.seed + 17,
                      device=run_cfg.device)
    collector = Collector(cfg, snapshot, buffer, envs,
                          seed=run_cfg.seed + 29, metrics=metrics)

    if resume is not None:
        load_checkpoint(Path(resume), trainer, collector)
        replay_dir = Path(resume) / "replay"
        if replay_dir.is_dir():
            buffer = ReplayBuffer.load(replay_dir,
                                       cfg.train.buffer_capacity,
                                       streams=cfg.env.parallel)
            trainer.buffer = buffer
            collector.buffer = buffer
    counters = trainer.counters

    batch_steps = cfg.train.batch_size * cfg.train.batch_length
    next_checkpoint = (counters.env_steps // run_cfg.checkpoint_every
                       + 1) * run_cfg.checkpoint_every
    next_eval = ((counters.env_steps // run_cfg.eval_every + 1)
                 * run_cfg.eval_every if run_cfg.eval_every else None)
    next_snapshot = counters.env_steps

    def maybe_periodic() -> None:
        nonlocal next_checkpoint, next_eval, next_snapshot
        if counters.env_steps >= next_snapshot:
            with trainer.lock:
                snapshot.copy_from(agent)
            next_snapshot = counters.env_steps + run_cfg.snapshot_every
        if counters.env_steps >= next_checkpoint:
            step_dir = logdir / "ckpt" / str(counters.env_steps)
            with trainer.lock:
                save_checkpoint(step_dir, trainer, collector, cfg)
            buffer.save(step_dir / "replay")
            next_checkpoint += run_cfg.checkpoint_every
        if next_eval is not None and counters.env_steps >= next_eval:
            with trainer.lock:
                summary = run_eval(agent, cfg,
                                   seed=run_cfg.seed + counters.env_steps,
                                   episodes=run_cfg.eval_episodes)
            metrics.write("eval", counters.env_steps,
                          success_rate=summary["success_rate"],
                          mean_score=summary["mean_score"],
                          mean_length=summary["mean_length"])
            next_eval += run_cfg.eval_every

    def train_some() -> None:
        while (counters.quota >= batch_steps
               and buffer.total_appended >= cfg.train.prefill):
            counters.quota -= batch_steps
            step_metrics = trainer.train_step()
            if (counters.train_steps % run_cfg.log_every == 0
                    or counters.env_steps >= run_cfg.steps):
                metrics.write("train", counters.env_steps,
                              train_step=counters.train_steps,
                              **{k: (round(v, 8)
                                     if isinstance(v, float) else v)
                                 for k, v in step_metrics.items()})

    # ---- prefill with random actions (no model state maintained)
    prefill_target = max(cfg.train.prefill, 0)
    while (buffer.total_appended < prefill_target
           and counters.env_steps < run_cfg.steps):
        for i in range(len(envs)):
            collector.collect_step(i, counters, random_actions=True)
        counters.quota += cfg.train.train_ratio * len(envs)
    collector.reset_all()

    if run_cfg.synchronous:
        while counters.env_steps < run_cfg.steps:
            maybe_periodic()
            for i in range(len(envs)):
                collector.collect_step(i, counters)
            counters.quota += cfg.train.train_ratio * len(envs)
            train_some()
    else:
        stop = threading.Event()
        error: list[BaseException] = []
        quota_lock = threading.Lock()

        def collect_loop() -> None:
            try:
                while (not stop.is_set()
                       and counters.env_steps < run_cfg.steps):
                    if counters.quota > 4 * batch_steps:
                        time.sleep(0.005)  # collector ahead; let trainer work
                        continue
                    for i in range(len(envs)):
                        collector.collect_step(i, counters)
                    with quota_lock:
                        counters.quota += (cfg.train.train_ratio
                                           * len(envs))
            except BaseException as exc:  # surfaced by the main thread
                error.append(exc)
                stop.set()

        thread = threading.Thread(target=collect_loop, daemon=True)
        thread.start()
        try:
            while counters.env_steps < run_cfg.steps and not stop.is_set():
                maybe_periodic()
                if (counters.quota >= batch_steps
                        and buffer.total_appended >= cfg.train.prefill):
                    with quota_lock:
                        counters.quota -= batch_steps
                    step_metrics = trainer.train_step()
                    if counters.train_steps % run_cfg.log_every == 0:
                        metrics.write(
                            "train", counters.env_steps,
                            train_step=counters.train_steps,
                            **{k: (round(v, 8) if isinstance(v, float)
                                   else v)
                               for k, v in step_metrics.items()})
                else:
                    time.sleep(0.005)
        finally:
            stop.set()
            thread.join(timeout=60)
        if error:
            raise error[0]
        train_some()
    maybe_periodic()

    final_dir = logdir / "ckpt" / "final"
    save_checkpoint(final_dir, trainer, collector, cfg)
    buffer.save(final_dir / "replay")
    summary = {
        "env_steps": counters.env_steps,
        "train_steps": counters.train_steps,
        "episodes": counters.episodes,
    }
    if collector.episode_returns:
        recent = collector.episode_returns[-20:]
        summary["recent_mean_score"] = float(np.mean(recent))
    metrics.write("summary", counters.env_steps, **summary)
    metrics.close()
    summary["logdir"] = str(logdir)
    summary["checkpoint"] = str(final_dir)
    return summary
