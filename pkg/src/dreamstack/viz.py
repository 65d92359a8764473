"""Visual artifacts: foresight strip images and offline metric reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .pipeline import Agent, _to_obs


def _panel_from_obs(obs: torch.Tensor) -> np.ndarray:
    """Model-space frame (3, H, W) in [-0.5, 0.5] -> uint8 (H, W, 3)."""
    arr = (obs.detach().numpy().transpose(1, 2, 0) + 0.5) * 255.0
    return np.clip(arr, 0, 255).astype(np.uint8)


def _panel_minmax(frame: torch.Tensor) -> np.ndarray:
    """Scale an arbitrary-range (3, H, W) frame to displayable uint8."""
    arr = frame.detach().numpy().transpose(1, 2, 0).astype(np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo < 1e-12:
        return np.full(arr.shape, 127, np.uint8)
    return ((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def foresight_strip(raw_obs: torch.Tensor, hints: list[torch.Tensor],
                    residual_inputs: list[torch.Tensor | None]) -> np.ndarray:
    """One timestep's strip: raw | per-layer hint frames | residual inputs.

    `hints[k]` is (3F, H, W) channel-stacked frames; residual_inputs skips
    layer 0 (which has none). Hint and residual panels are min-max scaled
    per panel; the raw panel uses the fixed [-0.5, 0.5] -> [0, 255] map.
    """
    panels = [_panel_from_obs(raw_obs)]
    for hint in hints:
        frames = hint.reshape(-1, 3, *hint.shape[-2:])
        for f in frames:
            panels.append(_panel_minmax(f))
    for res in residual_inputs:
        if res is not None:
            panels.append(_panel_minmax(res))
    return np.concatenate(panels, axis=1)


def render_episode_strips(agent: Agent, cfg, out_dir: str | Path,
                          episodes: int = 1, seed: int = 0,
                          max_steps: int | None = None) -> list[Path]:
    """Run greedy episodes and write one strip PNG per timestep."""
    from .config import build_env
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agent.eval()
    gen = torch.Generator().manual_seed(seed)
    written: list[Path] = []
    for ep in range(episodes):
        env = build_env(cfg, seed=seed * 7919 + ep)
        step = env.reset()
        state = agent.hierarchy.initial_state(1)
        t = 0
        while True:
            obs = _to_obs(step.image[None], "cpu")
            with torch.no_grad():
                pending = agent.hierarchy.observe_stage(
                    state, obs, mode="eval",
                    rollout_policy=lambda f: agent.heads.act(f, gen),
                    generator=gen, want_comms=True)
                action_vec = agent.heads.act(pending.feature, gen, mode=True)
                state = agent.hierarchy.advance(state, pending, action_vec)
            comms = pending.diag.comms
            hints = [h[0] if h is not None
                     else torch.zeros(3 * agent.hierarchy.cfg.foresight_frames,
                                      *obs.shape[-2:])
                     for h in comms.hints]
            residuals = [r[0] if r is not None else None
                         for r in comms.residual_inputs]
            strip = foresight_strip(obs[0], hints, residuals)
            path = out / f"ep{ep}_t{t}.png"
            Image.fromarray(strip).save(path)
            written.append(path)
            step = env.step(int(action_vec.argmax(-1).item()))
            t += 1
            if step.is_last or step.is_terminal or (
                    max_steps is not None and t >= max_steps):
                break
    return written


# ------------------------------------------------------------------ report


def read_metrics(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def render_report(metrics_path: str | Path, out_dir: str | Path) -> dict:
    """Render training curves (PNG) and a summary table (CSV) from metrics.

    Returns {"figures": [...], "summary_csv": path, "rows": n}.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_metrics(metrics_path)
    trains = [r for r in records if r.get("kind") == "train"]
    episodes = [r for r in records if r.get("kind") == "episode"]
    evals = [r for r in records if r.get("kind") == "eval"]
    figures: list[str] = []

    loss_keys = sorted({k for r in trains for k in r
                        if k.startswith("loss/")})
    if trains and loss_keys:
        fig, ax = plt.subplots(figsize=(8, 5))
        steps = [r["step"] for r in trains]
        for key in loss_keys:
            ax.plot(steps, [r.get(key, float("nan")) for r in trains],
                    label=key)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("loss")
        ax.set_yscale("symlog")
        ax.legend(fontsize=8)
        ax.set_title("training losses")
        fig.tight_layout()
        path = out / "losses.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        figures.append(str(path))

    if episodes:
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.plot([r["step"] for r in episodes],
                [r["score"] for r in episodes], ".", alpha=0.5,
                label="episode score")
        if evals:
            ax.plot([r["step"] for r in evals],
                    [r["mean_score"] for r in evals], "o-",
                    label="eval mean score")
        ax.set_xlabel("environment steps")
        ax.set_ylabel("score")
        ax.legend(fontsize=8)
        ax.set_title("episode scores")
        fig.tight_layout()
        path = out / "scores.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        figures.append(str(path))

    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "records", "last_step"])
        for kind, rows in (("train", trains), ("episode", episodes),
                           ("eval", evals)):
            writer.writerow([kind, len(rows),
                             rows[-1]["step"] if rows else ""])
    return {"figures": figures, "summary_csv": str(summary_path),
            "rows": len(records)}
