"""Unified rollout-and-update loop for the two-policy MDP.

One update: sample a batch of prompts, roll out G reasoning chains per
prompt under frozen snapshots, condition one stochastic-window denoising
trajectory on each chain, score terminal samples, standardize rewards
within each group, then ascend the summed text and flow surrogates for a
fixed number of optimization epochs.  Text-only / flow-only baselines and
the guidance ablation are degenerate configurations of the same loop.
"""

from __future__ import annotations

import json
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import TrainConfig, config_to_dict, dump_config
from .errors import CheckpointError, ConfigError, NumericError
from .flow_policy import FlowPolicy, FlowTrajectory, timestep_schedule
from .metrics import MetricsRow, MetricsWriter, read_metrics, truncate_metrics
from .nn import AdamState, GradSet, ParamSet, adam_step
from .rng import stream
from .task import (
    PROMPT_LEN,
    VOCAB_SIZE,
    Prompt,
    RewardRecord,
    TaskGeometry,
    all_tuples,
    canonical_trace,
    make_prompt,
    make_pretrain_data,
    reward,
    sample_prompt,
    score,
)
from .text_policy import ReasoningTrace, TextPolicy


def group_advantages(rewards: np.ndarray, eps_std: float = 1e-8) -> np.ndarray:
    """Within-group standardization (population std); a degenerate group with
    ~equal rewards gets all-zero advantages and is skipped by the losses."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ConfigError("group size must be >= 2")
    std = float(rewards.std())
    if std < eps_std:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


@dataclass
class GroupRollout:
    prompt: Prompt
    traces: list[ReasoningTrace]
    trajs: list[FlowTrajectory]
    records: list[RewardRecord]
    rewards: np.ndarray
    advantages: np.ndarray
    nonfinite: int

    @property
    def degenerate(self) -> bool:
        return not np.any(self.advantages)


@dataclass
class Runtime:
    """Config plus the derived policy objects and schedules."""

    cfg: TrainConfig
    geom: TaskGeometry
    text_policy: TextPolicy
    flow_policy: FlowPolicy
    times_train: np.ndarray
    times_eval: np.ndarray


def make_runtime(cfg: TrainConfig) -> Runtime:
    cfg.validate()
    geom = TaskGeometry(
        radius_near=cfg.radius_near,
        radius_far=cfg.radius_far,
        tau_tight=cfg.tau_tight,
        tau_wide=cfg.tau_wide,
        tau_r=cfg.tau_r,
        reward_mode=cfg.reward_mode,
    )
    text_policy = TextPolicy(
        VOCAB_SIZE, PROMPT_LEN, cfg.max_trace_len, cfg.text_embed_dim, cfg.text_hidden
    )
    flow_policy = FlowPolicy(VOCAB_SIZE, cfg.flow_cond_dim, cfg.flow_hidden)
    times_train, _ = timestep_schedule(cfg.train_timesteps, cfg.timestep_shift)
    times_eval, _ = timestep_schedule(cfg.eval_timesteps, cfg.timestep_shift)
    return Runtime(cfg, geom, text_policy, flow_policy, times_train, times_eval)


# ---- rollout phase ----


def _member_rollout(rt: Runtime, prompt: Prompt, text_old: ParamSet, flow_old: ParamSet,
                    seed: int, update: int, slot: int, member: int):
    cfg = rt.cfg
    trace_rng = stream(seed, "trace", update, slot, member)
    if cfg.train_text:
        trace = rt.text_policy.sample_trace(
            text_old, prompt.tokens, cfg.temperature, cfg.max_trace_len, trace_rng
        )
    else:
        # frozen text expert: deterministic reasoning, group variance comes
        # from the stochastic denoising window
        tokens = rt.text_policy.greedy_trace(text_old, prompt.tokens, cfg.max_trace_len)
        lp, _ = rt.text_policy.token_logprobs(text_old, prompt.tokens, tokens)
        trace = ReasoningTrace(tokens, lp)
    flow_rng = stream(seed, "flow", update, slot, member)
    starts = cfg.window_starts
    start = starts[int(flow_rng.integers(len(starts)))]
    traj = rt.flow_policy.hybrid_rollout(
        flow_old,
        trace.tokens,
        rt.times_train,
        start,
        cfg.sde_window_size,
        cfg.sigma_level,
        flow_rng,
        cfg_scale=cfg.train_cfg_scale if cfg.train_cfg else 1.0,
    )
    return trace, traj, score(traj.x0, prompt, rt.geom)


def rollout_group(rt: Runtime, prompt: Prompt, text_old: ParamSet, flow_old: ParamSet,
                  seed: int, update: int, slot: int) -> GroupRollout:
    results = [
        _member_rollout(rt, prompt, text_old, flow_old, seed, update, slot, m)
        for m in range(rt.cfg.group_size)
    ]
    return _assemble_group(rt, prompt, results)


def _assemble_group(rt: Runtime, prompt: Prompt, results) -> GroupRollout:
    traces = [r[0] for r in results]
    trajs = [r[1] for r in results]
    records = [r[2] for r in results]
    rewards = np.array([rec.reward for rec in records])
    return GroupRollout(
        prompt=prompt,
        traces=traces,
        trajs=trajs,
        records=records,
        rewards=rewards,
        advantages=group_advantages(rewards, rt.cfg.adv_eps),
        nonfinite=sum(not rec.finite for rec in records),
    )


def collect_rollouts(rt: Runtime, prompts: list[Prompt], text_old: ParamSet,
                     flow_old: ParamSet, seed: int, update: int) -> list[GroupRollout]:
    """Rollouts for one batch, optionally threaded (UNIGRPO_THREADS caps the
    pool); stream derivation makes the result identical either way."""
    cfg = rt.cfg
    tasks = [(slot, member) for slot in range(len(prompts)) for member in range(cfg.group_size)]
    threads = int(os.environ.get("UNIGRPO_THREADS", "1") or "1")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(
                lambda sm: _member_rollout(
                    rt, prompts[sm[0]], text_old, flow_old, seed, update, sm[0], sm[1]
                ),
                tasks,
            ))
    else:
        flat = [
            _member_rollout(rt, prompts[s], text_old, flow_old, seed, update, s, m)
            for s, m in tasks
        ]
    groups = []
    for slot in range(len(prompts)):
        chunk = flat[slot * cfg.group_size : (slot + 1) * cfg.group_size]
        groups.append(_assemble_group(rt, prompts[slot], chunk))
    return groups


# ---- update phase ----


@dataclass
class UpdateStats:
    j_text: float
    j_flow: float
    clip_frac_text: float
    clip_frac_flow: float
    skipped: bool = False


def unified_update(
    rt: Runtime,
    groups: list[GroupRollout],
    text_params: ParamSet,
    flow_params: ParamSet,
    text_ref: ParamSet,
    flow_ref: ParamSet,
    adam_text: AdamState,
    adam_flow: AdamState,
) -> tuple[ParamSet, ParamSet, UpdateStats]:
    """PPO epochs of joint ascent on J_text + lambda * J_flow against the
    stored old-policy statistics; degenerate groups are excluded entirely."""
    cfg = rt.cfg
    active = [g for g in groups if not g.degenerate]
    stats = UpdateStats(0.0, 0.0, 0.0, 0.0)
    if not active:
        return text_params, flow_params, stats

    reg_weight = cfg.beta_img if cfg.reg_mode == "latent-kl" else cfg.mse_weight
    if cfg.reg_mode == "none":
        reg_weight = 0.0

    try:
        for epoch in range(cfg.ppo_epochs):
            new_text, new_flow = text_params, flow_params
            if cfg.train_text:
                j_sum, grads = 0.0, GradSet(text_params)
                fracs = []
                for g in active:
                    j, gs, st = rt.text_policy.surrogate_loss(
                        text_params, g.prompt.tokens, g.traces, g.advantages,
                        cfg.clip_eps, cfg.beta_txt, text_ref,
                    )
                    j_sum += j
                    grads.add_(gs, scale=1.0 / len(active))
                    fracs.append(st.clip_fraction)
                if not np.isfinite(j_sum):
                    raise NumericError("non-finite text surrogate")
                if epoch == 0:
                    stats.j_text = j_sum / len(active)
                stats.clip_frac_text = float(np.mean(fracs))
                grads.scale_(-1.0)  # ascend
                new_text = adam_step(text_params, grads, adam_text)
            if cfg.train_flow:
                j_sum, grads = 0.0, GradSet(flow_params)
                fracs = []
                for g in active:
                    j, gs, st = rt.flow_policy.surrogate_loss(
                        flow_params, g.trajs, g.advantages, cfg.clip_eps,
                        cfg.reg_mode, reg_weight, flow_ref,
                    )
                    j_sum += j
                    grads.add_(gs, scale=1.0 / len(active))
                    fracs.append(st.clip_fraction)
                if not np.isfinite(j_sum):
                    raise NumericError("non-finite flow surrogate")
                if epoch == 0:
                    stats.j_flow = j_sum / len(active)
                stats.clip_frac_flow = float(np.mean(fracs))
                grads.scale_(-cfg.lambda_flow)  # ascend lambda * J_flow
                new_flow = adam_step(flow_params, grads, adam_flow)
            text_params, flow_params = new_text, new_flow
    except NumericError:
        stats.skipped = True
        return text_params, flow_params, stats
    return text_params, flow_params, stats


# ---- evaluation ----


def make_eval_set(rt: Runtime, seed: int):
    """Fixed evaluation prompts (one synonym draw per tuple) and frozen noise."""
    prompts, noises = [], []
    for i, (q, b, s) in enumerate(all_tuples()):
        prng = stream(seed, "eval-prompt", i)
        syn = tuple(int(prng.integers(3)) for _ in range(3))
        prompts.append(make_prompt(q, b, s, syn))
        noises.append(stream(seed, "eval-noise", i).standard_normal((rt.cfg.eval_samples, 2)))
    return prompts, noises


def evaluate(rt: Runtime, text_params: ParamSet, flow_params: ParamSet,
             flow_ref: ParamSet, eval_set) -> dict:
    """Greedy reasoning + deterministic sampling at the evaluation schedule;
    also measures how far the tuned velocity field drifted from the frozen
    reference over the states the sampler actually visits."""
    cfg = rt.cfg
    prompts, noises = eval_set
    rewards, accs, drifts = [], [], []
    for prompt, x1 in zip(prompts, noises):
        tokens = rt.text_policy.greedy_trace(text_params, prompt.tokens, cfg.max_trace_len)
        accs.append(tokens == canonical_trace(prompt))
        x0, states, _ = rt.flow_policy.ode_rollout_batch(
            flow_params, tokens, rt.times_eval, x1, cfg_scale=cfg.eval_cfg_scale
        )
        rewards.extend(reward(x, prompt, rt.geom) for x in x0)
        cond_cur = rt.flow_policy.cond_np(flow_params, tokens)
        cond_ref = rt.flow_policy.cond_np(flow_ref, tokens)
        for x, t in states:
            v_cur = rt.flow_policy.velocity_np(flow_params, x, t, cond_cur)
            v_ref = rt.flow_policy.velocity_np(flow_ref, x, t, cond_ref)
            drifts.extend(np.sum((v_cur - v_ref) ** 2, axis=1))
    return {
        "eval_reward": float(np.mean(rewards)),
        "text_accuracy": float(np.mean(accs)),
        "velocity_drift": float(np.mean(drifts)),
    }


# ---- pretraining entry ----


def pretrain_all(cfg: TrainConfig, out_dir) -> dict:
    """Supervised warm starts for both policies; writes checkpoints, the
    dataset dump, and an accuracy report."""
    from .task import dump_pretrain_data

    rt = make_runtime(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    text_pairs, flow_pairs = make_pretrain_data(
        stream(seed, "pretrain-data"), cfg.pretrain_text_n, cfg.pretrain_flow_n,
        rt.geom, cfg.p_noise,
    )
    dump_pretrain_data(out / "pretrain_data.jsonl", text_pairs, flow_pairs)

    text_params = rt.text_policy.init_params(stream(seed, "init-text"))
    text_params, text_report = rt.text_policy.pretrain(
        text_params, text_pairs, cfg.pretrain_text_epochs, cfg.pretrain_text_lr,
        cfg.pretrain_batch, stream(seed, "pretrain-text"),
    )
    flow_params = rt.flow_policy.init_params(stream(seed, "init-flow"))
    flow_params, flow_report = rt.flow_policy.pretrain(
        flow_params, flow_pairs, cfg.pretrain_flow_epochs, cfg.pretrain_flow_lr,
        max(cfg.pretrain_batch, 256), cfg.p_uncond, stream(seed, "pretrain-flow"),
    )
    checkpoint.save_params(out / "text.ckpt", text_params)
    checkpoint.save_params(out / "flow.ckpt", flow_params)
    report = {
        "text_greedy_accuracy": text_report["greedy_accuracy"],
        "text_epoch_losses": text_report["epoch_losses"],
        "text_loss_monotone": text_report["loss_monotone"],
        "flow_quadrant_accuracy_mean": flow_report["quadrant_accuracy_mean"],
        "flow_quadrant_accuracy_min": flow_report["quadrant_accuracy_min"],
        "flow_epoch_losses": flow_report["epoch_losses"],
    }
    (out / "pretrain_report.json").write_text(json.dumps(report, indent=2))
    return report


# ---- training entry ----


def _build_id() -> str:
    try:
        return subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        ).stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _check_architecture(loaded: ParamSet, expected: ParamSet, which: str) -> None:
    got = {n: loaded[n].shape for n in loaded.names()}
    want = {n: expected[n].shape for n in expected.names()}
    if got != want:
        raise CheckpointError(
            f"{which} checkpoint does not match the configured architecture: "
            f"{got} vs {want}"
        )


_STATE_FILE = "state.ckpt"


def _save_state(out: Path, update: int, text_params, flow_params, adam_text, adam_flow):
    blocks = {f"text.{k}": v for k, v in text_params.items()}
    blocks.update({f"flow.{k}": v for k, v in flow_params.items()})
    blocks.update(adam_text.state_blocks("adam_text"))
    blocks.update(adam_flow.state_blocks("adam_flow"))
    blocks["meta.update"] = np.float64(update)
    checkpoint.save_blocks(out / _STATE_FILE, blocks)
    checkpoint.save_params(out / "text.ckpt", text_params)
    checkpoint.save_params(out / "flow.ckpt", flow_params)


def train(cfg: TrainConfig, out_dir, resume: bool = False, config_text: str | None = None) -> dict:
    """Full training run; every random draw derives from (seed, purpose,
    indices) so a fixed seed reproduces the metrics byte-for-byte and a
    resumed run continues them exactly."""
    rt = make_runtime(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed

    pre = Path(cfg.pretrain_dir)
    for name in ("text.ckpt", "flow.ckpt"):
        if not (pre / name).exists():
            raise CheckpointError(
                f"missing pretrained checkpoint {pre / name}; run pretraining first"
            )
    text_ref = checkpoint.load_params(pre / "text.ckpt")
    flow_ref = checkpoint.load_params(pre / "flow.ckpt")
    _check_architecture(text_ref, rt.text_policy.init_params(stream(0, "chk")), "text")
    _check_architecture(flow_ref, rt.flow_policy.init_params(stream(0, "chk")), "flow")
    checkpoint.save_params(out / "ref_text.ckpt", text_ref)
    checkpoint.save_params(out / "ref_flow.ckpt", flow_ref)

    manifest_path = out / "run_manifest.json"
    if not manifest_path.exists():
        manifest = {
            "config_text": config_text if config_text is not None else dump_config(cfg),
            "config_resolved": config_to_dict(cfg),
            "seed": seed,
            "build_id": _build_id(),
            "started_at": datetime.now(timezone.utc).isoformat(),
            "out_dir": str(out),
            "pretrain_dir": str(pre),
        }
        manifest_path.write_text(json.dumps(manifest, indent=2))

    text_params, flow_params = text_ref.copy(), flow_ref.copy()
    adam_text = AdamState.for_params(text_params, lr=cfg.lr_text)
    adam_flow = AdamState.for_params(flow_params, lr=cfg.lr_flow)
    start_update = 0

    if resume:
        state_path = out / _STATE_FILE
        if not state_path.exists():
            raise CheckpointError(f"cannot resume: {state_path} not found")
        blocks = checkpoint.load_blocks(state_path)
        start_update = int(blocks["meta.update"])
        text_params = text_params.with_blocks(
            {k: blocks[f"text.{k}"] for k in text_params.names()}
        )
        flow_params = flow_params.with_blocks(
            {k: blocks[f"flow.{k}"] for k in flow_params.names()}
        )
        adam_text.load_state_blocks("adam_text", blocks)
        adam_flow.load_state_blocks("adam_flow", blocks)
        truncate_metrics(out, start_update)

    writer = MetricsWriter(out, append=resume)
    eval_set = make_eval_set(rt, seed)
    baseline = None

    if not resume:
        ev = evaluate(rt, text_params, flow_params, flow_ref, eval_set)
        baseline = ev["eval_reward"]
        writer.write_row(MetricsRow(
            update=0, mean_train_reward=0.0, eval_reward=ev["eval_reward"],
            j_text=0.0, j_flow=0.0, clip_frac_text=0.0, clip_frac_flow=0.0,
            velocity_drift=ev["velocity_drift"], text_accuracy=ev["text_accuracy"],
            nonfinite_samples=0,
        ))

    text_old, flow_old = text_params.copy(), flow_params.copy()
    last_eval: dict = {}
    for update in range(start_update + 1, cfg.total_updates + 1):
        tic = time.perf_counter()
        prompts = [
            sample_prompt(stream(seed, "prompt", update, slot))
            for slot in range(cfg.prompts_per_batch)
        ]
        groups = collect_rollouts(rt, prompts, text_old, flow_old, seed, update)
        text_params, flow_params, ustats = unified_update(
            rt, groups, text_params, flow_params, text_ref, flow_ref,
            adam_text, adam_flow,
        )
        text_old, flow_old = text_params.copy(), flow_params.copy()

        do_eval = (cfg.eval_every > 0 and update % cfg.eval_every == 0) \
            or update == cfg.total_updates
        ev = evaluate(rt, text_params, flow_params, flow_ref, eval_set) if do_eval else None
        if ev:
            last_eval = ev

        all_rewards = np.concatenate([g.rewards for g in groups])
        writer.write_row(MetricsRow(
            update=update,
            mean_train_reward=float(all_rewards.mean()),
            eval_reward=ev["eval_reward"] if ev else None,
            j_text=ustats.j_text,
            j_flow=ustats.j_flow,
            clip_frac_text=ustats.clip_frac_text,
            clip_frac_flow=ustats.clip_frac_flow,
            velocity_drift=ev["velocity_drift"] if ev else None,
            text_accuracy=ev["text_accuracy"] if ev else None,
            nonfinite_samples=sum(g.nonfinite for g in groups),
            wall_clock=time.perf_counter() - tic,
        ))
        for slot, g in enumerate(groups):
            writer.write_group_record({
                "update": update,
                "slot": slot,
                "prompt_id": g.prompt.prompt_id,
                "rewards": [float(r) for r in g.rewards],
                "advantages": [float(a) for a in g.advantages],
                "traces": [list(map(int, tr.tokens)) for tr in g.traces],
                "windows": [list(map(int, tj.window)) for tj in g.trajs],
                "x0": [[float(v) for v in tj.x0] for tj in g.trajs],
                "velocity_evals": [tj.velocity_evals for tj in g.trajs],
                "degenerate": g.degenerate,
                "skipped": ustats.skipped,
            })

        if (cfg.checkpoint_every > 0 and update % cfg.checkpoint_every == 0) \
                or update == cfg.total_updates:
            _save_state(out, update, text_params, flow_params, adam_text, adam_flow)

    writer.close()
    rows = read_metrics(out / "metrics.csv")
    if baseline is None:
        baseline = rows[0]["eval_reward"]
    summary = {
        "out_dir": str(out),
        "updates": cfg.total_updates,
        "baseline_eval": baseline,
        "final_eval": last_eval.get("eval_reward", rows[-1]["eval_reward"]),
        "final_text_accuracy": last_eval.get("text_accuracy"),
        "final_velocity_drift": last_eval.get("velocity_drift"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
