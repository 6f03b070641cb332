"""Advantage actor-critic trainer with n-step bootstrapped returns.

Workers roll out up to ``n_steps`` frames against a private environment and
graph, backpropagate policy + value + entropy losses, then apply a globally
clipped, adaptively scaled update to the shared parameters under a lock
(per-tensor application is atomic; reads across tensors may interleave).
``mode="sync"`` runs one worker inline and is bit-for-bit reproducible.
"""

from __future__ import annotations

import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import gridnav
from .autodiff import Graph, Tensor
from .gridnav import ACTIONS, MAX_STEPS
from .nets import (
    AttentionState,
    ModelConfig,
    Params,
    encode_instruction,
    initial_attention_state,
    model_step,
)

LOG_COLUMNS = ("episodes", "frames", "mean_reward", "accuracy",
               "policy_loss", "value_loss", "entropy")


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    n_steps: int = 20
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    grad_clip_norm: float = 40.0
    learning_rate: float = 1e-3
    workers: int = 1
    mode: str = "sync"  # sync | async
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    max_frames: int = 200_000
    max_episodes: int = 0  # 0 = no episode cap
    log_every_episodes: int = 100
    checkpoint_every_episodes: int = 0  # 0 = off
    early_stop_accuracy: float = 0.0  # 0 = off

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.mode not in ("sync", "async"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "sync" and self.workers != 1:
            raise ValueError("sync mode is single-worker by definition")


@dataclass
class EnvSettings:
    difficulty: str = "easy"
    corpus_seed: int = 7


@dataclass
class RolloutStep:
    state: Tensor
    action: int
    log_prob: Tensor
    value: Tensor
    entropy: Tensor
    reward: float
    done: bool


class RolloutBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.steps: list[RolloutStep] = []

    def append(self, step: RolloutStep) -> None:
        if len(self.steps) >= self.capacity:
            raise ValueError("rollout buffer full")
        self.steps.append(step)

    def clear(self) -> None:
        self.steps = []

    def __len__(self):
        return len(self.steps)


def compute_returns(buffer: RolloutBuffer, bootstrap_value: float,
                    gamma: float) -> list[float]:
    """Discounted returns R_t = r_t + gamma * R_{t+1}, computed backward;
    a done flag cuts the recursion."""
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    returns = [0.0] * len(buffer)
    acc = float(bootstrap_value)
    for i in range(len(buffer) - 1, -1, -1):
        step = buffer.steps[i]
        if step.done:
            acc = 0.0
        acc = step.reward + gamma * acc
        returns[i] = acc
    return returns


def compute_losses(g: Graph, buffer: RolloutBuffer, returns: list[float]
                   ) -> tuple[Tensor, Tensor, Tensor]:
    """(policy_loss, value_loss, entropy) as graph scalars.

    The advantage R_t - V(s_t) enters the policy term as a constant, so no
    gradient flows into the critic through it.
    """
    if len(buffer) != len(returns):
        raise ValueError("returns not aligned with buffer")
    policy_loss = value_loss = entropy = None
    for step, ret in zip(buffer.steps, returns):
        advantage = ret - step.value.item()
        p_term = g.scale(step.log_prob, -advantage)
        diff = g.shift(step.value, -ret)
        v_term = g.mul(diff, diff)
        policy_loss = p_term if policy_loss is None else g.add(policy_loss, p_term)
        value_loss = v_term if value_loss is None else g.add(value_loss, v_term)
        entropy = step.entropy if entropy is None else g.add(entropy, step.entropy)
    return policy_loss, value_loss, entropy


def total_loss(g: Graph, policy_loss: Tensor, value_loss: Tensor,
               entropy: Tensor, config: TrainerConfig) -> Tensor:
    out = g.add(policy_loss, g.scale(value_loss, config.value_coef))
    return g.add(out, g.scale(entropy, -config.entropy_coef))


class SharedOptimizerState:
    """Per-parameter squared-gradient moving averages shared by all workers."""

    def __init__(self, params: Params):
        self.square_avg = {name: np.zeros_like(t.data)
                           for name, t in params.items()}
        self.step_count = 0
        self.skipped = 0
        self.lock = threading.Lock()


def worker_update(shared: Params, opt: SharedOptimizerState,
                  grads: dict[str, np.ndarray], config: TrainerConfig) -> bool:
    """Clip to the global norm, then apply an RMSProp-style step to the
    shared parameters. Returns False (and logs the incident) on non-finite
    gradients."""
    sq_sum = 0.0
    for grad in grads.values():
        sq_sum += float(np.dot(grad.ravel(), grad.ravel()))
    if not np.isfinite(sq_sum):
        with opt.lock:
            opt.skipped += 1
        return False
    norm = np.sqrt(sq_sum)
    scale = 1.0
    if config.grad_clip_norm > 0 and norm > config.grad_clip_norm:
        scale = config.grad_clip_norm / norm
    lr = config.learning_rate
    alpha = config.rmsprop_alpha
    eps = config.rmsprop_eps
    with opt.lock:
        for name, grad in grads.items():
            if scale != 1.0:
                grad = grad * scale
            sq = opt.square_avg[name]
            sq *= alpha
            sq += (1.0 - alpha) * grad * grad
            shared[name].data -= lr * grad / (np.sqrt(sq) + eps)
        opt.step_count += 1
    return True


# --------------------------------------------------------------------------
# Collector: single consumer of worker messages, owner of the log
# --------------------------------------------------------------------------

class Collector:
    def __init__(self, config: TrainerConfig,
                 checkpoint_cb: Optional[Callable[[int], None]] = None):
        self.config = config
        self.checkpoint_cb = checkpoint_cb
        self.stop_event = threading.Event()
        self.episodes = 0
        self.frames = 0
        self.recent = deque(maxlen=100)
        self.loss_sums = [0.0, 0.0, 0.0]
        self.loss_count = 0
        self.rows: list[dict] = []

    def handle(self, msg) -> None:
        kind = msg[0]
        if kind == "frames":
            self.frames += msg[1]
            if 0 < self.config.max_frames <= self.frames:
                self.stop_event.set()
        elif kind == "update":
            for i in range(3):
                self.loss_sums[i] += msg[1 + i]
            self.loss_count += 1
        elif kind == "episode":
            self.episodes += 1
            self.recent.append(msg[1])
            if self.episodes % self.config.log_every_episodes == 0:
                self._emit_row()
            if (self.checkpoint_cb is not None
                    and self.config.checkpoint_every_episodes > 0
                    and self.episodes % self.config.checkpoint_every_episodes == 0):
                self.checkpoint_cb(self.episodes)
            if 0 < self.config.max_episodes <= self.episodes:
                self.stop_event.set()
        else:
            raise ValueError(f"unknown collector message {msg!r}")

    def _emit_row(self) -> None:
        n = max(1, self.loss_count)
        accuracy = sum(1 for r in self.recent if r == gridnav.REWARD_CORRECT) \
            / max(1, len(self.recent))
        row = {
            "episodes": self.episodes,
            "frames": self.frames,
            "mean_reward": sum(self.recent) / max(1, len(self.recent)),
            "accuracy": accuracy,
            "policy_loss": self.loss_sums[0] / n,
            "value_loss": self.loss_sums[1] / n,
            "entropy": self.loss_sums[2] / n,
        }
        self.rows.append(row)
        self.loss_sums = [0.0, 0.0, 0.0]
        self.loss_count = 0
        if (self.config.early_stop_accuracy > 0
                and len(self.recent) == self.recent.maxlen
                and accuracy >= self.config.early_stop_accuracy):
            self.stop_event.set()


class _InlineChannel:
    """Sync-mode channel: messages reach the collector immediately."""

    def __init__(self, collector: Collector):
        self.collector = collector

    def put(self, msg) -> None:
        self.collector.handle(msg)


# --------------------------------------------------------------------------
# Worker rollout loop
# --------------------------------------------------------------------------

def _entropy(g: Graph, probs: Tensor) -> Tensor:
    return g.scale(g.sum_all(g.mul(probs, g.log(probs))), -1.0)


def _worker_loop(worker_id: int, shared: Params, opt: SharedOptimizerState,
                 tconf: TrainerConfig, mconf: ModelConfig,
                 env: EnvSettings, seed: int, channel,
                 stop_event: threading.Event, train_split) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + worker_id]))
    local = shared.copy()
    render_hw = (mconf.render_h, mconf.render_w)

    def new_episode():
        ins = train_split[int(rng.integers(len(train_split)))]
        env_seed = int(rng.integers(2 ** 31))
        state, obs = gridnav.reset(env_seed, env.difficulty, ins,
                                   render_hw=render_hw)
        return ins, state, obs

    instruction, state, obs = new_episode()
    att_h = np.zeros(mconf.d)
    att_c = np.ones(mconf.d)

    while not stop_event.is_set():
        g = Graph()
        x_l = encode_instruction(g, local, mconf, instruction.tokens)
        att = AttentionState(h=Tensor(att_h), C=Tensor(att_c))
        buffer = RolloutBuffer(tconf.n_steps)
        frames = 0
        for _ in range(tconf.n_steps):
            out = model_step(g, local, mconf, x_l, obs.image, att)
            p = out.probs.data
            action = int(rng.choice(len(p), p=p / p.sum()))
            log_prob = g.log(g.pick(out.probs, action))
            entropy = _entropy(g, out.probs)
            state, reward, done = gridnav.advance(state, ACTIONS[action])
            buffer.append(RolloutStep(
                state=out.state, action=action, log_prob=log_prob,
                value=out.value, entropy=entropy, reward=reward, done=done))
            frames += 1
            if out.next_attention_state is not None:
                att = out.next_attention_state
            if done:
                channel.put(("episode", reward))
                instruction, state, obs = new_episode()
                x_l = encode_instruction(g, local, mconf, instruction.tokens)
                att = AttentionState(h=Tensor(np.zeros(mconf.d)),
                                     C=Tensor(np.ones(mconf.d)))
            else:
                obs = gridnav.render(state)
            if stop_event.is_set():
                break

        channel.put(("frames", frames))
        bootstrap = 0.0
        if not buffer.steps[-1].done:
            peek = model_step(g, local, mconf, x_l, obs.image, att)
            bootstrap = peek.value.item()
        returns = compute_returns(buffer, bootstrap, tconf.gamma)
        policy_loss, value_loss, entropy = compute_losses(g, buffer, returns)
        loss = total_loss(g, policy_loss, value_loss, entropy, tconf)
        local.zero_grads()
        g.backward(loss)
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for name, t in local.items()}
        worker_update(shared, opt, grads, tconf)
        with opt.lock:
            local.load_values(shared)
        channel.put(("update", policy_loss.item(), value_loss.item(),
                     entropy.item()))

        # detach the recurrent state at the segment boundary
        att_h = att.h.data.copy()
        att_c = att.C.data.copy()


@dataclass
class TrainResult:
    rows: list[dict]
    params: Params
    episodes: int
    frames: int
    skipped_updates: int


def train(tconf: TrainerConfig, mconf: ModelConfig, env: EnvSettings,
          seed: int,
          checkpoint_cb: Optional[Callable[[int, Params], None]] = None,
          ) -> TrainResult:
    """Run the trainer to its frame/episode budget and return the log rows
    plus the final shared parameters."""
    from .nets import init_params

    corpus = gridnav.build_corpus(env.corpus_seed)
    shared = init_params(mconf, seed)
    opt = SharedOptimizerState(shared)

    def save_cb(episodes: int) -> None:
        if checkpoint_cb is None:
            return
        with opt.lock:
            snapshot = shared.copy()
        checkpoint_cb(episodes, snapshot)

    collector = Collector(tconf, checkpoint_cb=save_cb)

    # a fully zero budget trains nothing: empty log, initial parameters kept
    has_budget = tconf.max_frames > 0 or tconf.max_episodes > 0
    if has_budget:
        if tconf.mode == "sync":
            channel = _InlineChannel(collector)
            _worker_loop(0, shared, opt, tconf, mconf, env, seed, channel,
                         collector.stop_event, corpus.train)
        else:
            chan: queue.Queue = queue.Queue()
            threads = [
                threading.Thread(
                    target=_worker_loop,
                    args=(wid, shared, opt, tconf, mconf, env, seed, chan,
                          collector.stop_event, corpus.train),
                    daemon=True)
                for wid in range(tconf.workers)
            ]
            for t in threads:
                t.start()
            while not collector.stop_event.is_set():
                try:
                    collector.handle(chan.get(timeout=0.25))
                except queue.Empty:
                    if not any(t.is_alive() for t in threads):
                        break
            for t in threads:
                t.join()
            while True:
                try:
                    collector.handle(chan.get_nowait())
                except queue.Empty:
                    break

    return TrainResult(rows=collector.rows, params=shared,
                       episodes=collector.episodes, frames=collector.frames,
                       skipped_updates=opt.skipped)


# --------------------------------------------------------------------------
# Greedy / sampled episode playout (evaluation, visualization)
# --------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    reward: float
    success: bool
    steps: int
    trace: list[dict]
    frames: list[np.ndarray] = field(default_factory=list)
    attended: list[Optional[np.ndarray]] = field(default_factory=list)
    attention_vectors: list[Optional[np.ndarray]] = field(default_factory=list)
    actions: list[str] = field(default_factory=list)


def play_episode(params: Params, mconf: ModelConfig, instruction,
                 env_seed: int, difficulty: str, greedy: bool = True,
                 rng: Optional[np.random.Generator] = None,
                 capture: bool = False) -> EpisodeResult:
    """Roll one episode; greedy mode takes the argmax action (ties to the
    lowest index)."""
    state, obs = gridnav.reset(env_seed, difficulty, instruction,
                               render_hw=(mconf.render_h, mconf.render_w))
    g = Graph()
    x_l = encode_instruction(g, params, mconf, instruction.tokens)
    att = initial_attention_state(mconf)
    result = EpisodeResult(reward=0.0, success=False, steps=0, trace=[])
    final_reward = 0.0
    for t in range(MAX_STEPS):
        out = model_step(g, params, mconf, x_l, obs.image, att)
        if capture:
            result.frames.append(obs.image.data.copy())
            result.attended.append(
                None if out.attended is None else out.attended.data.copy())
            result.attention_vectors.append(
                None if out.attention is None else out.attention.data.copy())
        if greedy:
            action = int(np.argmax(out.probs.data))
        else:
            if rng is None:
                raise ValueError("sampled playout needs an rng")
            p = out.probs.data
            action = int(rng.choice(len(p), p=p / p.sum()))
        state, reward, done = gridnav.advance(state, ACTIONS[action])
        result.trace.append(gridnav.trace_record(t, ACTIONS[action], reward,
                                                 done, state))
        result.actions.append(ACTIONS[action])
        if out.next_attention_state is not None:
            att = out.next_attention_state
        final_reward = reward
        result.steps = t + 1
        if done:
            break
        obs = gridnav.render(state)
    result.reward = final_reward
    result.success = final_reward == gridnav.REWARD_CORRECT
    return result
