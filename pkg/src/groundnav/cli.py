"""Command-line harness: corpus generation, training, evaluation,
attention visualization, and the gradient-check suite.

Experiment configuration is a flat ``key = value`` text file; unknown keys
are rejected and a resolved copy is written into the output directory so
every artifact is reproducible from the config and seeds alone.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck, gridnav, nets
from .a3c import EnvSettings, TrainerConfig, play_episode, train
from .gridnav import Corpus, Instruction
from .nets import ModelConfig, Params


@dataclass
class ExperimentConfig:
    difficulty: str = "easy"
    attention_source: str = "lstm_cellstate"
    application: str = "conv1d"
    fusion: str = "attention"
    seeds: tuple[int, ...] = (1, 2, 3)
    corpus_seed: int = 7
    d: int = 16
    l: int = 64
    embed_dim: int = 16
    hidden: int = 64
    render_h: int = 48
    render_w: int = 64
    conv_specs: tuple[tuple[int, int, int], ...] = ((8, 5, 3), (12, 4, 2), (16, 3, 1))
    forget_gate_sees_input: bool = True
    gamma: float = 0.99
    n_steps: int = 20
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    grad_clip_norm: float = 40.0
    learning_rate: float = 1e-3
    workers: int = 1
    mode: str = "sync"
    max_frames: int = 200_000
    max_episodes: int = 0
    log_every_episodes: int = 100
    checkpoint_every_episodes: int = 0
    early_stop_accuracy: float = 0.0
    eval_mode: str = "multitask"
    eval_episodes: int = 500
    out_dir: str = "runs/experiment"

    def model_config(self, corpus: Corpus) -> ModelConfig:
        vocab = nets.build_vocab(corpus.train + corpus.test)
        if self.conv_specs[-1][0] != self.d:
            raise ValueError("conv_specs must end with d channels")
        return ModelConfig(
            vocab=vocab, d=self.d, l=self.l, embed_dim=self.embed_dim,
            hidden=self.hidden, render_h=self.render_h, render_w=self.render_w,
            conv_specs=self.conv_specs,
            attention_source=self.attention_source,
            application=self.application, fusion=self.fusion,
            forget_gate_sees_input=self.forget_gate_sees_input)

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            gamma=self.gamma, n_steps=self.n_steps,
            entropy_coef=self.entropy_coef, value_coef=self.value_coef,
            grad_clip_norm=self.grad_clip_norm,
            learning_rate=self.learning_rate, workers=self.workers,
            mode=self.mode, max_frames=self.max_frames,
            max_episodes=self.max_episodes,
            log_every_episodes=self.log_every_episodes,
            checkpoint_every_episodes=self.checkpoint_every_episodes,
            early_stop_accuracy=self.early_stop_accuracy)

    def env_settings(self) -> EnvSettings:
        return EnvSettings(difficulty=self.difficulty,
                           corpus_seed=self.corpus_seed)


_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "1": True, "0": False}


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in _BOOL_WORDS:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, str):
        return raw
    if name == "seeds":
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if name == "conv_specs":
        specs = []
        for part in raw.split(","):
            dims = part.strip().split("x")
            if len(dims) != 3:
                raise ValueError(f"conv_specs entry {part!r} is not CxKxS")
            specs.append(tuple(int(v) for v in dims))
        return tuple(specs)
    raise ValueError(f"no parser for config key {name!r}")


def parse_config_text(text: str) -> ExperimentConfig:
    defaults = ExperimentConfig()
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if not hasattr(defaults, key):
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, val, getattr(defaults, key))
    config = dataclasses.replace(defaults, **values)
    _validate(config)
    return config


def _validate(config: ExperimentConfig) -> None:
    if config.difficulty not in gridnav.DIFFICULTIES:
        raise ValueError(f"unknown difficulty {config.difficulty!r}")
    if config.attention_source not in nets.ATTENTION_SOURCES:
        raise ValueError(f"unknown attention_source {config.attention_source!r}")
    if config.application not in nets.APPLICATIONS:
        raise ValueError(f"unknown application {config.application!r}")
    if config.fusion not in nets.FUSIONS:
        raise ValueError(f"unknown fusion {config.fusion!r}")
    if config.mode not in ("sync", "async"):
        raise ValueError(f"unknown mode {config.mode!r}")
    if config.eval_mode not in ("multitask", "zeroshot"):
        raise ValueError(f"unknown eval_mode {config.eval_mode!r}")
    if not config.seeds:
        raise ValueError("at least one seed required")


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if f.name == "seeds":
            v = ",".join(str(s) for s in v)
        elif f.name == "conv_specs":
            v = ",".join("x".join(str(d) for d in spec) for spec in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Artifact helpers
# --------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) from a (3, H, W) float image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    img = raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64)
    return img / maxval


def write_log_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episodes", "frames", "mean_reward", "accuracy",
                         "policy_loss", "value_loss", "entropy"])
        for row in rows:
            writer.writerow([
                row["episodes"], row["frames"],
                f"{row['mean_reward']:.6f}", f"{row['accuracy']:.6f}",
                f"{row['policy_loss']:.6f}", f"{row['value_loss']:.6f}",
                f"{row['entropy']:.6f}"])


def mean_curve(per_seed_rows: list[list[dict]]) -> list[dict]:
    """Row-wise mean across seeds, truncated to the shortest log."""
    if not per_seed_rows:
        return []
    n = min(len(rows) for rows in per_seed_rows)
    out = []
    for i in range(n):
        row = {}
        for key in ("episodes", "frames", "mean_reward", "accuracy",
                    "policy_loss", "value_loss", "entropy"):
            row[key] = sum(rows[i][key] for rows in per_seed_rows) \
                / len(per_seed_rows)
        out.append(row)
    return out


def normalized_heatmap(attended: np.ndarray) -> np.ndarray:
    """Min-max normalized absolute attended map; flat maps become 0.5."""
    mag = np.abs(attended)
    lo, hi = float(mag.min()), float(mag.max())
    if hi - lo < 1e-12:
        return np.full(mag.shape, 0.5)
    return (mag - lo) / (hi - lo)


def upsample_nearest(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    src_h, src_w = plane.shape
    rows = (np.arange(h) * src_h) // h
    cols = (np.arange(w) * src_w) // w
    return plane[rows[:, None], cols[None, :]]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_gen_corpus(config: ExperimentConfig, out_dir: Path) -> Path:
    corpus = gridnav.build_corpus(config.corpus_seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "corpus.txt"
    path.write_text(gridnav.corpus_to_text(corpus))
    print(f"wrote {path} ({len(corpus.train)} train / {len(corpus.test)} test)")
    return path


def cmd_train(config: ExperimentConfig, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.cfg").write_text(config_to_text(config))
    corpus = gridnav.build_corpus(config.corpus_seed)
    (out_dir / "corpus.txt").write_text(gridnav.corpus_to_text(corpus))
    mconf = config.model_config(corpus)

    counts = nets.count_report(mconf)
    print(f"trainable parameters: {counts['total']} "
          f"(fusion stage: {counts['fusion_stage']}, "
          f"application: {config.application})")

    per_seed_rows = []
    artifacts = {"seed_dirs": [], "checkpoints": []}
    for seed in config.seeds:
        seed_dir = out_dir / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)

        def checkpoint_cb(episodes: int, snapshot: Params,
                          _dir=seed_dir) -> None:
            nets.save_params(_dir / f"checkpoint_ep{episodes}.bin",
                             snapshot, mconf)

        result = train(config.trainer_config(), mconf, config.env_settings(),
                       seed, checkpoint_cb=checkpoint_cb)
        write_log_csv(seed_dir / "train_log.csv", result.rows)
        ckpt = seed_dir / "checkpoint.bin"
        nets.save_params(ckpt, result.params, mconf)
        per_seed_rows.append(result.rows)
        artifacts["seed_dirs"].append(str(seed_dir))
        artifacts["checkpoints"].append(str(ckpt))
        print(f"seed {seed}: {result.episodes} episodes, "
              f"{result.frames} frames, "
              f"{result.skipped_updates} skipped updates")
    if len(config.seeds) > 1:
        write_log_csv(out_dir / "mean_curve.csv", mean_curve(per_seed_rows))
        artifacts["mean_curve"] = str(out_dir / "mean_curve.csv")
    return artifacts


@dataclass
class EvalReport:
    mode: str
    difficulty: str
    episodes: int
    accuracy: float
    mean_reward: float
    per_instruction: dict[str, dict]


def run_eval(params: Params, mconf: ModelConfig, corpus: Corpus, mode: str,
             difficulty: str, episodes: int, seed: int,
             trace_sink: Optional[list] = None) -> EvalReport:
    split = corpus.train if mode == "multitask" else corpus.test
    split_texts = {ins.text for ins in split}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    wins = 0
    total_reward = 0.0
    per_ins: dict[str, dict] = {}
    for _ in range(episodes):
        ins = split[int(rng.integers(len(split)))]
        assert ins.text in split_texts
        env_seed = int(rng.integers(2 ** 31))
        result = play_episode(params, mconf, ins, env_seed, difficulty,
                              greedy=True)
        wins += result.success
        total_reward += result.reward
        stats = per_ins.setdefault(ins.text, {"episodes": 0, "correct": 0})
        stats["episodes"] += 1
        stats["correct"] += int(result.success)
        if trace_sink is not None:
            trace_sink.extend(result.trace)
    return EvalReport(mode=mode, difficulty=difficulty, episodes=episodes,
                      accuracy=wins / episodes,
                      mean_reward=total_reward / episodes,
                      per_instruction=dict(sorted(per_ins.items())))


def cmd_eval(config: ExperimentConfig, out_dir: Path, checkpoint: Path,
             mode: str, episodes: int, seed: int) -> EvalReport:
    corpus = gridnav.build_corpus(config.corpus_seed)
    mconf = config.model_config(corpus)
    params = nets.load_params(checkpoint, mconf)
    out_dir.mkdir(parents=True, exist_ok=True)
    traces: list = []
    report = run_eval(params, mconf, corpus, mode, config.difficulty,
                      episodes, seed, trace_sink=traces)
    report_path = out_dir / f"eval_{mode}.json"
    report_path.write_text(json.dumps(dataclasses.asdict(report),
                                      indent=2, sort_keys=True))
    with open(out_dir / f"eval_{mode}_traces.jsonl", "w") as fh:
        for record in traces:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"{mode} accuracy over {episodes} episodes: {report.accuracy:.4f} "
          f"(mean reward {report.mean_reward:.4f})")
    return report


def cmd_visualize(config: ExperimentConfig, out_dir: Path, checkpoint: Path,
                  instruction: Instruction, seed: int) -> dict:
    corpus = gridnav.build_corpus(config.corpus_seed)
    mconf = config.model_config(corpus)
    params = nets.load_params(checkpoint, mconf)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = play_episode(params, mconf, instruction, seed,
                          config.difficulty, greedy=True, capture=True)
    hadamard_fallback = config.application == "hadamard_fc"
    index = {
        "instruction": instruction.text,
        "difficulty": config.difficulty,
        "seed": seed,
        "reward": result.reward,
        "note": ("heatmap is the channel-mean of the Hadamard-attended "
                 "features (1D-convolution map unavailable)"
                 if hadamard_fallback else
                 "heatmap is the 1D-convolution attended map"),
        "steps": [],
    }
    for t, (frame, attended) in enumerate(zip(result.frames, result.attended)):
        frame_path = out_dir / f"step_{t:02d}_frame.ppm"
        heat_path = out_dir / f"step_{t:02d}_attention.ppm"
        write_ppm(frame_path, frame)
        maps = attended if attended is not None else np.zeros(
            (1, mconf.feat_h, mconf.feat_w))
        if hadamard_fallback:
            maps = maps.mean(axis=0, keepdims=True)
        heat = normalized_heatmap(maps[0])
        up = upsample_nearest(heat, mconf.render_h, mconf.render_w)
        blended = 0.5 * frame + 0.5 * up[None, :, :]
        write_ppm(heat_path, blended)
        index["steps"].append({
            "t": t,
            "frame": frame_path.name,
            "attention": heat_path.name,
            "action": result.actions[t],
        })
    (out_dir / "index.json").write_text(json.dumps(index, indent=2,
                                                   sort_keys=True))
    print(f"wrote {len(index['steps'])} steps to {out_dir} "
          f"(episode reward {result.reward})")
    return index


def cmd_gradcheck(seed: int, cases_per_op: int = 100,
                  corrupt_op: Optional[str] = None) -> bool:
    result = gradcheck.run_suite(seed=seed, cases_per_op=cases_per_op,
                                 corrupt_op=corrupt_op)
    ok = True
    for op, err in result.op_errors.items():
        passed = err < gradcheck.OP_TOL
        ok &= passed
        print(f"{op:18s} max rel err {err:.3e}  "
              f"{'PASS' if passed else 'FAIL'}")
    e2e_ok = result.end_to_end_error < gradcheck.END_TO_END_TOL
    ok &= e2e_ok
    print(f"{'end_to_end':18s} max rel err {result.end_to_end_error:.3e}  "
          f"{'PASS' if e2e_ok else 'FAIL'}")
    return ok


# --------------------------------------------------------------------------
# Ablation matrix (the 18-cell variant table)
# --------------------------------------------------------------------------

def ablation_matrix() -> list[dict]:
    return [
        {"attention_source": source, "difficulty": difficulty, "mode": mode}
        for source in ("current_frame", "lstm_output", "lstm_cellstate")
        for difficulty in ("easy", "medium", "hard")
        for mode in ("ZS", "MT")
    ]


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ground-nav",
        description="instruction-following navigation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="experiment config file (key = value lines)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    add_common(sub.add_parser("gen-corpus", help="write the instruction corpus"))
    add_common(sub.add_parser("train", help="train per configured seeds"))

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--mode", choices=("multitask", "zeroshot"),
                        default=None)
    p_eval.add_argument("--episodes", type=int, default=None)

    p_viz = sub.add_parser("visualize", help="attention heatmaps for one episode")
    add_common(p_viz)
    p_viz.add_argument("--checkpoint", required=True)
    p_viz.add_argument("--instruction", default=None,
                       help="instruction text; defaults to the first train one")

    p_gc = sub.add_parser("gradcheck", help="finite-difference suite")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--cases", type=int, default=100)

    args = parser.parse_args(argv)

    if args.command == "gradcheck":
        return 0 if cmd_gradcheck(args.seed, cases_per_op=args.cases) else 1

    config = load_config(args.config)
    out_dir = Path(args.out) if args.out else Path(config.out_dir)
    seed = args.seed if args.seed is not None else config.seeds[0]

    if args.command == "gen-corpus":
        cmd_gen_corpus(config, out_dir)
        return 0
    if args.command == "train":
        cmd_train(config, out_dir)
        return 0
    if args.command == "eval":
        mode = args.mode or config.eval_mode
        episodes = args.episodes or config.eval_episodes
        cmd_eval(config, out_dir, Path(args.checkpoint), mode, episodes, seed)
        return 0
    if args.command == "visualize":
        corpus = gridnav.build_corpus(config.corpus_seed)
        instruction = (gridnav.instruction_from_text(args.instruction)
                       if args.instruction else corpus.train[0])
        cmd_visualize(config, out_dir, Path(args.checkpoint), instruction, seed)
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
