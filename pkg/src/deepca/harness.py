"""Run configuration, orchestration (dataset -> training -> reconstruction -> evaluation) and the CLI.

One master seed fans out to named streams through :func:`stream_seed`, so a
run is fixed by its config.  Artifacts use the raw+JSON volume format,
single-file tensor checkpoints and CSV logs; every command leaves a
``run.json`` record in its output directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np
from scipy import ndimage

from . import __version__
from .geometry import (
    MotionRanges,
    VoxelGrid,
    load_volume,
    sample_acquisition,
    sample_motion,
    sample_volume_extent,
    save_volume,
)
from .metrics import evaluate_3d, evaluate_reprojection, write_report
from .model import Critic, CriticConfig, Generator, GeneratorConfig
from .objectives import LOG_COLUMNS, LossWeights, NonFiniteLoss, TrainState, train_step
from .pipeline import (
    CONNECTIVITY_26,
    PhantomParams,
    TrainingSample,
    binarize,
    build_model_input,
    generate_phantom,
    load_dataset,
    make_dataset,
    save_dataset,
    simulate_pair,
)
from .tensor import Tensor, load_tensors, no_grad, save_tensors

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class ConfigError(ValueError):
    """Schema violations, one message per problem."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    volume_dims: tuple = (16, 16, 16)
    detector_dims: tuple = (32, 32)
    n_samples: int = 20
    split: tuple = (0.75, 0.15, 0.10)
    zero_motion: bool = False
    generator: dict = field(default_factory=lambda: GeneratorConfig().to_dict())
    critic: dict = field(default_factory=lambda: CriticConfig().to_dict())
    lambda_gp: float = 10.0
    lambda_l1: float = 100.0
    critic_iters: int = 2
    lr: float = 1e-4
    betas: tuple = (0.0, 0.9)
    batch_size: int = 2
    steps: int = 300
    checkpoint_every: int = 100
    gp_channels: list | None = None
    workers: int = 1
    sanity_floor: float = 0.5
    out_dir: str = "runs/desk"

    def __post_init__(self):
        # nested model configs are kept in their JSON form so round trips compare equal
        object.__setattr__(self, "generator", _jsonable(dict(self.generator)))
        object.__setattr__(self, "critic", _jsonable(dict(self.critic)))

    # ---- derived objects

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_gp, self.lambda_l1, self.critic_iters)

    @property
    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig.from_dict(self.generator)

    @property
    def critic_config(self) -> CriticConfig:
        return CriticConfig.from_dict(self.critic)

    @property
    def motion_ranges(self) -> MotionRanges:
        return MotionRanges((0.0, 0.0), (0.0, 0.0)) if self.zero_motion else MotionRanges()

    def sample_kw(self) -> dict:
        return {"dims": tuple(self.volume_dims), "detector_dims": tuple(self.detector_dims),
                "motion_ranges": self.motion_ranges}

    # ---- serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["generator"] = _jsonable(d["generator"])
        d["critic"] = _jsonable(d["critic"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        validate_config_dict(d)
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in ("generator", "critic"):
                v = dict(v)
            elif isinstance(v, list) and f.name != "gp_channels":
                v = tuple(v)
            kw[f.name] = v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def validate(self) -> None:
        """Cross-field checks the schema cannot express; raises :class:`ConfigError`."""
        problems = []
        try:
            g = self.generator_config
            g.validate()
            div = 2 ** (g.depth - 1)
            if any(n % div for n in self.volume_dims):
                problems.append(f"volume_dims {list(self.volume_dims)} must be divisible by {div} for generator depth {g.depth}")
        except (ValueError, TypeError) as e:
            problems.append(str(e) if str(e).startswith("generator") else f"generator: {e}")
        try:
            self.critic_config.validate()
        except (ValueError, TypeError) as e:
            problems.append(str(e) if str(e).startswith("critic") else f"critic: {e}")
        if not math.isclose(sum(self.split), 1.0):
            problems.append(f"split must sum to 1, got {list(self.split)}")
        if self.n_samples < 10:
            problems.append(f"n_samples must be >= 10, got {self.n_samples}")
        if problems:
            raise ConfigError(problems)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["desk", "paper"]},
        "seed": {"type": "integer", "minimum": 0},
        "volume_dims": {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3},
        "detector_dims": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
        "n_samples": _POS_INT,
        "split": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "zero_motion": {"type": "boolean"},
        "generator": {"type": "object"},
        "critic": {"type": "object"},
        "lambda_gp": _POS_NUM,
        "lambda_l1": _POS_NUM,
        "critic_iters": _POS_INT,
        "lr": {"type": "number", "minimum": 0},
        "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                  "minItems": 2, "maxItems": 2},
        "batch_size": _POS_INT,
        "steps": _POS_INT,
        "checkpoint_every": _POS_INT,
        "gp_channels": {"anyOf": [{"type": "null"},
                                  {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1}]},
        "workers": _POS_INT,
        "sanity_floor": {"type": "number", "minimum": 0, "maximum": 1},
        "out_dir": {"type": "string", "minLength": 1},
    },
}


def validate_config_dict(d: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(d), key=lambda e: [str(k) for k in e.path])
    if errors:
        raise ConfigError(f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors)


PRESETS = {
    # small volumes, CPU minutes; lr raised because 300 steps is the whole budget
    "desk": RunConfig(lr=1e-3),
    "paper": RunConfig(
        preset="paper",
        volume_dims=(128, 128, 128),
        detector_dims=(512, 512),
        n_samples=879,
        generator=GeneratorConfig(depth=4, channels=(16, 32, 64, 128)).to_dict(),
        critic=CriticConfig(dsconv_channels=8, conv_channels=8, downsample_levels=3).to_dict(),
        lr=1e-4,
        batch_size=3,
        steps=100_000,  # training length is not stated anywhere; config only
        checkpoint_every=1000,
        out_dir="runs/paper",
    ),
}


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Preset defaults, then the JSON file, then explicit overrides; validated once at the end."""
    file_d = {}
    if path is not None:
        try:
            file_d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError([f"cannot read config {path}: {e}"]) from e
        if not isinstance(file_d, dict):
            raise ConfigError([f"{path}: top level must be an object"])
    name = preset or file_d.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError([f"preset: unknown preset {name!r} (choose from {sorted(PRESETS)})"])
    d = PRESETS[name].to_dict()
    d.update(file_d)
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    d["preset"] = name
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------- seeds


STREAMS = ("dataset", "generator_init", "critic_init", "training", "shuffle")


def stream_seed(master: int, name: str) -> np.random.SeedSequence:
    """Independent named sub-stream of a master seed."""
    return np.random.SeedSequence([int(master), zlib.crc32(name.encode("utf-8"))])


def stream_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, name))


def dataset_seed(master: int) -> int:
    return int(stream_seed(master, "dataset").generate_state(1)[0])


# ---------------------------------------------------------------- provenance


def write_run_record(out_dir, command: str, cfg: RunConfig | None, status: str, started: float, **extra) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rec = {
        "command": command,
        "status": status,
        "argv": sys.argv,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_unix": started,
        "finished_unix": time.time(),
        "config": cfg.to_dict() if cfg is not None else None,
    }
    rec.update(extra)
    path = out_dir / "run.json"
    path.write_text(json.dumps(rec, indent=1, default=str))
    return path


# ---------------------------------------------------------------- phantom / simulate


def cmd_phantom(cfg: RunConfig, out_dir, count: int = 1) -> dict:
    """Write ``count`` phantoms (seeds ``seed .. seed + count - 1``) and audit their connectivity."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = PhantomParams(dims=tuple(cfg.volume_dims))
    disconnected = []
    for k in range(count):
        seed = cfg.seed + k
        rng = np.random.default_rng(stream_seed(seed, "phantom"))
        ph = generate_phantom(rng, params, sample_volume_extent(rng))
        name = "phantom" if count == 1 else f"phantom_{seed:06d}"
        save_volume(out_dir / f"{name}.raw", ph)
        if ndimage.label(ph.values, structure=CONNECTIVITY_26)[1] != 1:
            disconnected.append(seed)
    return {"count": count, "disconnected": disconnected}


def simulate_from_phantom(phantom: VoxelGrid, cfg: RunConfig, sample_id: str = "sim") -> TrainingSample:
    """Draw geometry and motion from the config seed and simulate one sample from a given phantom."""
    if set(np.unique(phantom.values)) - {0.0, 1.0}:
        raise ValueError("phantom must be binary")
    rng = np.random.default_rng(stream_seed(cfg.seed, "simulate"))
    g1, g2 = sample_acquisition(rng, tuple(cfg.detector_dims))
    motion = sample_motion(rng, cfg.motion_ranges)
    p1, p2 = simulate_pair(phantom, g1, g2, motion)
    x = build_model_input(p1, p2, g1, g2, phantom.dims, phantom.extent_mm)
    return TrainingSample(sample_id, cfg.seed, x, phantom, g1, g2, motion, p1, p2)


def cmd_simulate(cfg: RunConfig, out_dir, phantom_path=None) -> Path:
    """Simulate one sample from ``phantom_path`` or a whole dataset; returns the manifest path."""
    out_dir = Path(out_dir)
    if phantom_path is not None:
        s = simulate_from_phantom(load_volume(phantom_path), cfg)
        # a single sample is written as its own test split
        return save_dataset(([], [], [s]), out_dir)
    splits = make_dataset(dataset_seed(cfg.seed), cfg.n_samples, tuple(cfg.split), workers=cfg.workers,
                          **cfg.sample_kw())
    return save_dataset(splits, out_dir)


# ---------------------------------------------------------------- training


def _stack(samples, attr) -> np.ndarray:
    return np.stack([getattr(s, attr).values[None] for s in samples]).astype(np.float32)


def build_networks(cfg: RunConfig):
    g = Generator(cfg.generator_config, rng=stream_rng(cfg.seed, "generator_init"))
    c = Critic(cfg.critic_config, rng=stream_rng(cfg.seed, "critic_init"))
    return g, c


def dataset_l1(generator: Generator, x: np.ndarray, y: np.ndarray, batch: int = 4) -> float:
    """Mean absolute error of the generator over a whole array of samples."""
    if len(x) == 0:
        return float("nan")
    total = 0.0
    with no_grad():
        for i in range(0, len(x), batch):
            pred = generator(Tensor(x[i:i + batch]))
            total += float(np.abs(pred.data - y[i:i + batch]).sum())
    return total / y.size


def batch_indices(master: int, n: int, batch_size: int, step: int) -> np.ndarray:
    """Indices of the ``step``-th batch (0-based): epochs are seeded shuffles of ``range(n)``.

    Stateless in ``step``, so resuming needs no shuffle state.  The last
    batch of an epoch may be short.
    """
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng(np.random.SeedSequence([int(master), zlib.crc32(b"shuffle"), epoch])).permutation(n)
    return np.sort(perm[k * batch_size:(k + 1) * batch_size])


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def save_checkpoint(path, state: TrainState, cfg: RunConfig, tag: str = "") -> Path:
    tensors = {}
    tensors.update({f"generator.{k}": v for k, v in state.generator.state_dict().items()})
    tensors.update({f"critic.{k}": v for k, v in state.critic.state_dict().items()})
    tensors.update({f"gen_opt.{k}": v for k, v in state.gen_opt.state_arrays().items()})
    tensors.update({f"critic_opt.{k}": v for k, v in state.critic_opt.state_arrays().items()})
    meta = {
        "tag": tag,
        "step": state.step,
        "critic_updates": state.critic_updates,
        "generator_updates": state.generator_updates,
        "gen_opt_step": state.gen_opt.state.step,
        "critic_opt_step": state.critic_opt.state.step,
        "rng_state": _rng_state(state.rng),
        "config": cfg.to_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_tensors(tmp, tensors, json.loads(json.dumps(meta)))
    tmp.replace(path)
    return path


def _split_prefix(tensors: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_checkpoint(path, cfg: RunConfig | None = None) -> tuple[TrainState, RunConfig]:
    """Rebuild networks, optimizers and the training rng from a checkpoint."""
    tensors, meta = load_tensors(path)
    ck_cfg = RunConfig.from_dict(meta["config"])
    cfg = cfg or ck_cfg
    g, c = build_networks(cfg)
    g.load_state_dict(_split_prefix(tensors, "generator."))
    c.load_state_dict(_split_prefix(tensors, "critic."))
    state = TrainState.create(g, c, np.random.default_rng(), lr=cfg.lr, betas=cfg.betas, gp_channels=cfg.gp_channels)
    state.gen_opt.load_state_arrays(meta["gen_opt_step"], _split_prefix(tensors, "gen_opt."))
    state.critic_opt.load_state_arrays(meta["critic_opt_step"], _split_prefix(tensors, "critic_opt."))
    _set_rng_state(state.rng, meta["rng_state"])
    state.step = meta["step"]
    state.critic_updates = meta["critic_updates"]
    state.generator_updates = meta["generator_updates"]
    return state, cfg


def _append_csv(path: Path, columns, rows) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_train(cfg: RunConfig, manifest, out_dir, resume=None, max_steps: int | None = None) -> dict:
    """Train for ``cfg.steps`` steps (or stop early after ``max_steps`` more); returns a summary.

    Writes ``train_log.csv`` (one row per update), ``val_log.csv`` (one row
    per epoch), ``checkpoints/step_NNNNNN.ckpt`` at the configured cadence
    and ``checkpoints/final.ckpt``.  A non-finite loss stops training with
    the last good checkpoint left in place and re-raises.
    """
    out_dir = Path(out_dir)
    ck_dir = out_dir / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    train, val, _ = load_dataset(manifest)
    if not train:
        raise ValueError(f"{manifest}: no training samples")
    x_tr, y_tr = _stack(train, "input"), _stack(train, "ground_truth")
    x_val, y_val = (_stack(val, "input"), _stack(val, "ground_truth")) if val else (None, None)
    if x_tr.shape[2:] != tuple(cfg.volume_dims):
        raise ValueError(f"dataset volumes are {x_tr.shape[2:]}, config expects {tuple(cfg.volume_dims)}")

    log_path, val_path = out_dir / "train_log.csv", out_dir / "val_log.csv"
    if resume is not None:
        state, _ = load_checkpoint(resume, cfg)
        _truncate_logs(log_path, val_path, state.step)
    else:
        g, c = build_networks(cfg)
        g.set_output_prior(float(y_tr.mean()))
        state = TrainState.create(g, c, stream_rng(cfg.seed, "training"), lr=cfg.lr, betas=cfg.betas,
                                  gp_channels=cfg.gp_channels)
        for p in (log_path, val_path):
            p.unlink(missing_ok=True)

    l1_initial = dataset_l1(state.generator, x_tr, y_tr)
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    end = cfg.steps if max_steps is None else min(cfg.steps, state.step + max_steps)
    weights = cfg.weights
    while state.step < end:
        idx = batch_indices(cfg.seed, len(train), cfg.batch_size, state.step)
        n_rows = len(state.rows)
        try:
            train_step(state, (x_tr[idx], y_tr[idx]), weights)
        except NonFiniteLoss:
            _append_csv(log_path, LOG_COLUMNS, state.rows[n_rows:])
            raise
        _append_csv(log_path, LOG_COLUMNS, state.rows[n_rows:])
        del state.rows[:]
        if state.step % per_epoch == 0 and x_val is not None:
            _append_csv(val_path, ("epoch", "step", "val_l1"),
                        [{"epoch": state.step // per_epoch, "step": state.step,
                          "val_l1": dataset_l1(state.generator, x_val, y_val)}])
        if state.step % cfg.checkpoint_every == 0:
            save_checkpoint(ck_dir / f"step_{state.step:06d}.ckpt", state, cfg)
    final = save_checkpoint(ck_dir / "final.ckpt", state, cfg, tag="final")
    return {
        "steps": state.step,
        "critic_updates": state.critic_updates,
        "generator_updates": state.generator_updates,
        "train_l1_initial": l1_initial if resume is None else None,
        "train_l1_final": dataset_l1(state.generator, x_tr, y_tr),
        "final_checkpoint": str(final),
    }


def _truncate_logs(log_path: Path, val_path: Path, step: int) -> None:
    """Drop log rows written after the checkpoint being resumed."""
    for path, col in ((log_path, "step"), (val_path, "step")):
        if path.exists():
            rows = [r for r in read_log(path) if int(r[col]) <= step]
            cols = LOG_COLUMNS if path == log_path else ("epoch", "step", "val_l1")
            path.unlink()
            _append_csv(path, cols, rows)


# ---------------------------------------------------------------- reconstruction


def reconstruct(generator: Generator, volume: VoxelGrid, expected_dims) -> VoxelGrid:
    if tuple(volume.dims) != tuple(expected_dims):
        raise ValueError(f"input volume is {volume.dims}, the checkpoint expects {tuple(expected_dims)}")
    with no_grad():
        y = generator(Tensor(np.asarray(volume.values, dtype=np.float32)[None, None]))
    return volume.with_values(y.data[0, 0])


def cmd_reconstruct(checkpoint, out_dir, input_path=None, manifest=None, split: str = "test") -> list[Path]:
    """Write ``{name}_recon.raw`` and its 0.5-binarized ``{name}_recon_bin.raw`` per input."""
    state, cfg = load_checkpoint(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if input_path is not None:
        jobs = [(Path(input_path).stem.removesuffix("_input"), load_volume(input_path))]
    else:
        parts = dict(zip(("train", "val", "test"), load_dataset(manifest)))
        jobs = [(s.sample_id, s.input) for s in parts[split]]
    written = []
    for name, vol in jobs:
        recon = reconstruct(state.generator, vol, cfg.volume_dims)
        save_volume(out_dir / f"{name}_recon.raw", recon)
        save_volume(out_dir / f"{name}_recon_bin.raw", recon.with_values(binarize(recon.values, 0.5)))
        written.append(out_dir / f"{name}_recon.raw")
    return written


# ---------------------------------------------------------------- evaluation


def evaluate_samples(samples, recon_dir, mode: str = "reproj", workers: int = 1, sanity_floor: float = 0.5):
    """Score every sample that has ``{id}_recon.raw`` in ``recon_dir``; returns report rows."""
    if mode not in ("3d", "reproj"):
        raise ValueError(f"mode must be '3d' or 'reproj', got {mode!r}")
    recon_dir = Path(recon_dir)

    def one(s):
        recon = load_volume(recon_dir / f"{s.sample_id}_recon.raw")
        if mode == "3d":
            return [evaluate_3d(s.ground_truth, recon).row(s.sample_id)]
        if s.proj1 is None or s.proj2 is None:
            raise ValueError(f"{s.sample_id}: missing reference projections or geometry")
        reps = evaluate_reprojection(recon, [s.proj1, s.proj2], [s.geom1, s.geom2], sanity_floor=sanity_floor)
        return [r.row(s.sample_id) for r in reps]

    todo = [s for s in samples if (recon_dir / f"{s.sample_id}_recon.raw").exists()]
    if not todo:
        raise ValueError(f"no reconstructions for these samples in {recon_dir}")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(one, todo))
    else:
        chunks = [one(s) for s in todo]
    return [r for c in chunks for r in c]


def cmd_evaluate(manifest, recon_dir, out_dir, mode: str = "reproj", split: str = "test", workers: int = 1,
                 sanity_floor: float = 0.5) -> Path:
    parts = dict(zip(("train", "val", "test"), load_dataset(manifest)))
    rows = evaluate_samples(parts[split], recon_dir, mode, workers, sanity_floor)
    return write_report(Path(out_dir) / f"report_{mode}.csv", rows)


# ---------------------------------------------------------------- CLI


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: config's, else desk)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config's out_dir)")

    p = argparse.ArgumentParser(prog="deepca", description="Two-view coronary reconstruction toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    ph = sub.add_parser("phantom", parents=[common], help="generate synthetic vessel phantoms")
    ph.add_argument("--count", type=int, default=1, help="number of consecutive seeds (connectivity audit)")
    sim = sub.add_parser("simulate", parents=[common], help="simulate projections and model inputs")
    sim.add_argument("--phantom", type=Path, help="simulate one sample from this volume instead of a dataset")
    sim.add_argument("--zero-motion", action="store_true", help="disable the second-view motion")
    tr = sub.add_parser("train", parents=[common], help="train generator and critic")
    tr.add_argument("--manifest", type=Path, required=True)
    tr.add_argument("--resume", type=Path, help="checkpoint to continue from")
    rc = sub.add_parser("reconstruct", parents=[common], help="run a trained generator")
    rc.add_argument("--checkpoint", type=Path, required=True)
    src = rc.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="model-input volume (.raw with .json sidecar)")
    src.add_argument("--manifest", type=Path)
    rc.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev = sub.add_parser("evaluate", parents=[common], help="score reconstructions, write a CSV report")
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--recon", type=Path, required=True, help="directory holding {sample_id}_recon.raw")
    ev.add_argument("--mode", default="reproj", choices=["3d", "reproj"])
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    started = time.time()
    overrides = {"seed": args.seed, "out_dir": str(args.out) if args.out else None}
    if getattr(args, "zero_motion", False):
        overrides["zero_motion"] = True
    try:
        cfg = load_config(args.config, args.preset, overrides)
        for name in ("manifest", "checkpoint", "input", "phantom", "resume", "recon"):
            path = getattr(args, name, None)
            if path is not None and not path.exists():
                raise ConfigError([f"--{name}: {path} does not exist"])
        if getattr(args, "count", 1) < 1:
            raise ConfigError(["--count must be >= 1"])
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID

    out = Path(cfg.out_dir)
    extra = {}
    try:
        if args.command == "phantom":
            extra = cmd_phantom(cfg, out, args.count)
            status = "ok" if not extra["disconnected"] else "disconnected phantoms"
        elif args.command == "simulate":
            extra = {"manifest": str(cmd_simulate(cfg, out, args.phantom))}
            status = "ok"
        elif args.command == "train":
            extra = cmd_train(cfg, args.manifest, out, resume=args.resume)
            status = "ok"
        elif args.command == "reconstruct":
            paths = cmd_reconstruct(args.checkpoint, out, args.input, args.manifest, args.split)
            extra = {"outputs": [str(p) for p in paths]}
            status = "ok"
        else:
            extra = {"report": str(cmd_evaluate(args.manifest, args.recon, out, args.mode, args.split,
                                                cfg.workers, cfg.sanity_floor))}
            status = "ok"
    except Exception as e:  # runtime failure: record it and exit 2
        write_run_record(out, args.command, cfg, "failed", started, error=f"{type(e).__name__}: {e}")
        print(f"{args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED
    write_run_record(out, args.command, cfg, status, started, **extra)
    return EXIT_OK if status == "ok" else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
