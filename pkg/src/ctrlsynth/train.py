"""Two-stage training: pretrain on scenegen data, finetune on a curated corpus.

One ``numpy.random.Generator`` drives everything inside a stage (batch
choice, timesteps, noise, pruning, condition drop), and its state is stored
in every checkpoint, so a resumed run replays exactly the same draws.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imageio
from . import numerics as nx
from .conditioning import ConditioningStack, assemble_stack, edge_layout, layout_from_edge_file, \
    light_map, make_fg_canvas, prune_channels
from .diffusion import LatentCodec, NoiseSchedule, make_schedule, to_signed, training_loss
from .model import Denoiser, DenoiserConfig, build_denoiser, canonical_json, read_model, \
    write_model, _read_arrays, _read_exact, _write_arrays
from .scenegen import Tokenizer, read_manifest

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")
LR_SCHEDULES = ("constant", "cosine")
TRAIN_MAGIC = b"CSYNOPT\x00"
TRAIN_VERSION = 1
HASH_TAG = b"SHA256\x00\x00"


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    weight_decay: float = 0.0
    cfg_drop_rate: float = 0.05
    independent_drop: bool = False
    prune_p_bg: float = 0.3
    prune_p_light: float = 0.3
    seed: int = 0
    resolution: int = 32
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 500
    base_channels: int = 32
    levels: int = 2
    time_dim: int = 64
    text_dim: int = 32

    def validate(self) -> None:
        bad = []
        if self.stage not in STAGES:
            bad.append(f"stage: {self.stage!r} not in {STAGES}")
        for name in ("cfg_drop_rate", "prune_p_bg", "prune_p_light"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad.append(f"{name}: {v} outside [0, 1]")
        for name in ("steps", "batch_size", "checkpoint_every", "T"):
            if getattr(self, name) < 1:
                bad.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.lr_schedule not in LR_SCHEDULES:
            bad.append(f"lr_schedule: {self.lr_schedule!r} not in {LR_SCHEDULES}")
        if self.warmup_steps < 0:
            bad.append(f"warmup_steps: must be >= 0, got {self.warmup_steps}")
        if not self.lr > 0:
            bad.append(f"lr: must be positive, got {self.lr}")
        if bad:
            raise ValueError("; ".join(bad))

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(resolution=self.resolution, base_channels=self.base_channels,
                              levels=self.levels, time_dim=self.time_dim, text_dim=self.text_dim)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {unknown}")
        return cls(**d)


def learning_rate(config: TrainConfig, step: int) -> float:
    """Rate for optimizer step ``step`` (0-based): linear warmup, then
    constant or cosine decay to zero at ``config.steps``."""
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    if config.lr_schedule == "constant":
        return config.lr
    span = max(1, config.steps - config.warmup_steps)
    frac = min(1.0, (step - config.warmup_steps) / span)
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------- corpus


@dataclass
class Corpus:
    ids: list[str]
    images: np.ndarray                 # [N, H, W, 3] in [0, 1]
    stacks: list[ConditioningStack]
    tokens: list[list[int]]

    def __len__(self) -> int:
        return len(self.ids)


def _resolve(p: str, root: Path) -> Path:
    q = Path(p)
    return q if q.is_absolute() else root / q


def load_record(rec: dict, root: Path, tokenizer: Tokenizer) -> tuple[np.ndarray,
                                                                      ConditioningStack,
                                                                      list[int]]:
    """(image, stack, tokens) for one manifest record.

    Scenegen records carry ``files.image``, per-object ``masks`` and
    ``light.azimuth_deg``.  Flat records use ``image``, ``mask`` and the
    optional ``azimuth_deg`` and ``layout`` (an external edge-map PNG).
    """
    image = imageio.read_png(_resolve(rec.get("image") or rec["files"]["image"], root))
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if "masks" in rec:
        mask = np.zeros(image.shape[:2], dtype=np.float32)
        for p in rec["masks"]:
            mask = np.maximum(mask, imageio.read_mask(_resolve(p, root)))
    else:
        mask = imageio.read_mask(_resolve(rec["mask"], root))
    phi = rec.get("light", {}).get("azimuth_deg", rec.get("azimuth_deg"))
    if rec.get("layout"):
        B = layout_from_edge_file(_resolve(rec["layout"], root), mask)
    else:
        B = edge_layout(image, mask)
    L = None if phi is None else light_map(float(phi), *mask.shape)
    stack = assemble_stack(make_fg_canvas(image, mask), mask, B, L)
    return image, stack, tokenizer.encode(rec.get("prompt", ""))


def load_corpus(manifest: str | Path | list[dict], root: str | Path | None = None,
                resolution: int | None = None) -> Corpus:
    if isinstance(manifest, (str, Path)):
        base = Path(root) if root is not None else Path(manifest).parent
        records = read_manifest(manifest)
    else:
        base = Path(root) if root is not None else Path(".")
        records = list(manifest)
    if not records:
        raise ValueError("manifest is empty")
    tok = Tokenizer()
    ids, images, stacks, tokens = [], [], [], []
    for i, rec in enumerate(records):
        img, st, tk = load_record(rec, base, tok)
        if resolution is not None and img.shape[:2] != (resolution, resolution):
            raise ValueError(f"record {rec.get('id', i)}: image {img.shape[:2]} does not "
                             f"match training resolution {resolution}")
        ids.append(str(rec.get("id", i)))
        images.append(img)
        stacks.append(st)
        tokens.append(tk)
    return Corpus(ids, np.stack(images).astype(np.float32), stacks, tokens)


# ---------------------------------------------------------------- one step


@dataclass
class Batch:
    images: np.ndarray
    tokens: list[list[int]]
    stacks: list[ConditioningStack]


def draw_batch(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> Batch:
    """Batch indices come from ``rng`` alone, so order is seed-fixed."""
    n = len(corpus)
    idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    return Batch(corpus.images[idx], [corpus.tokens[i] for i in idx],
                 [corpus.stacks[i] for i in idx])


@dataclass
class StepInputs:
    """Everything random in a step, drawn up front in a fixed order."""

    t: np.ndarray
    eps: np.ndarray
    tokens: list[list[int]]
    cond: np.ndarray          # stack in latent layout after pruning/dropping


def prepare_step(model: Denoiser, batch: Batch, config: TrainConfig, rng: np.random.Generator,
                 codec: LatentCodec = LatentCodec()) -> tuple[np.ndarray, StepInputs]:
    """Latent targets plus the drawn timesteps, noise and conditions.

    Per item: t, two pruning uniforms, two drop uniforms; then the noise for
    the whole batch.  With a joint drop both uniforms are drawn but only the
    first decides.
    """
    n = len(batch.tokens)
    ts = np.empty(n, dtype=np.int64)
    toks, conds = [], []
    for i in range(n):
        ts[i] = rng.integers(1, config.T + 1)
        st = prune_channels(batch.stacks[i], config.prune_p_bg, config.prune_p_light, rng)
        u_prompt, u_stack = rng.random(2)
        drop_prompt = u_prompt < config.cfg_drop_rate
        drop_stack = (u_stack if config.independent_drop else u_prompt) < config.cfg_drop_rate
        toks.append([] if drop_prompt else list(batch.tokens[i]))
        arr = st.to_array()
        conds.append(np.zeros_like(arr) if drop_stack else arr)
    cond = codec.encode(np.stack(conds).transpose(0, 3, 1, 2))
    x0 = codec.encode(to_signed(batch.images.transpose(0, 3, 1, 2)))
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    return x0, StepInputs(ts, eps, toks, cond)


def batch_loss(model: Denoiser, x0: np.ndarray, inp: StepInputs, sched: NoiseSchedule) -> nx.Tensor:
    return training_loss(model, x0, inp.t, inp.tokens, inp.cond, inp.eps, sched)


def train_step(model: Denoiser, batch: Batch, config: TrainConfig, rng: np.random.Generator,
               optim_state: nx.OptimState, sched: NoiseSchedule | None = None,
               codec: LatentCodec = LatentCodec()) -> tuple[float, nx.OptimState]:
    sched = sched or config.schedule()
    x0, inp = prepare_step(model, batch, config, rng, codec)
    params = model.params
    nx.zero_grad(params.values())
    loss = batch_loss(model, x0, inp, sched)
    value = float(loss.item())
    if not np.isfinite(value):
        raise nx.NonFiniteError(f"non-finite loss {value} at optimizer step {optim_state.step} "
                                f"(seed {config.seed}, timesteps {inp.t.tolist()})")
    nx.backward(loss)
    nx.adamw_step(params, {k: p.grad for k, p in params.items()}, optim_state)
    return value, optim_state


def eval_loss(model: Denoiser, batch: Batch, config: TrainConfig, seed: int) -> float:
    """Loss on a batch with its random draws fixed by ``seed``; no update."""
    x0, inp = prepare_step(model, batch, config, np.random.default_rng(seed))
    with nx.no_grad():
        return float(batch_loss(model, x0, inp, config.schedule()).item())


# ---------------------------------------------------------------- checkpoints


@dataclass
class TrainState:
    model: Denoiser
    optim: nx.OptimState
    rng: np.random.Generator
    config: TrainConfig
    step: int = 0
    extra: dict = field(default_factory=dict)


class CheckpointError(ValueError):
    pass


def state_to_bytes(state: TrainState) -> bytes:
    """Model section, optimizer section, then a SHA-256 of all prior bytes."""
    buf = io.BytesIO()
    write_model(buf, state.model)
    buf.write(TRAIN_MAGIC)
    buf.write(struct.pack("<I", TRAIN_VERSION))
    header = canonical_json({
        "step": state.step,
        "optim_step": state.optim.step,
        "hyperparams": state.optim.hyperparams(),
        "rng": state.rng.bit_generator.state,
        "config": asdict(state.config),
        "extra": state.extra,
    })
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    moments = {f"m.{k}": v for k, v in state.optim.m.items()}
    moments.update({f"v.{k}": v for k, v in state.optim.v.items()})
    _write_arrays(buf, moments)
    body = buf.getvalue()
    return body + HASH_TAG + hashlib.sha256(body).digest()


def state_from_bytes(data: bytes) -> TrainState:
    tail = len(HASH_TAG) + 32
    if len(data) < tail or data[-tail:-32] != HASH_TAG:
        raise CheckpointError("checkpoint has no hash trailer (truncated or not a training "
                              "checkpoint)")
    body = data[:-tail]
    if hashlib.sha256(body).digest() != data[-32:]:
        raise CheckpointError("checkpoint hash mismatch (file is corrupt)")
    f = io.BytesIO(body)
    try:
        model = read_model(f)
        if _read_exact(f, len(TRAIN_MAGIC)) != TRAIN_MAGIC:
            raise CheckpointError("optimizer section has bad magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != TRAIN_VERSION:
            raise CheckpointError(f"unsupported optimizer section version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, hlen))
        arrays = _read_arrays(f)
    except (ValueError, struct.error, EOFError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    optim = nx.OptimState(**header["hyperparams"], step=header["optim_step"])
    optim.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
    optim.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return TrainState(model, optim, rng, TrainConfig.from_dict(header["config"]),
                      header["step"], header.get("extra", {}))


def save_checkpoint(path: str | Path, state: TrainState) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(state_to_bytes(state))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    return state_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- stage loop


def init_state(config: TrainConfig, init: str | Path | TrainState | None = None) -> TrainState:
    """Fresh weights (``init`` None or "fresh") or weights from a checkpoint.

    Starting a new stage from a checkpoint keeps the weights only; the
    optimizer moments, step counter and generator start afresh from
    ``config``.
    """
    config.validate()
    if init is None or init == "fresh":
        if config.stage == "finetune":
            raise ValueError("finetune needs a pretrain checkpoint to start from")
        model = build_denoiser(config.model_config(), seed=config.seed)
    else:
        src = init if isinstance(init, TrainState) else load_checkpoint(init)
        model = src.model.copy()
        if model.config.resolution != config.resolution:
            raise ValueError(f"checkpoint resolution {model.config.resolution} != "
                             f"config resolution {config.resolution}")
    optim = nx.OptimState(lr=config.lr, weight_decay=config.weight_decay)
    return TrainState(model, optim, np.random.default_rng(config.seed), config)


def run_stage(config: TrainConfig, manifest: str | Path | list[dict] | Corpus,
              init: str | Path | TrainState | None = None, out_dir: str | Path | None = None,
              resume: str | Path | None = None, root: str | Path | None = None) -> TrainState:
    """Train until ``config.steps``; checkpoints land in ``out_dir``.

    ``resume`` continues a checkpoint of this same stage (weights, moments,
    generator, step), which makes an interrupted run finish exactly as an
    uninterrupted one would.
    """
    config.validate()
    corpus = manifest if isinstance(manifest, Corpus) else load_corpus(manifest, root,
                                                                       config.resolution)
    if len(corpus) == 0:
        raise ValueError("manifest is empty")
    if resume is not None:
        state = load_checkpoint(resume)
        state.config = config
    else:
        state = init_state(config, init)
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "a" if resume is not None else "w")
    sched = config.schedule()
    t0 = time.perf_counter()
    try:
        while state.step < config.steps:
            state.optim.lr = learning_rate(config, state.step)
            batch = draw_batch(corpus, config.batch_size, state.rng)
            loss, _ = train_step(state.model, batch, config, state.rng, state.optim, sched)
            state.step += 1
            state.extra["last_loss"] = loss
            row = {"step": state.step, "loss": loss, "lr": state.optim.lr,
                   "wall_time": round(time.perf_counter() - t0, 4)}
            if metrics is not None:
                metrics.write(json.dumps(row) + "\n")
                metrics.flush()
            if out is not None and (state.step % config.checkpoint_every == 0
                                    or state.step == config.steps):
                save_checkpoint(out / f"ckpt_{state.step:06d}.bin", state)
                save_checkpoint(out / "last.bin", state)
                log.info("checkpoint at step %d (loss %.5f)", state.step, loss)
    finally:
        if metrics is not None:
            metrics.close()
    return state


def read_metrics(path: str | Path) -> list[dict]:
    return read_manifest(path)
