"""Toy U-Net noise predictor with a zero-initialised control branch.

Layout for ``levels = L`` and per-level widths ``c_i = base * (i + 1)``::

    conv_in                          latent -> c_0
    down.i.res, down.i.conv (s=2)    c_i -> c_i, c_i -> c_{i+1}      i < L
    mid.res                          c_L -> c_L
    up.i.conv (after 2x nearest)     c_{i+1} -> c_i, then concat skip
    up.i.res                         2 c_i -> c_i
    out.norm, out.conv               c_0 -> latent

The control branch repeats ``down.*`` and ``mid`` on the conditioning stack
(``ctrl.*``) and feeds ``zero.i`` (1x1, zero weights and bias) into the main
path right after ``down.i.res`` and ``mid.res``.  Timestep and prompt enter
through a shared embedding added as a per-channel bias in every residual
block.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO, Sequence

import numpy as np

from . import numerics as nx
from .numerics import DTYPE, Tensor

NULL_TOKEN = 0


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 32
    latent_factor: int = 2
    image_channels: int = 3
    cond_channels: int = 6
    base_channels: int = 32
    levels: int = 2
    time_dim: int = 64
    vocab_size: int = 64
    text_dim: int = 32
    groups: int = 4

    @property
    def latent_channels(self) -> int:
        return self.image_channels * self.latent_factor ** 2

    @property
    def latent_cond_channels(self) -> int:
        return self.cond_channels * self.latent_factor ** 2

    @property
    def latent_size(self) -> int:
        return self.resolution // self.latent_factor

    def widths(self) -> list[int]:
        return [self.base_channels * (i + 1) for i in range(self.levels + 1)]

    def validate(self) -> None:
        for name in ("resolution", "latent_factor", "image_channels", "cond_channels",
                     "base_channels", "time_dim", "vocab_size", "text_dim", "groups"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DenoiserConfig.{name} must be positive")
        if self.levels < 1:
            raise ValueError("DenoiserConfig.levels must be >= 1")
        if self.time_dim % 2:
            raise ValueError("DenoiserConfig.time_dim must be even")
        if self.resolution % self.latent_factor:
            raise ValueError(f"resolution {self.resolution} not divisible by latent factor "
                             f"{self.latent_factor}")
        if self.latent_size % (2 ** self.levels):
            raise ValueError(f"latent size {self.latent_size} not divisible by "
                             f"2**levels = {2 ** self.levels}")
        if any(c % self.groups for c in self.widths()):
            raise ValueError(f"channel widths {self.widths()} not divisible by "
                             f"{self.groups} groups")


def time_embedding(t: int | np.ndarray, dim: int) -> np.ndarray:
    """Interleaved ``sin(t w_k), cos(t w_k)`` with ``w_k = 10000**(-2k/dim)``."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = ts[:, None] * freqs[None, :]
    out = np.empty((ts.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    out = out.astype(DTYPE)
    return out[0] if np.ndim(t) == 0 else out


class Denoiser:
    """Parameters live in ``self.params`` (insertion order = declaration order)."""

    def __init__(self, config: DenoiserConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # ------------------------------------------------------------ helpers

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            raise ValueError("state dict keys do not match model parameters")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=DTYPE).copy()

    def copy(self) -> Denoiser:
        return Denoiser(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad,
                                                name=k) for k, v in self.params.items()})

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.p(f"{name}.w")
        return nx.conv2d(x, w, self.p(f"{name}.b"), stride=stride, padding=w.shape[2] // 2)

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return nx.group_norm(x, self.p(f"{name}.g"), self.p(f"{name}.b"), self.config.groups)

    def _res(self, name: str, x: Tensor, emb: Tensor | None) -> Tensor:
        h = self._conv(f"{name}.conv1", nx.silu(self._norm(f"{name}.norm1", x)))
        if emb is not None:
            h = nx.add_channel_bias(h, nx.linear(emb, self.p(f"{name}.emb.w"),
                                                 self.p(f"{name}.emb.b")))
        h = self._conv(f"{name}.conv2", nx.silu(self._norm(f"{name}.norm2", h)))
        skip = self._conv(f"{name}.skip", x) if f"{name}.skip.w" in self.params else x
        return nx.add(skip, h)

    # ------------------------------------------------------------ embeddings

    def bag_of_words(self, tokens: Sequence[Sequence[int]]) -> np.ndarray:
        v = self.config.vocab_size
        bow = np.zeros((len(tokens), v), dtype=DTYPE)
        for i, seq in enumerate(tokens):
            ids = list(seq) or [NULL_TOKEN]
            for tok in ids:
                if not 0 <= int(tok) < v:
                    raise ValueError(f"token id {tok} outside vocabulary of size {v}")
                bow[i, int(tok)] += 1.0
            bow[i] /= DTYPE(len(ids))
        return bow

    def embed(self, t: np.ndarray, tokens: Sequence[Sequence[int]]) -> Tensor:
        """SiLU(time MLP + pooled prompt embedding), shape ``[N, time_dim]``."""
        cfg = self.config
        temb = Tensor(time_embedding(np.asarray(t), cfg.time_dim).reshape(-1, cfg.time_dim))
        h = nx.linear(temb, self.p("time.fc1.w"), self.p("time.fc1.b"))
        h = nx.linear(nx.silu(h), self.p("time.fc2.w"), self.p("time.fc2.b"))
        words = nx.linear(Tensor(self.bag_of_words(tokens)), self.p("text.table"))
        txt = nx.linear(words, self.p("text.proj.w"), self.p("text.proj.b"))
        return nx.silu(nx.add(h, txt))

    # ------------------------------------------------------------ forward

    def control_encode(self, cond: np.ndarray | Tensor, emb: Tensor | None = None) -> list[Tensor]:
        """Per-resolution control features, already passed through ``zero.*``.

        ``cond`` is the stack in latent layout ``[N, 6 f^2, h, w]``.  Returns
        ``levels + 1`` maps of spatial size ``h / 2**i``.
        """
        cfg = self.config
        c = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=DTYPE))
        if c.data.ndim != 4 or c.shape[1] != cfg.latent_cond_channels:
            raise nx.ShapeError(f"control_encode: expected [N, {cfg.latent_cond_channels}, h, w], "
                                f"got {c.shape}")
        h = self._conv("ctrl.conv_in", c)
        feats = []
        for i in range(cfg.levels):
            h = self._res(f"ctrl.down.{i}.res", h, emb)
            feats.append(self._conv(f"zero.{i}", h))
            h = self._conv(f"ctrl.down.{i}.conv", h, stride=2)
        h = self._res("ctrl.mid.res", h, emb)
        feats.append(self._conv(f"zero.{cfg.levels}", h))
        return feats

    def __call__(self, x_t, t, tokens, cond=None) -> Tensor:
        return self.denoise(x_t, t, tokens, cond)

    def denoise(self, x_t: np.ndarray | Tensor, t, tokens: Sequence[Sequence[int]],
                cond: np.ndarray | Tensor | None = None) -> Tensor:
        """Predict the noise in ``x_t``; ``cond=None`` skips the control branch."""
        cfg = self.config
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=DTYPE))
        n, c, hh, ww = x.shape
        if c != cfg.latent_channels:
            raise nx.ShapeError(f"denoise: expected {cfg.latent_channels} latent channels, got {c}")
        if hh % 2 ** cfg.levels or ww % 2 ** cfg.levels:
            raise nx.ShapeError(f"denoise: spatial size {hh}x{ww} not divisible by "
                                f"{2 ** cfg.levels}")
        if len(tokens) != n:
            raise ValueError(f"denoise: {len(tokens)} prompts for batch of {n}")
        ts = np.broadcast_to(np.asarray(t), (n,))
        emb = self.embed(ts, tokens)
        feats = self.control_encode(cond, emb) if cond is not None else None

        h = self._conv("conv_in", x)
        skips = []
        for i in range(cfg.levels):
            h = self._res(f"down.{i}.res", h, emb)
            if feats is not None:
                h = nx.add(h, feats[i])
            skips.append(h)
            h = self._conv(f"down.{i}.conv", h, stride=2)
        h = self._res("mid.res", h, emb)
        if feats is not None:
            h = nx.add(h, feats[cfg.levels])
        for i in reversed(range(cfg.levels)):
            h = self._conv(f"up.{i}.conv", nx.upsample_nearest(h, 2))
            h = self._res(f"up.{i}.res", nx.concat([h, skips[i]], axis=1), emb)
        h = nx.silu(self._norm("out.norm", h))
        return self._conv("out.conv", h)


# ---------------------------------------------------------------- construction


def _layer_list(cfg: DenoiserConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter in declaration order."""
    w = cfg.widths()
    out: list[tuple[str, tuple[int, ...], str]] = []

    def conv(name, cin, cout, k, init="normal"):
        out.append((f"{name}.w", (cout, cin, k, k), init))
        out.append((f"{name}.b", (cout,), "zeros"))

    def norm(name, c):
        out.append((f"{name}.g", (c,), "ones"))
        out.append((f"{name}.b", (c,), "zeros"))

    def lin(name, cin, cout):
        out.append((f"{name}.w", (cout, cin), "normal"))
        out.append((f"{name}.b", (cout,), "zeros"))

    def res(name, cin, cout):
        norm(f"{name}.norm1", cin)
        conv(f"{name}.conv1", cin, cout, 3)
        lin(f"{name}.emb", cfg.time_dim, cout)
        norm(f"{name}.norm2", cout)
        conv(f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            conv(f"{name}.skip", cin, cout, 1)

    lin("time.fc1", cfg.time_dim, cfg.time_dim)
    lin("time.fc2", cfg.time_dim, cfg.time_dim)
    out.append(("text.table", (cfg.text_dim, cfg.vocab_size), "embed"))
    lin("text.proj", cfg.text_dim, cfg.time_dim)

    conv("conv_in", cfg.latent_channels, w[0], 3)
    for i in range(cfg.levels):
        res(f"down.{i}.res", w[i], w[i])
        conv(f"down.{i}.conv", w[i], w[i + 1], 3)
    res("mid.res", w[-1], w[-1])
    for i in reversed(range(cfg.levels)):
        conv(f"up.{i}.conv", w[i + 1], w[i], 3)
        res(f"up.{i}.res", 2 * w[i], w[i])
    norm("out.norm", w[0])
    conv("out.conv", w[0], cfg.latent_channels, 3)

    conv("ctrl.conv_in", cfg.latent_cond_channels, w[0], 3)
    for i in range(cfg.levels):
        res(f"ctrl.down.{i}.res", w[i], w[i])
        conv(f"ctrl.down.{i}.conv", w[i], w[i + 1], 3)
    res("ctrl.mid.res", w[-1], w[-1])
    for i in range(cfg.levels + 1):
        conv(f"zero.{i}", w[i], w[i], 1, init="zeros")
    return out


def build_denoiser(config: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> Denoiser:
    """Deterministic init from ``seed``.  ``ctrl.*`` blocks start as copies of
    the matching main-path blocks; ``zero.*`` start at exactly zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, init in _layer_list(config):
        if init == "zeros":
            arr = np.zeros(shape, DTYPE)
        elif init == "ones":
            arr = np.ones(shape, DTYPE)
        elif init == "embed":
            arr = (rng.standard_normal(shape) * 0.5).astype(DTYPE)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = nx.he_init(rng, shape, fan_in)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    for name, t in params.items():
        src = name[len("ctrl."):] if name.startswith("ctrl.") else None
        if src and src in params and params[src].shape == t.shape:
            t.data = params[src].data.copy()
    return Denoiser(config, params)


# ---------------------------------------------------------------- checkpoints

MODEL_MAGIC = b"CSYNMDL\x00"
MODEL_VERSION = 1


def _write_arrays(f: BinaryIO, arrays: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError("checkpoint truncated")
    return b


def _read_arrays(f: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(f, 1))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").astype(DTYPE)
        out[name] = data.reshape(shape)
    return out


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_model(f: BinaryIO, model: Denoiser) -> None:
    """magic, u32 version, u32 len + canonical config JSON, named f32 arrays."""
    f.write(MODEL_MAGIC)
    f.write(struct.pack("<I", MODEL_VERSION))
    cfg = canonical_json(asdict(model.config))
    f.write(struct.pack("<I", len(cfg)))
    f.write(cfg)
    _write_arrays(f, {k: v.data for k, v in model.params.items()})


def read_model(f: BinaryIO) -> Denoiser:
    if _read_exact(f, len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model checkpoint version {version}")
    (clen,) = struct.unpack("<I", _read_exact(f, 4))
    cfg = DenoiserConfig(**json.loads(_read_exact(f, clen)))
    arrays = _read_arrays(f)
    model = build_denoiser(cfg, seed=0)
    model.load_state_dict(arrays)
    return model


def model_to_bytes(model: Denoiser) -> bytes:
    buf = io.BytesIO()
    write_model(buf, model)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> Denoiser:
    return read_model(io.BytesIO(data))


def save_model(path, model: Denoiser) -> None:
    with open(path, "wb") as f:
        write_model(f, model)


def load_model(path) -> Denoiser:
    with open(path, "rb") as f:
        return read_model(f)
