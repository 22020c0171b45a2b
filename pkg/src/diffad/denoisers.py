"""Noise-prediction networks eps_theta(x_t, t) and their optimizer.

Two backbones share one interface (``forward``, ``parameters``,
``load_arrays``):

* :class:`MlpDenoiser` concatenates a sinusoidal time embedding to the input
  and runs a plain MLP.
* :class:`DitDenoiser` cuts the input vector into contiguous segments
  ("patches"), embeds each as a token, adds a projected time embedding to every
  token and applies pre-norm transformer blocks with single-head attention.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

import diffad.numcore as nc
from diffad.binio import Reader, Writer
from diffad.errors import ContractError, FormatError, ShapeError
from diffad.numcore import RngStream, Tensor

MODEL_MAGIC = b"ADM1"
BACKBONE_MLP = 0
BACKBONE_DIT = 1
_ACTIVATIONS = {"relu": 0, "gelu": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATIONS.items()}


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, interleaved: ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]``.

    ``w_i = 10000 ** (-2 i / dim)``. Scalar ``t`` gives shape ``(dim,)``; an
    array of timesteps gives ``(len(t), dim)``.
    """
    if dim % 2 != 0 or dim < 0:
        raise ContractError(f"time embedding dim must be even and non-negative, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ContractError("timesteps must be non-negative")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim) if dim else np.zeros(0)
    ang = t_arr[..., None] * freqs
    emb = np.empty(t_arr.shape + (dim,))
    emb[..., 0::2] = np.sin(ang)
    emb[..., 1::2] = np.cos(ang)
    return emb


def _uniform_init(rng: RngStream, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return (2.0 * rng.uniform(shape) - 1.0) * bound


def _as_timesteps(t, batch: int) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(batch, int(t))
    if t.shape != (batch,):
        raise ShapeError(f"expected {batch} timesteps, got shape {t.shape}")
    return t


class _Module:
    backbone_id: int
    params: list[Tensor]

    def parameters(self) -> list[Tensor]:
        return self.params

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params]

    def load_arrays(self, arrays) -> None:
        if len(arrays) != len(self.params):
            raise ShapeError(f"expected {len(self.params)} parameter arrays, got {len(arrays)}")
        new = []
        for old, a in zip(self.params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != old.shape:
                raise ShapeError(f"parameter shape {a.shape} != {old.shape}")
            new.append(Tensor(a.copy(), requires_grad=True))
        self.params = new

    def n_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params]))

    def __call__(self, x, t) -> Tensor:
        return self.forward(x, t)


@dataclass(frozen=True)
class MlpConfig:
    dim: int
    hidden: tuple[int, ...] = (128, 128)
    emb_dim: int = 32
    activation: tuple[str, ...] | str = "relu"

    def activations(self) -> tuple[str, ...]:
        if isinstance(self.activation, str):
            return (self.activation,) * len(self.hidden)
        return tuple(self.activation)


class MlpDenoiser(_Module):
    backbone_id = BACKBONE_MLP

    def __init__(self, config: MlpConfig, seed: int = 0):
        acts = config.activations()
        if len(acts) != len(config.hidden) or any(a not in _ACTIVATIONS for a in acts):
            raise ContractError(f"bad activation list {config.activation!r}")
        if config.emb_dim % 2:
            raise ContractError("emb_dim must be even")
        self.config = config
        rng = RngStream(seed)
        widths = [config.dim + config.emb_dim, *config.hidden, config.dim]
        self.params = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.params.append(Tensor(_uniform_init(rng, fan_in, (fan_in, fan_out)), requires_grad=True))
            self.params.append(Tensor(_uniform_init(rng, fan_in, (fan_out,)), requires_grad=True))

    def forward(self, x, t) -> Tensor:
        x = nc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.dim:
            raise ShapeError(f"MLP expects (batch, {self.config.dim}) input, got {x.shape}")
        t = _as_timesteps(t, x.shape[0])
        h = x
        if self.config.emb_dim:
            h = nc.concat(x, time_embedding(t, self.config.emb_dim))
        acts = self.config.activations()
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            h = nc.add(nc.matmul(h, self.params[2 * i]), self.params[2 * i + 1])
            if i < n_layers - 1:
                h = nc.elementwise(acts[i], h)
        return h


@dataclass(frozen=True)
class DitConfig:
    dim: int
    patch: int = 2
    width: int = 32
    n_blocks: int = 1
    emb_dim: int = 32
    ff_mult: int = 2
    pos_embedding: bool = True
    ln_eps: float = 1e-5

    @property
    def n_tokens(self) -> int:
        return self.dim // self.patch


def attention(h, wq, wk, wv, wo) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product self-attention over axis -2.

    Returns the projected output and the post-softmax weights.
    """
    q = nc.matmul(h, wq)
    k = nc.matmul(h, wk)
    v = nc.matmul(h, wv)
    scores = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    weights = nc.softmax(scores)
    return nc.matmul(nc.matmul(weights, v), wo), weights


_BLOCK_PARAMS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b")


class DitDenoiser(_Module):
    """Parameter order: ``in_w, in_b, t_w, t_b``, then per block
    ``ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b``,
    then ``lnf_g, lnf_b, out_w, out_b``."""

    backbone_id = BACKBONE_DIT

    def __init__(self, config: DitConfig, seed: int = 0):
        if config.patch < 1 or config.dim % config.patch != 0:
            raise ContractError(f"dim {config.dim} not divisible by patch size {config.patch}")
        if config.emb_dim % 2 or config.emb_dim < 2:
            raise ContractError("emb_dim must be a positive even number")
        if config.pos_embedding and config.width % 2:
            raise ContractError("width must be even when position embeddings are on")
        self.config = config
        rng = RngStream(seed)
        p, w, e, f = config.patch, config.width, config.emb_dim, config.ff_mult * config.width

        def lin(fan_in, fan_out):
            return [_uniform_init(rng, fan_in, (fan_in, fan_out)), _uniform_init(rng, fan_in, (fan_out,))]

        arrays = lin(p, w) + lin(e, w)
        for _ in range(config.n_blocks):
            arrays += [np.ones(w), np.zeros(w)]
            arrays += [_uniform_init(rng, w, (w, w)) for _ in range(4)]
            arrays += [np.ones(w), np.zeros(w)]
            arrays += lin(w, f) + lin(f, w)
        arrays += [np.ones(w), np.zeros(w)] + lin(w, p)
        self.params = [Tensor(a, requires_grad=True) for a in arrays]
        n = config.n_tokens
        self._pos = time_embedding(np.arange(n), w) if config.pos_embedding else None

    def _block(self, i: int) -> dict[str, Tensor]:
        start = 4 + i * len(_BLOCK_PARAMS)
        return dict(zip(_BLOCK_PARAMS, self.params[start:start + len(_BLOCK_PARAMS)]))

    def embed(self, x, t) -> Tensor:
        cfg = self.config
        x = nc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != cfg.dim:
            raise ShapeError(f"DiT expects (batch, {cfg.dim}) input, got {x.shape}")
        b, n = x.shape[0], cfg.n_tokens
        t = _as_timesteps(t, b)
        in_w, in_b, t_w, t_b = self.params[:4]
        h = nc.add(nc.matmul(nc.reshape(x, (b, n, cfg.patch)), in_w), in_b)
        if self._pos is not None:
            h = nc.add(h, np.broadcast_to(self._pos, h.shape))
        temb = nc.add(nc.matmul(time_embedding(t, cfg.emb_dim), t_w), t_b)
        return nc.add(h, nc.repeat_tokens(temb, n))

    def blocks(self, h: Tensor) -> Tensor:
        eps = self.config.ln_eps
        for i in range(self.config.n_blocks):
            p = self._block(i)
            a = nc.layer_norm(h, p["ln1_g"], p["ln1_b"], eps)
            att, _ = attention(a, p["wq"], p["wk"], p["wv"], p["wo"])
            h = nc.add(h, att)
            f = nc.layer_norm(h, p["ln2_g"], p["ln2_b"], eps)
            f = nc.add(nc.matmul(nc.gelu(nc.add(nc.matmul(f, p["ff1_w"]), p["ff1_b"])), p["ff2_w"]), p["ff2_b"])
            h = nc.add(h, f)
        return h

    def forward(self, x, t) -> Tensor:
        h = self.blocks(self.embed(x, t))
        lnf_g, lnf_b, out_w, out_b = self.params[-4:]
        h = nc.layer_norm(h, lnf_g, lnf_b, self.config.ln_eps)
        out = nc.add(nc.matmul(h, out_w), out_b)
        return nc.reshape(out, (out.shape[0], self.config.dim))


Denoiser = MlpDenoiser | DitDenoiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adam_step(params, grads, state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays and a new state."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    if len(m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape or mi.shape != p.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, replace(state, m=new_m, v=new_v, step=step)


# --- serialization --------------------------------------------------------


def write_model(w: Writer, model: Denoiser) -> None:
    w.raw(MODEL_MAGIC)
    w.u8(model.backbone_id)
    cfg = model.config
    if isinstance(model, MlpDenoiser):
        acts = cfg.activations()
        w.u32(cfg.dim)
        w.u32(cfg.emb_dim)
        w.u32(len(cfg.hidden))
        for h in cfg.hidden:
            w.u32(h)
        for a in acts:
            w.u8(_ACTIVATIONS[a])
    else:
        for v in (cfg.dim, cfg.patch, cfg.width, cfg.n_blocks, cfg.emb_dim, cfg.ff_mult):
            w.u32(v)
        w.u8(int(cfg.pos_embedding))
        w.f64(cfg.ln_eps)
    w.u32(len(model.params))
    for p in model.params:
        w.tensor(p.data)


def read_model(r: Reader) -> Denoiser:
    r.magic(MODEL_MAGIC)
    backbone = r.u8()
    if backbone == BACKBONE_MLP:
        dim, emb = r.u32(), r.u32()
        n_hidden = r.u32()
        hidden = tuple(r.u32() for _ in range(n_hidden))
        try:
            acts = tuple(_ACTIVATION_NAMES[r.u8()] for _ in range(n_hidden))
        except KeyError as exc:
            raise FormatError("unknown activation id in model file") from exc
        model: Denoiser = MlpDenoiser(MlpConfig(dim, hidden, emb, acts))
    elif backbone == BACKBONE_DIT:
        dim, patch, width, n_blocks, emb, ff = (r.u32() for _ in range(6))
        pos = bool(r.u8())
        eps = r.f64()
        model = DitDenoiser(DitConfig(dim, patch, width, n_blocks, emb, ff, pos, eps))
    else:
        raise FormatError(f"unknown backbone id {backbone}")
    n = r.u32()
    arrays = [r.tensor() for _ in range(n)]
    try:
        model.load_arrays(arrays)
    except ShapeError as exc:
        raise FormatError(f"model parameters do not match header: {exc}") from exc
    return model


def model_to_bytes(model: Denoiser) -> bytes:
    w = Writer()
    write_model(w, model)
    return w.getvalue()


def model_from_bytes(data: bytes) -> Denoiser:
    r = Reader(data, "model")
    model = read_model(r)
    r.expect_end()
    return model
