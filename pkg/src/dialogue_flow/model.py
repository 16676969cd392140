"""Transformer vector field with U-Net style skip connections.

Every frame's input is the sum of a projection of its features (prompt
features on the prefix, the noisy sample ``w`` on the body), one embedding
per speaker token stream, and an embedding of the flow time ``t``. Layer
``i`` of the first half feeds layer ``n_layers - 1 - i`` of the second half
through a learned scalar-gated merge.
"""

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import tokens as tk
from .errors import ConfigError, DataError, NonFinite, ShapeMismatch
from .flow import fm_loss

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_features: int = 16
    vocab_size: int = tk.VOCAB_SIZE
    ff_mult: int = 4
    rotary: bool = True
    zero_init_output: bool = True
    time_max_freq: float = 100.0

    def __post_init__(self):
        if self.n_layers < 2 or self.n_layers % 2:
            raise ConfigError("n_layers must be even so layers pair up for skips")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary positions")

    @classmethod
    def full_scale(cls):
        return cls(n_layers=24, n_heads=16, d_model=1024, d_features=100)


def sinusoidal_features(t, dim, max_freq=100.0):
    """``[sin(f_k t), cos(f_k t)]`` at ``dim // 2`` geometrically spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, dtype=t.dtype))
    angles = t[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _rotary_tables(n, head_dim, dtype):
    inv = 1.0 / (10000.0 ** (torch.arange(0, head_dim, 2, dtype=dtype) / head_dim))
    ang = torch.arange(n, dtype=dtype)[:, None] * inv
    return torch.cos(ang), torch.sin(ang)


def _rotate(x, cos, sin):
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class Block(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, cfg.ff_mult * d), nn.GELU(), nn.Linear(cfg.ff_mult * d, d))

    def forward(self, x, key_mask, rotary):
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.norm1(x)).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        if rotary is not None:
            q, k = _rotate(q, *rotary), _rotate(k, *rotary)
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask)
        x = x + self.proj(att.transpose(1, 2).reshape(b, n, d))
        return x + self.ff(self.norm2(x))


class VectorField(nn.Module):
    def __init__(self, cfg=ModelConfig(), seed=0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.embed1 = nn.Embedding(cfg.vocab_size, d)
        self.embed2 = nn.Embedding(cfg.vocab_size, d)
        self.feat_proj = nn.Linear(cfg.d_features, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        # (keep, skip) gates for the second-half layers; (1, 0) is a plain transformer
        self.skip_gates = nn.Parameter(torch.tensor([[1.0, 0.0]] * (cfg.n_layers // 2)))
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.d_features)
        with torch.no_grad():
            for emb in (self.embed1, self.embed2):
                emb.weight.mul_(0.5)
            if cfg.zero_init_output:
                self.out_proj.weight.zero_()
                self.out_proj.bias.zero_()
        torch.random.set_rng_state(gen_state)
        self.to(DTYPE)

    def time_embed(self, t):
        t = torch.as_tensor(t, dtype=DTYPE)
        return self.time_mlp(sinusoidal_features(t, self.cfg.d_model, self.cfg.time_max_freq))

    def forward(self, features, t, z1, z2, valid=None):
        """Velocity for every frame.

        features: (B, T, d_features) with prompt features on the prefix and
        the noisy sample on the body; t: (B,); z1, z2: (B, T) token ids;
        valid: optional (B, T) bool, False on batch padding.
        """
        b, n, _ = features.shape
        if features.shape[-1] != self.cfg.d_features:
            raise ShapeMismatch(f"expected {self.cfg.d_features} features, got {features.shape[-1]}")
        if z1.shape != (b, n) or z2.shape != (b, n):
            raise ShapeMismatch("token streams must match the feature frames")
        x = self.feat_proj(features) + self.embed1(z1) + self.embed2(z2)
        x = x + self.time_embed(t)[:, None, :]
        key_mask = None if valid is None else valid[:, None, None, :]
        rotary = _rotary_tables(n, self.cfg.d_model // self.cfg.n_heads, DTYPE) if self.cfg.rotary else None
        half = self.cfg.n_layers // 2
        skips = []
        for i, block in enumerate(self.blocks):
            if i >= half:
                keep, skip = self.skip_gates[i - half]
                x = keep * x + skip * skips[self.cfg.n_layers - 1 - i]
            x = block(x, key_mask, rotary)
            if i < half:
                skips.append(x)
        return self.out_proj(self.out_norm(x))

    def velocity(self, w, t, condition):
        """Body velocity for one sample; the ``field`` callable used by the ODE sampler."""
        pre = condition.prefix
        feats = np.concatenate([pre.features, np.asarray(w)], axis=0) if len(pre) else np.asarray(w)
        with torch.no_grad():
            out = self(
                torch.as_tensor(feats, dtype=DTYPE)[None],
                torch.tensor([float(t)], dtype=DTYPE),
                torch.as_tensor(condition.full_z1)[None],
                torch.as_tensor(condition.full_z2)[None],
            )
        return out[0, len(pre):].numpy()


def forward(model, w, t, streams, prefix_features):
    """Single-sample convenience wrapper returning body velocities as numpy.

    ``streams`` covers prefix and body; ``prefix_features`` holds the prefix rows.
    """
    prefix_features = np.asarray(prefix_features, dtype=np.float64).reshape(-1, model.cfg.d_features)
    w = np.asarray(w, dtype=np.float64)
    if len(prefix_features) + len(w) != len(streams):
        raise ShapeMismatch("prefix plus body length must equal the stream length")
    feats = np.concatenate([prefix_features, w])
    with torch.no_grad():
        out = model(
            torch.as_tensor(feats)[None],
            torch.tensor([float(t)], dtype=DTYPE),
            torch.as_tensor(streams.z1)[None],
            torch.as_tensor(streams.z2)[None],
        )
    return out[0, len(prefix_features):].numpy()


@dataclass(frozen=True, eq=False)
class Batch:
    features: torch.Tensor
    t: torch.Tensor
    z1: torch.Tensor
    z2: torch.Tensor
    target: torch.Tensor
    loss_mask: torch.Tensor
    valid: torch.Tensor


def collate(items, d_features):
    """Pad per-sample dicts into one :class:`Batch`.

    Each item holds ``features`` (T, D) model input, ``target`` (T, D),
    ``z1``/``z2`` (T,), ``loss_mask`` (T,) and scalar ``t``.
    """
    n = max(len(it["z1"]) for it in items)
    b = len(items)
    feats = np.zeros((b, n, d_features))
    target = np.zeros((b, n, d_features))
    z1 = np.full((b, n), tk.SILENCE, dtype=np.int64)
    z2 = np.full((b, n), tk.SILENCE, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    valid = np.zeros((b, n), dtype=bool)
    for i, it in enumerate(items):
        m = len(it["z1"])
        feats[i, :m] = it["features"]
        target[i, :m] = it["target"]
        z1[i, :m] = it["z1"]
        z2[i, :m] = it["z2"]
        mask[i, :m] = it["loss_mask"]
        valid[i, :m] = True
    return Batch(
        torch.from_numpy(feats),
        torch.tensor([float(it["t"]) for it in items], dtype=DTYPE),
        torch.from_numpy(z1),
        torch.from_numpy(z2),
        torch.from_numpy(target),
        torch.from_numpy(mask),
        torch.from_numpy(valid),
    )


def batch_loss(model, batch):
    valid = None if bool(batch.valid.all()) else batch.valid
    pred = model(batch.features, batch.t, batch.z1, batch.z2, valid)
    return fm_loss(pred, batch.target, batch.loss_mask)


def gradients(model, batch):
    """Masked flow-matching loss and its exact gradient for every parameter."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        grads[name] = g.detach().clone()
    if not torch.isfinite(loss) or not all(torch.isfinite(g).all() for g in grads.values()):
        raise NonFinite("loss or gradient is not finite")
    return float(loss.detach()), grads


# Checkpoint container: magic, u32 header length, JSON header, raw tensors.
_MAGIC = b"DFLOWCKP"
CHECKPOINT_VERSION = 1


def parameter_bytes(model):
    return b"".join(
        t.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes()
        for t in model.state_dict().values()
    )


def parameter_checksum(model):
    return hashlib.sha256(parameter_bytes(model)).hexdigest()


def save_checkpoint(model, path, extra=None):
    state = model.state_dict()
    payload = parameter_bytes(model)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in state.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise DataError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise DataError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        payload = fh.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('version')}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise DataError(f"checkpoint {path} failed its checksum")
    model = VectorField(ModelConfig(**header["config"]))
    state = {}
    offset = 0
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        state[spec["name"]] = torch.from_numpy(arr.reshape(spec["shape"]).copy())
        offset += 8 * count
    model.load_state_dict(state)
    return model
