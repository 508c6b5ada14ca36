"""Geometry-masked attention, the local encoder / global-query decoder stack,
feature jitter, the reconstruction loss and checkpoint I/O."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .tokenizer import encode_groups, position_embed, tokenizer_shapes

CHECKPOINT_MAGIC = b"GMASKCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: int = 64
    heads: int = 4
    blocks: int = 4
    ffn_mult: int = 4
    groups: int = 128
    group_size: int = 32
    alpha: float = 1.0
    beta: float = 10.0
    eta: float = 7.0
    rho: float = 0.4
    gamma: float = 20.0
    use_agma: bool = True
    train_encoder: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must be in [0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

@dataclass
class MaskPlan:
    masked: np.ndarray
    high_pool: np.ndarray
    low_pool: np.ndarray
    rho: float
    seed: int | None = None


def mask_count(g: int, rho: float) -> int:
    """round(rho * g), halves rounded up."""
    # snap first so 0.7 * 45 = 31.499999999999996 still counts as a half
    return int(math.floor(round(rho * g, 9) + 0.5))


def select_mask(var_geom, rho: float, rng: np.random.Generator, seed: int | None = None) -> MaskPlan:
    """Mask ``round(rho*g)`` tokens, half drawn from the high-variation half and half
    from the low-variation half (the odd one goes to the high side)."""
    var_geom = np.asarray(var_geom, dtype=np.float64)
    if not 0 <= rho < 1:
        raise ValueError(f"rho must be in [0, 1), got {rho}")
    g = len(var_geom)
    order = np.argsort(var_geom, kind="stable")
    low_pool, high_pool = order[: g // 2], order[g // 2:]
    total = mask_count(g, rho)
    n_high, n_low = (total + 1) // 2, total // 2
    masked = np.zeros(g, dtype=bool)
    if n_high:
        masked[rng.choice(high_pool, n_high, replace=False)] = True
    if n_low:
        masked[rng.choice(low_pool, n_low, replace=False)] = True
    return MaskPlan(masked, high_pool, low_pool, rho, seed)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _attn_shapes(prefix: str, c: int, cross: bool) -> dict[str, tuple]:
    s = {f"{prefix}.ln_q.g": (c,), f"{prefix}.ln_q.b": (c,)}
    if cross:
        s.update({f"{prefix}.ln_kv.g": (c,), f"{prefix}.ln_kv.b": (c,)})
    for p in "qkvo":
        s[f"{prefix}.w{p}"] = (c, c)
        s[f"{prefix}.b{p}"] = (c,)
    return s


def _ffn_shapes(prefix: str, c: int, mult: int) -> dict[str, tuple]:
    return {f"{prefix}.ln.g": (c,), f"{prefix}.ln.b": (c,),
            f"{prefix}.w1": (c, c * mult), f"{prefix}.b1": (c * mult,),
            f"{prefix}.w2": (c * mult, c), f"{prefix}.b2": (c,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    c = cfg.channels
    shapes = dict(tokenizer_shapes(c))
    for b in range(cfg.blocks):
        shapes.update(_attn_shapes(f"lge.{b}.attn", c, cross=False))
        shapes.update(_ffn_shapes(f"lge.{b}.ffn", c, cfg.ffn_mult))
    shapes.update({"lge.ln_out.g": (c,), "lge.ln_out.b": (c,)})
    for b in range(cfg.blocks):
        shapes.update(_attn_shapes(f"gqd.{b}.cross", c, cross=True))
        shapes.update(_attn_shapes(f"gqd.{b}.self", c, cross=False))
        shapes.update(_ffn_shapes(f"gqd.{b}.ffn", c, cfg.ffn_mult))
    return shapes


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> dict[str, T.Tensor]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            data = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif leaf == "g":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        trainable = cfg.train_encoder or not name.startswith("enc.")
        params[name] = T.Tensor(data, requires_grad=trainable)
    return params


def trainable(params: dict) -> list[T.Tensor]:
    return [p for p in params.values() if p.requires_grad]


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _split_heads(x: T.Tensor, h: int) -> T.Tensor:
    n, c = x.shape
    return T.transpose(T.reshape(x, (n, h, c // h)), (1, 0, 2))


def agma_attention(queries: T.Tensor, keys_values: T.Tensor | None, mask, params: dict,
                   prefix: str, heads: int, eps: float = 1e-5) -> T.Tensor:
    """Pre-norm multi-head attention with a residual connection.

    ``keys_values=None`` means self-attention over ``queries``.  Tokens flagged
    in ``mask`` are removed from the key/value set but still act as queries.
    """
    P = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    qn = T.layer_norm(queries, P("ln_q.g"), P("ln_q.b"), eps)
    kvn = qn if keys_values is None else T.layer_norm(keys_values, P("ln_kv.g"), P("ln_kv.b"), eps)
    q, c = qn.shape
    d = c // heads
    Q = _split_heads(T.linear(qn, P("wq"), P("bq")), heads)
    K = _split_heads(T.linear(kvn, P("wk"), P("bk")), heads)
    V = _split_heads(T.linear(kvn, P("wv"), P("bv")), heads)
    logits = T.mul(T.matmul(Q, T.transpose(K, (0, 2, 1))), 1.0 / math.sqrt(d))
    attn = T.masked_softmax(logits, None if mask is None else np.asarray(mask, dtype=bool))
    ctx = T.reshape(T.transpose(T.matmul(attn, V), (1, 0, 2)), (q, c))
    return T.add(queries, T.linear(ctx, P("wo"), P("bo")))


def ffn(x: T.Tensor, params: dict, prefix: str, eps: float = 1e-5) -> T.Tensor:
    P = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    h = T.gelu(T.linear(T.layer_norm(x, P("ln.g"), P("ln.b"), eps), P("w1"), P("b1")))
    return T.add(x, T.linear(h, P("w2"), P("b2")))


def feature_jitter(tokens: T.Tensor, gamma: float, rng: np.random.Generator) -> T.Tensor:
    """Add N(0, (gamma * ||token|| / c)^2) noise per channel; the noise carries no gradient."""
    if gamma == 0:
        return tokens
    g, c = tokens.shape
    sigma = gamma * np.sqrt((tokens.data ** 2).sum(axis=1)) / c
    return T.add(tokens, T.Tensor(rng.standard_normal((g, c)) * sigma[:, None]))


def lge_forward(tokens: T.Tensor, positions: T.Tensor, mask, params: dict, cfg: ModelConfig) -> T.Tensor:
    x = T.add(tokens, positions)
    for b in range(cfg.blocks):
        x = agma_attention(x, None, mask, params, f"lge.{b}.attn", cfg.heads, cfg.ln_eps)
        x = ffn(x, params, f"lge.{b}.ffn", cfg.ln_eps)
    return T.layer_norm(x, params["lge.ln_out.g"], params["lge.ln_out.b"], cfg.ln_eps)


def gqd_forward(encoded: T.Tensor, positions: T.Tensor, mask, params: dict, cfg: ModelConfig) -> T.Tensor:
    """Position embeddings query the encoded tokens; the result, the positions and
    the previous block's output are summed and refined by self-attention + FFN."""
    prev = None
    for b in range(cfg.blocks):
        a1 = agma_attention(positions, encoded, mask, params, f"gqd.{b}.cross", cfg.heads, cfg.ln_eps)
        s = T.add(a1, positions)
        if prev is not None:
            s = T.add(s, prev)
        a2 = agma_attention(s, None, mask, params, f"gqd.{b}.self", cfg.heads, cfg.ln_eps)
        prev = ffn(a2, params, f"gqd.{b}.ffn", cfg.ln_eps)
    return prev


def reconstruction_loss(tokens: T.Tensor, reconstructed: T.Tensor) -> T.Tensor:
    return T.mse(reconstructed, tokens)


@dataclass
class ForwardOutput:
    tokens: T.Tensor
    positions: T.Tensor
    reconstructed: T.Tensor
    loss: T.Tensor
    plan: MaskPlan | None = None

    def token_errors(self) -> np.ndarray:
        d = self.reconstructed.data - self.tokens.data
        return np.sqrt((d * d).sum(axis=1))


def forward(params: dict, cfg: ModelConfig, rel_groups: np.ndarray, centers: np.ndarray,
            var_geom: np.ndarray | None = None, *, train: bool = False,
            mask_rng: np.random.Generator | None = None,
            jitter_rng: np.random.Generator | None = None,
            plan: MaskPlan | None = None, tokens: T.Tensor | None = None) -> ForwardOutput:
    """Tokens -> (jitter) -> encoder -> decoder -> loss against the clean tokens.

    Masking and jitter only happen with ``train=True``.  ``tokens`` may carry
    precomputed group tokens when the group encoder is frozen.
    """
    if tokens is None:
        tokens = encode_groups(rel_groups, params)
    positions = position_embed(centers, params)
    noisy = tokens
    if train:
        if plan is None and cfg.use_agma and cfg.rho > 0:
            if var_geom is None or mask_rng is None:
                raise ValueError("training with masking needs var_geom and mask_rng")
            plan = select_mask(var_geom, cfg.rho, mask_rng)
        if cfg.gamma > 0:
            if jitter_rng is None:
                raise ValueError("training with jitter needs jitter_rng")
            noisy = feature_jitter(tokens, cfg.gamma, jitter_rng)
    else:
        plan = None
    mask = None if plan is None else plan.masked
    encoded = lge_forward(noisy, positions, mask, params, cfg)
    rec = gqd_forward(encoded, positions, mask, params, cfg)
    return ForwardOutput(tokens, positions, rec, reconstruction_loss(tokens, rec), plan)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    params: dict
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: Model, optimizer: T.AdamW | None = None) -> None:
    """Write magic, version, a JSON header and little-endian float64 blobs."""
    blobs = [(name, p.data) for name, p in model.params.items()]
    opt_header = None
    if optimizer is not None:
        opt_header = {"step": optimizer.step_count, "lr": optimizer.lr,
                      "betas": [optimizer.beta1, optimizer.beta2], "eps": optimizer.eps,
                      "weight_decay": optimizer.weight_decay}
        names = {id(p): n for n, p in model.params.items()}
        for p, m, v in zip(optimizer.params, optimizer.m, optimizer.v):
            blobs.append((f"adamw.m.{names[id(p)]}", m))
            blobs.append((f"adamw.v.{names[id(p)]}", v))
    header = {
        "format": "geomask-checkpoint",
        "config": asdict(model.config),
        "extra": model.extra,
        "optimizer": opt_header,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in blobs],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, a in blobs:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, with_optimizer: bool = False):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<IQ", raw, 8)
        header = json.loads(raw[20:20 + hlen])
    except (struct.error, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config: {exc}") from exc
    expected = param_shapes(cfg)
    offset = 20 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    params = {}
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != shape:
            got = arrays[name].shape if name in arrays else None
            raise CheckpointError(f"{path}: parameter {name} expected {shape}, got {got}")
        trainable_ = cfg.train_encoder or not name.startswith("enc.")
        params[name] = T.Tensor(arrays[name], requires_grad=trainable_)
    model = Model(cfg, params, header.get("extra") or {})
    if not with_optimizer:
        return model
    opt = None
    oh = header.get("optimizer")
    if oh is not None:
        opt = T.AdamW(trainable(params), lr=oh["lr"], betas=tuple(oh["betas"]), eps=oh["eps"],
                      weight_decay=oh["weight_decay"])
        opt.step_count = oh["step"]
        names = {id(p): n for n, p in params.items()}
        opt.load_moments([arrays[f"adamw.m.{names[id(p)]}"] for p in opt.params],
                         [arrays[f"adamw.v.{names[id(p)]}"] for p in opt.params])
    return model, opt
