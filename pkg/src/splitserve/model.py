"""The toy pre-norm decoder transformer.

Defines the frozen base model (all affine layers), the client-side pieces
(embedding, norm gains, attention), a monolithic reference forward used as
the correctness oracle for the split path, and the checkpoint byte format
from which client and executor load disjoint halves.
"""

from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterState, apply_adapter
from .config import (BLOCK_ROLES, LayerAddress, ModelConfig, Role,
                     base_addresses, layer_dims)
from .errors import ConfigError, ProtocolError, ShapeMismatchError
from .tensor_ops import (DTYPE, AffineParams, affine_forward, cross_entropy,
                         matmul, rmsnorm, silu, softmax_rows)


@dataclass
class BaseModel:
    config: ModelConfig
    layers: dict[LayerAddress, AffineParams]
    embedding: np.ndarray                 # [vocab, d_model], client-side
    attn_gains: list[np.ndarray]          # per block [d_model], client-side
    ffn_gains: list[np.ndarray]
    final_gain: np.ndarray

    def checksum(self) -> str:
        h = hashlib.sha256()
        for addr in base_addresses(self.config):
            p = self.layers[addr]
            h.update(p.weight.tobytes())
            if p.bias is not None:
                h.update(p.bias.tobytes())
        h.update(self.embedding.tobytes())
        for g in (*self.attn_gains, *self.ffn_gains, self.final_gain):
            h.update(g.tobytes())
        return h.hexdigest()

    def frozen_weight_bytes(self) -> int:
        return sum(p.nbytes for p in self.layers.values())

    def client_side_bytes(self) -> int:
        gains = sum(g.nbytes for g in self.attn_gains) + \
            sum(g.nbytes for g in self.ffn_gains) + self.final_gain.nbytes
        return self.embedding.nbytes + gains


def frozen_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count of all frozen affine layers (with biases)."""
    total = 0
    for addr in base_addresses(config):
        d_in, d_out = layer_dims(config, addr.role)
        total += d_in * d_out + d_out
    return total


def build_model(config: ModelConfig) -> BaseModel:
    """Deterministic initialization: same (config, seed) gives the same bits.

    All arrays are marked read-only; the base model is frozen after load.
    """
    rng = np.random.default_rng(config.seed)
    embedding = rng.standard_normal((config.vocab_size, config.d_model)).astype(DTYPE)
    attn_gains = [np.ones(config.d_model, dtype=DTYPE) for _ in range(config.n_layers)]
    ffn_gains = [np.ones(config.d_model, dtype=DTYPE) for _ in range(config.n_layers)]
    final_gain = np.ones(config.d_model, dtype=DTYPE)
    layers = {}
    for addr in base_addresses(config):
        d_in, d_out = layer_dims(config, addr.role)
        weight = (rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(DTYPE)
        # Nonzero biases keep the bias-nullified privacy path honest.
        bias = (0.05 * rng.standard_normal(d_out)).astype(DTYPE)
        layers[addr] = AffineParams(weight, bias)
    model = BaseModel(config, layers, embedding, attn_gains, ffn_gains, final_gain)
    for arr in _all_arrays(model):
        arr.flags.writeable = False
    return model


def _all_arrays(model: BaseModel):
    for p in model.layers.values():
        yield p.weight
        if p.bias is not None:
            yield p.bias
    yield model.embedding
    yield from model.attn_gains
    yield from model.ffn_gains
    yield model.final_gain


# ---------------------------------------------------------------------------
# attention

def causal_mask(t_q: int, t_k: int, q_offset: int) -> np.ndarray:
    """True where key position j is in the future of query i."""
    return np.arange(t_k)[None, :] > (np.arange(t_q)[:, None] + q_offset)


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                      n_heads: int, q_offset: int = 0, tape: list | None = None):
    """Causal multi-head attention over one sequence.

    q is [t_q, d]; k and v are [t_k, d] covering all cached positions plus
    the new ones.  Query i attends keys j <= q_offset + i.  When tape is
    given, per-head probabilities are appended for the backward pass.
    """
    t_q, d = q.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(np.asarray(dh, dtype=q.dtype))
    mask = causal_mask(t_q, k.shape[0], q_offset)
    out = np.empty_like(q)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = matmul(q[:, sl], k[:, sl].T) * scale
        scores = np.where(mask, np.asarray(-np.inf, dtype=scores.dtype), scores)
        probs = softmax_rows(scores)
        out[:, sl] = matmul(probs, v[:, sl])
        if tape is not None:
            tape.append(probs)
    return out


def attention_backward(grad_out: np.ndarray, q: np.ndarray, k: np.ndarray,
                       v: np.ndarray, probs_per_head: list[np.ndarray],
                       n_heads: int):
    """Gradients w.r.t. q, k, v for the full-sequence (training) case."""
    d = q.shape[1]
    dh = d // n_heads
    scale = 1.0 / np.sqrt(np.asarray(dh, dtype=q.dtype))
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        probs = probs_per_head[h]
        go = grad_out[:, sl]
        gv[:, sl] = matmul(probs.T, go)
        gprobs = matmul(go, v[:, sl].T)
        gscores = probs * (gprobs - np.sum(gprobs * probs, axis=1, keepdims=True))
        gq[:, sl] = matmul(gscores, k[:, sl]) * scale
        gk[:, sl] = matmul(gscores.T, q[:, sl]) * scale
    return gq, gk, gv


# ---------------------------------------------------------------------------
# monolithic reference path (the oracle for split execution)

class RefKVCache:
    """Minimal per-block K/V store for the reference decode path."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.k: list[np.ndarray | None] = [None] * config.n_layers
        self.v: list[np.ndarray | None] = [None] * config.n_layers

    @property
    def positions(self) -> int:
        return 0 if self.k[0] is None else self.k[0].shape[1]

    def append(self, block: int, k_new: np.ndarray, v_new: np.ndarray):
        if self.k[block] is None:
            self.k[block], self.v[block] = k_new, v_new
        else:
            self.k[block] = np.concatenate([self.k[block], k_new], axis=1)
            self.v[block] = np.concatenate([self.v[block], v_new], axis=1)
        return self.k[block], self.v[block]


def reference_forward(model: BaseModel, adapter: AdapterState | None,
                      tokens: np.ndarray, kv: RefKVCache | None = None) -> np.ndarray:
    """Standard in-process forward: embed, pre-norm blocks, final norm, head.

    tokens is [batch, seq] of ids; returns [batch, seq, vocab] logits.  With
    kv, appends the new positions to the cache and attends over all of it.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeMismatchError(f"tokens must be [batch, seq], got {tokens.shape}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=-1) >= cfg.vocab_size:
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    b, t = tokens.shape
    offset = kv.positions if kv is not None else 0
    if offset + t > cfg.max_seq:
        raise ConfigError(f"sequence {offset + t} exceeds max_seq {cfg.max_seq}")

    def base(addr: LayerAddress, x2d: np.ndarray) -> np.ndarray:
        y = affine_forward(x2d, _layer_as(model.layers[addr], x2d.dtype))
        return apply_adapter(adapter, addr, x2d, y)

    h = model.embedding[tokens]  # [b, t, d]
    d = cfg.d_model
    for blk in range(cfg.n_layers):
        x = h.reshape(b * t, d)
        a = rmsnorm(x, model.attn_gains[blk].astype(x.dtype, copy=False))
        q = base(LayerAddress(blk, Role.Q), a).reshape(b, t, d)
        k = base(LayerAddress(blk, Role.K), a).reshape(b, t, d)
        v = base(LayerAddress(blk, Role.V), a).reshape(b, t, d)
        if kv is not None:
            k_all, v_all = kv.append(blk, k, v)
        else:
            k_all, v_all = k, v
        attn = np.empty((b, t, d), dtype=h.dtype)
        for s in range(b):
            attn[s] = attention_forward(q[s], k_all[s], v_all[s], cfg.n_heads,
                                        q_offset=offset)
        o = base(LayerAddress(blk, Role.O), attn.reshape(b * t, d))
        h = h + o.reshape(b, t, d)
        x2 = h.reshape(b * t, d)
        f = rmsnorm(x2, model.ffn_gains[blk].astype(x2.dtype, copy=False))
        u = base(LayerAddress(blk, Role.FF_UP), f)
        s_act = silu(u)
        dn = base(LayerAddress(blk, Role.FF_DOWN), s_act)
        h = h + dn.reshape(b, t, d)
    g = rmsnorm(h.reshape(b * t, d), model.final_gain.astype(h.dtype, copy=False))
    logits = base(LayerAddress(cfg.n_layers, Role.LM_HEAD), g)
    return logits.reshape(b, t, cfg.vocab_size)


def reference_loss(model: BaseModel, adapter: AdapterState | None,
                   tokens: np.ndarray, targets: np.ndarray) -> float:
    logits = reference_forward(model, adapter, tokens)
    loss, _ = cross_entropy(logits.reshape(-1, model.config.vocab_size),
                            np.asarray(targets).reshape(-1))
    return loss


def _layer_as(p: AffineParams, dtype) -> AffineParams:
    if p.weight.dtype == dtype:
        return p
    return AffineParams(p.weight.astype(dtype),
                        None if p.bias is None else p.bias.astype(dtype))


def model_astype(model: BaseModel, dtype) -> BaseModel:
    """Deep-copied model in another dtype; used by finite-difference oracles."""
    layers = {a: AffineParams(p.weight.astype(dtype),
                              None if p.bias is None else p.bias.astype(dtype))
              for a, p in model.layers.items()}
    return BaseModel(model.config, layers,
                     model.embedding.astype(dtype),
                     [g.astype(dtype) for g in model.attn_gains],
                     [g.astype(dtype) for g in model.ffn_gains],
                     model.final_gain.astype(dtype))


def adapter_astype(adapter: AdapterState, dtype) -> AdapterState:
    out = copy.deepcopy(adapter)
    out.lora = {a: (p[0].astype(dtype), p[1].astype(dtype)) for a, p in out.lora.items()}
    out.ia3 = {a: v.astype(dtype) for a, v in out.ia3.items()}
    return out


# ---------------------------------------------------------------------------
# checkpoint byte format (documented in the README)
#
#   magic   4 bytes  b"SSM1"
#   version u16 LE   1
#   config  7 x u32 LE: n_layers, d_model, n_heads, d_ff, vocab_size,
#                       max_seq, seed
#   blobs, each:  name_len u16 LE, name (ascii), raw little-endian f32 data
#   blob order: "embedding", per block "block{i}.attn_gain" and
#   "block{i}.ffn_gain", "final_gain", then per canonical LayerAddress
#   "block{i}.{role}.weight" and "block{i}.{role}.bias".

CHECKPOINT_MAGIC = b"SSM1"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sH7I")


def _blob_name(addr: LayerAddress, part: str) -> str:
    return f"block{addr.block}.{addr.role.name}.{part}"


def _write_blob(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    encoded = name.encode("ascii")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(data.tobytes())


def save_checkpoint(model: BaseModel, path) -> None:
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.n_layers,
                              cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab_size,
                              cfg.max_seq, cfg.seed))
        _write_blob(fh, "embedding", model.embedding)
        for i in range(cfg.n_layers):
            _write_blob(fh, f"block{i}.attn_gain", model.attn_gains[i])
            _write_blob(fh, f"block{i}.ffn_gain", model.ffn_gains[i])
        _write_blob(fh, "final_gain", model.final_gain)
        for addr in base_addresses(cfg):
            p = model.layers[addr]
            _write_blob(fh, _blob_name(addr, "weight"), p.weight)
            _write_blob(fh, _blob_name(addr, "bias"), p.bias)


class _CheckpointReader:
    def __init__(self, path):
        self.fh = open(path, "rb")
        head = self.fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ProtocolError("truncated checkpoint header")
        magic, version, *fields = _HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise ProtocolError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ProtocolError(f"unsupported checkpoint version {version}")
        self.config = ModelConfig(*fields)

    def blob(self, expected_name: str, shape) -> np.ndarray:
        raw = self.fh.read(2)
        if len(raw) != 2:
            raise ProtocolError(f"truncated checkpoint before blob {expected_name!r}")
        (n,) = struct.unpack("<H", raw)
        name = self.fh.read(n).decode("ascii")
        if name != expected_name:
            raise ProtocolError(f"expected blob {expected_name!r}, found {name!r}")
        count = int(np.prod(shape))
        data = self.fh.read(4 * count)
        if len(data) != 4 * count:
            raise ProtocolError(f"truncated blob {name!r}")
        return np.frombuffer(data, dtype="<f4").reshape(shape).astype(DTYPE)

    def skip_blob(self, expected_name: str, shape) -> None:
        raw = self.fh.read(2)
        if len(raw) != 2:
            raise ProtocolError(f"truncated checkpoint before blob {expected_name!r}")
        (n,) = struct.unpack("<H", raw)
        self.fh.seek(n + 4 * int(np.prod(shape)), 1)

    def close(self):
        self.fh.close()


def _client_blob_plan(cfg: ModelConfig):
    yield "embedding", (cfg.vocab_size, cfg.d_model)
    for i in range(cfg.n_layers):
        yield f"block{i}.attn_gain", (cfg.d_model,)
        yield f"block{i}.ffn_gain", (cfg.d_model,)
    yield "final_gain", (cfg.d_model,)


def load_checkpoint(path) -> BaseModel:
    cfg, embedding, attn_gains, ffn_gains, final_gain = _load_client_arrays(path)
    _, layers = load_base_half(path)
    model = BaseModel(cfg, layers, embedding, attn_gains, ffn_gains, final_gain)
    for arr in _all_arrays(model):
        arr.flags.writeable = False
    return model


def _load_client_arrays(path):
    r = _CheckpointReader(path)
    try:
        cfg = r.config
        arrays = {name: r.blob(name, shape) for name, shape in _client_blob_plan(cfg)}
    finally:
        r.close()
    attn = [arrays[f"block{i}.attn_gain"] for i in range(cfg.n_layers)]
    ffn = [arrays[f"block{i}.ffn_gain"] for i in range(cfg.n_layers)]
    return cfg, arrays["embedding"], attn, ffn, arrays["final_gain"]


def load_base_half(path) -> tuple[ModelConfig, dict[LayerAddress, AffineParams]]:
    """Executor's half: only the frozen affine layers."""
    r = _CheckpointReader(path)
    try:
        cfg = r.config
        for name, shape in _client_blob_plan(cfg):
            r.skip_blob(name, shape)
        layers = {}
        for addr in base_addresses(cfg):
            d_in, d_out = layer_dims(cfg, addr.role)
            w = r.blob(_blob_name(addr, "weight"), (d_in, d_out))
            bias = r.blob(_blob_name(addr, "bias"), (d_out,))
            w.flags.writeable = False
            bias.flags.writeable = False
            layers[addr] = AffineParams(w, bias)
    finally:
        r.close()
    return cfg, layers


def load_client_half(path):
    """Client's half: config, embedding and norm gains; no frozen weights."""
    cfg, embedding, attn, ffn, final = _load_client_arrays(path)
    for arr in (embedding, *attn, *ffn, final):
        arr.flags.writeable = False
    return cfg, embedding, attn, ffn, final
