"""Client runtime: virtualized model, inference and fine-tuning jobs.

A client owns everything request-specific: embedding and norm gains,
adapters, attention, KV cache, optimizer state.  Frozen affine layers are
replaced by VirtLayers that ship activations to the base executor and hand
back its reply in place of local computation.  The client saves only what
its own layers need for backward; nothing is assumed saved at the executor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ledger as ledger_mod
from .adapters import AdapterState, apply_adapter, lora_backward, make_optimizer
from .config import (LayerAddress, ModelConfig, Role, base_addresses,
                     layer_dims, max_layer_width, validate_address)
from .errors import ConfigError, JobStateError, ProtocolError
from .model import BaseModel, attention_backward, attention_forward
from .privacy import NoiseSet, PrivacyConfig
from .protocol import PASS_BACKWARD, PASS_FORWARD
from .tensor_ops import (AffineParams, affine_backward_input, affine_forward,
                         cross_entropy, rmsnorm, rmsnorm_backward, silu,
                         silu_backward)


class LocalAffine:
    """A base layer kept in-process (used when an address is not virtualized
    and by the pure-local configuration)."""

    def __init__(self, params: AffineParams):
        self.params = params

    @property
    def nbytes(self) -> int:
        return self.params.nbytes

    def forward(self, x: np.ndarray, iteration: int = 0) -> np.ndarray:
        return affine_forward(x, self.params)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        return affine_backward_input(grad_y, self.params)


class VirtLayer:
    """Client-side stand-in for one frozen layer.

    Forward/backward have the same shapes as the replaced affine layer but
    execute at the base executor.  With privacy enabled, forward payloads
    are blinded and replies de-noised; backward gradients travel in the
    clear (the scheme covers forward activations only).
    """

    def __init__(self, addr: LayerAddress, d_in: int, d_out: int, channel,
                 noise: NoiseSet | None = None):
        self.addr = addr
        self.d_in = d_in
        self.d_out = d_out
        self.channel = channel
        self.noise = noise

    def forward(self, x: np.ndarray, iteration: int = 0) -> np.ndarray:
        if x.shape[1] != self.d_in:
            raise ProtocolError(
                f"{self.addr}: input width {x.shape[1]} != d_in {self.d_in}")
        if self.noise is not None:
            payload, index = self.noise.blind(self.addr, x, iteration)
        else:
            payload, index = x, None
        y = self.channel.request(self.addr.block, int(self.addr.role),
                                 PASS_FORWARD, payload)
        y = self._checked(y, x.shape[0], self.d_out)
        if index is not None:
            y = self.noise.unblind(self.addr, y, index)
        elif self.channel.reply_is_view:
            y = np.array(y, copy=True)  # detach from the shared buffer
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if grad_y.shape[1] != self.d_out:
            raise ProtocolError(
                f"{self.addr}: grad width {grad_y.shape[1]} != d_out {self.d_out}")
        gx = self.channel.request(self.addr.block, int(self.addr.role),
                                  PASS_BACKWARD, grad_y)
        gx = self._checked(gx, grad_y.shape[0], self.d_in)
        if self.channel.reply_is_view:
            gx = np.array(gx, copy=True)
        return gx

    def _checked(self, y: np.ndarray, rows: int, cols: int) -> np.ndarray:
        if y.shape != (rows, cols):
            raise ProtocolError(
                f"{self.addr}: executor returned shape {y.shape}, "
                f"expected {(rows, cols)}")
        return y


class KVCache:
    """Per-block key/value store accumulated during decoding.

    placement tags where the cache notionally resides (fast accelerator vs
    offloaded host memory); it never changes results, only the transfer
    accounting recorded each decode step.
    """

    def __init__(self, config: ModelConfig, batch: int, placement: str = "fast"):
        if placement not in ("fast", "offloaded"):
            raise ConfigError(f"unknown cache placement {placement!r}")
        self.config = config
        self.batch = batch
        self.placement = placement
        self.k: list[np.ndarray | None] = [None] * config.n_layers
        self.v: list[np.ndarray | None] = [None] * config.n_layers
        # bytes that would cross the fast/offloaded boundary per decode step
        self.transfer_compute_on_fast: list[int] = []
        self.transfer_compute_on_offloaded: list[int] = []

    @property
    def positions(self) -> int:
        return 0 if self.k[0] is None else self.k[0].shape[1]

    def append(self, block: int, k_new: np.ndarray, v_new: np.ndarray):
        if self.k[block] is None:
            self.k[block], self.v[block] = k_new, v_new
        else:
            self.k[block] = np.concatenate([self.k[block], k_new], axis=1)
            self.v[block] = np.concatenate([self.v[block], v_new], axis=1)
        if self.k[block].shape[1] > self.config.max_seq:
            raise ConfigError(
                f"KV cache length {self.k[block].shape[1]} exceeds "
                f"max_seq {self.config.max_seq}")
        return self.k[block], self.v[block]

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (*self.k, *self.v) if a is not None)

    def record_decode_step(self) -> None:
        fast, offloaded = ledger_mod.decode_step_transfer_bytes(
            self.config, self.positions, self.batch)
        self.transfer_compute_on_fast.append(fast)
        self.transfer_compute_on_offloaded.append(offloaded)


class ClientModel:
    """The client-side model: local non-base layers plus VirtLayers."""

    def __init__(self, config: ModelConfig, embedding, attn_gains, ffn_gains,
                 final_gain, layers: dict):
        self.config = config
        self.embedding = embedding
        self.attn_gains = attn_gains
        self.ffn_gains = ffn_gains
        self.final_gain = final_gain
        self.layers = layers

    @classmethod
    def virtualize(cls, model: BaseModel, base_layer_set, channel=None,
                   noise: NoiseSet | None = None) -> "ClientModel":
        """Replace every address in base_layer_set by a VirtLayer; keep the
        rest local.  No frozen weights are retained for virtualized layers."""
        cfg = model.config
        base_layer_set = set(base_layer_set)
        for addr in base_layer_set:
            validate_address(cfg, addr)
        if base_layer_set and channel is None:
            raise ConfigError("virtualized layers require a transport channel")
        layers = {}
        for addr in base_addresses(cfg):
            if addr in base_layer_set:
                d_in, d_out = layer_dims(cfg, addr.role)
                layers[addr] = VirtLayer(addr, d_in, d_out, channel, noise)
            else:
                layers[addr] = LocalAffine(model.layers[addr])
        return cls(cfg, model.embedding, model.attn_gains, model.ffn_gains,
                   model.final_gain, layers)

    @classmethod
    def from_client_half(cls, config: ModelConfig, embedding, attn_gains,
                         ffn_gains, final_gain, channel,
                         noise: NoiseSet | None = None) -> "ClientModel":
        """Fully virtualized model built from the client half of a
        checkpoint; no base weights ever touch this process."""
        layers = {}
        for addr in base_addresses(config):
            d_in, d_out = layer_dims(config, addr.role)
            layers[addr] = VirtLayer(addr, d_in, d_out, channel, noise)
        return cls(config, embedding, attn_gains, ffn_gains, final_gain, layers)

    def n_virtual(self) -> int:
        return sum(1 for l in self.layers.values() if isinstance(l, VirtLayer))

    def local_frozen_bytes(self) -> int:
        return sum(l.nbytes for l in self.layers.values()
                   if isinstance(l, LocalAffine))

    def client_weight_bytes(self) -> int:
        gains = sum(g.nbytes for g in self.attn_gains) + \
            sum(g.nbytes for g in self.ffn_gains) + self.final_gain.nbytes
        return self.embedding.nbytes + gains

    # -- forward --------------------------------------------------------------

    def _apply(self, adapter, addr: LayerAddress, x: np.ndarray,
               iteration: int) -> tuple[np.ndarray, np.ndarray]:
        y_base = self.layers[addr].forward(x, iteration)
        return apply_adapter(adapter, addr, x, y_base), y_base

    def forward(self, adapter: AdapterState | None, tokens: np.ndarray,
                kv: KVCache | None = None, iteration: int = 0,
                tape: dict | None = None) -> np.ndarray:
        """Same contract as the monolithic reference forward.

        With tape (fine-tuning), client-side inputs of adapter layers and
        attention intermediates are saved; nothing is saved executor-side.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ConfigError(f"tokens must be [batch, seq], got {tokens.shape}")
        if tokens.min(initial=0) < 0 or tokens.max(initial=-1) >= cfg.vocab_size:
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        b, t = tokens.shape
        offset = kv.positions if kv is not None else 0
        if offset + t > cfg.max_seq:
            raise ConfigError(f"sequence {offset + t} exceeds max_seq {cfg.max_seq}")
        if tape is not None and kv is not None:
            raise JobStateError("training forward does not use a KV cache")

        d = cfg.d_model
        h = self.embedding[tokens]
        if tape is not None:
            tape.update(b=b, t=t, blocks=[])
        for blk in range(cfg.n_layers):
            e: dict = {}
            x = h.reshape(b * t, d)
            a = rmsnorm(x, self.attn_gains[blk])
            q, _ = self._apply(adapter, LayerAddress(blk, Role.Q), a, iteration)
            k, k_base = self._apply(adapter, LayerAddress(blk, Role.K), a, iteration)
            v, v_base = self._apply(adapter, LayerAddress(blk, Role.V), a, iteration)
            q = q.reshape(b, t, d)
            k = k.reshape(b, t, d)
            v = v.reshape(b, t, d)
            if kv is not None:
                k_all, v_all = kv.append(blk, k, v)
            else:
                k_all, v_all = k, v
            attn = np.empty((b, t, d), dtype=h.dtype)
            probs: list = []
            for s in range(b):
                head_tape: list | None = [] if tape is not None else None
                attn[s] = attention_forward(q[s], k_all[s], v_all[s],
                                            cfg.n_heads, q_offset=offset,
                                            tape=head_tape)
                if tape is not None:
                    probs.append(head_tape)
            attn_flat = attn.reshape(b * t, d)
            o, _ = self._apply(adapter, LayerAddress(blk, Role.O), attn_flat,
                               iteration)
            h = h + o.reshape(b, t, d)
            x2 = h.reshape(b * t, d)
            f = rmsnorm(x2, self.ffn_gains[blk])
            u, u_base = self._apply(adapter, LayerAddress(blk, Role.FF_UP), f,
                                    iteration)
            s_act = silu(u)
            dn, _ = self._apply(adapter, LayerAddress(blk, Role.FF_DOWN), s_act,
                                iteration)
            h = h + dn.reshape(b, t, d)
            if tape is not None:
                e.update(x_attn=x, a=a, q=q, k=k, v=v, k_base=k_base,
                         v_base=v_base, probs=probs, attn_flat=attn_flat,
                         x_ffn=x2, f=f, u_base=u_base, u_post=u, s_act=s_act)
                tape["blocks"].append(e)
        final_in = h.reshape(b * t, d)
        g = rmsnorm(final_in, self.final_gain)
        head_addr = LayerAddress(cfg.n_layers, Role.LM_HEAD)
        logits, _ = self._apply(adapter, head_addr, g, iteration)
        if tape is not None:
            tape.update(final_in=final_in, g=g)
        return logits.reshape(b, t, cfg.vocab_size)

    # -- backward --------------------------------------------------------------

    def _layer_backward(self, adapter, addr: LayerAddress, x_saved: np.ndarray,
                        grad_y: np.ndarray, grads: dict,
                        y_base: np.ndarray | None = None) -> np.ndarray:
        g = grad_y
        if adapter is not None:
            scale = adapter.ia3.get(addr)
            if scale is not None:
                _accumulate(grads, (addr, "l"), np.sum(g * y_base, axis=0))
                g = g * scale
        grad_x = self.layers[addr].backward(g)
        if adapter is not None:
            pair = adapter.lora.get(addr)
            if pair is not None:
                a, bmat = pair
                ga, gb, gx = lora_backward(x_saved, g, a, bmat,
                                           adapter.alpha, adapter.rank)
                _accumulate(grads, (addr, "a"), ga)
                _accumulate(grads, (addr, "b"), gb)
                grad_x = grad_x + gx
        return grad_x

    def backward(self, adapter: AdapterState | None, tape: dict,
                 grad_logits: np.ndarray) -> dict:
        """Reverse traversal; grad_x of frozen layers comes from the executor
        (weights only), adapter grads from client-saved inputs."""
        cfg = self.config
        b, t = tape["b"], tape["t"]
        d = cfg.d_model
        gl = grad_logits.reshape(b * t, cfg.vocab_size)
        grads: dict = {}
        head_addr = LayerAddress(cfg.n_layers, Role.LM_HEAD)
        grad_g = self._layer_backward(adapter, head_addr, tape["g"], gl, grads)
        grad_h = rmsnorm_backward(grad_g, tape["final_in"], self.final_gain)
        for blk in range(cfg.n_layers - 1, -1, -1):
            e = tape["blocks"][blk]
            # feed-forward branch
            grad_s = self._layer_backward(adapter, LayerAddress(blk, Role.FF_DOWN),
                                          e["s_act"], grad_h, grads)
            grad_u = silu_backward(grad_s, e["u_post"])
            grad_f = self._layer_backward(adapter, LayerAddress(blk, Role.FF_UP),
                                          e["f"], grad_u, grads,
                                          y_base=e["u_base"])
            grad_h = grad_h + rmsnorm_backward(grad_f, e["x_ffn"],
                                               self.ffn_gains[blk])
            # attention branch
            grad_attn = self._layer_backward(adapter, LayerAddress(blk, Role.O),
                                             e["attn_flat"], grad_h, grads)
            ga3 = grad_attn.reshape(b, t, d)
            gq = np.empty((b, t, d), dtype=ga3.dtype)
            gk = np.empty_like(gq)
            gv = np.empty_like(gq)
            for s in range(b):
                gq[s], gk[s], gv[s] = attention_backward(
                    ga3[s], e["q"][s], e["k"][s], e["v"][s], e["probs"][s],
                    cfg.n_heads)
            grad_a = self._layer_backward(adapter, LayerAddress(blk, Role.Q),
                                          e["a"], gq.reshape(b * t, d), grads)
            grad_a = grad_a + self._layer_backward(
                adapter, LayerAddress(blk, Role.K), e["a"],
                gk.reshape(b * t, d), grads, y_base=e["k_base"])
            grad_a = grad_a + self._layer_backward(
                adapter, LayerAddress(blk, Role.V), e["a"],
                gv.reshape(b * t, d), grads, y_base=e["v_base"])
            grad_h = grad_h + rmsnorm_backward(grad_a, e["x_attn"],
                                               self.attn_gains[blk])
        return grads


def _accumulate(grads: dict, key, value) -> None:
    prev = grads.get(key)
    grads[key] = value if prev is None else prev + value


def tape_nbytes(tape: dict) -> int:
    total = 0
    stack = [tape]
    while stack:
        item = stack.pop()
        if isinstance(item, np.ndarray):
            total += item.nbytes
        elif isinstance(item, dict):
            stack.extend(item.values())
        elif isinstance(item, (list, tuple)):
            stack.extend(item)
    return total


# ---------------------------------------------------------------------------
# jobs

@dataclass
class JobConfig:
    """One client's job description (the on-disk format is this as JSON)."""

    kind: str = "inference"            # inference | finetune
    adapter_method: str = "none"       # none | lora | ia3
    rank: int = 8
    alpha: float = 16.0
    targets: tuple = ("Q", "K", "V", "O")
    adapter_seed: int = 0
    batch_size: int = 1
    seq_len: int = 16
    steps: int = 1                     # fine-tune iterations
    prompt_len: int = 8                # inference
    gen_tokens: int = 8
    placement: str = "fast"            # KV cache placement
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    optimizer: str = "adam"
    lr: float = 0.01
    data_seed: int = 0
    endpoint: str = "local"            # local | tcp://host:port

    def __post_init__(self):
        if self.kind not in ("inference", "finetune"):
            raise ConfigError(f"unknown job kind {self.kind!r}")
        if self.adapter_method not in ("none", "lora", "ia3"):
            raise ConfigError(f"unknown adapter method {self.adapter_method!r}")

    def target_roles(self) -> list[Role]:
        try:
            return [Role[name.upper()] for name in self.targets]
        except KeyError as exc:
            raise ConfigError(f"unknown adapter target {exc.args[0]!r}") from exc

    @classmethod
    def from_dict(cls, data: dict) -> "JobConfig":
        data = dict(data)
        privacy = data.pop("privacy", None)
        cfg = cls(**data)
        if privacy is not None:
            cfg.privacy = PrivacyConfig(**privacy)
        if cfg.targets is not None:
            cfg.targets = tuple(cfg.targets)
        return cfg

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "privacy"}
        out["targets"] = list(self.targets)
        out["privacy"] = dict(self.privacy.__dict__)
        return out


def make_adapter(model_config: ModelConfig, job: JobConfig) -> AdapterState | None:
    if job.adapter_method == "none":
        return None
    if job.adapter_method == "lora":
        return AdapterState.init_lora(model_config, job.rank, job.alpha,
                                      job.target_roles(), job.adapter_seed)
    return AdapterState.init_ia3(model_config, job.target_roles(),
                                 job.adapter_seed)


class ClientJob:
    """One logical execution stream: a single inference or fine-tuning job.

    Drives at most one layer request at a time; many jobs may run
    concurrently as separate streams sharing nothing but the executor."""

    def __init__(self, job_id: int, job_config: JobConfig, model: ClientModel,
                 adapter: AdapterState | None = None, optimizer=None):
        self.job_id = job_id
        self.config = job_config
        self.model = model
        self.adapter = adapter
        self.optimizer = optimizer
        if job_config.kind == "finetune" and optimizer is None:
            self.optimizer = make_optimizer(job_config.optimizer, job_config.lr)
        self.iteration = 0
        self.metrics: list[dict] = []
        self.record_logits = False     # harness: keep every forward's logits
        self.logit_log: list[np.ndarray] = []
        self.peak_bytes = 0            # high-water mark of the ledger total
        self.ledger = ledger_mod.MemoryLedger(f"client{job_id}")
        self.ledger.set(ledger_mod.WEIGHTS, model.client_weight_bytes())
        if adapter is not None:
            self.ledger.set(ledger_mod.ADAPTER, adapter.nbytes())
        self._tape: dict | None = None

    # -- spec surface ---------------------------------------------------------

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        tape = {} if self.config.kind == "finetune" else None
        logits = self.model.forward(self.adapter, tokens, iteration=self.iteration,
                                    tape=tape)
        self._tape = tape
        if tape is not None:
            self.ledger.set(ledger_mod.SAVED_ACTIVATIONS, tape_nbytes(tape))
        self._note(logits)
        return logits

    def _note(self, logits: np.ndarray) -> None:
        if self.record_logits:
            self.logit_log.append(np.array(logits, copy=True))
        self.peak_bytes = max(self.peak_bytes, self.ledger.total())

    def backward(self, grad_logits: np.ndarray) -> dict:
        if self.config.kind != "finetune":
            raise JobStateError("inference job cannot run a backward pass")
        if not self._tape:
            raise JobStateError("backward without a completed forward")
        grads = self.model.backward(self.adapter, self._tape, grad_logits)
        self._tape = None
        self.ledger.set(ledger_mod.SAVED_ACTIVATIONS, 0)
        return grads

    def train_step(self, tokens: np.ndarray, targets: np.ndarray) -> float:
        if self.config.kind != "finetune":
            raise JobStateError("train_step requires a fine-tune job")
        start = time.perf_counter()
        logits = self.forward(tokens)
        flat = logits.reshape(-1, self.model.config.vocab_size)
        loss, grad = cross_entropy(flat, np.asarray(targets).reshape(-1))
        grads = self.backward(grad)
        self.optimizer.step(self.adapter, grads)
        self.ledger.set(ledger_mod.ADAPTER, self.adapter.nbytes())
        self.ledger.set(ledger_mod.OPTIMIZER, self.adapter.moment_bytes())
        self.iteration += 1
        tokens_n = int(np.asarray(tokens).size)
        elapsed = time.perf_counter() - start
        self.metrics.append({"iteration": self.iteration, "kind": "train",
                             "latency_s": elapsed, "tokens": tokens_n,
                             "loss": loss})
        return loss

    def generate(self, prompt: np.ndarray, n_tokens: int,
                 placement: str | None = None) -> np.ndarray:
        prompt = np.asarray(prompt)
        if prompt.ndim == 1:
            prompt = prompt[None, :]
        cfg = self.model.config
        if prompt.shape[1] + n_tokens > cfg.max_seq:
            raise ConfigError(
                f"prompt {prompt.shape[1]} + {n_tokens} tokens exceeds "
                f"max_seq {cfg.max_seq}")
        if n_tokens == 0:
            return prompt.copy()
        kv = KVCache(cfg, prompt.shape[0], placement or self.config.placement)
        self.last_kv = kv
        out = prompt
        start = time.perf_counter()
        logits = self.model.forward(self.adapter, prompt, kv=kv,
                                    iteration=self.iteration)
        self._note(logits)
        for i in range(n_tokens):
            nxt = np.argmax(logits[:, -1, :], axis=-1).astype(out.dtype)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            elapsed = time.perf_counter() - start
            self.metrics.append({"iteration": self.iteration, "kind": "decode",
                                 "latency_s": elapsed,
                                 "tokens": int(prompt.shape[0]), "loss": ""})
            self.ledger.set(ledger_mod.KV_CACHE, kv.nbytes())
            if i < n_tokens - 1:
                start = time.perf_counter()
                self.iteration += 1
                logits = self.model.forward(self.adapter, nxt[:, None], kv=kv,
                                            iteration=self.iteration)
                self._note(logits)
                kv.record_decode_step()
        self.iteration += 1
        return out
