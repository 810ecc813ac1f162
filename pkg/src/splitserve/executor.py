"""The shared base-layer service.

Hosts the frozen affine layers and answers per-layer forward / backward /
noise-effect requests from many clients.  Requests for the same layer and
pass are batched by concatenating their token rows (no padding), executed
once, and split back, so batching is invisible in every client's results.
The executor retains nothing between requests: backward needs only the
frozen weights, so a backward may arrive with no matching forward.
"""

from __future__ import annotations

import csv
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from . import ledger as ledger_mod
from .config import LayerAddress, Role
from .errors import ConfigError, ProtocolError
from .protocol import (COMPUTE_PASSES, PASS_BACKWARD, PASS_FORWARD,
                       PASS_NOISE_EFFECT, Envelope, error_envelope)
from .tensor_ops import (AffineParams, affine_backward_input, affine_forward,
                         concat_rows, matmul, split_rows)

POLICY_MODES = ("nolockstep", "lockstep", "opportunistic")


@dataclass
class BatchPolicy:
    """How long a layer's queue may ripen before dispatch.

    The wait budget of a pending batch is min(wait_cap, wait_per_token *
    smallest member's token count): small latency-sensitive requests flush
    quickly, large ones can afford to wait for company.
    dispatch_cost models a fixed per-dispatch overhead (kernel launch /
    wakeup) and is only used by scheduling experiments.
    """

    mode: str = "opportunistic"
    wait_per_token: float = 0.0001
    wait_cap: float = 0.050
    max_batch_tokens: int = 8192
    dispatch_cost: float = 0.0

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if self.wait_per_token < 0 or self.wait_cap < 0:
            raise ConfigError("wait durations must be non-negative")

    def wait_budget(self, token_counts) -> float:
        return min(self.wait_cap, self.wait_per_token * min(token_counts))


@dataclass
class ExecutorMetrics:
    batch_sizes: dict = field(default_factory=lambda: defaultdict(list))
    batch_tokens: dict = field(default_factory=lambda: defaultdict(list))
    wait_times: dict = field(default_factory=lambda: defaultdict(list))
    dispatches: int = 0

    def record(self, key, size: int, tokens: int, waits: list[float]) -> None:
        self.batch_sizes[key].append(size)
        self.batch_tokens[key].append(tokens)
        self.wait_times[key].extend(waits)
        self.dispatches += 1

    def mean_batch_size(self) -> float:
        sizes = [s for v in self.batch_sizes.values() for s in v]
        return float(np.mean(sizes)) if sizes else 0.0

    def max_wait(self) -> float:
        waits = [w for v in self.wait_times.values() for w in v]
        return max(waits, default=0.0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "role", "pass", "batch_size", "tokens",
                        "mean_wait_s"])
            for key in sorted(self.batch_sizes):
                block, role, pass_kind = key
                waits = self.wait_times[key]
                mean_wait = float(np.mean(waits)) if waits else 0.0
                for size, tokens in zip(self.batch_sizes[key],
                                        self.batch_tokens[key]):
                    w.writerow([block, Role(role).name, pass_kind, size,
                                tokens, mean_wait])


class BaseExecutor:
    """Stateless layer server with a single scheduler loop."""

    def __init__(self, layers: dict[LayerAddress, AffineParams],
                 policy: BatchPolicy | None = None,
                 save_activations: bool = False):
        self.layers = dict(layers)
        self.policy = policy or BatchPolicy()
        # Test-only mode modeling the unoptimized backward that stores
        # forward tensors at the server; never read back.
        self.save_activations = save_activations
        self._saved_debug: list = []
        self._queues: dict[tuple, deque] = defaultdict(deque)
        self._cond = threading.Condition()
        self._clients: dict[int, bool] = {}
        self._last_request_id: dict[int, int] = {}
        self._running = False
        self._thread: threading.Thread | None = None
        self.metrics = ExecutorMetrics()
        self.ledger = ledger_mod.MemoryLedger("executor")
        self.ledger.set(ledger_mod.WEIGHTS,
                        sum(p.nbytes for p in self.layers.values()))

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "BaseExecutor":
        with self._cond:
            if self._running:
                return self
            self._running = True
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name="base-executor")
        self._thread.start()
        return self

    def stop(self, drain: bool = True) -> None:
        if drain:
            with self._cond:
                while self._running and any(self._queues.values()):
                    self._cond.wait(0.01)
        with self._cond:
            self._running = False
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- client registry ----------------------------------------------------

    def register(self, client_id: int, sends_backward: bool = False) -> None:
        with self._cond:
            self._clients[client_id] = sends_backward
            self._cond.notify_all()

    def deregister(self, client_id: int) -> None:
        with self._cond:
            self._clients.pop(client_id, None)
            self._cond.notify_all()

    # -- request intake ------------------------------------------------------

    def submit(self, env: Envelope, reply_fn) -> None:
        if env.pass_kind not in COMPUTE_PASSES:
            reply_fn(error_envelope(env, f"unknown pass {env.pass_kind}"))
            return
        last = self._last_request_id.get(env.client_id)
        if last is not None and env.request_id <= last:
            reply_fn(error_envelope(
                env, f"request_id {env.request_id} not increasing (last {last})"))
            return
        self._last_request_id[env.client_id] = env.request_id
        if env.layer not in self.layers:
            reply_fn(error_envelope(env, f"unknown layer {env.layer}"))
            return
        key = (env.block, env.role, env.pass_kind)
        with self._cond:
            self._queues[key].append((env, reply_fn, time.monotonic()))
            self._cond.notify_all()

    # -- pure batch execution (also the unit-test surface) -------------------

    def serve_forward(self, envelopes: list[Envelope]) -> list:
        return self._compute_batch(PASS_FORWARD, envelopes)

    def serve_backward(self, envelopes: list[Envelope]) -> list:
        return self._compute_batch(PASS_BACKWARD, envelopes)

    def serve_noise_effect(self, envelope: Envelope):
        return self._compute_batch(PASS_NOISE_EFFECT, [envelope])[0]

    def _compute_batch(self, pass_kind: int, envelopes: list[Envelope]) -> list:
        """Run one batch; per-envelope result is an ndarray or ProtocolError.

        A malformed envelope fails alone; the batch proceeds without it.
        """
        if not envelopes:
            return []
        addr = envelopes[0].layer
        params = self.layers[addr]
        expected = params.d_out if pass_kind == PASS_BACKWARD else params.d_in
        results: list = [None] * len(envelopes)
        good: list[int] = []
        for i, env in enumerate(envelopes):
            if env.layer != addr:
                results[i] = ProtocolError(f"layer mismatch in batch: {env.layer} != {addr}")
            elif env.pass_kind != pass_kind:
                results[i] = ProtocolError(f"pass mismatch in batch: {env.pass_kind}")
            elif env.width != expected:
                results[i] = ProtocolError(
                    f"row width {env.width} does not match layer {addr} "
                    f"expected {expected}")
            else:
                good.append(i)
        if not good:
            return results
        x = concat_rows([envelopes[i].payload for i in good])
        if pass_kind == PASS_FORWARD:
            out = affine_forward(x, params)
        elif pass_kind == PASS_BACKWARD:
            out = affine_backward_input(x, params)
        else:  # noise effect: bias forced to zero
            out = matmul(x, params.weight)
        self.ledger.set(ledger_mod.TRANSIENT_BUFFER, x.nbytes + out.nbytes)
        self.ledger.set(ledger_mod.TRANSIENT_BUFFER, 0)
        if self.save_activations and pass_kind == PASS_FORWARD:
            self._saved_debug.append((x.copy(), out.copy()))
            self.ledger.add(ledger_mod.SAVED_ACTIVATIONS, x.nbytes + out.nbytes)
        for i, rows in zip(good, split_rows(out, [envelopes[i].token_count
                                                  for i in good])):
            results[i] = rows
        return results

    # -- scheduler -----------------------------------------------------------

    def _loop(self) -> None:
        while True:
            with self._cond:
                while True:
                    if not self._running:
                        return
                    picked, timeout = self._pick_ready(time.monotonic())
                    if picked is not None:
                        break
                    self._cond.wait(timeout)
            self._dispatch(*picked)

    def _pick_ready(self, now: float):
        """Returns ((key, entries), None) when a batch is ready, else
        (None, seconds_until_next_deadline_or_None).  Must hold the lock."""
        next_deadline = None
        for key, queue in self._queues.items():
            if not queue:
                continue
            _, _, pass_kind = key
            if pass_kind == PASS_NOISE_EFFECT or self.policy.mode == "nolockstep":
                # never batched: one envelope per dispatch
                entry = queue.popleft()
                return (key, [entry]), None
            if self.policy.mode == "lockstep":
                required = {cid for cid, bwd in self._clients.items()
                            if pass_kind == PASS_FORWARD or bwd}
                present = {env.client_id for env, _, _ in queue}
                if required <= present:
                    entries = list(queue)
                    queue.clear()
                    return (key, entries), None
                continue  # no deadline; woken by submits/deregisters
            # opportunistic
            tokens = [env.token_count for env, _, _ in queue]
            oldest = min(arrival for _, _, arrival in queue)
            if sum(tokens) >= self.policy.max_batch_tokens:
                entries = list(queue)
                queue.clear()
                return (key, entries), None
            deadline = oldest + self.policy.wait_budget(tokens)
            if now >= deadline:
                entries = list(queue)
                queue.clear()
                return (key, entries), None
            remaining = deadline - now
            if next_deadline is None or remaining < next_deadline:
                next_deadline = remaining
        return None, next_deadline

    def _dispatch(self, key, entries) -> None:
        block, role, pass_kind = key
        now = time.monotonic()
        if self.policy.dispatch_cost > 0:
            time.sleep(self.policy.dispatch_cost)
        envelopes = [env for env, _, _ in entries]
        results = self._compute_batch(pass_kind, envelopes)
        self.metrics.record(key, len(entries),
                            sum(e.token_count for e in envelopes),
                            [now - arrival for _, _, arrival in entries])
        for (env, reply_fn, _), result in zip(entries, results):
            if isinstance(result, ProtocolError):
                reply_fn(error_envelope(env, str(result)))
            else:
                reply_fn(Envelope(env.client_id, env.request_id, env.block,
                                  env.role, env.pass_kind, result))
