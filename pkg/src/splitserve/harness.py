"""Scenario runner: one executor plus N configured client jobs.

A scenario (JSON file or built-in name) declares the model, the batching
policy, and a list of jobs.  `run` launches everything — in-process threads
or separate OS processes over the byte-stream channel — and collects per-job
results, executor metrics, and memory ledgers.  `verify` replays each job
against the monolithic reference path and prints a pass/fail table; it is
the oracle entry point.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import multiprocessing
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import ledger as ledger_mod
from .client import ClientJob, ClientModel, JobConfig, make_adapter
from .config import ModelConfig, base_addresses, max_layer_width
from .errors import ConfigError
from .executor import BaseExecutor, BatchPolicy, ExecutorMetrics
from .ledger import MemoryLedger, kv_cache_bytes, write_ledger_csv
from .model import (RefKVCache, build_model, load_base_half, load_client_half,
                    reference_forward, save_checkpoint)
from .privacy import precompute_noise
from .tensor_ops import cross_entropy
from .transport import ExecutorServer, LocalChannel, RemoteChannel

JOB_TIMEOUT_S = 300.0


# ---------------------------------------------------------------------------
# scenario description

@dataclass
class Scenario:
    name: str
    model: ModelConfig
    policy: BatchPolicy
    jobs: list[JobConfig]
    mode: str = "thread"               # thread | process
    output_dir: str | None = None
    base_checkpoint: str | None = None  # executor loads weights here if set

    def __post_init__(self):
        if self.mode not in ("thread", "process"):
            raise ConfigError(f"unknown scenario mode {self.mode!r}")
        if self.mode == "process":
            for job in self.jobs:
                if job.endpoint != "tcp":
                    raise ConfigError(
                        "process mode requires every job endpoint to be 'tcp'")

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            return cls(
                name=data.get("name", "scenario"),
                model=ModelConfig(**data["model"]),
                policy=BatchPolicy(**data.get("policy", {})),
                jobs=[JobConfig.from_dict(j) for j in data.get("jobs", [])],
                mode=data.get("mode", "thread"),
                output_dir=data.get("output_dir"),
                base_checkpoint=data.get("base_checkpoint"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "Scenario":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"scenario file {path} line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "model": dict(self.model.__dict__),
            "policy": dict(self.policy.__dict__),
            "jobs": [j.to_dict() for j in self.jobs],
            "mode": self.mode,
            "output_dir": self.output_dir,
            "base_checkpoint": self.base_checkpoint,
        }


def _small_model(**overrides) -> ModelConfig:
    base = dict(n_layers=2, d_model=32, n_heads=4, d_ff=64, vocab_size=64,
                max_seq=128, seed=1)
    base.update(overrides)
    return ModelConfig(**base)


def _ft_job(**overrides) -> JobConfig:
    base = dict(kind="finetune", adapter_method="lora", rank=4, alpha=8.0,
                targets=("Q", "V", "LM_HEAD"), batch_size=2, seq_len=8,
                steps=4, optimizer="adam", lr=0.01)
    base.update(overrides)
    return JobConfig(**base)


def _inf_job(**overrides) -> JobConfig:
    base = dict(kind="inference", adapter_method="none", batch_size=1,
                prompt_len=8, gen_tokens=4)
    base.update(overrides)
    return JobConfig(**base)


def named_scenario(name: str) -> Scenario:
    """The built-in experiment shapes."""
    if name == "single-ft":
        return Scenario(name, _small_model(),
                        BatchPolicy(mode="opportunistic"),
                        [_ft_job(data_seed=1, adapter_seed=1)])
    if name == "multi-ft":
        jobs = [_ft_job(data_seed=i, adapter_seed=i) for i in range(4)]
        return Scenario(name, _small_model(), BatchPolicy(), jobs)
    if name == "remote-ft":
        jobs = [_ft_job(data_seed=i, adapter_seed=i, endpoint="tcp")
                for i in range(2)]
        return Scenario(name, _small_model(), BatchPolicy(), jobs)
    if name == "mixed":
        jobs = [_inf_job(data_seed=i) for i in range(6)]
        jobs += [_ft_job(data_seed=10 + i, adapter_seed=10 + i, steps=3)
                 for i in range(2)]
        return Scenario(name, _small_model(), BatchPolicy(), jobs)
    if name == "policy-sweep":
        # strongly heterogeneous token counts (4 .. 2048 per request) so
        # lockstep visibly stalls small clients; equal step counts keep
        # lockstep live until all clients deregister together
        jobs = [_ft_job(data_seed=i, adapter_seed=i, batch_size=b, seq_len=s,
                        steps=3)
                for i, (b, s) in enumerate(
                    [(1, 4), (1, 8), (2, 8), (2, 16), (4, 32), (8, 64),
                     (16, 64), (16, 128)])]
        policy = BatchPolicy(mode="opportunistic", wait_per_token=0.0002,
                             wait_cap=0.004, dispatch_cost=0.001)
        return Scenario(name, _small_model(max_seq=512), policy, jobs)
    if name == "long-context":
        job = _inf_job(prompt_len=16, gen_tokens=48, placement="offloaded")
        return Scenario(name, _small_model(max_seq=256), BatchPolicy(), [job])
    if name == "privacy":
        jobs = [_ft_job(data_seed=1, adapter_seed=1, steps=2),
                _inf_job(data_seed=2)]
        for j in jobs:
            j.privacy.enabled = True
        return Scenario(name, _small_model(), BatchPolicy(), jobs)
    raise ConfigError(f"unknown scenario name {name!r}")


NAMED_SCENARIOS = ("single-ft", "multi-ft", "remote-ft", "mixed",
                   "policy-sweep", "long-context", "privacy")


# ---------------------------------------------------------------------------
# deterministic job data

def train_batch(config: ModelConfig, job: JobConfig, step: int):
    """Copy task: the target at each position is the token at that position."""
    rng = np.random.default_rng([job.data_seed, step])
    tokens = rng.integers(config.vocab_size, size=(job.batch_size, job.seq_len))
    return tokens, tokens.copy()


def prompt_batch(config: ModelConfig, job: JobConfig) -> np.ndarray:
    rng = np.random.default_rng([job.data_seed, 10_000])
    return rng.integers(config.vocab_size,
                        size=(job.batch_size, job.prompt_len))


# ---------------------------------------------------------------------------
# per-job execution (shared by thread and process modes)

@dataclass
class JobResult:
    job_id: int
    kind: str
    losses: list[float] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    generated: np.ndarray | None = None
    metrics: list[dict] = field(default_factory=list)
    ledger: MemoryLedger | None = None
    peak_bytes: int = 0
    transfer_on_fast: list[int] = field(default_factory=list)
    transfer_on_offloaded: list[int] = field(default_factory=list)
    error: str | None = None


def _drive_job(job: ClientJob, config: ModelConfig) -> JobResult:
    jcfg = job.config
    job.record_logits = True
    result = JobResult(job.job_id, jcfg.kind)
    if jcfg.kind == "finetune":
        for step in range(jcfg.steps):
            tokens, targets = train_batch(config, jcfg, step)
            result.losses.append(job.train_step(tokens, targets))
    else:
        prompt = prompt_batch(config, jcfg)
        result.generated = job.generate(prompt, jcfg.gen_tokens)
        kv = getattr(job, "last_kv", None)
        if kv is not None:
            result.transfer_on_fast = list(kv.transfer_compute_on_fast)
            result.transfer_on_offloaded = list(kv.transfer_compute_on_offloaded)
    result.logits = job.logit_log
    result.metrics = job.metrics
    result.ledger = job.ledger
    result.peak_bytes = job.peak_bytes
    return result


def _build_job(job_id: int, jcfg: JobConfig, config: ModelConfig, channel,
               client_parts=None, base_model=None) -> ClientJob:
    noise = None
    if jcfg.privacy.enabled:
        t_max = jcfg.batch_size * max(jcfg.seq_len, jcfg.prompt_len)
        noise = precompute_noise(channel, config, jcfg.privacy.k,
                                 jcfg.privacy.scale, jcfg.privacy.seed, t_max)
    if client_parts is not None:
        embedding, attn, ffn, final = client_parts
        model = ClientModel.from_client_half(config, embedding, attn, ffn,
                                             final, channel, noise)
    else:
        model = ClientModel.virtualize(base_model, set(base_addresses(config)),
                                       channel, noise)
    adapter = make_adapter(config, jcfg)
    return ClientJob(job_id, jcfg, model, adapter)


def _process_worker(job_id: int, job_dict: dict, checkpoint: str,
                    host: str, port: int) -> JobResult:
    """Entry point for one client OS process: only the client half of the
    checkpoint is loaded; weights stay with the executor."""
    jcfg = JobConfig.from_dict(job_dict)
    config, *client_parts = load_client_half(checkpoint)
    channel = RemoteChannel(host, port, client_id=job_id)
    try:
        channel.register(sends_backward=(jcfg.kind == "finetune"))
        job = _build_job(job_id, jcfg, config, channel,
                         client_parts=tuple(client_parts))
        result = _drive_job(job, config)
        channel.deregister()
        return result
    except Exception as exc:  # reported in the parent, not raised here
        return JobResult(job_id, jcfg.kind, error=f"{type(exc).__name__}: {exc}")
    finally:
        channel.close()


# ---------------------------------------------------------------------------
# scenario runner

@dataclass
class RunResult:
    scenario: Scenario
    jobs: dict[int, JobResult]
    executor_metrics: ExecutorMetrics
    executor_ledger: MemoryLedger
    elapsed: float

    @property
    def ok(self) -> bool:
        return all(j.error is None for j in self.jobs.values())

    def errors(self) -> list[str]:
        return [f"job {j.job_id}: {j.error}" for j in self.jobs.values()
                if j.error is not None]

    def total_tokens(self) -> int:
        return sum(int(row["tokens"]) for j in self.jobs.values()
                   for row in j.metrics)

    def throughput(self) -> float:
        return self.total_tokens() / self.elapsed if self.elapsed > 0 else 0.0


def run(scenario: Scenario, output_dir: str | None = None) -> RunResult:
    if scenario.base_checkpoint is not None:
        _, layers = load_base_half(scenario.base_checkpoint)
    else:
        layers = build_model(scenario.model).layers
    executor = BaseExecutor(layers, scenario.policy)
    executor.start()
    start = time.perf_counter()
    try:
        if scenario.mode == "process":
            results = _run_processes(scenario, executor)
        else:
            results = _run_threads(scenario, executor)
    finally:
        executor.stop()
    elapsed = time.perf_counter() - start
    result = RunResult(scenario, results, executor.metrics, executor.ledger,
                       elapsed)
    out = output_dir or scenario.output_dir
    if out is not None:
        write_reports(result, out)
    return result


def _run_threads(scenario: Scenario, executor: BaseExecutor) -> dict:
    config = scenario.model
    base_model = build_model(config)
    server = None
    if any(j.endpoint == "tcp" for j in scenario.jobs):
        server = ExecutorServer(executor).start()
    results: dict[int, JobResult] = {}
    jobs: list[tuple[ClientJob, object]] = []
    try:
        # register every client before any compute starts, so lockstep's
        # "all clients" set is complete from the first dispatch
        for job_id, jcfg in enumerate(scenario.jobs):
            if jcfg.endpoint == "tcp":
                channel = RemoteChannel(server.host, server.port, job_id)
            else:
                width = max_layer_width(config)
                channel = LocalChannel(executor, job_id, jcfg.batch_size,
                                       max(jcfg.seq_len, jcfg.prompt_len), width)
            channel.register(sends_backward=(jcfg.kind == "finetune"))
            jobs.append((_build_job(job_id, jcfg, config, channel,
                                    base_model=base_model), channel))

        def worker(job: ClientJob, channel) -> None:
            try:
                results[job.job_id] = _drive_job(job, config)
            except Exception as exc:
                results[job.job_id] = JobResult(
                    job.job_id, job.config.kind,
                    error=f"{type(exc).__name__}: {exc}")
            finally:
                try:
                    channel.deregister()
                except Exception:
                    pass

        threads = [threading.Thread(target=worker, args=pair, daemon=True)
                   for pair in jobs]
        for t in threads:
            t.start()
        for t in threads:
            t.join(JOB_TIMEOUT_S)
    finally:
        for _, channel in jobs:
            channel.close()
        if server is not None:
            server.stop()
    for job_id in range(len(scenario.jobs)):
        if job_id not in results:
            results[job_id] = JobResult(job_id, scenario.jobs[job_id].kind,
                                        error="job did not finish in time")
    return results


def _run_processes(scenario: Scenario, executor: BaseExecutor) -> dict:
    config = scenario.model
    model = build_model(config)
    results: dict[int, JobResult] = {}
    with tempfile.TemporaryDirectory() as tmp:
        checkpoint = scenario.base_checkpoint
        if checkpoint is None:
            checkpoint = os.path.join(tmp, "model.ckpt")
            save_checkpoint(model, checkpoint)
        with ExecutorServer(executor) as server:
            ctx = multiprocessing.get_context("spawn")
            with concurrent.futures.ProcessPoolExecutor(
                    max_workers=max(1, len(scenario.jobs)),
                    mp_context=ctx) as pool:
                futures = {
                    pool.submit(_process_worker, job_id, jcfg.to_dict(),
                                checkpoint, server.host, server.port): job_id
                    for job_id, jcfg in enumerate(scenario.jobs)}
                for fut in concurrent.futures.as_completed(
                        futures, timeout=JOB_TIMEOUT_S):
                    job_id = futures[fut]
                    try:
                        results[job_id] = fut.result()
                    except Exception as exc:
                        results[job_id] = JobResult(
                            job_id, scenario.jobs[job_id].kind,
                            error=f"{type(exc).__name__}: {exc}")
    return results


# ---------------------------------------------------------------------------
# report files

def write_reports(result: RunResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for job_id, job in sorted(result.jobs.items()):
        with open(os.path.join(out_dir, f"client{job_id}.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "kind", "latency_s", "tokens",
                        "tokens_per_s", "loss"])
            for row in job.metrics:
                rate = row["tokens"] / row["latency_s"] if row["latency_s"] > 0 else 0.0
                w.writerow([row["iteration"], row["kind"], row["latency_s"],
                            row["tokens"], rate, row["loss"]])
    result.executor_metrics.write_csv(os.path.join(out_dir, "executor.csv"))
    ledgers = [result.executor_ledger] + [
        j.ledger for _, j in sorted(result.jobs.items()) if j.ledger is not None]
    write_ledger_csv(os.path.join(out_dir, "ledger.csv"), ledgers)


# ---------------------------------------------------------------------------
# oracle verification

@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def render(self) -> str:
        width = max((len(c.name) for c in self.checks), default=10)
        lines = [f"{'check'.ljust(width)}  result  detail",
                 f"{'-' * width}  ------  ------"]
        for c in self.checks:
            lines.append(f"{c.name.ljust(width)}  {'PASS' if c.passed else 'FAIL':6}"
                         f"  {c.detail}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _replay_finetune(model, config: ModelConfig, jcfg: JobConfig,
                     recorded: JobResult, checks: list[Check], label: str,
                     tol: float = 1e-5) -> None:
    """Replays the job against the monolithic reference forward; adapter
    evolution reuses the pure-local client path (no executor involved)."""
    from .adapters import make_optimizer
    local = ClientModel.virtualize(model, set())
    adapter = make_adapter(config, jcfg)
    optimizer = make_optimizer(jcfg.optimizer, jcfg.lr)
    worst = 0.0
    ok = True
    detail = ""
    for step in range(jcfg.steps):
        tokens, targets = train_batch(config, jcfg, step)
        ref_logits = reference_forward(model, adapter, tokens)
        if step >= len(recorded.logits):
            ok, detail = False, f"missing logits for step {step}"
            break
        worst = max(worst, float(np.max(np.abs(
            ref_logits - recorded.logits[step]))))
        loss, grad = cross_entropy(
            ref_logits.reshape(-1, config.vocab_size), targets.reshape(-1))
        tape: dict = {}
        local.forward(adapter, tokens, tape=tape)
        grads = local.backward(adapter, tape, grad)
        optimizer.step(adapter, grads)
    if ok:
        ok = worst <= tol
        detail = f"max |logits diff| = {worst:.2e}"
    checks.append(Check(f"{label}-logits-vs-reference", ok, detail))


def _replay_inference(model, config: ModelConfig, jcfg: JobConfig,
                      recorded: JobResult, checks: list[Check], label: str,
                      tol: float = 1e-5) -> None:
    adapter = make_adapter(config, jcfg)
    prompt = prompt_batch(config, jcfg)
    kv = RefKVCache(config)
    out = prompt
    worst = 0.0
    logits = reference_forward(model, adapter, prompt, kv=kv)
    step_logits = [logits]
    for i in range(jcfg.gen_tokens):
        nxt = np.argmax(logits[:, -1, :], axis=-1).astype(out.dtype)
        out = np.concatenate([out, nxt[:, None]], axis=1)
        if i < jcfg.gen_tokens - 1:
            logits = reference_forward(model, adapter, nxt[:, None], kv=kv)
            step_logits.append(logits)
    tokens_ok = (recorded.generated is not None
                 and np.array_equal(out, recorded.generated))
    checks.append(Check(f"{label}-greedy-tokens", tokens_ok,
                        "generated ids match reference" if tokens_ok
                        else "generated ids differ from reference"))
    if len(recorded.logits) == len(step_logits):
        for ref, got in zip(step_logits, recorded.logits):
            worst = max(worst, float(np.max(np.abs(ref - got))))
        checks.append(Check(f"{label}-decode-logits", worst <= tol,
                            f"max |logits diff| = {worst:.2e}"))
    else:
        checks.append(Check(f"{label}-decode-logits", False,
                            f"{len(recorded.logits)} recorded passes, "
                            f"expected {len(step_logits)}"))


def verify(scenario: Scenario, result: RunResult | None = None) -> VerifyReport:
    if result is None:
        result = run(scenario)
    config = scenario.model
    model = build_model(config)
    checks: list[Check] = []
    for err in result.errors():
        checks.append(Check("job-completion", False, err))
    for job_id, job in sorted(result.jobs.items()):
        if job.error is not None:
            continue
        jcfg = scenario.jobs[job_id]
        label = f"job{job_id}"
        if jcfg.kind == "finetune":
            if jcfg.steps > 0:
                _replay_finetune(model, config, jcfg, job, checks, label)
        else:
            if jcfg.gen_tokens > 0:
                _replay_inference(model, config, jcfg, job, checks, label)
                if job.ledger is not None:
                    expect = kv_cache_bytes(
                        config, jcfg.prompt_len + jcfg.gen_tokens - 1,
                        jcfg.batch_size)
                    got = job.ledger.get(ledger_mod.KV_CACHE)
                    checks.append(Check(
                        f"{label}-kv-ledger-formula", got == expect,
                        f"ledger {got} vs closed form {expect}"))
    expect_w = sum(p.nbytes for p in build_model(config).layers.values())
    got_w = result.executor_ledger.get(ledger_mod.WEIGHTS)
    checks.append(Check("executor-weight-ledger", got_w == expect_w,
                        f"ledger {got_w} vs model {expect_w}"))
    if not checks:
        checks.append(Check("vacuous", True, "no jobs produced metrics"))
    return VerifyReport(checks)
