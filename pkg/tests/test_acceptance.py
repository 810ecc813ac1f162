"""Acceptance gate: ten end-to-end criteria, one printed PASS/FAIL line each.

Each criterion is a separate test; the printed line is emitted outside
pytest's capture so it is visible in the live test log.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from splitserve import ledger as ledger_mod
from splitserve.adapters import AdapterState
from splitserve.client import ClientJob, ClientModel, JobConfig, make_adapter
from splitserve.config import ModelConfig, Role, base_addresses, max_layer_width
from splitserve.errors import ProtocolError
from splitserve.executor import BaseExecutor, BatchPolicy
from splitserve.harness import (Scenario, named_scenario, run, train_batch,
                                verify)
from splitserve.ledger import (crossover_context_length,
                               decode_step_transfer_bytes, kv_cache_bytes,
                               packing_report)
from splitserve.model import (adapter_astype, build_model, model_astype,
                              reference_forward)
from splitserve.privacy import precompute_noise
from splitserve.protocol import (PASS_BACKWARD, PASS_FORWARD,
                                 PASS_NOISE_EFFECT, Envelope, decode, encode,
                                 try_decode)
from splitserve.tensor_ops import cross_entropy
from splitserve.transport import ExecutorServer, LocalChannel, RemoteChannel


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {number}: {detail}"


def split_logits(model, tokens, channel):
    cm = ClientModel.virtualize(model, set(base_addresses(model.config)),
                                channel)
    return cm.forward(None, tokens)


# -- 1: split-execution equivalence ---------------------------------------------

def test_criterion_01_split_equivalence(capsys):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    pairs = 0
    for n_layers in (1, 2, 4):
        for d_model in (32, 64):
            for _ in range(4):
                seed = int(rng.integers(1_000_000))
                cfg = ModelConfig(n_layers=n_layers, d_model=d_model,
                                  n_heads=4, d_ff=2 * d_model, vocab_size=64,
                                  max_seq=64, seed=seed)
                model = build_model(cfg)
                tokens = rng.integers(cfg.vocab_size,
                                      size=(int(rng.integers(1, 3)),
                                            int(rng.integers(4, 9))))
                ref = reference_forward(model, None, tokens)
                with BaseExecutor(model.layers) as ex:
                    local = LocalChannel(ex, 1, 2, 8, max_layer_width(cfg))
                    local.register()
                    diff_local = np.max(np.abs(
                        split_logits(model, tokens, local) - ref))
                    with ExecutorServer(ex) as server:
                        remote = RemoteChannel(server.host, server.port, 2)
                        remote.register()
                        diff_remote = np.max(np.abs(
                            split_logits(model, tokens, remote) - ref))
                        remote.close()
                worst = max(worst, float(diff_local), float(diff_remote))
                pairs += 1
    elapsed = time.perf_counter() - start
    ok = pairs >= 20 and worst <= 1e-5 and elapsed < 60
    report(capsys, 1, ok,
           f"{pairs} (config, seed) pairs, both channels, max |logits diff| "
           f"= {worst:.2e} (≤ 1e-5), {elapsed:.1f}s (< 60s)")


# -- 2: memory-optimized backward -----------------------------------------------

def test_criterion_02_backward_vs_finite_differences(capsys):
    cfg = ModelConfig(n_layers=1, d_model=32, n_heads=4, d_ff=64,
                      vocab_size=32, max_seq=32, seed=11)
    model = build_model(cfg)
    adapter = AdapterState.init_lora(cfg, rank=4, alpha=8.0,
                                     targets=[Role.Q, Role.V, Role.FF_UP,
                                              Role.LM_HEAD], seed=5)
    nz = np.random.default_rng(6)
    for addr, (a, b) in adapter.lora.items():
        adapter.lora[addr] = (a, (nz.standard_normal(b.shape) * 0.05)
                              .astype(np.float32))
    tokens = nz.integers(cfg.vocab_size, size=(2, 6))
    targets = nz.integers(cfg.vocab_size, size=(2, 6))
    with BaseExecutor(model.layers) as ex:
        ch = LocalChannel(ex, 1, 2, 6, max_layer_width(cfg))
        ch.register(sends_backward=True)
        cm = ClientModel.virtualize(model, set(base_addresses(cfg)), ch)
        tape: dict = {}
        logits = cm.forward(adapter, tokens, tape=tape)
        _, grad = cross_entropy(logits.reshape(-1, cfg.vocab_size),
                                targets.reshape(-1))
        grads = cm.backward(adapter, tape, grad)
        saved = ex.ledger.get(ledger_mod.SAVED_ACTIVATIONS)

    model64 = model_astype(model, np.float64)
    adapter64 = adapter_astype(adapter, np.float64)

    def loss_at(key, arr):
        adapter64.set_param(key, arr)
        lg = reference_forward(model64, adapter64, tokens)
        return cross_entropy(lg.reshape(-1, cfg.vocab_size),
                             targets.reshape(-1))[0]

    h = 1e-5
    worst = 0.0
    for key, param in adapter64.trainable():
        g = grads[key].astype(np.float64)
        flat = param.reshape(-1)
        idx = np.arange(0, flat.size, max(1, flat.size // 40))
        for i in idx:
            bump = flat.copy()
            bump[i] += h
            fp = loss_at(key, bump.reshape(param.shape))
            bump[i] -= 2 * h
            fm = loss_at(key, bump.reshape(param.shape))
            fd = (fp - fm) / (2 * h)
            rel = abs(g.reshape(-1)[i] - fd) / (abs(fd) + 1e-4)
            worst = max(worst, rel)
        adapter64.set_param(key, param)
    ok = worst < 1e-3 and saved == 0
    report(capsys, 2, ok,
           f"adapter grads vs central differences: max rel err = {worst:.2e} "
           f"(< 1e-3); executor SavedActivations = {saved} bytes (= 0)")


# -- 3: privacy exactness --------------------------------------------------------

def test_criterion_03_privacy_exactness(capsys):
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64,
                      vocab_size=64, max_seq=64, seed=21)
    model = build_model(cfg)
    tokens = np.random.default_rng(3).integers(cfg.vocab_size, size=(2, 8))
    plain = reference_forward(model, None, tokens)
    with BaseExecutor(model.layers) as ex:
        ch = LocalChannel(ex, 1, 2, 8, max_layer_width(cfg))
        ch.register()
        ns = precompute_noise(ch, cfg, k=2, scale=1.0, seed=9, t_max=16)
        cm = ClientModel.virtualize(model, set(base_addresses(cfg)), ch, ns)
        blinded = cm.forward(None, tokens)
        ns0 = precompute_noise(ch, cfg, k=2, scale=0.0, seed=9, t_max=16)
        cm0 = ClientModel.virtualize(model, set(base_addresses(cfg)), ch, ns0)
        zero_noise = cm0.forward(None, tokens)
    diff = float(np.max(np.abs(blinded - plain)))
    bitwise = np.array_equal(zero_noise, plain)
    ok = diff <= 1e-4 and bitwise
    report(capsys, 3, ok,
           f"blinded vs plain max |logits diff| = {diff:.2e} (≤ 1e-4); "
           f"zero-noise bitwise equal = {bitwise}")


# -- 4: executor statelessness ---------------------------------------------------

def test_criterion_04_executor_statelessness(capsys):
    base = named_scenario("multi-ft")
    executor_totals = {}
    client_sums = {}
    for n in (1, 2, 4, 8):
        jobs = [dataclasses.replace(base.jobs[0], data_seed=i, adapter_seed=i)
                for i in range(n)]
        s = Scenario(f"ft-{n}", base.model, base.policy, jobs)
        r = run(s)
        assert r.ok, r.errors()
        executor_totals[n] = r.executor_ledger.total(include_transient=False)
        client_sums[n] = sum(j.ledger.total(include_transient=False)
                             for j in r.jobs.values())
    constant = len(set(executor_totals.values())) == 1
    linear = all(abs(client_sums[n] - n * client_sums[1]) <= 0.01 * n * client_sums[1]
                 for n in (2, 4, 8))
    ok = constant and linear
    report(capsys, 4, ok,
           f"executor ledger total {sorted(set(executor_totals.values()))} "
           f"constant over 1/2/4/8 clients = {constant}; client ledger sum "
           f"linear ±1% = {linear}")


# -- 5 & 6: heterogeneous scenario under the three policies ----------------------

POLICIES = ("nolockstep", "lockstep", "opportunistic")


def sweep_once():
    base = named_scenario("policy-sweep")
    runs = {}
    for mode in POLICIES:
        policy = dataclasses.replace(base.policy, mode=mode)
        runs[mode] = run(Scenario(f"sweep-{mode}", base.model, policy,
                                  base.jobs))
        assert runs[mode].ok, runs[mode].errors()
    return base, runs


@pytest.fixture(scope="module")
def sweep():
    return sweep_once()


def test_criterion_05_batching_invisibility(capsys, sweep):
    base, runs = sweep
    solo_logits = {}
    for i, job in enumerate(base.jobs):
        solo = run(Scenario("solo", base.model, BatchPolicy(), [job]))
        assert solo.ok, solo.errors()
        solo_logits[i] = solo.jobs[0].logits
    mismatches = []
    for mode in POLICIES:
        for i in range(len(base.jobs)):
            got = runs[mode].jobs[i].logits
            want = solo_logits[i]
            if len(got) != len(want) or any(
                    not np.array_equal(a, b) for a, b in zip(got, want)):
                mismatches.append(f"{mode}/job{i}")
    ok = not mismatches
    report(capsys, 5, ok,
           "all 8 clients' per-iteration logits bitwise equal to solo runs "
           "under all three policies" if ok else
           f"bitwise mismatches: {mismatches}")


def _sweep_stats(base, runs):
    stats = {}
    for mode in POLICIES:
        r = runs[mode]
        lat = [row["latency_s"] for row in r.jobs[0].metrics]  # smallest client
        stats[mode] = (r.executor_metrics.mean_batch_size(),
                       sum(lat) / len(lat), r.throughput())
    return stats


def test_criterion_06_policy_ordering(capsys, sweep):
    base, runs = sweep
    stats = _sweep_stats(base, runs)
    for attempt in range(3):
        batch_ok = (stats["opportunistic"][0] > 1.0
                    and stats["lockstep"][0] == len(base.jobs)
                    and stats["nolockstep"][0] == 1.0)
        latency_ok = stats["opportunistic"][1] <= stats["lockstep"][1]
        thpt_ok = stats["opportunistic"][2] >= stats["nolockstep"][2]
        if batch_ok and latency_ok and thpt_ok:
            break
        # timing-dependent orderings get a fresh measurement
        base, runs = sweep_once()
        stats = _sweep_stats(base, runs)
    ok = batch_ok and latency_ok and thpt_ok
    report(capsys, 6, ok,
           f"mean batch nolockstep/lockstep/opportunistic = "
           f"{stats['nolockstep'][0]:.2f}/{stats['lockstep'][0]:.2f}/"
           f"{stats['opportunistic'][0]:.2f}; smallest-client latency "
           f"opportunistic {stats['opportunistic'][1]*1e3:.1f}ms ≤ lockstep "
           f"{stats['lockstep'][1]*1e3:.1f}ms = {latency_ok}; throughput "
           f"opportunistic {stats['opportunistic'][2]:.0f} ≥ nolockstep "
           f"{stats['nolockstep'][2]:.0f} tok/s = {thpt_ok}")


# -- 7: packing report -----------------------------------------------------------

def test_criterion_07_packing_report(capsys):
    cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=128,
                      vocab_size=256, max_seq=1024, seed=7)
    job = JobConfig(kind="finetune", adapter_method="lora", rank=8,
                    alpha=16.0, targets=("Q", "V", "LM_HEAD"), batch_size=2,
                    seq_len=512, steps=1, optimizer="adam", lr=0.01)
    s = Scenario("packing-probe", cfg, BatchPolicy(), [job])
    r = run(s)
    assert r.ok, r.errors()
    per_job = r.jobs[0].peak_bytes  # measured, includes tape high water
    gib = 1 << 30
    model_bytes = 26 * gib
    replicated, shared = packing_report(model_bytes, per_job,
                                        [80 * gib, 80 * gib])
    ok = replicated > 0 and shared >= 4 * replicated
    report(capsys, 7, ok,
           f"measured per-job bytes = {per_job / 1e6:.1f} MB at batch 2 / "
           f"seq 512; 2×80 GB: replicated = {replicated} jobs, shared base = "
           f"{shared} jobs (≥ 4× = {shared >= 4 * replicated})")


# -- 8: fine-tuning convergence ---------------------------------------------------

def test_criterion_08_lora_convergence(capsys):
    start = time.perf_counter()
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64,
                      vocab_size=64, max_seq=64, seed=1)
    model = build_model(cfg)
    checksum_before = model.checksum()
    jcfg = JobConfig(kind="finetune", adapter_method="lora", rank=8,
                     alpha=16.0, targets=("Q", "V", "LM_HEAD"), batch_size=4,
                     seq_len=8, steps=200, optimizer="adam", lr=0.02,
                     data_seed=3, adapter_seed=3)
    with BaseExecutor(model.layers) as ex:
        ch = LocalChannel(ex, 1, 4, 8, max_layer_width(cfg))
        ch.register(sends_backward=True)
        cm = ClientModel.virtualize(model, set(base_addresses(cfg)), ch)
        jobrun = ClientJob(1, jcfg, cm, make_adapter(cfg, jcfg))
        losses = []
        for step in range(200):
            tokens, targets = train_batch(cfg, jcfg, step)
            losses.append(jobrun.train_step(tokens, targets))
            if losses[-1] < 0.5:
                break
    elapsed = time.perf_counter() - start
    ok = (losses[0] >= math.log(cfg.vocab_size) and losses[-1] < 0.5
          and len(losses) <= 200 and model.checksum() == checksum_before
          and elapsed < 120)
    report(capsys, 8, ok,
           f"copy task, LoRA rank 8: loss {losses[0]:.2f} "
           f"(≥ ln {cfg.vocab_size} = {math.log(cfg.vocab_size):.2f}) → "
           f"{losses[-1]:.3f} (< 0.5) in {len(losses)} steps (≤ 200), "
           f"{elapsed:.1f}s (< 120s); base checksum unchanged = "
           f"{model.checksum() == checksum_before}")


# -- 9: long-context transfer accounting ------------------------------------------

def test_criterion_09_transfer_accounting(capsys):
    s = named_scenario("long-context")
    r = run(s)
    assert r.ok, r.errors()
    job = r.jobs[0]
    on_fast = job.transfer_on_fast
    on_off = job.transfer_on_offloaded
    cfg = s.model
    batch = s.jobs[0].batch_size
    per_pos = kv_cache_bytes(cfg, 1, batch)
    linear = (len(on_fast) >= 8
              and all(b - a == per_pos for a, b in zip(on_fast, on_fast[1:]))
              and on_fast == [decode_step_transfer_bytes(cfg, c, batch)[0]
                              for c in range(s.jobs[0].prompt_len + 1,
                                             s.jobs[0].prompt_len + 1 + len(on_fast))])
    constant = len(set(on_off)) == 1
    crossover = crossover_context_length(cfg, batch, bytes_per_second=1e8,
                                         fast_seconds_per_token=1e-6,
                                         slow_seconds_per_token=6e-6)
    ok = (linear and constant and crossover is not None
          and 1 < crossover <= cfg.max_seq)
    report(capsys, 9, ok,
           f"compute-on-fast transfer grows linearly (+{per_pos} B/step over "
           f"{len(on_fast)} steps) = {linear}; compute-on-offloaded constant "
           f"({on_off[0] if on_off else '-'} B/step) = {constant}; crossover "
           f"context length @ 100 MB/s model = {crossover}")


# -- 10: wire protocol conformance -------------------------------------------------

def test_criterion_10_wire_protocol(capsys):
    rng = np.random.default_rng(10)
    lossless = True
    for _ in range(10_000):
        env = Envelope(int(rng.integers(2**32)), int(rng.integers(2**63)),
                       int(rng.integers(2**16)), int(rng.integers(7)),
                       int(rng.choice([PASS_FORWARD, PASS_BACKWARD,
                                       PASS_NOISE_EFFECT])),
                       rng.standard_normal(
                           (int(rng.integers(0, 9)),
                            int(rng.integers(1, 33)))).astype(np.float32))
        out, _ = decode(encode(env))
        if not (out.client_id == env.client_id
                and out.request_id == env.request_id
                and out.block == env.block and out.role == env.role
                and out.pass_kind == env.pass_kind
                and np.array_equal(out.payload, env.payload)):
            lossless = False
            break
    frame = encode(Envelope(1, 1, 0, 0, PASS_FORWARD,
                            np.ones((2, 3), np.float32)))
    truncation_ok = try_decode(frame[:-1]) is None
    try:
        decode(frame[:10])
        truncation_ok = False
    except ProtocolError:
        pass
    try:
        try_decode(b"XXXX" + frame[4:])
        bad_magic_ok = False
    except ProtocolError:
        bad_magic_ok = True

    # cross-process: criteria 1-3 shape over the byte-stream channel
    base = named_scenario("privacy")
    for j in base.jobs:
        j.endpoint = "tcp"
    thread_s = Scenario("xproc-thread", base.model, base.policy, base.jobs)
    process_s = Scenario("xproc-process", base.model, base.policy, base.jobs,
                         mode="process")
    r_thread = run(thread_s)
    r_process = run(process_s)
    xproc_ok = r_thread.ok and r_process.ok
    if xproc_ok:
        # identical numerics across process boundaries (covers forward,
        # backward, and blinded execution)
        for jid in r_thread.jobs:
            if r_thread.jobs[jid].losses != r_process.jobs[jid].losses:
                xproc_ok = False
            for a, b in zip(r_thread.jobs[jid].logits,
                            r_process.jobs[jid].logits):
                if not np.array_equal(a, b):
                    xproc_ok = False
        rep = verify(process_s, r_process)
        xproc_ok = xproc_ok and rep.passed
        saved = r_process.executor_ledger.get(ledger_mod.SAVED_ACTIVATIONS)
        xproc_ok = xproc_ok and saved == 0
    ok = lossless and truncation_ok and bad_magic_ok and xproc_ok
    report(capsys, 10, ok,
           f"10,000 round-trips lossless = {lossless}; truncation rejected = "
           f"{truncation_ok}; bad magic rejected = {bad_magic_ok}; "
           f"cross-process scenario equals in-process bitwise and passes "
           f"oracle checks = {xproc_ok}")
