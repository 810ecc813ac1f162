"""Client runtime: virtualization, split-vs-reference equivalence, the
activation-free backward, KV-cache decoding, jobs and their ledgers."""

import numpy as np
import pytest

from splitserve import ledger as ledger_mod
from splitserve.adapters import AdapterState
from splitserve.client import (ClientJob, ClientModel, JobConfig, KVCache,
                               make_adapter)
from splitserve.config import (LayerAddress, ModelConfig, Role,
                               base_addresses, max_layer_width)
from splitserve.errors import ConfigError, JobStateError
from splitserve.executor import BaseExecutor
from splitserve.ledger import kv_cache_bytes
from splitserve.model import (adapter_astype, build_model, model_astype,
                              reference_forward)
from splitserve.tensor_ops import cross_entropy
from splitserve.transport import LocalChannel

CFG = ModelConfig(n_layers=2, d_model=16, n_heads=4, d_ff=32, vocab_size=32,
                  max_seq=64, seed=2)


@pytest.fixture
def split_setup():
    model = build_model(CFG)
    ex = BaseExecutor(model.layers)
    with ex:
        def channel(cid=1, batch=2, seq=8):
            ch = LocalChannel(ex, cid, batch, seq, max_layer_width(CFG))
            ch.register(sends_backward=True)
            return ch
        yield model, ex, channel


def tokens_of(shape, seed=0):
    return np.random.default_rng(seed).integers(CFG.vocab_size, size=shape)


def test_empty_base_layer_set_equals_reference():
    model = build_model(CFG)
    local = ClientModel.virtualize(model, set())
    t = tokens_of((2, 5))
    assert np.array_equal(local.forward(None, t),
                          reference_forward(model, None, t))


def test_virtualize_rejects_unknown_address():
    model = build_model(CFG)
    with pytest.raises(ConfigError):
        ClientModel.virtualize(model, {LayerAddress(9, Role.Q)}, channel=object())
    with pytest.raises(ConfigError):
        ClientModel.virtualize(model, set(base_addresses(CFG)))  # no channel


def test_split_forward_matches_reference(split_setup):
    model, _, channel = split_setup
    cm = ClientModel.virtualize(model, set(base_addresses(CFG)), channel())
    t = tokens_of((2, 6), seed=1)
    got = cm.forward(None, t)
    assert np.array_equal(got, reference_forward(model, None, t))


def test_split_forward_with_adapters_matches_reference(split_setup):
    model, _, channel = split_setup
    adapter = AdapterState.init_lora(CFG, rank=4, alpha=8.0,
                                     targets=[Role.Q, Role.V, Role.LM_HEAD],
                                     seed=3)
    # make the adapter non-trivial
    for addr, (a, b) in adapter.lora.items():
        adapter.lora[addr] = (a, np.random.default_rng(5)
                              .standard_normal(b.shape).astype(np.float32) * 0.1)
    cm = ClientModel.virtualize(model, set(base_addresses(CFG)), channel())
    t = tokens_of((2, 4), seed=2)
    assert np.array_equal(cm.forward(adapter, t),
                          reference_forward(model, adapter, t))


def test_client_weight_bytes_exclude_frozen_layers(split_setup):
    model, _, channel = split_setup
    cm = ClientModel.virtualize(model, set(base_addresses(CFG)), channel())
    assert cm.local_frozen_bytes() == 0
    assert cm.client_weight_bytes() == model.client_side_bytes()


def grads_via(model_f, adapter, tokens, targets):
    tape: dict = {}
    logits = model_f.forward(adapter, tokens, tape=tape)
    _, grad = cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        np.asarray(targets).reshape(-1))
    return model_f.backward(adapter, tape, grad)


def test_split_adapter_grads_match_finite_differences(split_setup):
    """Split-path LoRA and IA3 gradients vs central differences of the
    float64 monolithic loss."""
    model, _, channel = split_setup
    t = tokens_of((1, 5), seed=7)
    targets = tokens_of((1, 5), seed=8)
    for method, targets_roles in (("lora", [Role.Q, Role.FF_UP]),
                                  ("ia3", [Role.K, Role.V, Role.FF_UP])):
        if method == "lora":
            adapter = AdapterState.init_lora(CFG, 2, 4.0, targets_roles, seed=1)
            for addr, (a, b) in adapter.lora.items():
                adapter.lora[addr] = (
                    a, (np.random.default_rng(2).standard_normal(b.shape)
                        * 0.05).astype(np.float32))
        else:
            adapter = AdapterState.init_ia3(CFG, targets_roles)
        cm = ClientModel.virtualize(model, set(base_addresses(CFG)),
                                    channel(cid=10 + len(targets_roles)))
        grads = grads_via(cm, adapter, t, targets)

        model64 = model_astype(model, np.float64)
        adapter64 = adapter_astype(adapter, np.float64)

        def loss_at(key, arr):
            adapter64.set_param(key, arr)
            logits = reference_forward(model64, adapter64, t)
            loss, _ = cross_entropy(logits.reshape(-1, CFG.vocab_size),
                                    targets.reshape(-1))
            return loss

        h = 1e-5
        for key, param in adapter64.trainable():
            g = grads[key].astype(np.float64)
            fd = np.zeros_like(param)
            flat, fdflat = param.copy().reshape(-1), fd.reshape(-1)
            for i in range(0, flat.size, 5):
                bump = flat.copy()
                bump[i] += h
                fp = loss_at(key, bump.reshape(param.shape))
                bump[i] -= 2 * h
                fm = loss_at(key, bump.reshape(param.shape))
                fdflat[i] = (fp - fm) / (2 * h)
            adapter64.set_param(key, param)
            idx = np.arange(0, flat.size, 5)
            num = np.abs(g.reshape(-1)[idx] - fd.reshape(-1)[idx])
            denom = np.abs(fd.reshape(-1)[idx]) + 1e-4
            assert np.max(num / denom) < 1e-3, f"{method} {key}"


def test_executor_saved_activations_zero_during_training(split_setup):
    model, ex, channel = split_setup
    cm = ClientModel.virtualize(model, set(base_addresses(CFG)), channel())
    adapter = AdapterState.init_lora(CFG, 2, 4.0, [Role.Q], seed=0)
    grads_via(cm, adapter, tokens_of((2, 4)), tokens_of((2, 4)))
    assert ex.ledger.get(ledger_mod.SAVED_ACTIVATIONS) == 0


# -- KV cache / decoding -------------------------------------------------------

def test_kv_decode_matches_full_forward(split_setup):
    model, _, channel = split_setup
    cm = ClientModel.virtualize(model, set(base_addresses(CFG)), channel())
    t = tokens_of((2, 7), seed=11)
    full = cm.forward(None, t)
    kv = KVCache(CFG, batch=2)
    parts = [cm.forward(None, t[:, :3], kv=kv)]
    for i in range(3, 7):
        parts.append(cm.forward(None, t[:, i:i + 1], kv=kv))
    assert np.allclose(np.concatenate(parts, axis=1), full, atol=1e-5)
    assert kv.positions == 7
    assert kv.nbytes() == kv_cache_bytes(CFG, 7, batch=2)


def test_kv_cache_rejects_overflow_and_bad_placement():
    with pytest.raises(ConfigError):
        KVCache(CFG, 1, placement="gpu")
    kv = KVCache(CFG, 1)
    with pytest.raises(ConfigError):
        kv.append(0, np.zeros((1, CFG.max_seq + 1, CFG.d_model), np.float32),
                  np.zeros((1, CFG.max_seq + 1, CFG.d_model), np.float32))


def test_kv_transfer_accounting():
    """Recorded per-step transfer bytes follow the closed-form model."""
    kv2 = KVCache(CFG, batch=2)
    kv2.append(0, np.zeros((2, 4, 16), np.float32),
               np.zeros((2, 4, 16), np.float32))
    kv2.append(1, np.zeros((2, 4, 16), np.float32),
               np.zeros((2, 4, 16), np.float32))
    kv2.record_decode_step()
    assert kv2.transfer_compute_on_fast == [kv_cache_bytes(CFG, 4, 2)]
    assert kv2.transfer_compute_on_offloaded == [CFG.n_layers * 2 * 2 * 16 * 4]


# -- jobs -----------------------------------------------------------------------

def build_job(split_setup_tuple, kind="finetune", cid=1, **overrides):
    model, _, channel = split_setup_tuple
    jcfg = JobConfig(kind=kind, adapter_method="lora" if kind == "finetune"
                     else "none", rank=2, alpha=4.0, targets=("Q", "LM_HEAD"),
                     batch_size=2, seq_len=6, steps=2, prompt_len=4,
                     gen_tokens=3, **overrides)
    cm = ClientModel.virtualize(model, set(base_addresses(CFG)), channel(cid))
    return ClientJob(cid, jcfg, cm, make_adapter(CFG, jcfg))


def test_job_config_validation():
    with pytest.raises(ConfigError):
        JobConfig(kind="evaluate")
    with pytest.raises(ConfigError):
        JobConfig(adapter_method="prefix")
    with pytest.raises(ConfigError):
        JobConfig(targets=("Q", "BANANA")).target_roles()
    round_tripped = JobConfig.from_dict(JobConfig(kind="finetune").to_dict())
    assert round_tripped.kind == "finetune"


def test_train_step_reduces_loss_eventually(split_setup):
    job = build_job(split_setup)
    t = tokens_of((2, 6), seed=1)
    losses = [job.train_step(t, t) for _ in range(15)]
    assert losses[-1] < losses[0]


def test_backward_state_errors(split_setup):
    job = build_job(split_setup)
    with pytest.raises(JobStateError, match="without a completed forward"):
        job.backward(np.zeros((2, 6, CFG.vocab_size), np.float32))
    inf = build_job(split_setup, kind="inference", cid=2)
    with pytest.raises(JobStateError, match="inference job"):
        inf.backward(np.zeros((1, 4, CFG.vocab_size), np.float32))
    with pytest.raises(JobStateError):
        inf.train_step(tokens_of((1, 4)), tokens_of((1, 4)))


def test_generate_contract(split_setup):
    job = build_job(split_setup, kind="inference", cid=3)
    prompt = tokens_of((1, 4), seed=4)
    out = job.generate(prompt, 3)
    assert out.shape == (1, 7)
    assert np.array_equal(out[:, :4], prompt)
    # zero tokens: prompt returned, no requests recorded
    before = len(job.metrics)
    assert np.array_equal(job.generate(prompt, 0), prompt)
    assert len(job.metrics) == before
    with pytest.raises(ConfigError):
        job.generate(prompt, CFG.max_seq)


def test_generate_matches_reference_greedy(split_setup):
    model, _, _ = split_setup
    job = build_job(split_setup, kind="inference", cid=4)
    prompt = tokens_of((2, 4), seed=6)
    out = job.generate(prompt, 4)
    # reference greedy via full forwards (no cache at all)
    ref = prompt.copy()
    for _ in range(4):
        logits = reference_forward(model, None, ref)
        nxt = np.argmax(logits[:, -1, :], axis=-1).astype(ref.dtype)
        ref = np.concatenate([ref, nxt[:, None]], axis=1)
    assert np.array_equal(out, ref)


def test_placement_does_not_change_results(split_setup):
    out = {}
    for i, placement in enumerate(("fast", "offloaded")):
        job = build_job(split_setup, kind="inference", cid=5 + i,
                        placement=placement)
        out[placement] = job.generate(tokens_of((1, 4), seed=9), 4)
    assert np.array_equal(out["fast"], out["offloaded"])


def test_job_ledger_has_no_frozen_weights(split_setup):
    model, _, _ = split_setup
    job = build_job(split_setup)
    assert job.ledger.get(ledger_mod.WEIGHTS) == model.client_side_bytes()
    job.train_step(tokens_of((2, 6)), tokens_of((2, 6)))
    assert job.ledger.get(ledger_mod.ADAPTER) == job.adapter.nbytes()
    assert job.ledger.get(ledger_mod.OPTIMIZER) == job.adapter.moment_bytes()
    assert job.ledger.get(ledger_mod.SAVED_ACTIVATIONS) == 0  # released
    assert job.peak_bytes > job.ledger.total()  # tape counted at peak
