import numpy as np
import pytest

from latentcot import autodiff as ad
from latentcot import tasks
from latentcot.autodiff import Tensor
from latentcot.errors import ContractViolation, MissingArtifact, ShapeMismatch
from latentcot.model import AdapterConfig, AdapterSet, ModelConfig, TransformerParams, embed
from latentcot.refine import (LossBreakdown, RefineConfig, finetune, init_draft,
                              loss_refine, mean_alignment, refine_k, refine_once)
from latentcot.syngen import SyngenConfig, syngen_corpus


@pytest.fixture(scope="module")
def setup():
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64)
    params = TransformerParams.init(cfg, seed=6, dtype=np.float64)
    adapters = AdapterSet.init(cfg, AdapterConfig(rank=2, alpha=4), seed=7, dtype=np.float64)
    rng = np.random.default_rng(1)
    for name, t in adapters.tensors.items():
        if name.endswith("lora_b"):
            t.data[:] = rng.normal(0, 0.02, size=t.data.shape)
    sample = tasks.gen_chain_sample(tasks.SplitMix64(31), 2, False, "r-0")
    return cfg, params, adapters, sample


def test_init_draft_rows_identical(setup):
    cfg, params, _, _ = setup
    draft = init_draft(params, 5)
    assert draft.role == "draft" and draft.iteration == 0
    expected = embed(params, [cfg.draft_id] * 5)
    np.testing.assert_array_equal(draft.tensor.data, expected.data)
    with pytest.raises(ContractViolation):
        init_draft(params, 0)


def test_refine_once_shape_and_slicing(setup):
    cfg, params, adapters, sample = setup
    q = sample.q_tokens()
    z0 = init_draft(params, 4).tensor
    z1 = refine_once(params, adapters, q, z0)
    assert z1.shape == (4, cfg.d_model)
    # slicing contract: output rows start exactly at the first continuous slot
    from latentcot.model import forward_hybrid
    states = forward_hybrid(params, q + [z0], adapters=adapters)
    np.testing.assert_array_equal(z1.data, states.layers[-1].data[len(q):len(q) + 4])


def test_refine_once_depends_on_question(setup):
    cfg, params, adapters, sample = setup
    z0 = init_draft(params, 4).tensor
    other = tasks.gen_chain_sample(tasks.SplitMix64(77), 2, False, "r-1")
    z_a = refine_once(params, adapters, sample.q_tokens(), z0)
    z_b = refine_once(params, adapters, other.q_tokens(), z0)
    assert not np.allclose(z_a.data, z_b.data)


def test_refine_k_composition(setup):
    cfg, params, adapters, sample = setup
    q = sample.q_tokens()
    rcfg = RefineConfig(m=4, k=4)
    z_final = refine_k(params, adapters, q, rcfg)
    assert z_final.role == "final" and z_final.iteration == 4
    z = init_draft(params, 4).tensor
    for _ in range(4):
        z = refine_once(params, adapters, q, z)
    np.testing.assert_array_equal(z_final.tensor.data, z.data)


def test_refine_k_deterministic(setup):
    cfg, params, adapters, sample = setup
    rcfg = RefineConfig(m=4, k=2)
    a = refine_k(params, adapters, sample.q_tokens(), rcfg)
    b = refine_k(params, adapters, sample.q_tokens(), rcfg)
    np.testing.assert_array_equal(a.tensor.data, b.tensor.data)


def test_no_iterative_refine_equals_single_pass(setup):
    cfg, params, adapters, sample = setup
    q = sample.q_tokens()
    ablated = refine_k(params, adapters, q, RefineConfig(m=4, k=4, no_iterative_refine=True))
    single = refine_once(params, adapters, q, init_draft(params, 4).tensor)
    np.testing.assert_array_equal(ablated.tensor.data, single.data)
    assert ablated.iteration == 1


def test_backprop_window_truncates_gradient_not_values(setup):
    cfg, params, adapters, sample = setup
    q = sample.q_tokens()
    full_cfg = RefineConfig(m=4, k=3)
    trunc_cfg = RefineConfig(m=4, k=3, backprop_window=1)
    z_full = refine_k(params, adapters, q, full_cfg)
    z_trunc = refine_k(params, adapters, q, trunc_cfg)
    np.testing.assert_array_equal(z_full.tensor.data, z_trunc.tensor.data)
    adapters.set_trainable(True)
    target = np.zeros((4, cfg.d_model))
    g_full = ad.backward(
        loss_refine(params, refine_k(params, adapters, q, full_cfg).tensor, target,
                    q, sample.a_tokens()).total)
    g_trunc = ad.backward(
        loss_refine(params, refine_k(params, adapters, q, trunc_cfg).tensor, target,
                    q, sample.a_tokens()).total)
    adapters.set_trainable(False)
    t = adapters.tensors["layers.0.wq.lora_b"]
    assert not np.allclose(g_full[t], g_trunc[t])


def test_loss_refine_breakdown(setup):
    cfg, params, adapters, sample = setup
    q, a = sample.q_tokens(), sample.a_tokens()
    z_final = refine_k(params, adapters, q, RefineConfig(m=4, k=2)).tensor
    # z_syn == z_final -> alignment exactly 0
    bd = loss_refine(params, z_final, z_final.data.copy(), q, a)
    assert bd.l_align == 0.0
    assert bd.l_refine == pytest.approx(bd.l_ans_prime)
    # constant offset 0.1 -> per-element mean 0.1
    bd2 = loss_refine(params, z_final, z_final.data + 0.1, q, a)
    assert bd2.l_align == pytest.approx(0.1, rel=1e-6)
    assert bd2.l_refine == pytest.approx(bd2.l_align + bd2.l_ans_prime, rel=1e-6)
    with pytest.raises(ShapeMismatch):
        loss_refine(params, z_final, np.zeros((2, 2)), q, a)


def test_answer_loss_ignores_adapter_existence(setup):
    cfg, params, adapters, sample = setup
    q, a = sample.q_tokens(), sample.a_tokens()
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(0, 0.05, size=(4, cfg.d_model)))
    from latentcot.syngen import loss_ans
    assert loss_ans(params, q, z, a).item() == loss_ans(params, q, z, a).item()
    # the answer pass never sees adapters: same value whether they exist or not
    bd = loss_refine(params, z, z.data.copy(), q, a)
    assert bd.l_ans_prime == pytest.approx(loss_ans(params, q, z, a).item())


def test_unrolled_gradient_matches_finite_differences(setup):
    # k=2 full unroll, d=16, L=2, m=4 (the tiny-instance gradient gate)
    cfg, params, adapters, sample = setup
    q, a = sample.q_tokens(), sample.a_tokens()
    rcfg = RefineConfig(m=4, k=2)

    target = np.asarray(
        np.random.default_rng(9).normal(0, 0.05, size=(4, cfg.d_model)))

    def full_loss(_=None):
        z_final = refine_k(params, adapters, q, rcfg).tensor
        return loss_refine(params, z_final, target, q, a).total

    adapters.set_trainable(True)
    grads = ad.backward(full_loss())
    checked = 0
    for name in ("layers.0.wq.lora_a", "layers.0.wq.lora_b", "layers.1.w_up.lora_b"):
        t = adapters.tensors[name]
        fd = ad.finite_diff_grad(full_loss, t, h=1e-4)
        assert ad.rel_error(grads[t], fd) <= 1e-3, name
        checked += 1
    adapters.set_trainable(False)
    assert checked == 3


def test_finetune_lr_zero_keeps_adapters(setup):
    cfg64 = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64)
    params = TransformerParams.init(cfg64, seed=6)
    samples = [tasks.gen_chain_sample(tasks.SplitMix64(i), 2, False, f"ft-{i}") for i in range(4)]
    store = {rec.sample_id: rec.z_syn for rec in
             syngen_corpus(params, samples, SyngenConfig(m=4, steps=1), seed=0).values()}
    rcfg = RefineConfig(m=4, k=2, epochs=1, lr=0.0, rank=2, alpha=4, micro_batch=2)
    adapters, _ = finetune(params, samples, store, rcfg, seed=5)
    fresh = AdapterSet.init(cfg64, AdapterConfig(rank=2, alpha=4), seed=5)
    for name, t in adapters.named().items():
        np.testing.assert_array_equal(t.data, fresh.tensors[name].data)


def test_finetune_freezes_base_and_logs(setup, tmp_path):
    cfg64 = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64)
    params = TransformerParams.init(cfg64, seed=6)
    samples = [tasks.gen_chain_sample(tasks.SplitMix64(50 + i), 2, False, f"ft-{i}") for i in range(4)]
    store = {rec.sample_id: rec.z_syn for rec in
             syngen_corpus(params, samples, SyngenConfig(m=4, steps=2), seed=0).values()}
    before = params.checksum()
    log_path = tmp_path / "log.json"
    rcfg = RefineConfig(m=4, k=2, epochs=2, lr=1e-3, rank=2, alpha=4, micro_batch=2)
    adapters, log = finetune(params, samples, store, rcfg, seed=5, log_path=log_path)
    assert params.checksum() == before
    assert len(log) == 2
    assert set(log[0]) == {"epoch", "l_align", "l_ans_prime", "l_refine"}
    assert log_path.exists()


def test_finetune_missing_synthetic_target(setup):
    cfg64 = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64)
    params = TransformerParams.init(cfg64, seed=6)
    samples = [tasks.gen_chain_sample(tasks.SplitMix64(60), 2, False, "ft-untracked")]
    with pytest.raises(MissingArtifact, match="ft-untracked"):
        finetune(params, samples, {}, RefineConfig(m=4, k=1, epochs=1), seed=0)
    with pytest.raises(MissingArtifact):
        finetune(params, samples, None, RefineConfig(m=4, k=1, epochs=1), seed=0)
    # the ablation trains without targets
    rcfg = RefineConfig(m=4, k=1, epochs=1, no_synthetic_align=True, micro_batch=2)
    adapters, log = finetune(params, samples, None, rcfg, seed=0)
    assert log[0]["l_align"] == 0.0


def test_mean_alignment_helper(setup):
    cfg64 = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64)
    params = TransformerParams.init(cfg64, seed=6)
    adapters = AdapterSet.init(cfg64, AdapterConfig(rank=2, alpha=4), seed=1)
    s = tasks.gen_chain_sample(tasks.SplitMix64(70), 2, False, "m-0")
    rcfg = RefineConfig(m=4, k=1)
    z = refine_k(params, adapters, s.q_tokens(), rcfg).tensor.data
    got = mean_alignment(params, adapters, [s], {s.id: z + 0.25}, rcfg)
    assert got == pytest.approx(0.25, rel=1e-5)
