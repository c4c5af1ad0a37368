"""Query generation and prototype-bank refinement tests."""

from __future__ import annotations

import numpy as np
import pytest

from avseg import autodiff as ad
from avseg import queries as qm
from avseg.bank import PrototypeBank
from avseg.errors import EmptyInputError, ParameterError
from avseg.layers import LayerNormParams, ParamRegistry, apply_ln, init_linear


def make_pipeline(seed=0, n_queries=3, d=8, d_bank=6, n_blocks=1, gamma=1.0):
    reg = ParamRegistry()
    rng = np.random.default_rng(seed)
    proj = init_linear(reg, "audio.proj", rng, 5, d)
    gen = qm.init_query_generator(reg, rng, n_queries, d, n_blocks=n_blocks, n_heads=2)
    ref = qm.init_bank_refine(reg, rng, d, d_bank, gamma=gamma)
    return reg, rng, proj, gen, ref


def toy_bank(rng, rows=8, d_bank=6):
    protos = rng.standard_normal((rows, d_bank))
    return PrototypeBank(protos, np.arange(rows) % 2)


class TestGenerate:
    def test_shapes_and_stage(self):
        reg, rng, proj, gen, _ = make_pipeline()
        feats = qm.project_audio(rng.standard_normal((12, 5)), proj)
        q = qm.generate_queries(feats, gen)
        assert q.vectors.shape == (3, 8)
        assert q.stage == "generated"
        assert q.count == 3

    def test_deterministic(self):
        reg, rng, proj, gen, _ = make_pipeline(seed=4)
        logmel = np.random.default_rng(1).standard_normal((9, 5))
        a = qm.generate_queries(qm.project_audio(logmel, proj), gen)
        b = qm.generate_queries(qm.project_audio(logmel, proj), gen)
        assert np.array_equal(a.vectors.values, b.vectors.values)

    def test_empty_frames_rejected(self):
        reg, rng, proj, gen, _ = make_pipeline()
        with pytest.raises(EmptyInputError):
            qm.project_audio(np.zeros((0, 5)), proj)

    def test_audio_changes_queries(self):
        reg, rng, proj, gen, _ = make_pipeline(seed=2)
        a = qm.generate_queries(qm.project_audio(rng.standard_normal((10, 5)), proj), gen)
        b = qm.generate_queries(qm.project_audio(rng.standard_normal((10, 5)), proj), gen)
        assert not np.allclose(a.vectors.values, b.vectors.values)


class TestRefine:
    def test_gamma_zero_is_layer_norm_of_input(self):
        reg, rng, proj, gen, ref = make_pipeline(gamma=0.0)
        feats = qm.project_audio(rng.standard_normal((7, 5)), proj)
        q = qm.generate_queries(feats, gen)
        refined = qm.refine_with_bank(q, toy_bank(rng), ref)
        expected = apply_ln(q.vectors, ref.ln)
        np.testing.assert_allclose(refined.vectors.values, expected.values, atol=1e-12)

    def test_gamma_zero_ignores_bank_contents(self):
        reg, rng, proj, gen, ref = make_pipeline(seed=3, gamma=0.0)
        feats = qm.project_audio(rng.standard_normal((7, 5)), proj)
        q = qm.generate_queries(feats, gen)
        a = qm.refine_with_bank(q, toy_bank(np.random.default_rng(10)), ref)
        q2 = qm.generate_queries(feats, gen)
        b = qm.refine_with_bank(q2, toy_bank(np.random.default_rng(99)), ref)
        assert np.array_equal(a.vectors.values, b.vectors.values)

    def test_single_prototype_attention_is_ones(self):
        reg, rng, proj, gen, ref = make_pipeline(seed=5)
        bank = PrototypeBank(np.random.default_rng(0).standard_normal((1, 6)), [0])
        q = qm.generate_queries(qm.project_audio(rng.standard_normal((6, 5)), proj), gen)
        refined = qm.refine_with_bank(q, bank, ref)
        np.testing.assert_allclose(refined.bank_attention, np.ones((3, 1)), atol=1e-15)

    def test_attention_rows_are_distributions(self):
        reg, rng, proj, gen, ref = make_pipeline(seed=6)
        q = qm.generate_queries(qm.project_audio(rng.standard_normal((5, 5)), proj), gen)
        refined = qm.refine_with_bank(q, toy_bank(rng), ref)
        att = refined.bank_attention
        assert att.shape == (3, 8)
        np.testing.assert_allclose(att.sum(axis=1), np.ones(3), atol=1e-12)
        assert att.min() >= 0.0

    def test_aligned_query_attends_to_its_class(self):
        # identity projections, class-disjoint prototype directions
        d = 4
        protos = np.zeros((6, d))
        protos[:3, 0] = 5.0  # class 0 rows
        protos[3:, 1] = 5.0  # class 1 rows
        bank = PrototypeBank(protos, [0, 0, 0, 1, 1, 1])
        eye = np.eye(d)
        ref = qm.BankRefineParams(
            wq=ad.parameter(eye),
            wk=ad.parameter(eye),
            wv=ad.parameter(eye),
            ln=LayerNormParams(ad.parameter(np.ones(d)), ad.parameter(np.zeros(d))),
            gamma=1.0,
        )
        probe = np.zeros((1, d))
        probe[0, 0] = 5.0  # aligned with class 0
        q = qm.QuerySet(ad.constant(probe), "generated")
        refined = qm.refine_with_bank(q, bank, ref)
        class0_mass = refined.bank_attention[0, :3].sum()
        assert class0_mass > 0.99

    def test_bank_gets_no_gradient(self):
        reg, rng, proj, gen, ref = make_pipeline(seed=7)
        bank = toy_bank(rng)
        before = bank.prototypes.copy()
        q = qm.generate_queries(qm.project_audio(rng.standard_normal((6, 5)), proj), gen)
        refined = qm.refine_with_bank(q, bank, ref)
        ad.reduce_sum(ad.mul(refined.vectors, refined.vectors)).backward()
        assert np.array_equal(bank.prototypes, before)
        assert ref.wk.grad is not None and ref.wv.grad is not None

    def test_stage_enforced(self):
        reg, rng, proj, gen, ref = make_pipeline()
        q = qm.generate_queries(qm.project_audio(rng.standard_normal((6, 5)), proj), gen)
        refined = qm.refine_with_bank(q, toy_bank(rng), ref)
        with pytest.raises(ParameterError):
            qm.refine_with_bank(refined, toy_bank(rng), ref)

    def test_gradients_through_full_query_path(self):
        reg, rng, proj, gen, ref = make_pipeline(seed=8, n_queries=2, d=6, d_bank=4)
        bank = PrototypeBank(rng.standard_normal((5, 4)), np.zeros(5, dtype=int))
        logmel = rng.standard_normal((5, 5))
        target = rng.standard_normal((2, 6))

        def f():
            q = qm.generate_queries(qm.project_audio(logmel, proj), gen)
            refined = qm.refine_with_bank(q, bank, ref)
            diff = ad.add(refined.vectors, ad.constant(-target))
            return ad.reduce_sum(ad.mul(diff, diff))

        params = [p for _, p in reg.items()]
        err = ad.grad_check(f, params, step=1e-5)
        assert err < 1e-6
