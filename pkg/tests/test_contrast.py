"""Projection head and InfoNCE tests, pinned to closed-form values."""

from __future__ import annotations

import numpy as np
import pytest

from avseg import autodiff as ad
from avseg import contrast as ct
from avseg import instrument
from avseg.errors import ParameterError, ShapeError
from avseg.layers import ParamRegistry
from avseg.queries import QuerySet


def unit_rows(rng, n, p):
    z = rng.standard_normal((n, p))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class TestInfoNCE:
    def test_all_rows_identical_gives_log_n(self):
        for n in (2, 5, 9):
            z = np.tile(unit_rows(np.random.default_rng(n), 1, 6), (n, 1))
            pair = ct.ContrastivePair(ad.constant(z), ad.constant(z), tau=0.07)
            np.testing.assert_allclose(ct.info_nce(pair).item(), np.log(n), atol=1e-9)

    def test_orthonormal_rows_closed_form(self):
        for tau in (0.07, 0.2, 1.0):
            for n in (3, 5):
                z = np.eye(8)[:n]
                pair = ct.ContrastivePair(ad.constant(z), ad.constant(z), tau=tau)
                expected = np.log(1.0 + (n - 1) * np.exp(-1.0 / tau))
                np.testing.assert_allclose(ct.info_nce(pair).item(), expected, atol=1e-9)

    def test_sharper_temperature_lowers_separable_loss(self):
        z = np.eye(6)[:4]
        losses = [
            ct.info_nce(ct.ContrastivePair(ad.constant(z), ad.constant(z), tau=t)).item()
            for t in (0.03, 0.07, 0.2, 0.5)
        ]
        assert all(a < b for a, b in zip(losses, losses[1:]))

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        zc, za = unit_rows(rng, 5, 7), unit_rows(rng, 5, 7)
        r, _ = np.linalg.qr(rng.standard_normal((7, 7)))
        base = ct.info_nce(ct.ContrastivePair(ad.constant(zc), ad.constant(za))).item()
        rot = ct.info_nce(
            ct.ContrastivePair(ad.constant(zc @ r), ad.constant(za @ r))
        ).item()
        assert abs(base - rot) < 1e-9

    def test_symmetric_averages_directions(self):
        rng = np.random.default_rng(4)
        zc, za = unit_rows(rng, 4, 5), unit_rows(rng, 4, 5)
        fwd = ct.info_nce(ct.ContrastivePair(ad.constant(zc), ad.constant(za))).item()
        rev = ct.info_nce(ct.ContrastivePair(ad.constant(za), ad.constant(zc))).item()
        sym = ct.info_nce(ct.ContrastivePair(ad.constant(zc), ad.constant(za)), symmetric=True).item()
        np.testing.assert_allclose(sym, 0.5 * (fwd + rev), atol=1e-12)

    def test_scalar_loop_oracle(self):
        # naive per-row recomputation with plain floats
        rng = np.random.default_rng(5)
        zc, za = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        tau = 0.07
        total = 0.0
        for i in range(6):
            logits = [float(np.dot(zc[i], za[j])) / tau for j in range(6)]
            m = max(logits)
            total += -(logits[i] - m - np.log(sum(np.exp(l - m) for l in logits)))
        oracle = total / 6
        got = ct.info_nce(ct.ContrastivePair(ad.constant(zc), ad.constant(za), tau)).item()
        np.testing.assert_allclose(got, oracle, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        zc = ad.parameter(unit_rows(rng, 4, 5))
        za = ad.parameter(unit_rows(rng, 4, 5))
        err = ad.grad_check(
            lambda: ct.info_nce(ct.ContrastivePair(zc, za), symmetric=True), [zc, za]
        )
        assert err < 1e-6

    def test_bad_tau_and_shapes(self):
        z = ad.constant(np.eye(3))
        with pytest.raises(ParameterError):
            ct.info_nce(ct.ContrastivePair(z, z, tau=0.0))
        with pytest.raises(ShapeError):
            ct.info_nce(ct.ContrastivePair(z, ad.constant(np.eye(4))))


class TestProjectionHead:
    def make_head(self, seed=0, d=8, nonlinear=True):
        reg = ParamRegistry()
        rng = np.random.default_rng(seed)
        return ct.init_projection_head(reg, rng, d, nonlinear=nonlinear), rng

    def test_unit_norm_output(self):
        head, rng = self.make_head()
        q = QuerySet(ad.constant(rng.standard_normal((5, 8))), "refined")
        z = ct.project_normalize(q, head)
        assert z.stage == "projected"
        np.testing.assert_allclose(
            np.linalg.norm(z.vectors.values, axis=1), np.ones(5), atol=1e-12
        )

    def test_zero_row_stays_finite(self):
        head, _ = self.make_head()
        q = QuerySet(ad.constant(np.zeros((2, 8))), "refined")
        z = ct.project_normalize(q, head)
        assert np.isfinite(z.vectors.values).all()

    def test_stage_enforced(self):
        head, rng = self.make_head()
        with pytest.raises(ParameterError):
            ct.project_normalize(QuerySet(ad.constant(np.zeros((2, 8))), "generated"), head)

    def test_linear_head_scale_invariance(self):
        # biases start at zero, so a linear head followed by normalization
        # cannot see a positive rescaling of its input
        head, rng = self.make_head(seed=2, nonlinear=False)
        x = rng.standard_normal((4, 8))
        z1 = ct.project_normalize(QuerySet(ad.constant(x), "refined"), head)
        z2 = ct.project_normalize(QuerySet(ad.constant(3.7 * x), "refined"), head)
        np.testing.assert_allclose(z1.vectors.values, z2.vectors.values, atol=1e-9)

    def test_counters(self):
        instrument.reset()
        head, rng = self.make_head(seed=3)
        q1 = QuerySet(ad.constant(rng.standard_normal((3, 8))), "refined")
        q2 = QuerySet(ad.constant(rng.standard_normal((3, 8))), "refined")
        loss = ct.paired_contrastive_loss(
            ct.project_normalize(q1, head), ct.project_normalize(q2, head)
        )
        assert instrument.get("projection_head") == 2
        assert instrument.get("contrastive_branch") == 1
        assert np.isfinite(loss.item())

    def test_paired_loss_requires_projected(self):
        head, rng = self.make_head(seed=4)
        q = QuerySet(ad.constant(rng.standard_normal((3, 8))), "refined")
        with pytest.raises(ParameterError):
            ct.paired_contrastive_loss(q, q)
