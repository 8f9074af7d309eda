import numpy as np
import pytest

from warpdistill.errors import UsageError
from warpdistill.gradcheck import make_micro_instance
from warpdistill.numerics import Rng, finite_diff_grad, max_rel_err
from warpdistill.pipeline import distill_losses
from warpdistill.projection import (
    CmaResult,
    ProjectorSet,
    build_cma,
    project_dual,
    project_teacher_reprs,
    row_std_normalize,
)


def random_pieces(seed, s=4, t=3, ds=8, dt=12):
    rng = Rng(seed)
    proj = ProjectorSet(ds, dt, rng.child("p").seed)
    es, ets = rng.normal(s, ds), rng.normal(s, ds)
    et, ett = rng.normal(t, dt), rng.normal(t, dt)
    ht = rng.normal(t, dt)
    hs = rng.normal(s, ds)
    return proj, es, ets, et, ett, hs, ht


class TestBuildCma:
    def test_zero_query_gives_uniform_rows(self):
        proj, es, ets, et, ett, _, _ = random_pieces(0)
        out = build_cma(np.zeros_like(es), np.zeros_like(ets), et, ett, proj)
        assert np.allclose(out.attention, 1.0 / 3.0)

    def test_single_position_each_side(self):
        proj, *_ = random_pieces(1)
        rng = Rng(2)
        out = build_cma(rng.normal(1, 8), rng.normal(1, 8),
                        rng.normal(1, 12), rng.normal(1, 12), proj)
        assert np.allclose(out.attention, [[1.0]])
        assert np.allclose(out.reverse, [[1.0]])

    def test_rows_stochastic_over_many_seeds(self):
        for seed in range(100):
            proj, es, ets, et, ett, _, _ = random_pieces(seed)
            out = build_cma(es, ets, et, ett, proj)
            assert np.abs(out.attention.sum(axis=1) - 1.0).max() <= 1e-9
            assert np.abs(out.reverse.sum(axis=1) - 1.0).max() <= 1e-9
            assert out.attention.shape == (4, 3)
            assert out.reverse.shape == (3, 4)

    def test_empty_sequence_rejected(self):
        proj, es, ets, et, ett, _, _ = random_pieces(3)
        with pytest.raises(UsageError):
            build_cma(es[:0], ets[:0], et, ett, proj)


class TestProjectDual:
    def test_identity_attention_passes_values_through(self):
        proj, es, ets, et, ett, hs, ht = random_pieces(4, s=3, t=3)
        cma = CmaResult(
            query=np.zeros((3, 24)), key=np.zeros((3, 24)), scale=1.0,
            attention=np.eye(3), reverse=np.eye(3),
            student_concat=np.concatenate([es, ets], axis=1),
        )
        head_s = Rng(5).normal(8, 11)
        head_t = Rng(6).normal(12, 13)
        out = project_dual(cma, hs, ett, ht, head_s, head_t, proj, 2.0)
        assert np.array_equal(out.aligned_to_student, out.value)

    def test_distribution_rows_sum_to_one(self):
        proj, es, ets, et, ett, hs, ht = random_pieces(7)
        cma = build_cma(es, ets, et, ett, proj)
        head_s = Rng(8).normal(8, 11)
        head_t = Rng(9).normal(12, 13)
        out = project_dual(cma, hs, ett, ht, head_s, head_t, proj, 2.0)
        assert np.abs(out.p_teacher_to_student.sum(axis=1) - 1.0).max() <= 1e-9
        assert np.abs(out.p_student_to_teacher.sum(axis=1) - 1.0).max() <= 1e-9
        assert out.p_teacher_to_student.shape == (4, 11)
        assert out.p_student_to_teacher.shape == (3, 13)

    def test_head_width_mismatch_rejected(self):
        proj, es, ets, et, ett, hs, ht = random_pieces(10)
        cma = build_cma(es, ets, et, ett, proj)
        with pytest.raises(UsageError):
            project_dual(cma, hs, ett, ht, Rng(0).normal(9, 11),
                         Rng(1).normal(12, 13), proj, 2.0)


class TestFrozenTeacher:
    def test_teacher_tensors_never_touched(self):
        inst = make_micro_instance(3)
        before = {k: v.copy() for k, v in inst.teacher.params.items()}
        _, student_grads, proj_grads, _ = distill_losses(
            inst.student, inst.teacher, inst.projectors, inst.example, inst.settings
        )
        for name in before:
            assert np.array_equal(inst.teacher.params[name], before[name])
        assert set(student_grads) == set(inst.student.params)
        assert set(proj_grads) == set(inst.projectors.params)

    def test_student_hidden_gradient_matches_fd_through_reverse_projection(self):
        """kd_teacher reaches the student only through its hidden states
        and the reverse alignment; check that path end to end."""
        inst = make_micro_instance(5)
        from warpdistill.gradcheck import check_component

        assert check_component(inst, "kd_teacher") < 1e-4


class TestProjectTeacherReprs:
    def test_zero_maps_give_zero_grids(self):
        proj, es, ets, et, ett, hs, ht = random_pieces(11)
        proj.params["we"][:] = 0.0
        proj.params["wh"][:] = 0.0
        e_out, h_out = project_teacher_reprs(et, ht, proj)
        assert not e_out.any() and not h_out.any()

    def test_identity_when_widths_match(self):
        rng = Rng(12)
        proj = ProjectorSet(6, 6, 0)
        proj.params["we"] = np.eye(6)
        proj.params["wh"] = np.eye(6)
        et, ht = rng.normal(4, 6), rng.normal(4, 6)
        e_out, h_out = project_teacher_reprs(et, ht, proj)
        assert np.array_equal(e_out, et)
        assert np.array_equal(h_out, ht)

    def test_width_mismatch_rejected(self):
        proj, *_ = random_pieces(13)
        with pytest.raises(UsageError):
            project_teacher_reprs(np.ones((3, 5)), np.ones((3, 5)), proj)

    def test_embedding_map_gradient_through_full_alignment_loss(self):
        """Full finite differences over every entry of the embedding
        bridge, through the banded alignment objective."""
        inst = make_micro_instance(6)
        from warpdistill.gradcheck import _frozen_constants, _term_value

        coeffs = {"ndtw_embed": 1.0, "ndtw_hidden": 1.0}
        weights, band = _frozen_constants(inst)
        _, _, proj_grads, _ = distill_losses(
            inst.student, inst.teacher, inst.projectors, inst.example, inst.settings,
            term_coeffs=coeffs, frozen_weights=weights, frozen_band=band,
        )
        we = inst.projectors.params["we"]

        def loss(mat):
            inst.projectors.params["we"] = mat
            value = _term_value(inst, coeffs, weights, band, "total")
            return value

        orig = we.copy()
        fd = finite_diff_grad(loss, orig, eps=1e-5)
        inst.projectors.params["we"] = orig
        assert max_rel_err(proj_grads["we"], fd) < 1e-4


class TestRowStdNormalize:
    def test_unit_std_rows(self):
        x = Rng(14).normal(5, 16, scale=3.0)
        out = row_std_normalize(x)
        assert np.allclose(out.std(axis=1), 1.0, atol=1e-5)

    def test_constant_row_guarded(self):
        out = row_std_normalize(np.full((1, 4), 7.0))
        assert np.isfinite(out).all()


class TestProjectorSet:
    def test_namespacing_round_trip(self):
        proj = ProjectorSet(8, 12, 42)
        spaced = proj.to_namespaced()
        assert all(k.startswith("proj/") for k in spaced)
        back = ProjectorSet.from_namespaced(8, 12, spaced)
        for k in proj.params:
            assert np.array_equal(back.params[k], proj.params[k])

    def test_missing_tensor_rejected(self):
        proj = ProjectorSet(8, 12, 42)
        spaced = proj.to_namespaced()
        spaced.pop("proj/wq")
        with pytest.raises(UsageError, match="wq"):
            ProjectorSet.from_namespaced(8, 12, spaced)

    def test_shapes(self):
        proj = ProjectorSet(8, 12, 1)
        assert proj.params["wq"].shape == (16, 24)
        assert proj.params["wv"].shape == (12, 8)
        assert proj.params["wst"].shape == (8, 12)
        assert proj.params["we"].shape == (8, 12)
        assert proj.params["wh"].shape == (8, 12)
