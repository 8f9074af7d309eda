"""Finite-difference verification of every analytic gradient.

For each loss term the check freezes the token weights and the band at
their unperturbed values (they are constants of the objective, so the
reference must hold them fixed), isolates the term via its coefficient,
then compares analytic gradients against central differences at sampled
parameter coordinates of both the student and the projectors.

``run_loss_gradcheck`` covers the six loss terms plus the
coefficient-weighted total; ``run_softdtw_gradcheck`` exercises the
alignment machinery in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LmConfig, TinyLm
from .numerics import Rng, finite_diff_grad, max_rel_err, rel_err
from .pipeline import EncodedExample, LossSettings, TERMS, distill_losses
from .projection import ProjectorSet
from .softdtw import BandParams, cosine_cost, cosine_cost_backward, ndtw, soft_dtw
from .tokenizers import BOS, EOS

COMPONENTS = TERMS + ("total",)


@dataclass
class MicroInstance:
    student: TinyLm
    teacher: TinyLm
    projectors: ProjectorSet
    example: EncodedExample
    settings: LossSettings


def make_micro_instance(seed: int, settings: LossSettings | None = None) -> MicroInstance:
    """Tiny random models and a tiny example (6 student / 5 teacher steps)."""
    rng = Rng(seed)
    student = TinyLm(LmConfig(vocab_size=11, width=8, layers=1, heads=2,
                              context=16, seed=rng.child("s").seed))
    teacher = TinyLm(LmConfig(vocab_size=13, width=12, layers=1, heads=2,
                              context=16, seed=rng.child("t").seed))
    projectors = ProjectorSet(8, 12, rng.child("p").seed)
    tok_rng = rng.child("tokens")
    s_body = [tok_rng.integers(4, 11) for _ in range(5)]
    t_body = [tok_rng.integers(4, 13) for _ in range(4)]
    example = EncodedExample(
        prompt="", response="",
        student_ids=tuple([BOS] + s_body + [EOS]),
        teacher_ids=tuple([BOS] + t_body + [EOS]),
        student_prompt_len=2,
        teacher_prompt_len=1,
    )
    if settings is None:
        settings = LossSettings()
    return MicroInstance(student, teacher, projectors, example, settings)


def _frozen_constants(inst: MicroInstance):
    """Weights and band evaluated once at the unperturbed parameters."""
    _, _, _, diag = distill_losses(
        inst.student, inst.teacher, inst.projectors, inst.example, inst.settings,
        want_grads=False,
    )
    weights = (diag.weights_student, diag.weights_teacher)
    band = diag.dtw.band if diag.dtw is not None else None
    return weights, band


def _term_value(inst: MicroInstance, coeffs, weights, band, field: str) -> float:
    breakdown, _, _, _ = distill_losses(
        inst.student, inst.teacher, inst.projectors, inst.example, inst.settings,
        term_coeffs=coeffs, frozen_weights=weights, frozen_band=band,
        want_grads=False,
    )
    return getattr(breakdown, field)


def check_component(
    inst: MicroInstance,
    component: str,
    coords_per_tensor: int = 1,
    max_tensors: int = 24,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference grads."""
    if component == "total":
        coeffs = inst.settings.coeffs()
        field = "total"
    else:
        coeffs = {component: 1.0}
        field = component
    weights, band = _frozen_constants(inst)
    _, student_grads, proj_grads, _ = distill_losses(
        inst.student, inst.teacher, inst.projectors, inst.example, inst.settings,
        term_coeffs=coeffs, frozen_weights=weights, frozen_band=band,
    )
    owners = [
        (inst.student.params, student_grads),
        (inst.projectors.params, proj_grads),
    ]
    tensors = [(params, grads, name) for params, grads in owners for name in params]
    pick_rng = Rng(inst.student.cfg.seed).child(f"coords-{component}")
    pick_rng.shuffle(tensors)
    worst = 0.0
    for params, grads, name in tensors[:max_tensors]:
        arr = params[name]
        for _ in range(coords_per_tensor):
            i = pick_rng.integers(0, arr.shape[0])
            j = pick_rng.integers(0, arr.shape[1])
            orig = arr[i, j]
            arr[i, j] = orig + eps
            fp = _term_value(inst, coeffs, weights, band, field)
            arr[i, j] = orig - eps
            fm = _term_value(inst, coeffs, weights, band, field)
            arr[i, j] = orig
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, rel_err(grads[name][i, j], fd))
    return worst


def run_loss_gradcheck(
    seeds, coords_per_tensor: int = 1, max_tensors: int = 24,
    components=COMPONENTS,
) -> list[tuple[str, float]]:
    """Per-component worst relative error across all requested seeds."""
    rows = []
    for component in components:
        worst = 0.0
        for seed in seeds:
            inst = make_micro_instance(seed)
            worst = max(worst, check_component(inst, component, coords_per_tensor, max_tensors))
        rows.append((component, worst))
    return rows


def run_softdtw_gradcheck(seeds, gamma: float = 0.1, eps: float = 1e-5) -> list[tuple[str, float]]:
    """Alignment-only suite: DP gradient, divergence gradient, cost gradient.

    eps=1e-5 balances truncation against roundoff; smaller steps drown
    the near-zero occupancies of rarely visited cells in noise.
    """
    worst_dp = worst_ndtw = worst_cos = 0.0
    for seed in seeds:
        rng = Rng(seed).child("softdtw-suite")
        c = np.abs(rng.normal(6, 5))
        res = soft_dtw(c, gamma)
        fd = finite_diff_grad(lambda m: soft_dtw(m, gamma).score, c, eps=eps)
        worst_dp = max(worst_dp, max_rel_err(res.grad, fd))

        x = rng.normal(4, 3)
        y = rng.normal(3, 3)
        out = ndtw(x, y, None, gamma)
        fd_x = finite_diff_grad(lambda g: ndtw(g, y, None, gamma).value, x, eps=eps)
        fd_y = finite_diff_grad(lambda g: ndtw(x, g, None, gamma).value, y, eps=eps)
        worst_ndtw = max(worst_ndtw, max_rel_err(out.d_x, fd_x), max_rel_err(out.d_y, fd_y))

        d_cost = rng.normal(4, 3)
        dx, dy = cosine_cost_backward(x, y, d_cost)
        fd_cx = finite_diff_grad(lambda g: float((cosine_cost(g, y) * d_cost).sum()), x, eps=eps)
        fd_cy = finite_diff_grad(lambda g: float((cosine_cost(x, g) * d_cost).sum()), y, eps=eps)
        worst_cos = max(worst_cos, max_rel_err(dx, fd_cx), max_rel_err(dy, fd_cy))
    return [
        ("softdtw-grad", worst_dp),
        ("ndtw-grad", worst_ndtw),
        ("cosine-grad", worst_cos),
    ]
