from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from semcl.losses import (
    LossWeights,
    clip_logits,
    contrastive_loss,
    naive_kd_loss,
    select_target_rows,
    sg_kd_loss,
    sg_rl_loss,
    total_loss,
)
from semcl.semantics import distill_targets, one_hot_labels, soft_labels

from oracles import contrastive_oracle, kl_oracle, softmax_oracle


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def unit(x):
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    return x / torch.linalg.vector_norm(x, dim=1, keepdim=True)


# ---------------------------------------------------------------------------
# clip_logits


def test_clip_logits_orthonormal_paper_beta():
    eye = torch.eye(3, dtype=torch.float64)
    out = clip_logits(eye, eye, 100.0)
    assert torch.allclose(out.values, 100.0 * eye)
    assert out.scale_beta == 100.0


def test_clip_logits_beta_zero():
    x = unit(np.random.default_rng(0).standard_normal((3, 5)))
    assert torch.all(clip_logits(x, x, 0.0).values == 0)


def test_clip_logits_matches_dot_product_oracle():
    rng = np.random.default_rng(1)
    i = unit(rng.standard_normal((3, 6)))
    t = unit(rng.standard_normal((4, 6)))
    p = clip_logits(i, t, 7.5).values
    for a in range(3):
        for b in range(4):
            manual = 7.5 * sum(float(i[a, k]) * float(t[b, k]) for k in range(6))
            assert abs(float(p[a, b]) - manual) < 1e-6


def test_clip_logits_rejects_non_unit_rows():
    with pytest.raises(ValueError, match="unit norm"):
        clip_logits(t64([[2.0, 0.0]]), torch.eye(2, dtype=torch.float64), 1.0)
    with pytest.raises(ValueError, match="beta"):
        clip_logits(torch.eye(2, dtype=torch.float64), torch.eye(2, dtype=torch.float64), -1.0)


def test_clip_logits_bound():
    rng = np.random.default_rng(2)
    p = clip_logits(unit(rng.standard_normal((5, 8))), unit(rng.standard_normal((6, 8))), 100.0)
    assert float(p.values.abs().max()) <= 100.0 + 1e-4


# ---------------------------------------------------------------------------
# contrastive_loss


def test_contrastive_single_pair_is_zero():
    assert float(contrastive_loss(t64([[3.7]]))) == 0.0


def test_contrastive_uniform_is_log_n():
    for n in (2, 3, 5):
        loss = float(contrastive_loss(torch.full((n, n), 1.25, dtype=torch.float64)))
        assert abs(loss - math.log(n)) < 1e-12


def test_contrastive_identity_2x2_oracle():
    p = [[1.0, 0.0], [0.0, 1.0]]
    loss = float(contrastive_loss(t64(p)))
    assert abs(loss - contrastive_oracle(p)) < 1e-12
    assert abs(loss - 0.31326168751822286) < 1e-12


def test_contrastive_random_vs_oracle():
    rng = np.random.default_rng(3)
    p = rng.standard_normal((6, 6)) * 3
    loss = float(contrastive_loss(t64(p)))
    assert abs(loss - contrastive_oracle(p.tolist())) < 1e-10


def test_contrastive_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        contrastive_loss(torch.zeros(2, 3, dtype=torch.float64))


def test_contrastive_permutation_invariance():
    rng = np.random.default_rng(4)
    p = t64(rng.standard_normal((5, 5)))
    perm = torch.as_tensor(np.random.default_rng(5).permutation(5))
    permuted = p[perm][:, perm]
    assert abs(float(contrastive_loss(p)) - float(contrastive_loss(permuted))) < 1e-12


def test_contrastive_global_shift_exact():
    p = t64([[1.0, 0.0, 2.0], [0.0, 3.0, 1.0], [2.0, 1.0, 0.0]])
    assert float(contrastive_loss(p)) == float(contrastive_loss(p + 8.0))


def test_contrastive_duplicate_class_masking():
    # two samples of the same class: with masking, each row's denominator
    # drops the other duplicate, so the 2x2 all-same-class case reduces to
    # two independent single-pair losses (= 0).
    p = t64([[5.0, 5.0], [5.0, 5.0]])
    labels = torch.tensor([0, 0])
    assert float(contrastive_loss(p, labels=labels)) == 0.0
    # unmasked, the same matrix costs log 2
    assert abs(float(contrastive_loss(p)) - math.log(2)) < 1e-12


# ---------------------------------------------------------------------------
# sg_rl_loss


def test_sg_rl_zero_when_prediction_matches_target():
    c = soft_labels(np.array([[1.0, 0.5], [0.5, 1.0]]), 2.0)
    # logits whose softmax equals the target row exactly: log target works
    logits = t64(np.log(c.values))
    loss = float(sg_rl_loss(logits, torch.tensor([0, 1]), c))
    assert abs(loss) < 1e-12


def test_sg_rl_uniform_prediction_oracle_value():
    c = soft_labels(np.array([[1.0, 0.5], [0.5, 1.0]]), 13.0)
    logits = t64([[0.0, 0.0]])
    loss = float(sg_rl_loss(logits, torch.tensor([0]), c))
    expected = kl_oracle([0.5, 0.5], c.values[0].tolist())
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 2.5583) < 1e-3


def test_sg_rl_mean_reduction_under_duplication():
    c = soft_labels(np.array([[1.0, 0.2], [0.2, 1.0]]), 3.0)
    one = float(sg_rl_loss(t64([[1.0, -0.5]]), torch.tensor([0]), c))
    two = float(sg_rl_loss(t64([[1.0, -0.5], [1.0, -0.5]]), torch.tensor([0, 0]), c))
    assert abs(one - two) < 1e-12


def test_sg_rl_one_hot_mode_matches_cross_entropy():
    c = one_hot_labels(3)
    logits = t64([[2.0, 0.5, -1.0]])
    loss = float(sg_rl_loss(logits, torch.tensor([1]), c))
    probs = softmax_oracle([2.0, 0.5, -1.0])
    # KL(p || one-hot+eps) = -H(p) - sum_j p_j log(target_j); epsilon makes it finite
    expected = sum(p * math.log(p / t) for p, t in zip(probs, c.values[1]))
    assert abs(loss - expected) < 1e-10


def test_sg_rl_reverse_direction():
    c = soft_labels(np.array([[1.0, 0.3], [0.3, 1.0]]), 5.0)
    logits = t64([[1.0, 0.0]])
    fwd = float(sg_rl_loss(logits, torch.tensor([0]), c))
    rev = float(sg_rl_loss(logits, torch.tensor([0]), c, reverse_kl=True))
    pred = softmax_oracle([1.0, 0.0])
    assert abs(rev - kl_oracle(c.values[0].tolist(), pred)) < 1e-12
    assert fwd != rev


def test_sg_rl_shape_and_label_validation():
    c = soft_labels(np.eye(2), 1.0)
    with pytest.raises(ValueError, match="width"):
        sg_rl_loss(torch.zeros(1, 3, dtype=torch.float64), torch.tensor([0]), c)
    with pytest.raises(ValueError, match="range"):
        sg_rl_loss(torch.zeros(1, 2, dtype=torch.float64), torch.tensor([5]), c)


def test_sg_rl_row_shift_invariance_exact():
    c = soft_labels(np.array([[1.0, 0.5], [0.5, 1.0]]), 13.0)
    base = t64([[1.0, 3.0], [2.0, 0.0]])
    shift = base + torch.tensor([[4.0], [16.0]], dtype=torch.float64)
    labels = torch.tensor([0, 1])
    assert float(sg_rl_loss(base, labels, c)) == float(sg_rl_loss(shift, labels, c))


# ---------------------------------------------------------------------------
# naive_kd_loss


def test_naive_kd_identical_is_zero():
    p = t64([[0.4, -1.2, 3.0]])
    assert float(naive_kd_loss(p, p.clone())) == 0.0


def test_naive_kd_swapped_pair_oracle():
    loss = float(naive_kd_loss(t64([[1.0, 0.0]]), t64([[0.0, 1.0]])))
    expected = kl_oracle(softmax_oracle([1.0, 0.0]), softmax_oracle([0.0, 1.0]))
    assert abs(loss - expected) < 1e-12
    # equals tanh(1/2); the independent oracle is authoritative here
    assert abs(loss - math.tanh(0.5)) < 1e-12


def test_naive_kd_row_shift_invariance_exact():
    cur, prev = t64([[1.0, 0.0], [0.0, 2.0]]), t64([[3.0, 1.0], [1.0, 0.0]])
    assert float(naive_kd_loss(cur, prev)) == float(naive_kd_loss(cur + 4.0, prev + 8.0))


def test_naive_kd_rejects_empty_and_mismatched():
    with pytest.raises(ValueError, match="first task"):
        naive_kd_loss(torch.zeros(2, 0, dtype=torch.float64), torch.zeros(2, 0, dtype=torch.float64))
    with pytest.raises(ValueError, match="shape"):
        naive_kd_loss(torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 2, dtype=torch.float64))


# ---------------------------------------------------------------------------
# sg_kd_loss


def test_sg_kd_mu_zero_reduces_to_naive():
    rng = np.random.default_rng(6)
    cur, prev = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((3, 4)))
    rows = np.full((3, 4), 0.25)
    assert float(sg_kd_loss(cur, prev, rows, 0.0)) == float(naive_kd_loss(cur, prev))


def test_sg_kd_zero_when_everything_matches():
    target = np.array([[0.7, 0.3]])
    logits = t64(np.log(target))
    loss = float(sg_kd_loss(logits, logits.clone(), target, 1.0))
    assert abs(loss) < 1e-12


def test_sg_kd_single_sample_oracle():
    cur = t64([[0.0, 0.0]])
    prev = t64([[0.0, 0.0]])
    loss = float(sg_kd_loss(cur, prev, np.array([[0.9, 0.1]]), 1.0))
    expected = kl_oracle([0.5, 0.5], [0.9, 0.1])
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 0.5108256237659906) < 1e-12


def test_sg_kd_rejects_negative_mu_and_bad_rows():
    cur = t64([[0.0, 0.0]])
    with pytest.raises(ValueError, match="mu"):
        sg_kd_loss(cur, cur, np.array([[0.5, 0.5]]), -0.1)
    with pytest.raises(ValueError, match="target row"):
        sg_kd_loss(cur, cur, np.array([[1.0]]), 1.0)


def test_select_target_rows():
    d = distill_targets(np.array([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]]), 0.5)
    rows = select_target_rows(d, torch.tensor([2, 0]))
    assert np.array_equal(rows, d.values[[2, 0]])


# ---------------------------------------------------------------------------
# total_loss


def test_total_loss_reference_weights_arithmetic():
    w = LossWeights(0.5, 0.1)
    out = float(total_loss(1.0, 2.0, 3.0, w, first_task=False))
    assert abs(out - 2.3) < 1e-12


def test_total_loss_first_task_drops_distillation():
    w = LossWeights(0.5, 0.1)
    assert float(total_loss(1.0, 2.0, 99.0, w, first_task=True)) == 2.0


def test_total_loss_ft_mode_weights():
    w = LossWeights(0.0, 0.0)
    assert float(total_loss(1.5, 7.0, 9.0, w, first_task=False)) == 1.5


def test_total_loss_rejects_negative_component():
    with pytest.raises(ValueError, match="negative"):
        total_loss(-1.0, 0.0, 0.0, LossWeights(), first_task=False)


def test_loss_weights_validation():
    with pytest.raises(ValueError, match="lambda1"):
        LossWeights(lambda1=-0.1)
    with pytest.raises(ValueError, match="mu"):
        LossWeights(mu=-1.0)


# ---------------------------------------------------------------------------
# cross-cutting properties


def test_kl_losses_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(8)
    for _ in range(30):
        cur = t64(rng.standard_normal((4, 5)) * 3)
        prev = t64(rng.standard_normal((4, 5)) * 3)
        val = float(naive_kd_loss(cur, prev))
        assert val >= -1e-9
        if val < 1e-7:
            a = torch.softmax(cur, dim=1).numpy()
            b = torch.softmax(prev, dim=1).numpy()
            assert np.max(np.abs(a - b)) < 1e-3


def test_gradients_flow_through_all_losses():
    rng = np.random.default_rng(9)
    feats = torch.tensor(rng.standard_normal((3, 6)), requires_grad=True)
    i = feats / torch.linalg.vector_norm(feats, dim=1, keepdim=True)
    text = unit(rng.standard_normal((4, 6)))
    logits = clip_logits(i, text, 10.0).values
    c = soft_labels(np.eye(4) * 0.5 + 0.5, 2.0)
    labels = torch.tensor([0, 1, 2])
    pair = logits[:, labels]
    loss = total_loss(
        contrastive_loss(pair, labels=labels),
        sg_rl_loss(logits, labels, c),
        naive_kd_loss(logits[:, :2], logits.detach()[:, :2] + 0.3),
        LossWeights(0.5, 0.1),
        first_task=False,
    )
    loss.backward()
    assert feats.grad is not None
    assert torch.isfinite(feats.grad).all()
    assert float(feats.grad.abs().sum()) > 0
