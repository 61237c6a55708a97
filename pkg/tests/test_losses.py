"""Loss oracles: analytic cases plus independent per-term summations."""
import numpy as np
import pytest

from gotham import autodiff as ad
from gotham.losses import (LossParts, LossWeights, loss_cluster,
                           loss_finetune_total, loss_kd_align, loss_kd_emb,
                           loss_seg, loss_sem, loss_train_total)


def T(x):
    return ad.constant(np.asarray(x, dtype=np.float64))


# -- clustering ----------------------------------------------------------------

def test_cluster_zero_inside_boundary():
    emb = {0: T([[0.0, 0.005], [0.003, 0.0]])}
    protos = {0: T([0.0, 0.0])}
    out = loss_cluster(emb, protos, gamma=0.01)
    assert out.item() == 0.0


def test_cluster_one_sample_at_gamma_plus_one():
    emb = {0: T([[1.5 + 1.0, 0.0]])}
    protos = {0: T([1.5, 0.0])}
    # distance gamma + 1 with gamma = 0 -> hinge exactly 1
    assert loss_cluster(emb, protos, gamma=0.0).item() == pytest.approx(1.0)
    emb2 = {0: T([[0.01 + 1.0, 0.0]])}
    protos2 = {0: T([0.0, 0.0])}
    assert loss_cluster(emb2, protos2, gamma=0.01).item() == pytest.approx(1.0)


def cluster_oracle(emb_by_class, protos, gamma, variant):
    """Direct per-term summation, kept independent of the library."""
    total = 0.0
    for cls, emb in emb_by_class.items():
        h = np.maximum(np.linalg.norm(emb - protos[cls], axis=1) - gamma, 0.0)
        if variant == "mean_hinge":
            total += h.mean()
        else:
            s = h.sum()
            total += (h ** 2).sum() / s if s > 0 else 0.0
    return total / len(emb_by_class)


@pytest.mark.parametrize("variant", ["mean_hinge", "self_normalized"])
def test_cluster_matches_direct_oracle(variant):
    rng = np.random.default_rng(0)
    emb = {0: rng.standard_normal((3, 4)), 1: rng.standard_normal((3, 4))}
    protos = {0: rng.standard_normal(4), 1: rng.standard_normal(4)}
    got = loss_cluster({c: T(v) for c, v in emb.items()},
                       {c: T(v) for c, v in protos.items()}, 0.5, variant)
    want = cluster_oracle(emb, protos, 0.5, variant)
    assert got.item() == pytest.approx(want, abs=1e-12)


def test_cluster_raw_printed_form_is_degenerate():
    # the un-squared self-normalized sum equals 1 per class whenever any
    # hinge is active, carrying no gradient signal; this pins down why the
    # squared-numerator variant is the selectable fallback, not the raw form
    rng = np.random.default_rng(1)
    for _ in range(2):
        emb = rng.standard_normal((4, 3)) * 3.0
        proto = rng.standard_normal(3)
        h = np.maximum(np.linalg.norm(emb - proto, axis=1) - 0.01, 0.0)
        assert h.sum() > 0
        raw = (h / h.sum()).sum()
        assert raw == pytest.approx(1.0, abs=1e-12)


def test_cluster_nonnegative_property():
    rng = np.random.default_rng(2)
    for trial in range(10):
        emb = {c: T(rng.standard_normal((rng.integers(1, 5), 3)))
               for c in range(3)}
        protos = {c: T(rng.standard_normal(3)) for c in range(3)}
        for variant in ("mean_hinge", "self_normalized"):
            assert loss_cluster(emb, protos, 0.1, variant).item() >= 0.0


# -- segregation ----------------------------------------------------------------

def test_seg_two_prototypes_at_distance_e():
    protos = {0: T([0.0, 0.0]), 1: T([np.e, 0.0])}
    assert loss_seg(protos, 1e-8).item() == pytest.approx(-1.0, abs=1e-9)


def test_seg_distance_one_is_zero():
    protos = {0: T([0.0]), 1: T([1.0])}
    assert loss_seg(protos, 1e-8).item() == pytest.approx(0.0, abs=1e-12)


def test_seg_coincident_guarded():
    eps = 1e-8
    protos = {0: T([1.0, 1.0]), 1: T([1.0, 1.0]), 2: T([5.0, 0.0])}
    out = loss_seg(protos, eps).item()
    assert np.isfinite(out)
    # pair (0,1) twice at the floor; the other four pairs at real distances
    d02 = np.linalg.norm([4.0, 1.0])
    expected = -(2 * np.log(eps) + 2 * np.log(d02) + 2 * np.log(d02)) / 3
    assert out == pytest.approx(expected, rel=1e-9)


def test_seg_single_prototype_warns_zero():
    with pytest.warns(UserWarning):
        out = loss_seg({0: T([1.0, 2.0])}, 1e-8)
    assert out.item() == 0.0


def test_seg_matches_pairwise_oracle():
    rng = np.random.default_rng(3)
    protos = {c: rng.standard_normal(4) for c in range(5)}
    got = loss_seg({c: T(v) for c, v in protos.items()}, 1e-8).item()
    acc = 0.0
    for j in protos:
        for p in protos:
            if p != j:
                acc += np.log(max(np.linalg.norm(protos[j] - protos[p]), 1e-8))
    assert got == pytest.approx(-acc / 5, rel=1e-12)


def test_seg_decreases_as_distance_grows():
    vals = [loss_seg({0: T([0.0]), 1: T([d])}, 1e-8).item()
            for d in (0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


# -- semantic alignment -----------------------------------------------------------

def test_sem_zero_when_aligned():
    enc = {0: T([1.0, 2.0]), 1: T([3.0, 4.0])}
    protos = {0: T([1.0, 2.0]), 1: T([3.0, 4.0])}
    assert loss_sem(enc, protos).item() == 0.0


def test_sem_three_four_five():
    enc = {0: T([3.0, 4.0])}
    protos = {0: T([0.0, 0.0])}
    assert loss_sem(enc, protos).item() == pytest.approx(5.0)


def test_sem_matches_direct_oracle():
    rng = np.random.default_rng(4)
    enc = {c: rng.standard_normal(6) for c in range(4)}
    protos = {c: rng.standard_normal(6) for c in range(4)}
    got = loss_sem({c: T(v) for c, v in enc.items()},
                   {c: T(v) for c, v in protos.items()}).item()
    want = sum(np.linalg.norm(enc[c] - protos[c]) for c in range(4))
    assert got == pytest.approx(want, abs=1e-12)


def test_sem_missing_class_rejected():
    with pytest.raises(ValueError, match="1"):
        loss_sem({0: T([1.0])}, {0: T([1.0]), 1: T([2.0])})


# -- distillation -----------------------------------------------------------------

def test_kd_emb_identical_zero():
    x = np.random.default_rng(5).standard_normal((4, 3))
    assert loss_kd_emb(x, T(x)).item() == 0.0


def test_kd_emb_unit_offsets():
    teacher = np.zeros((2, 3))
    student = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert loss_kd_emb(teacher, T(student)).item() == pytest.approx(1.0)


def test_kd_emb_matches_oracle():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    want = np.linalg.norm(a - b, axis=1).mean()
    assert loss_kd_emb(a, T(b)).item() == pytest.approx(want, abs=1e-12)


def test_kd_emb_empty_set_zero():
    assert loss_kd_emb(np.zeros((0, 3)), None).item() == 0.0


def test_kd_align_identical_orthogonal_antiparallel():
    v = np.array([[1.0, 2.0, 2.0]])
    assert loss_kd_align(v, T(v)).item() == pytest.approx(0.0, abs=1e-12)
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    assert loss_kd_align(a, T(b)).item() == pytest.approx(1.0, abs=1e-12)
    assert loss_kd_align(a, T(-a)).item() == pytest.approx(2.0, abs=1e-12)


def test_kd_align_range_property():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        val = loss_kd_align(a, T(b)).item()
        assert 0.0 <= val <= 2.0


def test_kd_align_norm_guard_contributes_one():
    teacher = np.array([[0.0, 0.0], [1.0, 0.0]])
    student = T(np.array([[1.0, 1.0], [1.0, 0.0]]))
    # first row guarded (teacher norm 0) -> 1; second row identical -> 0
    assert loss_kd_align(teacher, student).item() == pytest.approx(0.5, abs=1e-12)


def test_kd_align_empty_zero():
    assert loss_kd_align(np.zeros((0, 2)), None).item() == 0.0


# -- composite objectives ----------------------------------------------------------

def parts(c=0.3, s=-0.7, m=1.1, e=0.2, a=0.4):
    return LossParts(cluster=T(c), seg=T(s), sem=T(m), kd_emb=T(e), kd_align=T(a))


def test_train_total_table_weights():
    w = LossWeights()          # alpha = (1, 0.25, 1)
    total = loss_train_total(parts(), w, "gfscil_semantic")
    assert total.item() == pytest.approx(1.0 * 0.3 + 0.25 * -0.7 + 1.0 * 1.1)


def test_train_total_plain_skips_sem():
    w = LossWeights()
    total = loss_train_total(parts(), w, "gfscil_plain")
    assert total.item() == pytest.approx(0.3 + 0.25 * -0.7)


def test_train_total_zero_parts():
    w = LossWeights()
    assert loss_train_total(parts(0, 0, 0), w, "gcl").item() == 0.0


def test_finetune_total_hand_sum():
    w = LossWeights(alpha4=2.0, lambda1=1.0, lambda2=1.0)
    total = loss_finetune_total(parts(), w, "gcl")
    want = 0.3 + 0.25 * -0.7 + 1.1 + 2.0 * (0.2 + 0.4)
    assert total.item() == pytest.approx(want)


def test_finetune_total_plain_drops_align():
    w = LossWeights(alpha4=1.0)
    total = loss_finetune_total(parts(), w, "gfscil_plain")
    want = 0.3 + 0.25 * -0.7 + 1.0 * 0.2
    assert total.item() == pytest.approx(want)


def test_finetune_alpha4_zero_reduces_to_train():
    w0 = LossWeights(alpha4=0.0)
    p = parts()
    assert loss_finetune_total(p, w0, "gcl").item() == \
        loss_train_total(p, w0, "gcl").item()


# -- shared properties ---------------------------------------------------------------

def test_translation_invariance_exact():
    # integer-valued data keeps float arithmetic exact under the shift
    rng = np.random.default_rng(8)
    emb = {c: rng.integers(-5, 5, size=(3, 4)).astype(float) for c in range(3)}
    protos = {c: rng.integers(-5, 5, size=4).astype(float) for c in range(3)}
    shift = np.array([2.0, -8.0, 16.0, 4.0])

    before_c = loss_cluster({c: T(v) for c, v in emb.items()},
                            {c: T(v) for c, v in protos.items()}, 0.5).item()
    after_c = loss_cluster({c: T(v + shift) for c, v in emb.items()},
                           {c: T(v + shift) for c, v in protos.items()}, 0.5).item()
    assert before_c == after_c

    before_s = loss_seg({c: T(v) for c, v in protos.items()}, 1e-8).item()
    after_s = loss_seg({c: T(v + shift) for c, v in protos.items()}, 1e-8).item()
    assert before_s == after_s


def test_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(gamma=-0.1)
    with pytest.raises(ValueError):
        LossWeights(epsilon_log=0.0)
    with pytest.raises(ValueError):
        LossWeights(alpha2=-1.0)
