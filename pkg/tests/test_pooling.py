import math

import numpy as np
import pytest
import torch

import oracles
from mscpt.baselines import AttentionPool, PooledClassifier, max_pool, mean_pool
from mscpt.pooling import LogitsTriple, PoolingError, cross_guided_logits, mscpt_loss, predict, topk_pool

t = lambda a: torch.as_tensor(np.asarray(a, dtype=float))  # noqa: E731


@pytest.mark.derived
def test_topk_sort_oracle_value():
    assert topk_pool(t([3.0, 1.0, 2.0]), 2).item() == 2.5
    assert oracles.topk_mean_bruteforce([3, 1, 2], 2) == 2.5


def test_topk_degenerate_and_saturated(rng):
    B = t(rng.standard_normal((4, 3)))
    assert topk_pool(B, 1).item() == B.max().item()
    assert abs(topk_pool(B, 12).item() - B.mean().item()) <= 1e-12


def test_topk_out_of_range_is_an_error():
    with pytest.raises(PoolingError, match="K_top=7"):
        topk_pool(torch.zeros(2, 3), 7)
    with pytest.raises(PoolingError):
        topk_pool(torch.zeros(2, 3), 0)


@pytest.mark.derived
@pytest.mark.parametrize("seed", range(5))
def test_cross_guided_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    Ph, Pl = rng.standard_normal((4, 8)), rng.standard_normal((3, 8))
    Zh, Zl = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    for cross in (True, False):
        got = cross_guided_logits(t(Ph), t(Pl), t(Zh), t(Zl), 2, 3, cross_guidance=cross)
        h, lo, o = oracles.cross_logits_bruteforce(Ph, Pl, Zh, Zl, 2, 3, cross)
        np.testing.assert_allclose(got.high.numpy(), h, atol=1e-6)
        np.testing.assert_allclose(got.low.numpy(), lo, atol=1e-6)
        np.testing.assert_allclose(got.overall.numpy(), o, atol=1e-6)


def test_duplicated_guidance_doubles(rng):
    Ph, Pl, Z = (t(rng.standard_normal(s)) for s in ((5, 4), (3, 4), (6, 4)))
    full = cross_guided_logits(Ph, Pl, Z, Z, 2, 2)
    same = cross_guided_logits(Ph, Pl, Z, Z, 2, 2, cross_guidance=False)
    torch.testing.assert_close(full.high, 2 * same.high)
    assert torch.argmax(full.overall) == torch.argmax(same.overall)


def test_single_patch_single_description_is_dot_product():
    Ph, Pl = t([[1.0, 2.0]]), t([[0.5, -1.0]])
    Zh, Zl = t([[1.0, 0.0], [0.0, 1.0]]), t([[2.0, 0.0], [0.0, 3.0]])
    out = cross_guided_logits(Ph, Pl, Zh, Zl, 2, 1)
    np.testing.assert_allclose(out.high.numpy(), [1.0 + 2.0, 2.0 + 6.0])
    np.testing.assert_allclose(out.low.numpy(), [0.5 + 1.0, -1.0 - 3.0])


def test_patch_permutation_invariance(rng):
    Ph, Pl, Zh, Zl = (t(rng.standard_normal(s)) for s in ((6, 4), (5, 4), (6, 4), (6, 4)))
    a = cross_guided_logits(Ph, Pl, Zh, Zl, 3, 2)
    b = cross_guided_logits(Ph[rng.permutation(6)], Pl[rng.permutation(5)], Zh, Zl, 3, 2)
    assert (a.overall - b.overall).abs().max() <= 1e-12


def test_column_count_must_split():
    with pytest.raises(PoolingError, match="split"):
        cross_guided_logits(torch.zeros(2, 3), torch.zeros(2, 3), torch.ones(5, 3), torch.ones(4, 3), 2, 1)


def test_uniform_logits_loss():
    z = torch.zeros(2, dtype=torch.float64)
    assert abs(mscpt_loss(LogitsTriple(z, z, z), 1).item() - 3 * math.log(2)) <= 1e-12
    assert abs(3 * math.log(2) - 2.0794) < 1e-4


@pytest.mark.derived
def test_loss_matches_scalar_oracle(rng):
    h, lo = rng.standard_normal(3), rng.standard_normal(3)
    tri = LogitsTriple.from_scales(t(h), t(lo))
    want = sum(oracles.cross_entropy(list(v), 2) for v in (list((h + lo) / 2), list(h), list(lo)))
    assert abs(mscpt_loss(tri, 2).item() - want) <= 1e-8


def test_loss_decreases_with_margin():
    vals = []
    for m in (0.5, 1.0, 2.0, 4.0, 8.0):
        z = t([0.0, m])
        vals.append(mscpt_loss(LogitsTriple(z, z, z), 1).item())
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-2


def test_loss_bad_label():
    z = torch.zeros(2)
    with pytest.raises(PoolingError, match="label 2"):
        mscpt_loss(LogitsTriple(z, z, z), 2)


def test_predict_rules():
    assert predict(LogitsTriple(t([0.0, 0.0]), t([0.0, 0.0]), t([0.2, 0.9]))) == 1
    assert predict(LogitsTriple(t([0.0, 0.0]), t([0.0, 0.0]), t([0.5, 0.5]))) == 0
    assert predict(LogitsTriple(t([9.0, 0.0]), t([9.0, 0.0]), t([0.1, 0.2]))) == 1


def test_averaging_identity(rng):
    h, lo = t(rng.standard_normal(4)), t(rng.standard_normal(4))
    tri = LogitsTriple.from_scales(h, lo)
    assert (tri.overall - (tri.high + tri.low) / 2).abs().max() <= 1e-9


@pytest.mark.derived
def test_mean_max_hand_values():
    P = t([[0.0, 2.0], [2.0, 0.0]])
    np.testing.assert_array_equal(mean_pool(P).numpy(), [1.0, 1.0])
    np.testing.assert_array_equal(max_pool(P).numpy(), [2.0, 2.0])
    one = t([[3.0, -1.0]])
    np.testing.assert_array_equal(mean_pool(one).numpy(), one[0].numpy())
    np.testing.assert_array_equal(max_pool(one).numpy(), one[0].numpy())
    with pytest.raises(ValueError, match="empty"):
        mean_pool(torch.zeros(0, 2))


def test_attention_pool_weights(rng):
    torch.manual_seed(0)
    pool = AttentionPool(4).double()
    emb, w = pool(t(rng.standard_normal((1, 4))))
    assert w.item() == pytest.approx(1.0)
    _, w = pool(t(np.tile(rng.standard_normal(4), (5, 1))))
    np.testing.assert_allclose(w.detach().numpy(), 0.2, atol=1e-12)
    P = t(rng.standard_normal((6, 4)))
    perm = rng.permutation(6)
    e1, w1 = pool(P)
    e2, w2 = pool(P[perm])
    torch.testing.assert_close(e1, e2)
    torch.testing.assert_close(w1[perm], w2)


@pytest.mark.derived
def test_attention_pool_grad_finite_differences(rng):
    torch.manual_seed(1)
    pool = AttentionPool(6).double()
    P = t(rng.standard_normal((5, 6)))
    v = t(rng.standard_normal(6))

    def f():
        return torch.tanh(pool(P)[0] @ v)

    f().backward()
    for p in pool.parameters():
        assert oracles.rel_err(p.grad, oracles.central_fd(f, p)) <= 1e-4


@pytest.mark.parametrize("agg", ["mean", "max", "attention"])
def test_pooled_classifier_permutation_invariant(agg, rng):
    torch.manual_seed(0)
    clf = PooledClassifier(4, 3, agg).double()
    P = t(rng.standard_normal((7, 4)))
    a, _ = clf(P)
    b, _ = clf(P[rng.permutation(7)])
    assert a.shape == (3,) and (a - b).abs().max() <= 1e-12
    with pytest.raises(ValueError, match="aggregator"):
        PooledClassifier(4, 3, "median")
