"""Fusion blocks: identity init, affineness in the target, alignment contracts."""

import numpy as np
import pytest

from afragent import afr, numerics as nm
from conftest import assert_grads_match, rand_const


def _randomize(block, rng, scale=0.3):
    """Knock a block off its identity init so coefficients depend on input."""
    for p in block.params().values():
        p.data[...] = rng.standard_normal(p.shape) * scale


def test_identity_at_init_bitwise():
    rng = np.random.default_rng(0)
    block = afr.AFRBlock(rng, d_in=6, d_hidden=10, d_out=5)
    enrich = nm.tensor(rng.standard_normal((7, 6)))
    target = nm.tensor(np.abs(rng.standard_normal((7, 5))) + 0.1)
    out = block.modulate(enrich, target)
    assert out.data.tobytes() == target.data.tobytes()


def test_coefficients_at_init():
    rng = np.random.default_rng(1)
    block = afr.AFRBlock(rng, 4, 8, 4)
    alpha, beta = block.coefficients(nm.tensor(rng.standard_normal((3, 4))))
    assert np.array_equal(alpha.data, np.ones((3, 4)))
    assert np.array_equal(beta.data, np.zeros((3, 4)))


def test_residual_identity_at_init():
    rng = np.random.default_rng(2)
    fuse = afr.ResidualFusion(rng, 6, 10, 5)
    enrich = nm.tensor(rng.standard_normal((4, 6)))
    target = nm.tensor(rng.standard_normal((4, 5)))
    out = fuse.fuse(enrich, target)
    assert np.array_equal(out.data, target.data)


def test_affine_in_target_for_fixed_enrichment():
    rng = np.random.default_rng(3)
    block = afr.AFRBlock(rng, 6, 12, 5)
    _randomize(block, rng)
    enrich = nm.tensor(rng.standard_normal((8, 6)))
    for _ in range(25):
        t1 = nm.tensor(rng.standard_normal((8, 5)))
        t2 = nm.tensor(rng.standard_normal((8, 5)))
        lam = float(rng.uniform(-2, 2))
        mix = nm.tensor(lam * t1.data + (1 - lam) * t2.data)
        out_mix = block.modulate(enrich, mix).data
        combo = lam * block.modulate(enrich, t1).data + (1 - lam) * block.modulate(enrich, t2).data
        assert np.max(np.abs(out_mix - combo)) < 1e-9


def test_alignment_error_names_both_counts():
    rng = np.random.default_rng(4)
    block = afr.AFRBlock(rng, 6, 8, 5)
    enrich = nm.tensor(rng.standard_normal((7, 6)))
    target = nm.tensor(rng.standard_normal((9, 5)))
    with pytest.raises(afr.AlignmentError) as e:
        block.modulate(enrich, target)
    assert "7" in str(e.value) and "9" in str(e.value)


def test_width_contracts():
    rng = np.random.default_rng(5)
    block = afr.AFRBlock(rng, 6, 8, 5)
    with pytest.raises(nm.ShapeError):
        block.coefficients(nm.tensor(rng.standard_normal((3, 4))))
    with pytest.raises(nm.ShapeError):
        block.modulate(nm.tensor(rng.standard_normal((3, 6))), nm.tensor(rng.standard_normal((3, 4))))


def test_high_res_beta_source_switch():
    rng = np.random.default_rng(6)
    block = afr.AFRBlock(rng, 5, 8, 5)
    _randomize(block, rng)
    crops_q = nm.tensor(rng.standard_normal((6, 5)))
    image_q = nm.tensor(rng.standard_normal((6, 5)))
    high = afr.enrich_high_res(block, crops_q, image_q, beta_source="high")
    image = afr.enrich_high_res(block, crops_q, image_q, beta_source="image")
    assert not np.allclose(high.data, image.data)
    # identical streams collapse the distinction
    same = nm.tensor(rng.standard_normal((6, 5)))
    a = afr.enrich_high_res(block, same, same, beta_source="high")
    b = afr.enrich_high_res(block, same, same, beta_source="image")
    assert np.allclose(a.data, b.data, atol=1e-12)
    with pytest.raises(ValueError):
        afr.enrich_high_res(block, crops_q, image_q, beta_source="nope")


def test_low_res_enrichment_is_token_aligned():
    rng = np.random.default_rng(7)
    block = afr.AFRBlock(rng, 6, 8, 5)
    _randomize(block, rng)
    image_tokens = nm.tensor(rng.standard_normal((4, 6)))
    e_q = nm.tensor(rng.standard_normal((4, 5)))
    base = afr.enrich_low_res(block, image_tokens, e_q).data
    # change only token 2's enrichment; only output row 2 may move
    bumped = image_tokens.data.copy()
    bumped[2] += 1.0
    out = afr.enrich_low_res(block, nm.tensor(bumped), e_q).data
    assert np.allclose(out[[0, 1, 3]], base[[0, 1, 3]], atol=1e-12)
    assert not np.allclose(out[2], base[2])


def test_gradcheck_both_ffns():
    rng = np.random.default_rng(8)
    block = afr.AFRBlock(rng, 5, 7, 4)
    _randomize(block, rng)
    enrich = rand_const(rng, (6, 5))
    target = rand_const(rng, (6, 4))
    r = rand_const(rng, (6, 4))
    assert_grads_match(
        lambda: nm.mean_all(nm.mul(block.modulate(enrich, target), r)),
        list(block.params().values()),
        tol=1e-4,
    )


def test_grads_flow_even_from_identity_init():
    # zeroed output layers still pass gradient to their inputs' weights
    rng = np.random.default_rng(9)
    block = afr.AFRBlock(rng, 5, 7, 4)
    enrich = nm.tensor(rng.standard_normal((6, 5)))
    target = nm.tensor(rng.standard_normal((6, 4)))
    out = block.modulate(enrich, target)
    nm.backward(nm.mean_all(nm.mul(out, out)))
    w2_alpha = block.ffn_alpha.lin2.w
    assert w2_alpha.grad is not None and np.any(w2_alpha.grad != 0.0)
