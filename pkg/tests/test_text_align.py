import numpy as np
import pytest

from fd import rel_error, smooth_directional
from vlfa import tensor as tn
from vlfa.errors import ContractError, VocabularyError
from vlfa.scenes import SceneBatch, generate_corpus, token_id
from vlfa.tensor import Tensor, precision
from vlfa.text_align import (
    TextEncoder, align_loss, contrastive_loss, cosine_guidance, cosine_loss, embed_text, retrieval_accuracy,
    train_alignment,
)
from vlfa.vqvae import PoseVqvae, train_vqvae


@pytest.fixture(scope="module")
def trained(camera, template):
    train = SceneBatch.from_records(generate_corpus(11, 1500, camera, template=template))
    held = SceneBatch.from_records(generate_corpus(11, 320, camera, template=template, start_id=10**6))
    vq = train_vqvae(train.theta, epochs=8, codebook_size=64, rng=np.random.default_rng(0)).model
    res = train_alignment(train.theta, train.tokens, vq, epochs=10, rng=np.random.default_rng(1),
                          heldout=(held.theta, held.tokens))
    return vq, res, held


def small_models(seed=0):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        return PoseVqvae(rng, codebook_size=8), TextEncoder(rng)


def test_pooling_is_multiset_mean_and_order_invariant():
    enc = TextEncoder(np.random.default_rng(0))
    a, b = token_id("torso", "upright"), token_id("head", "tilted")
    assert np.allclose(embed_text([a, a], enc), embed_text([a], enc))
    assert np.array_equal(embed_text([a, b], enc), embed_text([b, a], enc))
    with pytest.raises(VocabularyError):
        embed_text([999], enc)
    with pytest.raises(ContractError):
        TextEncoder(tau=0.0)


def test_single_pair_reduces_to_reconstruction(template):
    vq, enc = small_models()
    theta = np.tile(np.array([1.0, 0, 0, 0, 1, 0]), 24)[None]
    with precision(np.float64):
        out = align_loss(theta, [[0, 3]], vq, enc)
        recon = vq.decode(enc.embed_batch([[0, 3]]))
    assert out.contrastive == 0.0
    assert out.total.item() == pytest.approx(np.sum((recon - theta) ** 2), rel=1e-10)


def test_perfect_alignment_limit():
    z = np.eye(4, 6)
    with precision(np.float64):
        assert contrastive_loss(z, Tensor(z), tau=0.01).item() < 1e-40
        assert contrastive_loss(z, Tensor(z), tau=1.0).item() > 0.5


def test_infonce_matches_direct_summation(rng):
    zp, zt = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    tau = 0.3
    p = zp / np.linalg.norm(zp, axis=1, keepdims=True)
    t = zt / np.linalg.norm(zt, axis=1, keepdims=True)
    pose_anchor, text_anchor = 0.0, 0.0
    for i in range(3):
        pose_anchor -= np.log(np.exp(p[i] @ t[i] / tau) / sum(np.exp(p[i] @ t[j] / tau) for j in range(3)))
        text_anchor -= np.log(np.exp(p[i] @ t[i] / tau) / sum(np.exp(p[j] @ t[i] / tau) for j in range(3)))
    with precision(np.float64):
        assert contrastive_loss(zp, Tensor(zt), tau).item() == pytest.approx(pose_anchor / 3, abs=1e-5)
        both = contrastive_loss(zp, Tensor(zt), tau, symmetric=True).item()
    assert both == pytest.approx((pose_anchor + text_anchor) / 6, abs=1e-5)


def test_cosine_parallel_and_orthogonal():
    vq, _ = small_models()
    theta = np.random.default_rng(1).normal(size=(1, 144))
    with precision(np.float64):
        zp = vq.encode(theta)
        par = cosine_guidance(theta, 2.5 * zp, vq)
        assert par.loss[0] == pytest.approx(-1.0, abs=1e-12)
        # radial component: moving theta along the encoder output direction keeps the cosine
        assert np.linalg.norm(par.grad) < 1e-6
        ortho = np.zeros_like(zp)
        k = np.argmax(np.abs(zp[0]))
        j = (k + 1) % zp.shape[1]
        ortho[0, k], ortho[0, j] = -zp[0, j], zp[0, k]
        assert cosine_guidance(theta, ortho, vq).loss[0] == pytest.approx(0.0, abs=1e-12)


def test_zero_norm_latent_is_flagged():
    vq, _ = small_models()
    theta = np.random.default_rng(2).normal(size=(2, 144))
    res = cosine_guidance(theta, np.zeros((2, 64)), vq)
    assert res.flagged.all() and np.all(res.loss == 0) and np.all(res.grad == 0)


def test_cosine_loss_invariant_to_text_scale():
    vq, enc = small_models(3)
    theta = np.random.default_rng(3).normal(size=144)
    with precision(np.float64):
        base, g0, _ = cosine_loss(theta, [1, 5, 9], vq, enc)
        enc.output_scale = 3.0
        scaled, g1, _ = cosine_loss(theta, [1, 5, 9], vq, enc)
    assert scaled == pytest.approx(base, abs=1e-12)
    assert np.allclose(g0, g1, atol=1e-12)


@pytest.mark.parametrize("squared", [False, True])
def test_cosine_gradient_matches_finite_differences(squared):
    rng = np.random.default_rng(4)
    with precision(np.float64):
        for trial in range(100):
            vq = PoseVqvae(np.random.default_rng(trial), codebook_size=4)
            theta = rng.normal(size=(1, 144))
            zt = rng.normal(size=(1, 64))
            g = cosine_guidance(theta, zt, vq, squared).grad
            v = rng.normal(size=theta.shape)
            h = 1e-6
            num = (cosine_guidance(theta + h * v, zt, vq, squared).loss[0]
                   - cosine_guidance(theta - h * v, zt, vq, squared).loss[0]) / (2 * h)
            assert rel_error(np.sum(g * v), num) < 1e-3


def test_align_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    tokens = [[0, 4, 8], [1, 2], [3, 7, 9, 11], [5]]
    checked = 0
    with precision(np.float64):
        for trial in range(150):
            vq, enc = small_models(trial)
            theta = rng.normal(size=(4, 144))
            symmetric = bool(trial % 2)
            params = enc.parameters()
            tn.backward(align_loss(theta, tokens, vq, enc, symmetric=symmetric).total)
            grads = [p.grad.copy() for p in params]
            dirs = [rng.normal(size=p.shape) for p in params]

            def at(step):
                saved = [p.data.copy() for p in params]
                for p, d in zip(params, dirs):
                    p.data = p.data + step * d
                value = align_loss(theta, tokens, vq, enc, symmetric=symmetric).total.item()
                for p, s in zip(params, saved):
                    p.data = s
                return value

            num = smooth_directional(at)
            if num is None:
                continue
            assert rel_error(sum(float(np.sum(g * d)) for g, d in zip(grads, dirs)), num) < 1e-3
            checked += 1
    assert checked >= 100


def test_smoke_and_determinism(camera, template):
    batch = SceneBatch.from_records(generate_corpus(12, 64, camera, template=template))
    vq, _ = small_models()
    a = train_alignment(batch.theta, batch.tokens, vq, epochs=1, rng=np.random.default_rng(6))
    b = train_alignment(batch.theta, batch.tokens, vq, epochs=1, rng=np.random.default_rng(6))
    assert np.isfinite(a.losses[0])
    for k, v in a.encoder.state_dict().items():
        assert np.array_equal(v, b.encoder.state_dict()[k])


def test_trained_alignment_retrieves_and_separates(trained):
    vq, res, held = trained
    assert res.retrieval > 4 / 32
    assert res.retrieval == retrieval_accuracy(res.encoder, vq, held.theta, held.tokens)
    zp = vq.encode(held.theta[:32])
    zt = res.encoder.embed_batch(held.tokens[:32])
    zp /= np.linalg.norm(zp, axis=1, keepdims=True)
    zt /= np.linalg.norm(zt, axis=1, keepdims=True)
    sim = zt @ zp.T
    off = sim[~np.eye(32, dtype=bool)]
    assert np.mean(np.diag(sim)) > np.mean(off)


def test_trained_encoder_prefers_identical_token_sets(trained):
    _, res, held = trained
    enc = res.encoder
    checked = 0
    for i in range(len(held) - 1):
        a, b = held.tokens[i], held.tokens[i + 1]
        if set(a) & set(b):
            continue
        za, zb = enc.embed_batch([a, b])
        same = 1.0
        cross = za @ zb / (np.linalg.norm(za) * np.linalg.norm(zb))
        assert cross < same - 1e-6
        checked += 1
    assert checked > 0
