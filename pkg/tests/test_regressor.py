import numpy as np
import pytest

from fd import rel_error
from vlfa import tensor as tn
from vlfa.body import IDENTITY_6D, N_JOINTS, POSE_DIM, fk_arrays
from vlfa.camera import project
from vlfa.errors import ContractError
from vlfa.evaluation import mpjpe, root_relative
from vlfa.regressor import (
    OUT_DIM, RegressorLossWeights, RegressorNet, decode_numpy, predict_vectors, regressor_loss, train_regressor,
)
from vlfa.scenes import FEATURE_DIM, SceneBatch, generate_corpus
from vlfa.tensor import Tensor, precision


@pytest.fixture(scope="module")
def scenes(template, camera):
    return SceneBatch.from_records(generate_corpus(3, 40, camera, template=template))


def loss_at(batch, template, theta, beta, trans, weights=RegressorLossWeights()):
    kp = project(batch.camera, fk_arrays(batch.theta, batch.beta, batch.trans, template).joints)
    return regressor_loss(Tensor(theta, requires_grad=True), Tensor(beta, requires_grad=True),
                          Tensor(trans, requires_grad=True), batch.theta, batch.beta, batch.trans,
                          batch.camera, kp, template, weights)


def test_loss_is_zero_at_ground_truth(scenes, template):
    with precision(np.float64):
        parts = loss_at(scenes, template, scenes.theta, scenes.beta, scenes.trans)
    assert parts.total.item() == pytest.approx(0.0, abs=1e-9)


def test_single_term_is_squared_parameter_distance(scenes, template, rng):
    theta = scenes.theta + rng.normal(0, 0.1, scenes.theta.shape)
    beta = scenes.beta + rng.normal(0, 0.1, scenes.beta.shape)
    with precision(np.float64):
        parts = loss_at(scenes, template, theta, beta, scenes.trans + 0.3, RegressorLossWeights(1.0, 0.0, 0.0))
    expected = (np.sum((theta - scenes.theta) ** 2) + np.sum((beta - scenes.beta) ** 2)) / len(scenes)
    assert parts.total.item() == pytest.approx(expected, rel=1e-10)


def test_equivalent_6d_vectors_only_change_parameter_term(scenes, template):
    # scaling the first column and shearing the second leave the rotation unchanged
    th = scenes.theta.reshape(len(scenes), N_JOINTS, 6).copy()
    th[..., :3] *= 2.0
    th[..., 3:] += 0.3 * th[..., :3]
    with precision(np.float64):
        parts = loss_at(scenes, template, th.reshape(len(scenes), POSE_DIM), scenes.beta, scenes.trans)
    assert parts.smpl > 0.1
    assert parts.joint < 1e-18 and parts.reproj < 1e-12


def test_full_loss_gradient_matches_finite_differences(scenes, template, rng):
    batch = scenes.subset(np.arange(4))
    kp = project(batch.camera, fk_arrays(batch.theta, batch.beta, batch.trans, template).joints)

    def total(theta, beta, trans):
        return regressor_loss(Tensor(theta), Tensor(beta), Tensor(trans), batch.theta, batch.beta, batch.trans,
                              batch.camera, kp, template).total.item()

    with precision(np.float64):
        for _ in range(100):
            theta = batch.theta + rng.normal(0, 0.2, batch.theta.shape)
            beta = batch.beta + rng.normal(0, 0.2, batch.beta.shape)
            trans = batch.trans + rng.normal(0, 0.1, batch.trans.shape)
            args = [Tensor(a, requires_grad=True) for a in (theta, beta, trans)]
            parts = regressor_loss(*args, batch.theta, batch.beta, batch.trans, batch.camera, kp, template)
            tn.backward(parts.total)
            dirs = [rng.normal(size=a.shape) for a in (theta, beta, trans)]
            analytic = sum(float(np.sum(a.grad * d)) for a, d in zip(args, dirs))
            h = 1e-6
            plus = total(*(a + h * d for a, d in zip((theta, beta, trans), dirs)))
            minus = total(*(a - h * d for a, d in zip((theta, beta, trans), dirs)))
            assert rel_error(analytic, (plus - minus) / (2 * h)) < 1e-3


def test_weights_validation():
    with pytest.raises(ContractError):
        RegressorLossWeights(0.0, 0.0, 0.0)
    with pytest.raises(ContractError):
        RegressorLossWeights(-1.0, 1.0, 1.0)


def test_zero_weight_net_gives_constant_output(camera, rng):
    net = RegressorNet(rng)
    for p in net.parameters():
        p.data[...] = 0
    bbox = np.tile([100.0, 100.0, 200.0, 300.0], (5, 1))
    out = predict_vectors(net, rng.normal(size=(5, FEATURE_DIM)), bbox, camera)
    assert np.all(out == out[0])
    assert np.allclose(out[0, :POSE_DIM], np.tile(IDENTITY_6D, N_JOINTS))
    assert np.allclose(out, decode_numpy(np.zeros((5, OUT_DIM)), bbox, camera))


def test_identical_inputs_give_identical_outputs(camera, rng):
    net = RegressorNet(np.random.default_rng(0))
    f = rng.normal(size=(1, FEATURE_DIM))
    bbox = np.array([[50.0, 60.0, 150.0, 300.0]])
    assert np.array_equal(predict_vectors(net, f, bbox, camera), predict_vectors(net, f.copy(), bbox, camera))


def test_smoke_training_and_determinism(scenes, template):
    small = scenes.subset(np.arange(10))
    a = train_regressor(small, template, epochs=1, rng=np.random.default_rng(4), hidden=(32,))
    b = train_regressor(small, template, epochs=1, rng=np.random.default_rng(4), hidden=(32,))
    assert np.isfinite(a.losses[0])
    for k, v in a.net.state_dict().items():
        assert np.array_equal(v, b.net.state_dict()[k])


def test_trained_regressor_beats_rest_pose_baseline(template, camera):
    train = SceneBatch.from_records(generate_corpus(0, 2000, camera, template=template))
    test = SceneBatch.from_records(generate_corpus(0, 300, camera, template=template, start_id=10**6))
    result = train_regressor(train, template, epochs=15, rng=np.random.default_rng(0))
    smooth = np.convolve(result.losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 0)
    x = predict_vectors(result.net, test.features, test.bbox, test.camera)
    gt = root_relative(fk_arrays(test.theta, test.beta, test.trans, template).joints)
    pred = root_relative(fk_arrays(x[:, :POSE_DIM], x[:, POSE_DIM:-3], x[:, -3:], template).joints)
    rest = root_relative(fk_arrays(np.tile(IDENTITY_6D, (len(test), N_JOINTS)), np.zeros_like(test.beta),
                                   test.trans, template).joints)
    assert mpjpe(pred, gt).mean() < mpjpe(rest, gt).mean()
