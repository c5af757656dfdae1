import numpy as np
import numpy.testing as npt
import pytest

from platescope import autodiff as ad
from platescope import losses
from platescope.autodiff import Tape, Tensor, backward
from platescope.errors import NumericError, ShapeError

from gradcheck import assert_grads_match

# frozen by hand: embedding [3,4] -> cosines (0.6, 0.8) against orthonormal
# class directions, label 0, s=30, m=0.1:
#   target logit 30*cos(arccos(0.6)+0.1), other logit 24,
#   loss = -log softmax = 8.486133355249308
ARC_HAND = 8.486133355249308
# frozen by hand: logits [2, 0], label 0 -> log(1 + e^-2)
CE_HAND = 0.1269280110429725


def _rand_case(seed, n=4, d=8, k=5):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(n, d))
    w = rng.normal(size=(d, k))
    labels = rng.integers(0, k, size=n)
    return emb, w, labels


def test_arcface_config_validation():
    losses.ArcFaceConfig(num_classes=5)
    with pytest.raises(ShapeError):
        losses.ArcFaceConfig(num_classes=5, s=0.0)
    with pytest.raises(ShapeError):
        losses.ArcFaceConfig(num_classes=5, m=-0.01)
    with pytest.raises(ShapeError):
        losses.ArcFaceConfig(num_classes=5, m=np.pi / 2)


def test_arcface_hand_value():
    emb = np.array([[3.0, 4.0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    cfg = losses.ArcFaceConfig(num_classes=2, s=30.0, m=0.1)
    loss = losses.arcface_loss(Tensor(emb), Tensor(w), [0], cfg)
    npt.assert_allclose(loss.item(), ARC_HAND, rtol=0, atol=1e-9)


def test_arcface_zero_margin_hand_value():
    # cosines (1, 0) clamped just inside 1; s=2 -> log(1 + e^-2)
    emb = np.array([[1.0, 0.0]])
    w = np.eye(2)
    cfg = losses.ArcFaceConfig(num_classes=2, s=2.0, m=0.0)
    loss = losses.arcface_loss(Tensor(emb), Tensor(w), [0], cfg)
    npt.assert_allclose(loss.item(), CE_HAND, rtol=0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_arcface_zero_margin_equals_scaled_cosine_ce(seed):
    emb, w, labels = _rand_case(seed)
    cfg = losses.ArcFaceConfig(num_classes=5, s=30.0, m=0.0)
    got = losses.arcface_loss(Tensor(emb), Tensor(w), labels, cfg).item()
    xn = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    wn = w / np.linalg.norm(w, axis=0, keepdims=True)
    ref = losses.softmax_ce_loss(Tensor(30.0 * (xn @ wn)), labels).item()
    npt.assert_allclose(got, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_arcface_rescaling_embeddings_is_invariant(seed):
    emb, w, labels = _rand_case(seed)
    cfg = losses.ArcFaceConfig(num_classes=5)
    a = losses.arcface_loss(Tensor(emb), Tensor(w), labels, cfg).item()
    b = losses.arcface_loss(Tensor(7.3 * emb), Tensor(w), labels, cfg).item()
    c = losses.arcface_loss(Tensor(emb), Tensor(w * 0.2), labels, cfg).item()
    npt.assert_allclose([b, c], [a, a], rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_arcface_monotone_in_margin(seed):
    emb, w, labels = _rand_case(seed)
    # monotonicity needs theta + m below pi for every target
    xn = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    wn = w / np.linalg.norm(w, axis=0, keepdims=True)
    theta = np.arccos(np.clip((xn @ wn)[np.arange(len(labels)), labels], -1, 1))
    assert theta.max() + 0.3 < np.pi
    vals = [
        losses.arcface_loss(Tensor(emb), Tensor(w), labels, losses.ArcFaceConfig(num_classes=5, m=m)).item()
        for m in (0.0, 0.05, 0.1, 0.3)
    ]
    assert vals == sorted(vals) and len(set(vals)) == 4


@pytest.mark.parametrize("seed", range(4))
def test_arcface_gradients_match_finite_differences(seed):
    emb, w, labels = _rand_case(1000 + seed)
    cfg = losses.ArcFaceConfig(num_classes=5, s=30.0, m=0.1)
    assert_grads_match(lambda e, ww: losses.arcface_loss(e, ww, labels, cfg), [emb, w])


def test_arcface_rejects_zero_norm_embedding():
    emb = np.array([[1.0, 0.0], [0.0, 0.0]])
    cfg = losses.ArcFaceConfig(num_classes=2)
    with pytest.raises(NumericError):
        losses.arcface_loss(Tensor(emb), Tensor(np.eye(2)), [0, 1], cfg)


def test_arcface_rejects_bad_labels():
    emb, w, _ = _rand_case(0, n=2, k=3)
    cfg = losses.ArcFaceConfig(num_classes=3)
    with pytest.raises(ShapeError):
        losses.arcface_loss(Tensor(emb), Tensor(w), [0, 3], cfg)
    with pytest.raises(ShapeError):
        losses.arcface_loss(Tensor(emb), Tensor(w), [0], cfg)


def test_softmax_ce_hand_values():
    npt.assert_allclose(losses.softmax_ce_loss(Tensor(np.zeros((1, 2))), [0]).item(), np.log(2.0), rtol=0, atol=1e-15)
    npt.assert_allclose(losses.softmax_ce_loss(Tensor(np.array([[2.0, 0.0]])), [0]).item(), CE_HAND, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_softmax_ce_gradients(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 6)) * 3
    labels = rng.integers(0, 6, size=4)
    assert_grads_match(lambda t: losses.softmax_ce_loss(t, labels), [logits])


def test_consistency_hand_values():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert losses.consistency_loss(Tensor(a), Tensor(a.copy())).item() == 0.0
    b = np.array([[0.0, 1.0], [0.0, 1.0]])
    npt.assert_allclose(losses.consistency_loss(Tensor(a), Tensor(b)).item(), 1.0, rtol=0, atol=1e-15)
    npt.assert_allclose(losses.consistency_loss(Tensor(a[:1]), Tensor(b[:1])).item(), 2.0, rtol=0, atol=1e-15)


def test_consistency_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.consistency_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_consistency_teacher_gets_no_gradient():
    student = Tensor(np.array([[0.2, 0.8]]))
    teacher = Tensor(np.array([[0.5, 0.5]]))
    with Tape():
        loss = losses.consistency_loss(ad.softmax_rows(student), ad.softmax_rows(teacher))
    backward(loss)
    assert student.grad is not None and np.any(student.grad != 0)
    assert teacher.grad is None


@pytest.mark.parametrize("seed", range(4))
def test_consistency_gradients(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(3, 5))
    t = rng.normal(size=(3, 5))
    teacher = ad.softmax_rows(Tensor(t)).data
    assert_grads_match(lambda a: losses.consistency_loss(ad.softmax_rows(a), Tensor(teacher)), [s])


def test_pseudo_label_empty_mask_is_constant_zero():
    logits = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    with Tape():
        loss = losses.pseudo_label_loss(logits, [0, 1, 2], [False, False, False])
    assert loss.item() == 0.0
    assert loss.node_id is None


def test_pseudo_label_full_mask_equals_ce():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)
    got = losses.pseudo_label_loss(Tensor(logits), labels, np.ones(4, bool)).item()
    ref = losses.softmax_ce_loss(Tensor(logits), labels).item()
    npt.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_pseudo_label_mask_selects_subset():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)
    mask = np.array([True, False, True, False])
    got = losses.pseudo_label_loss(Tensor(logits), labels, mask).item()
    ref = losses.softmax_ce_loss(Tensor(logits[mask]), labels[mask]).item()
    npt.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_pseudo_label_ignores_unmasked_label_values():
    logits = np.random.default_rng(3).normal(size=(2, 3))
    mask = np.array([True, False])
    a = losses.pseudo_label_loss(Tensor(logits), [1, 0], mask).item()
    b = losses.pseudo_label_loss(Tensor(logits), [1, 2], mask).item()
    assert a == b


@pytest.mark.parametrize("seed", range(4))
def test_pseudo_label_gradients(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    mask = rng.random(5) < 0.6
    if not mask.any():
        mask[0] = True
    assert_grads_match(lambda t: losses.pseudo_label_loss(t, labels, mask), [logits])


@pytest.mark.parametrize("seed", range(5))
def test_losses_are_nonnegative(seed):
    emb, w, labels = _rand_case(2000 + seed)
    cfg = losses.ArcFaceConfig(num_classes=5)
    assert losses.arcface_loss(Tensor(emb), Tensor(w), labels, cfg).item() >= 0
    assert losses.softmax_ce_loss(Tensor(emb @ w), labels).item() >= 0
    s = ad.softmax_rows(Tensor(emb @ w)).data
    t = np.roll(s, 1, axis=0)
    assert losses.consistency_loss(Tensor(s), Tensor(t)).item() >= 0
