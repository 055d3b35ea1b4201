"""Contrastive loss: numpy oracle, invariances, gradient checks."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from surgline.losses import (
    class_positive_mask,
    contrastive_loss,
    gradient_check,
    multi_positive_infonce,
    similarity_logits,
    standard_infonce,
)

# ---------------------------------------------------------------------------
# Independent oracle: plain-numpy reimplementation from the loss definition.
# ---------------------------------------------------------------------------


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def oracle_multi_positive(logits: np.ndarray, mask: np.ndarray):
    """Mean over anchors of the mean negative log-probability of positives,
    averaged over both retrieval directions."""
    ls = log_softmax_rows(logits)
    i2t = np.mean([-ls[i, mask[i]].mean() for i in range(logits.shape[0])])
    ls_t = log_softmax_rows(logits.T)
    t2i = np.mean([-ls_t[j, mask[:, j]].mean() for j in range(logits.shape[1])])
    return 0.5 * (i2t + t2i), i2t, t2i


def oracle_standard_infonce(logits: np.ndarray):
    n = logits.shape[0]
    ls = log_softmax_rows(logits)
    ls_t = log_softmax_rows(logits.T)
    i2t = -ls[np.arange(n), np.arange(n)].mean()
    t2i = -ls_t[np.arange(n), np.arange(n)].mean()
    return 0.5 * (i2t + t2i)


def random_mask_batch(rng, n, m, n_classes):
    """Logits plus a label-equality mask where every row/column has a positive."""
    classes = np.arange(n_classes)
    img = np.concatenate([classes, rng.choice(classes, size=n - n_classes)])
    txt = np.concatenate([classes, rng.choice(classes, size=m - n_classes)])
    rng.shuffle(img)
    rng.shuffle(txt)
    logits = rng.normal(0.0, 3.0, size=(n, m))
    mask = img[:, None] == txt[None, :]
    return logits, mask


# ---------------------------------------------------------------------------
# Agreement with the oracle
# ---------------------------------------------------------------------------


class TestAgainstOracle:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_numpy_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_classes = int(rng.integers(2, 7))
        n = int(rng.integers(n_classes, 17))
        m = int(rng.integers(n_classes, 17))
        logits, mask = random_mask_batch(rng, n, m, n_classes)
        out = multi_positive_infonce(
            torch.from_numpy(logits), torch.from_numpy(mask)
        )
        value, i2t, t2i = oracle_multi_positive(logits, mask)
        assert out.value.item() == pytest.approx(value, abs=1e-12)
        assert out.image_to_text.item() == pytest.approx(i2t, abs=1e-12)
        assert out.text_to_image.item() == pytest.approx(t2i, abs=1e-12)

    def test_hand_case_2x2(self):
        # logits [[2, 0], [0, 2]], identity mask
        logits = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        mask = torch.eye(2, dtype=torch.bool)
        out = multi_positive_infonce(logits, mask)
        expected = float(np.log(1.0 + np.exp(-2.0)))  # both directions identical
        assert out.value.item() == pytest.approx(expected, abs=1e-12)

    def test_all_positive_mask_equals_uniform_entropy_gap(self):
        # with every pair positive, each row term is the mean NLL of the row
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(5, 5))
        mask = np.ones((5, 5), dtype=bool)
        out = multi_positive_infonce(torch.from_numpy(logits), torch.from_numpy(mask))
        value, _, _ = oracle_multi_positive(logits, mask)
        assert out.value.item() == pytest.approx(value, abs=1e-12)


class TestIdentityDegeneracy:
    @pytest.mark.parametrize("seed", range(10))
    def test_identity_mask_equals_standard_infonce(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 17))
        logits = torch.from_numpy(rng.normal(0, 3, size=(n, n)))
        mask = torch.eye(n, dtype=torch.bool)
        multi = multi_positive_infonce(logits, mask)
        single = standard_infonce(logits)
        assert abs(multi.value.item() - single.value.item()) < 1e-10
        assert single.value.item() == pytest.approx(
            oracle_standard_infonce(logits.numpy()), abs=1e-12
        )


# ---------------------------------------------------------------------------
# Invariances (acceptance criterion 2 runs these at full case counts)
# ---------------------------------------------------------------------------


@st.composite
def mask_batches(draw):
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    n_classes = int(draw(st.integers(2, 6)))
    n = int(draw(st.integers(n_classes, 12)))
    m = int(draw(st.integers(n_classes, 12)))
    return random_mask_batch(rng, n, m, n_classes) + (seed,)


class TestInvariances:
    @given(batch=mask_batches())
    @settings(max_examples=60, deadline=None)
    def test_permutation_equivariance(self, batch):
        logits, mask, seed = batch
        rng = np.random.default_rng(seed + 1)
        base = multi_positive_infonce(torch.from_numpy(logits), torch.from_numpy(mask))
        rows = rng.permutation(logits.shape[0])
        cols = rng.permutation(logits.shape[1])
        permuted = multi_positive_infonce(
            torch.from_numpy(logits[rows][:, cols]),
            torch.from_numpy(mask[rows][:, cols]),
        )
        assert abs(base.value.item() - permuted.value.item()) < 1e-10

    @given(batch=mask_batches())
    @settings(max_examples=60, deadline=None)
    def test_row_shift_leaves_image_to_text_term(self, batch):
        logits, mask, seed = batch
        rng = np.random.default_rng(seed + 2)
        shifts = rng.normal(0, 5, size=(logits.shape[0], 1))
        base = multi_positive_infonce(torch.from_numpy(logits), torch.from_numpy(mask))
        shifted = multi_positive_infonce(
            torch.from_numpy(logits + shifts), torch.from_numpy(mask)
        )
        assert abs(base.image_to_text.item() - shifted.image_to_text.item()) < 1e-10

    @given(batch=mask_batches())
    @settings(max_examples=60, deadline=None)
    def test_column_shift_leaves_text_to_image_term(self, batch):
        logits, mask, seed = batch
        rng = np.random.default_rng(seed + 3)
        shifts = rng.normal(0, 5, size=(1, logits.shape[1]))
        base = multi_positive_infonce(torch.from_numpy(logits), torch.from_numpy(mask))
        shifted = multi_positive_infonce(
            torch.from_numpy(logits + shifts), torch.from_numpy(mask)
        )
        assert abs(base.text_to_image.item() - shifted.text_to_image.item()) < 1e-10

    @given(batch=mask_batches())
    @settings(max_examples=40, deadline=None)
    def test_positive_when_any_negative_exists(self, batch):
        logits, mask, _ = batch
        if mask.all():  # no negative pair anywhere
            return
        out = multi_positive_infonce(torch.from_numpy(logits), torch.from_numpy(mask))
        assert out.value.item() > 0.0

    def test_raising_the_true_logit_lowers_the_loss(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(0, 2, size=(6, 6))
        mask = np.eye(6, dtype=bool)
        base = multi_positive_infonce(torch.from_numpy(logits), torch.from_numpy(mask))
        boosted = logits.copy()
        boosted[2, 2] += 1.0
        out = multi_positive_infonce(torch.from_numpy(boosted), torch.from_numpy(mask))
        assert out.value.item() < base.value.item()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class TestValidation:
    def test_rejects_row_without_positive(self):
        logits = torch.zeros(2, 2)
        mask = torch.tensor([[True, False], [False, False]])
        with pytest.raises(ValueError, match="row"):
            multi_positive_infonce(logits, mask)

    def test_rejects_column_without_positive(self):
        logits = torch.zeros(2, 2)
        mask = torch.tensor([[True, True], [True, False]])
        # every row has a positive; column check must still pass
        multi_positive_infonce(logits, mask)
        mask = torch.tensor([[True, False], [True, False]])
        with pytest.raises(ValueError, match="column"):
            multi_positive_infonce(logits, mask)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            multi_positive_infonce(torch.zeros(2, 3), torch.ones(3, 2, dtype=torch.bool))

    def test_rejects_non_bool_mask(self):
        with pytest.raises(ValueError, match="bool"):
            multi_positive_infonce(torch.zeros(2, 2), torch.ones(2, 2))

    def test_rejects_non_finite_logits(self):
        logits = torch.tensor([[1.0, float("nan")], [0.0, 1.0]])
        with pytest.raises(ValueError, match="NaN or Inf"):
            multi_positive_infonce(logits, torch.eye(2, dtype=torch.bool))

    def test_rejects_1d_input(self):
        with pytest.raises(ValueError):
            multi_positive_infonce(torch.zeros(4), torch.ones(4, dtype=torch.bool))


# ---------------------------------------------------------------------------
# Mask and logits helpers
# ---------------------------------------------------------------------------


class TestHelpers:
    def test_class_positive_mask_is_label_equality(self):
        mask = class_positive_mask(["P1", "P2", "P1"], ["P2", "P1"])
        expected = torch.tensor([[False, True], [True, False], [False, True]])
        assert mask.dtype == torch.bool
        assert torch.equal(mask, expected)

    def test_similarity_logits_scale_and_values(self):
        img = torch.eye(3, dtype=torch.float64)
        txt = torch.eye(3, dtype=torch.float64)
        logits = similarity_logits(img, txt, logit_scale=10.0)
        assert torch.allclose(logits, 10.0 * torch.eye(3, dtype=torch.float64))

    def test_similarity_logits_rejects_dim_mismatch(self):
        with pytest.raises(ValueError):
            similarity_logits(torch.zeros(2, 4), torch.zeros(2, 5))

    def test_contrastive_loss_composes_helpers(self):
        rng = np.random.default_rng(7)
        img = rng.normal(size=(4, 8))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        txt = rng.normal(size=(5, 8))
        txt /= np.linalg.norm(txt, axis=1, keepdims=True)
        labels_i = ["P1", "P2", "P1", "P3"]
        labels_t = ["P1", "P2", "P3", "P2", "P1"]
        mask = class_positive_mask(labels_i, labels_t)
        out = contrastive_loss(
            torch.from_numpy(img), torch.from_numpy(txt), mask, logit_scale=5.0
        )
        value, _, _ = oracle_multi_positive(5.0 * img @ txt.T, mask.numpy())
        assert out.value.item() == pytest.approx(value, abs=1e-12)


# ---------------------------------------------------------------------------
# Gradient checking (criterion 1 runs the full sweep)
# ---------------------------------------------------------------------------


def loss_fn(img, txt, mask):
    return contrastive_loss(img, txt, mask, logit_scale=7.0).value


class TestGradientCheck:
    def test_small_batch_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        img = torch.from_numpy(rng.normal(size=(3, 5)))
        txt = torch.from_numpy(rng.normal(size=(4, 5)))
        logits, mask = random_mask_batch(rng, 3, 4, 2)
        err = gradient_check(loss_fn, img, txt, torch.from_numpy(mask))
        assert err < 1e-5

    def test_epsilon_range_enforced(self):
        rng = np.random.default_rng(1)
        img = torch.from_numpy(rng.normal(size=(2, 4)))
        txt = torch.from_numpy(rng.normal(size=(2, 4)))
        mask = torch.eye(2, dtype=torch.bool)
        for eps in (0.0, 1e-8, 1e-2):
            with pytest.raises(ValueError, match="epsilon"):
                gradient_check(loss_fn, img, txt, mask, epsilon=eps)
