import numpy as np
import pytest

from conductor.data import PAD_ID, SyntheticSpec
from conductor.train import TrainSettings, config_for, loss_and_grads, train_toy
from conductor.model import init_params


FAST = TrainSettings(n_train=512, n_heldout=64, batch_size=32)


def test_loss_gradients_match_finite_differences():
    spec = SyntheticSpec()
    cfg = config_for(spec, d_model=8, num_heads=2, d_ff=12, seed=2)
    params = init_params(cfg)
    rng = np.random.default_rng(0)
    ids = rng.integers(3, cfg.vocab_size, (4, spec.seq_len))
    segs = np.zeros_like(ids)
    labels = np.array([0, 1, 0, 1])
    loss, grads, _ = loss_and_grads(cfg, params, ids, segs, labels)
    h = 1e-6
    for name in ("L0.w1", "L1.bq", "L0.ln2_g", "emb_ln_b", "pool_w", "cls_b", "pos_emb", "seg_emb", "tok_emb"):
        p = params[name].reshape(-1)
        for i in rng.choice(p.size, min(3, p.size), replace=False):
            old = p[i]
            p[i] = old + h
            up, *_ = loss_and_grads(cfg, params, ids, segs, labels)
            p[i] = old - h
            down, *_ = loss_and_grads(cfg, params, ids, segs, labels)
            p[i] = old
            g = grads[name].reshape(-1)[i]
            if name == "tok_emb" and i // cfg.d_model == PAD_ID:
                assert g == 0.0
                continue
            assert g == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)


def test_training_is_deterministic_and_learns():
    spec = SyntheticSpec()
    cfg = config_for(spec)
    m1, r1 = train_toy(cfg, spec, 2, 4, FAST)
    m2, r2 = train_toy(cfg, spec, 2, 4, FAST)
    assert m1.content_hash == m2.content_hash
    assert r1.epoch_losses == r2.epoch_losses
    assert len(r1.epoch_losses) == 2 and np.isfinite(r1.epoch_losses).all()
    assert np.all(m1.params["tok_emb"][PAD_ID] == 0)


def test_trained_model_meets_accuracy_target(trained_model):
    assert trained_model.heldout_accuracy >= 0.9


def test_train_rejects_mismatched_config():
    spec = SyntheticSpec()
    with pytest.raises(ValueError, match="vocab_size"):
        train_toy(config_for(spec, vocab_size=10), spec, 1, 0, FAST)
    with pytest.raises(ValueError, match="optimizer"):
        train_toy(config_for(spec), spec, 1, 0, TrainSettings(n_train=8, n_heldout=8, optimizer="lbfgs"))


def test_zero_epochs_is_chance():
    spec = SyntheticSpec()
    model, report = train_toy(config_for(spec), spec, 0, 4, TrainSettings(n_train=64, n_heldout=400))
    assert 0.4 <= report.heldout_accuracy <= 0.6
    assert report.epoch_losses == []
