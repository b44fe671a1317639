import numpy as np
import pytest
import torch

from conftest import tiny_config
from globaltrack import data as D
from globaltrack import training as T
from globaltrack.model import GlobalTrack, ModelConfig, parameter_checksum
from globaltrack.modelcore import CheckpointMismatchError, load_checkpoint

RESIZE = D.ResizeSpec(64, 64)


def synthetic_pairs(n=4, seed=0, instances=2, size=64):
    ds = D.generate_synthetic(D.SyntheticSpec(num_sequences=2, num_frames=6, height=size, width=size,
                                              num_instances=instances, min_size=12, max_size=24, seed=seed))
    rng = np.random.default_rng(seed)
    return [D.sample_pair(D.MixtureSpec([ds], [1.0]), rng, None) for _ in range(n)]


def small_model(seed=0):
    torch.manual_seed(seed)
    return GlobalTrack(tiny_config(channels=8, stride=8))


def tiny_train_config(**kw):
    base = dict(batch_size=2, lr=0.005, epochs=2, milestones=(2,), iters_per_epoch=2)
    base.update(kw)
    return T.TrainConfig(**base)


class TestSchedule:
    def test_decay_at_milestones(self):
        cfg = T.TrainConfig()
        assert T.lr_at_epoch(cfg, 1) == pytest.approx(0.01)
        assert T.lr_at_epoch(cfg, 7) == pytest.approx(0.01)
        assert T.lr_at_epoch(cfg, 8) == pytest.approx(0.001)
        assert T.lr_at_epoch(cfg, 11) == pytest.approx(0.0001)
        assert T.lr_at_epoch(cfg, 12) == pytest.approx(0.0001)

    def test_warmup(self):
        cfg = T.TrainConfig(warmup_iters=10, warmup_ratio=0.5)
        assert T.lr_at_step(cfg, 1, 0) == pytest.approx(0.005)
        assert T.lr_at_step(cfg, 1, 5) == pytest.approx(0.0075)
        assert T.lr_at_step(cfg, 1, 10) == pytest.approx(0.01)

    def test_bad_milestone(self):
        with pytest.raises(ValueError):
            T.TrainConfig(epochs=4, milestones=(5,))


class TestCrossQueryLoss:
    def test_single_instance_equals_pair_loss(self):
        model = small_model().train()
        pair = T.prepare_pair(synthetic_pairs(1, instances=1)[0], RESIZE)
        total, _ = T.cross_query_loss(model, pair, sampling_seed=4)
        fmaps = model.features(pair.search)
        z = model.query_features(model.features(pair.query), pair.query_boxes)[0]
        seed = T.instance_seed(4, pair.query_boxes[0], pair.search_boxes[0])
        ref, _ = T.pair_loss(model, z, fmaps, pair.search_size, pair.search_boxes[0], seed)
        assert total.item() == pytest.approx(ref.item(), rel=1e-6)

    def test_instance_order_invariant(self):
        model = small_model().train()
        pair = T.prepare_pair(synthetic_pairs(1, instances=3)[0], RESIZE)
        rev = T.PreparedPair(pair.query, pair.search, pair.query_boxes[::-1].copy(), pair.search_boxes[::-1].copy())
        a = T.cross_query_loss(model, pair, 9)[0].item()
        b = T.cross_query_loss(model, rev, 9)[0].item()
        assert a == pytest.approx(b, rel=1e-6)

    def test_parts_sum_to_total(self):
        model = small_model().train()
        pair = T.prepare_pair(synthetic_pairs(1)[0], RESIZE)
        total, parts = T.cross_query_loss(model, pair)
        assert total.item() == pytest.approx((parts["rpn"] + parts["rcnn"]).item(), rel=1e-6)

    def test_no_instances(self):
        model = small_model()
        pair = T.prepare_pair(synthetic_pairs(1)[0], RESIZE)
        empty = T.PreparedPair(pair.query, pair.search, np.zeros((0, 4)), np.zeros((0, 4)))
        with pytest.raises(ValueError):
            T.cross_query_loss(model, empty)


class TestTrain:
    def test_zero_lr_leaves_weights(self, tmp_path):
        model = small_model()
        before = parameter_checksum(model)
        T.train(model, tiny_train_config(lr=0.0, weight_decay=0.0), synthetic_pairs(), tmp_path, resize=RESIZE)
        assert parameter_checksum(model) == before

    def test_log_and_checkpoints(self, tmp_path):
        res = T.train(small_model(), tiny_train_config(), synthetic_pairs(), tmp_path, resize=RESIZE)
        assert res.steps == 4 and len(res.losses) == 4
        assert [p.name for p in res.checkpoints] == ["epoch_001.gtck", "epoch_002.gtck"]
        rows = T.read_train_log(tmp_path / "train.log")
        assert [r["step"] for r in rows] == [1, 2, 3, 4]
        assert rows[-1]["lr"] == pytest.approx(0.0005)
        meta, arrays = load_checkpoint(res.checkpoints[-1])
        assert meta["train_state"] == {"epoch": 2, "step": 4, "seed": 0}
        assert any(k.startswith("optim.momentum.") for k in arrays)

    def test_deterministic_logs(self, tmp_path):
        pairs = synthetic_pairs()
        T.train(small_model(), tiny_train_config(), pairs, tmp_path / "a", seed=5, resize=RESIZE)
        T.train(small_model(), tiny_train_config(), pairs, tmp_path / "b", seed=5, resize=RESIZE)
        assert (tmp_path / "a/train.log").read_bytes() == (tmp_path / "b/train.log").read_bytes()
        assert (tmp_path / "a/epoch_002.gtck").read_bytes() == (tmp_path / "b/epoch_002.gtck").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        pairs = synthetic_pairs()
        full = small_model()
        T.train(full, tiny_train_config(), pairs, tmp_path / "full", resize=RESIZE)
        part = small_model()
        T.train(part, tiny_train_config(max_steps=2), pairs, tmp_path / "part", resize=RESIZE)
        resumed = small_model(seed=99)
        res = T.train(resumed, tiny_train_config(), pairs, tmp_path / "part", resize=RESIZE)
        assert res.steps == 4 and len(res.losses) == 2
        assert parameter_checksum(resumed) == parameter_checksum(full)

    def test_sampler_source(self, tmp_path):
        pairs = synthetic_pairs(3)
        res = T.train(small_model(), tiny_train_config(iters_per_epoch=1), lambda rng: pairs[rng.integers(3)],
                      tmp_path, resize=RESIZE)
        assert res.steps == 2

    def test_frozen_prefix(self, tmp_path):
        model = small_model()
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        T.train(model, tiny_train_config(frozen_prefixes=("backbone.",)), synthetic_pairs(), tmp_path, resize=RESIZE)
        for n, p in model.named_parameters():
            same = torch.equal(before[n], p.detach())
            assert same == n.startswith("backbone.")

    def test_non_finite_loss(self, tmp_path):
        model = small_model()
        with torch.no_grad():
            model.rpn_head.cls.weight.fill_(float("nan"))
        with pytest.raises(T.NonFiniteLossError, match="step 0"):
            T.train(model, tiny_train_config(), synthetic_pairs(), tmp_path, resize=RESIZE)
        assert (tmp_path / "nonfinite_step0.npz").exists()

    def test_grad_clip_runs(self, tmp_path):
        res = T.train(small_model(), tiny_train_config(grad_clip=1.0), synthetic_pairs(), tmp_path, resize=RESIZE)
        assert np.all(np.isfinite(res.losses))


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        model = small_model()
        model.save(tmp_path / "m.gtck")
        loaded, cfg, _ = GlobalTrack.load(tmp_path / "m.gtck")
        assert ModelConfig.from_dict(cfg["model"]) == model.cfg
        assert parameter_checksum(loaded) == parameter_checksum(model)

    def test_config_mismatch(self, tmp_path):
        small_model().save(tmp_path / "m.gtck")
        with pytest.raises(CheckpointMismatchError):
            GlobalTrack.load(tmp_path / "m.gtck", tiny_config(channels=4, stride=8))

    def test_predict_pairs_layout(self):
        pairs = synthetic_pairs(2)
        preds = T.predict_pairs(small_model(), pairs, RESIZE, max_proposals=8)
        assert len(preds.proposals) == len(preds.detections) == len(preds.groundtruth) == 4
        assert all(len(p) <= 8 for p in preds.proposals)
