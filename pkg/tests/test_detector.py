import numpy as np
import pytest

from csdet import detector as det
from csdet import synthworld as sw
from csdet import taxonomy as tx
from csdet.detector import DetectorConfig, Linear, ModelParams
from csdet.featurizer import FeatureConfig
from csdet.geometry import Box


@pytest.fixture(scope="module")
def world():
    cfg = sw.demo_world_config(seed=7, train_box_images=2, train_image_images=2, eval_images=2)
    data = sw.generate_dataset(cfg)
    return cfg, cfg.taxonomy(), data


def zero_model(taxonomy):
    import csdet.featurizer as ft

    return ModelParams.zeros(ft.feature_dim(), taxonomy.leaf_order)


class TestLinear:
    def test_hand_dot_product(self):
        layer = Linear(np.array([[1.0, -2.0, 0.5]]), np.array([0.25]))
        feats = np.array([2.0, 1.0, 4.0])
        # 1*2 - 2*1 + 0.5*4 + 0.25 = 2.25
        assert layer.apply(feats)[0] == pytest.approx(2.25)

    def test_batched(self):
        layer = Linear(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, -1.0]))
        out = layer.apply(np.array([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_allclose(out, [[4.0, 3.0], [6.0, 5.0]])


class TestRpnForward:
    def test_zero_model_scores(self, world):
        _, taxonomy, data = world
        params = zero_model(taxonomy)
        raster = data.train[0].raster
        anchors = det.anchors_for(64, 64)
        scores, deltas, valid = det.rpn_forward(params, raster, anchors)
        assert scores.shape == (len(anchors), 2)
        np.testing.assert_array_equal(scores, 0.0)
        np.testing.assert_array_equal(deltas, 0.0)
        assert valid.all()

    def test_deterministic(self, world):
        _, taxonomy, data = world
        params = zero_model(taxonomy)
        rng = np.random.default_rng(0)
        for name in det.PARAM_BLOCKS:
            blk = getattr(params, name)
            blk.weight[...] = rng.normal(0, 0.1, blk.weight.shape)
        raster = data.train[0].raster
        anchors = det.anchors_for(64, 64)
        a = det.rpn_forward(params, raster, anchors)
        b = det.rpn_forward(params, raster, anchors)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestPropose:
    def test_k_validation(self, world):
        _, taxonomy, data = world
        with pytest.raises(ValueError):
            det.propose(zero_model(taxonomy), data.train[0].raster, 0)

    def test_top1(self, world):
        _, taxonomy, data = world
        props = det.propose(zero_model(taxonomy), data.train[0].raster, 1)
        assert len(props) == 1
        assert 0.0 <= props[0].objectness <= 1.0

    def test_zero_model_objectness_half(self, world):
        _, taxonomy, data = world
        props = det.propose(zero_model(taxonomy), data.train[0].raster, 5)
        assert all(p.objectness == pytest.approx(0.5) for p in props)

    def test_prefix_property(self, world):
        _, taxonomy, data = world
        params = zero_model(taxonomy)
        rng = np.random.default_rng(1)
        params.rpn_obj.weight[...] = rng.normal(0, 0.3, params.rpn_obj.weight.shape)
        raster = data.train[0].raster
        small = det.propose(params, raster, 10)
        big = det.propose(params, raster, 40)
        assert big[: len(small)] == small
        objs = [p.objectness for p in big]
        assert objs == sorted(objs, reverse=True)

    def test_k_larger_than_survivors(self, world):
        _, taxonomy, data = world
        props = det.propose(zero_model(taxonomy), data.train[0].raster, 100000)
        assert len(props) < 100000


class TestWeakLabels:
    def test_labels_all_proposals(self, world):
        _, taxonomy, data = world
        props = det.propose(zero_model(taxonomy), data.train[0].raster, 10)
        samples = det.label_imagelevel_proposals(props, "ruby_disc", taxonomy)
        assert len(samples) == len(props)
        assert all(s.label == "ruby_disc" for s in samples)
        # Classification-only by construction: a box and a label, nothing else.
        assert set(vars(samples[0])) == {"box", "label"}

    def test_empty_proposals(self, world):
        _, taxonomy, _ = world
        assert det.label_imagelevel_proposals([], "ruby_disc", taxonomy) == []

    def test_unknown_category(self, world):
        _, taxonomy, data = world
        props = det.propose(zero_model(taxonomy), data.train[0].raster, 2)
        with pytest.raises(tx.UnknownCategoryError):
            det.label_imagelevel_proposals(props, "unobtainium", taxonomy)

    def test_ancestor_label_then_filter_drops_all(self, world):
        _, taxonomy, data = world
        props = det.propose(zero_model(taxonomy), data.train[0].raster, 4)
        samples = det.label_imagelevel_proposals(props, "disc", taxonomy)
        kept, count, filtered = tx.filter_ancestor_samples([s.label for s in samples], taxonomy)
        assert kept == [] and count == len(samples) and filtered == {"disc"}


class TestDetect:
    def test_zero_model_uniform(self, world):
        _, taxonomy, data = world
        out = det.detect(zero_model(taxonomy), taxonomy, data.eval_set[0].raster, k=3)
        assert out, "zero model should still emit detections above the floor"
        uniform = 0.5 / taxonomy.num_leaves
        assert all(d.score == pytest.approx(uniform) for d in out)

    def test_ancestor_score_is_leaf_sum(self, world):
        _, taxonomy, data = world
        params = zero_model(taxonomy)
        rng = np.random.default_rng(3)
        params.head_cls.weight[...] = rng.normal(0, 0.5, params.head_cls.weight.shape)
        out = det.detect(
            params, taxonomy, data.eval_set[0].raster, k=1, report_nodes="all", score_floor=0.0
        )
        by_cat = {d.category: d.score for d in out}
        for node in taxonomy.nodes:
            if taxonomy.children[node]:
                leaf_sum = sum(
                    by_cat[taxonomy.leaf_order[i]] for i in taxonomy.descendant_leaves[node]
                )
                assert by_cat[node] == pytest.approx(leaf_sum, abs=1e-9)

    def test_report_nodes_validation(self, world):
        _, taxonomy, data = world
        with pytest.raises(ValueError):
            det.detect(zero_model(taxonomy), taxonomy, data.eval_set[0].raster, report_nodes="some")

    def test_taxonomy_mismatch(self, world):
        _, taxonomy, data = world
        other = tx.build_taxonomy([("x", "r"), ("y", "r")])
        params = zero_model(other)
        with pytest.raises(det.DimMismatchError):
            det.detect(params, taxonomy, data.eval_set[0].raster)

    def test_feature_dim_mismatch(self, world):
        _, taxonomy, data = world
        params = ModelParams.zeros(13, taxonomy.leaf_order)
        with pytest.raises(det.DimMismatchError):
            det.detect(params, taxonomy, data.eval_set[0].raster)

    def test_flat_space_detects_ancestor_classes(self, world):
        _, taxonomy, data = world
        names = taxonomy.leaf_order + ("disc",)
        import csdet.featurizer as ft

        params = ModelParams.zeros(ft.feature_dim(), names)
        out = det.detect(params, taxonomy, data.eval_set[0].raster, k=2, score_floor=0.0)
        assert {"disc"} <= {d.category for d in out}


class TestCheckpoint:
    def test_round_trip(self, tmp_path, world):
        _, taxonomy, _ = world
        params = zero_model(taxonomy)
        rng = np.random.default_rng(9)
        for name in det.PARAM_BLOCKS:
            blk = getattr(params, name)
            blk.weight[...] = rng.normal(0, 1, blk.weight.shape)
            blk.bias[...] = rng.normal(0, 1, blk.bias.shape)
        path = tmp_path / "m.ckpt"
        det.save_checkpoint(params, path)
        back = det.load_checkpoint(path, taxonomy)
        assert back.class_names == params.class_names
        assert back.feature_dim == params.feature_dim
        for name in det.PARAM_BLOCKS:
            a, b = getattr(params, name), getattr(back, name)
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)

    def test_deterministic_bytes(self, tmp_path, world):
        _, taxonomy, _ = world
        params = zero_model(taxonomy)
        det.save_checkpoint(params, tmp_path / "a.ckpt")
        det.save_checkpoint(params, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(det.CheckpointError):
            det.load_checkpoint(p)

    def test_truncated(self, tmp_path, world):
        _, taxonomy, _ = world
        p = tmp_path / "x.ckpt"
        det.save_checkpoint(zero_model(taxonomy), p)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(det.CheckpointError, match="truncated"):
            det.load_checkpoint(p)

    def test_wrong_taxonomy_rejected(self, tmp_path, world):
        _, taxonomy, _ = world
        p = tmp_path / "x.ckpt"
        det.save_checkpoint(zero_model(taxonomy), p)
        other = tx.build_taxonomy([("a", "r"), ("b", "r")])
        with pytest.raises(det.DimMismatchError):
            det.load_checkpoint(p, other)
