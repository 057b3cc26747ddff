import json

import numpy as np
import pytest

from mbinception import zoo
from mbinception.errors import ConfigError, GraphError
from mbinception.gradcheck import TOY_CONFIGS, check_model
from mbinception.graph import (
    LayerNode,
    backward,
    build_graph,
    count_parameters,
    forward,
    from_description,
    infer_shapes,
)
from mbinception.zoo import InceptionConfig


def conv_params(k, cin, cout):
    return k * k * cin * cout + cout


def bn_params(c):
    return 2 * c


def toy_mbinception_count(n=4, cin=3, spatial=8, classes=10):
    """Hand count for one stage of width n on a spatial x spatial x cin input, stem width 4n."""
    q, r, s = n // 4, max(n // 8, 1), 4 * n

    def inception(c):
        return (conv_params(1, c, q) + conv_params(1, c, r) + conv_params(3, r, q)
                + conv_params(1, c, r) + conv_params(5, r, q) + conv_params(1, c, q))

    def first_block(c):
        return conv_params(1, c, n) + inception(n) + bn_params(n) + inception(n) + bn_params(n)

    stem = conv_params(7, cin, s) + bn_params(s)
    # the skip concatenation appends the block input, so projections see n + c channels
    pass1 = first_block(s) + conv_params(3, n + s, n) + bn_params(n)
    pass2 = first_block(n) + conv_params(3, 2 * n, n) + bn_params(n)
    stage = pass1 + pass2
    side = spatial // 2 // 2  # stride-2 stem conv, stride-2 pool; last stage keeps resolution
    head = side * side * n * classes + classes
    return stem + stage + head


def toy(name):
    return zoo.build(name, **TOY_CONFIGS[name])


def zero_input(model, batch=2):
    return np.zeros((batch,) + tuple(model.input_shape[1:]))


@pytest.fixture(scope="module")
def model():
    return zoo.build("mbinception", n=8)


class TestArchitecture:
    def test_stem(self, model):
        stem = model.node("stem/conv")
        assert stem.config["kernel"] == 7 and stem.config["stride"] == 2
        assert model.nodes[1].id == "stem/conv"
        assert [model.node(i).kind for i in ("stem/bn", "stem/relu", "stem/pool")] == ["batchnorm", "relu", "maxpool"]
        assert model.node("stem/pool").config["pool"] == 3 and model.node("stem/pool").config["stride"] == 2

    def test_stage_filters(self, model):
        for s, mult in enumerate((1, 2, 4, 8), 1):
            for p in ("pass1", "pass2"):
                proj = model.node(f"stage{s}/{p}/proj/conv")
                assert proj.config["filters"] == 8 * mult and proj.config["kernel"] == 3
        assert not any(n.id.startswith("stage5") for n in model.nodes)

    def test_four_inception_modules_per_stage(self, model):
        for s in range(1, 5):
            modules = [n for n in model.nodes_of_kind("concat") if n.id.startswith(f"stage{s}/") and "inception" in n.id]
            assert len(modules) == 4
            assert {n.id.split("/")[1] for n in modules} == {"pass1", "pass2"}

    def test_first_block_order_and_skip(self, model):
        ids = [n.id for n in model.nodes]
        order = ["entry", "inception1/concat", "bn1", "relu1", "dropout", "inception2/concat", "bn2",
                 "skip_concat", "relu2"]
        pos = [ids.index(f"stage2/pass1/{name}") for name in order]
        assert pos == sorted(pos)
        skip = model.node("stage2/pass1/skip_concat")
        assert skip.inputs == ["stage2/pass1/bn2", model.node("stage2/pass1/entry").inputs[0]]
        assert model.node("stage2/pass1/dropout").config["rate"] == 0.25

    def test_head(self, model):
        assert [n.kind for n in model.nodes[-4:]] == ["flatten", "dropout", "dense", "softmax-xent"]
        assert model.node("head/dropout").config["rate"] == 0.5
        assert model.num_classes == 10

    def test_inception_branch_kernels(self, model):
        kernels = {n.id.rsplit("/", 1)[1]: n.config["kernel"] for n in model.nodes
                   if n.id.startswith("stage1/pass1/inception1/") and n.kind == "conv"}
        assert kernels == {"b1": 1, "b3_reduce": 1, "b3": 3, "b5_reduce": 1, "b5": 5, "pool_proj": 1}
        assert model.node("stage1/pass1/inception1/b3").inputs == ["stage1/pass1/inception1/b3_reduce"]

    def test_stem_width(self, model):
        assert model.node("stem/conv").config["filters"] == 32
        assert zoo.build("mbinception", n=8, stem_filters=8).node("stem/conv").config["filters"] == 8

    @pytest.mark.parametrize("f", [4, 8, 12, 16, 32, 64, 100])
    def test_inception_budget(self, f):
        assert InceptionConfig.for_budget(f).filters == f

    def test_three_stage_variant(self):
        m = zoo.build("mbinception", n=4, stage_multipliers=(1, 2, 4), input_shape=(1, 16, 16, 3))
        assert {n.id.split("/")[0] for n in m.nodes if n.id.startswith("stage")} == {"stage1", "stage2", "stage3"}


class TestParameterCounts:
    def test_toy_matches_hand_count(self):
        m = toy("mbinception")
        assert count_parameters(m) == toy_mbinception_count()

    def test_toy_hand_count_other_width(self):
        m = zoo.build("mbinception", input_shape=(1, 16, 16, 3), n=8, stage_multipliers=(1,), num_classes=5)
        assert count_parameters(m) == toy_mbinception_count(n=8, spatial=16, classes=5)

    def test_dense_alone(self):
        nodes = [LayerNode("input", "input", {}, []), LayerNode("fc", "dense", {"units": 2}, ["input"]),
                 LayerNode("loss", "softmax-xent", {}, ["fc"])]
        assert count_parameters(build_graph("d", (1, 3), nodes)) == 8

    def test_conv_alone(self):
        nodes = [LayerNode("input", "input", {}, []),
                 LayerNode("c", "conv", {"filters": 4, "kernel": 3}, ["input"]),
                 LayerNode("f", "flatten", {}, ["c"]), LayerNode("loss", "softmax-xent", {}, ["f"])]
        assert count_parameters(build_graph("c", (1, 5, 5, 2), nodes)) == 76

    def test_running_stats_excluded(self):
        m = toy("mbinception")
        assert m.store.buffers
        assert count_parameters(m) == sum(v.size for v in m.store.params.values())

    def test_default_ordering(self):
        counts = {name: count_parameters(zoo.build(name)) for name in ("mobilenet-style", "mbinception", "resnet-style")}
        assert counts["mobilenet-style"] < counts["mbinception"] < counts["resnet-style"]

    @pytest.mark.parametrize("width,depth", [(8, 2), (16, 3), (16, 4)])
    def test_mobilenet_smaller_than_vgg(self, width, depth):
        kw = {"width": width, "depth": depth}
        assert count_parameters(zoo.build("mobilenet-style", **kw)) < count_parameters(zoo.build("vgg-style", **kw))

    @pytest.mark.parametrize("name", sorted(TOY_CONFIGS))
    def test_toys_are_small(self, name):
        assert count_parameters(toy(name)) <= 5000


class TestForward:
    @pytest.mark.parametrize("name", sorted(TOY_CONFIGS))
    def test_runtime_shapes_match_inference(self, name):
        m = toy(name)
        x = np.random.default_rng(0).standard_normal((3,) + tuple(m.input_shape[1:]))
        for mode in ("train", "infer"):
            tape = forward(m, x, mode, np.random.default_rng(1))
            for node in m.nodes:
                assert tape.outputs[node.id].shape == (3,) + m.shapes[node.id]

    def test_zero_input_symmetry(self):
        m = zoo.build("mbinception", n=8)
        for mode in ("train", "infer"):
            logits = forward(m, zero_input(m), mode, np.random.default_rng(0)).logits
            assert np.all(logits == logits[0, 0])

    def test_resnet_zero_branch_is_identity(self):
        m = zoo.build("resnet-style", input_shape=(1, 8, 8, 3), width=4, depth=2)
        for name in ("kernel", "bias"):
            for part in ("a/conv", "b/conv"):
                key = f"stage1/block1/{part}/{name}"
                m.store.params[key] = np.zeros_like(m.store.params[key])
        x = np.random.default_rng(2).standard_normal((2, 8, 8, 3))
        tape = forward(m, x, "infer")
        np.testing.assert_array_equal(tape.outputs["stage1/block1/relu"], tape.outputs["stem/relu"])

    def test_vgg_zero_input_gives_zero_features(self):
        m = zoo.build("vgg-style", width=4, depth=2)
        tape = forward(m, zero_input(m), "infer")
        assert not tape.outputs["head/flatten"].any()

    def test_infer_is_deterministic(self):
        m = toy("mbinception")
        x = np.random.default_rng(3).standard_normal((4, 8, 8, 3))
        a = forward(m, x, "infer").logits
        b = forward(m, x, "infer").logits
        assert np.array_equal(a, b)

    def test_infer_does_not_touch_running_stats(self):
        m = toy("mbinception")
        before = {k: v.copy() for k, v in m.store.buffers.items()}
        forward(m, np.ones((2, 8, 8, 3)), "infer")
        assert all(np.array_equal(before[k], m.store.buffers[k]) for k in before)

    def test_train_updates_running_stats(self):
        m = toy("mbinception")
        forward(m, np.random.default_rng(4).standard_normal((2, 8, 8, 3)), "train")
        assert not np.all(m.store.buffers["stem/bn/running_mean"] == 0)

    def test_flat_vectors_are_unpacked(self):
        m = toy("mbinception")
        x = np.random.default_rng(7).standard_normal((3, 8, 8, 3))
        flat = x.reshape(3, -1)
        assert np.array_equal(forward(m, flat).logits, forward(m, x).logits)

    def test_wrong_batch_shape(self):
        m = toy("mbinception")
        with pytest.raises(GraphError, match="input"):
            forward(m, np.zeros((2, 9, 9, 3)))


class TestBackward:
    def test_loss_scale_linearity(self):
        m = toy("mbinception")
        rng = np.random.default_rng(5)
        x, y = rng.standard_normal((2, 8, 8, 3)), np.array([1, 7])
        tape = forward(m, x, "train", np.random.default_rng(0), update_stats=False)
        loss1, g1 = backward(m, tape, y)
        loss2, g2 = backward(m, tape, y, loss_scale=2.0)
        assert loss2 == 2 * loss1
        for k in g1:
            assert np.array_equal(g2[k], 2 * g1[k])

    def test_one_gradient_per_parameter(self):
        m = toy("resnet-style")
        tape = forward(m, np.ones((2, 8, 8, 3)), "train")
        _, grads = backward(m, tape, np.array([0, 1]))
        assert set(grads) == set(m.store.params)
        assert all(grads[k].shape == m.store.params[k].shape for k in grads)

    def test_fan_out_accumulates(self):
        # y = x + x: gradient wrt the shared input is doubled
        nodes = [LayerNode("input", "input", {}, []), LayerNode("fc", "dense", {"units": 2}, ["input"]),
                 LayerNode("sum", "add", {}, ["fc", "fc"]), LayerNode("loss", "softmax-xent", {}, ["sum"])]
        m = build_graph("fan", (1, 3), nodes, seed=1)
        x = np.array([[1.0, -2.0, 0.5]])
        _, grads = backward(m, forward(m, x, "train"), np.array([1]))
        single = [LayerNode("input", "input", {}, []), LayerNode("fc", "dense", {"units": 2}, ["input"]),
                  LayerNode("loss", "softmax-xent", {}, ["fc"])]
        s = build_graph("one", (1, 3), single, seed=1)
        # same logits as the fan-out graph: 2 (W x + b)
        s.store.params["fc/weight"] = 2 * m.store.params["fc/weight"]
        s.store.params["fc/bias"] = 2 * m.store.params["fc/bias"]
        _, ref = backward(s, forward(s, x, "train"), np.array([1]))
        np.testing.assert_allclose(grads["fc/bias"], 2 * ref["fc/bias"], rtol=1e-14)

    @pytest.mark.slow
    def test_toy_mbinception_whole_graph_gradcheck(self):
        report = check_model(toy("mbinception"), batch_size=2, seed=0)
        assert report.model_error <= 1e-3
        assert report.passed, report.failures


class TestValidation:
    def test_n_not_multiple_of_four(self):
        with pytest.raises(ConfigError, match="divisible by 4"):
            zoo.build("mbinception", n=6)

    def test_unknown_model(self):
        with pytest.raises(ConfigError):
            zoo.build("alexnet")

    def test_collapse_names_node(self):
        nodes = [LayerNode("input", "input", {"shape": [2, 2, 1]}, []),
                 LayerNode("big", "conv", {"filters": 1, "kernel": 5, "padding": "valid"}, ["input"]),
                 LayerNode("loss", "softmax-xent", {}, ["big"])]
        with pytest.raises(GraphError) as err:
            infer_shapes(nodes)
        assert err.value.node_id == "big"

    def test_builder_error_names_stage(self):
        with pytest.raises(ConfigError, match="stage"):
            zoo.build("vgg-style", input_shape=(1, 4, 4, 3), width=2, depth=4)

    def test_concat_mismatch_names_node(self):
        nodes = [LayerNode("input", "input", {"shape": [4, 4, 1]}, []),
                 LayerNode("a", "conv", {"filters": 1, "kernel": 1, "stride": 2}, ["input"]),
                 LayerNode("cat", "concat", {}, ["a", "input"]),
                 LayerNode("f", "flatten", {}, ["cat"]),
                 LayerNode("loss", "softmax-xent", {}, ["f"])]
        with pytest.raises(GraphError) as err:
            infer_shapes(nodes)
        assert err.value.node_id == "cat"


class TestDescription:
    @pytest.mark.parametrize("name", sorted(TOY_CONFIGS))
    def test_rebuild_gives_identical_logits(self, name):
        m = toy(name)
        desc = json.loads(json.dumps(m.describe()))
        r = from_description(desc, seed=99)
        assert count_parameters(r) == count_parameters(m)
        r.store = m.store.copy()
        x = np.random.default_rng(6).standard_normal((2,) + tuple(m.input_shape[1:]))
        assert np.array_equal(forward(m, x).logits, forward(r, x).logits)

    def test_wrong_format(self):
        with pytest.raises(GraphError):
            from_description({"format": "other"})

    def test_same_seed_same_weights(self):
        a, b = zoo.build("mbinception", seed=3), zoo.build("mbinception", seed=3)
        assert all(np.array_equal(a.store.params[k], b.store.params[k]) for k in a.store.params)
