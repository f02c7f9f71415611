import numpy as np
import pytest

from scoreprop import graph as G
from scoreprop import store as S
from scoreprop.errors import ShapeError


def toy_graph(seed=0):
    return S.make_toy_model(seed)


class TestConstruction:
    def test_symbolic_shapes_equal_taped_shapes(self):
        m = toy_graph(1)
        tape = G.forward_with_tape(m, S.random_image(m.input_shape, 1))
        assert [a.shape for a in tape.activations] == m.shapes()

    def test_error_names_layer_index(self):
        layers = (G.Conv2d(3, 4, 3), G.Linear(10, 2))
        with pytest.raises(ShapeError, match="layer 1"):
            G.ModelGraph((3, 5, 5), layers, tuple(G.init_params(layers[:1], np.random.default_rng(0))) + ({},))

    def test_param_shape_checked(self):
        layer = G.Linear(4, 2)
        with pytest.raises(ShapeError):
            G.ModelGraph((4,), (layer,), ({"weight": np.zeros((2, 3)), "bias": np.zeros(2)},))

    def test_params_read_only(self):
        m = toy_graph()
        with pytest.raises(ValueError):
            m.params[0]["weight"][0, 0, 0, 0] = 1.0
        with pytest.raises(TypeError):
            m.params[0]["weight"] = None

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            G.forward(toy_graph(), np.zeros((3, 8, 8), np.float32))


class TestForward:
    def test_tape_replay(self):
        m = toy_graph(2)
        tape = G.forward_with_tape(m, S.random_image(m.input_shape, 2))
        for l, layer in enumerate(m.layers):
            out = G.apply_layer(layer, m.params[l], tape.activations[l])
            out = out[0] if isinstance(out, tuple) else out
            assert out.tobytes() == tape.activations[l + 1].tobytes()

    def test_forward_equals_tape_logits(self):
        m = toy_graph(3)
        x = S.random_image(m.input_shape, 3)
        assert G.forward(m, x).tobytes() == G.forward_with_tape(m, x).logits.tobytes()

    def test_pool_indices_recorded(self):
        m = toy_graph(4)
        tape = G.forward_with_tape(m, S.random_image(m.input_shape, 4))
        pools = [l for l, layer in enumerate(m.layers) if layer.kind == "maxpool"]
        assert sorted(tape.pool_indices) == pools


class TestPreset:
    def test_counts(self):
        m = G.build_paper_model(seed=0)
        assert G.param_count(m) == 385877
        assert G.buffer_count(m) == 1600

    def test_flat_param_list_accepted(self):
        m = G.build_paper_model(seed=1)
        flat = [p[k] for p in m.params for k in p]
        m2 = G.build_paper_model(flat)
        assert all(np.array_equal(p[k], q[k]) for p, q in zip(m.params, m2.params) for k in p)

    def test_seeded_weights_deterministic(self):
        a, b = G.build_paper_model(seed=5), G.build_paper_model(seed=5)
        assert a.params[0]["weight"].tobytes() == b.params[0]["weight"].tobytes()
