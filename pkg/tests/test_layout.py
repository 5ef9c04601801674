import numpy as np
import pytest

from icgp.layout import EmbeddingSpec, Layout, embed, state_tokens


def raw_spec(mode="centralized", H=2, S=3, A=2, B=4, G=5):
    return EmbeddingSpec(mode, H, S, A, B, G, scratch=2, normalize_pos=False)


def test_layout_blocks():
    L = Layout([("a", 2), ("b", 3)])
    assert L.d == 5 and L.sl("b") == slice(2, 5) and L.idx("b", 2) == 4
    with pytest.raises(IndexError):
        L.idx("a", 2)
    with pytest.raises(ValueError):
        Layout([("a", 1), ("a", 2)])


def test_empty_history_single_token():
    spec = raw_spec()
    L = spec.layout
    X = embed(spec, [], current_state=2)
    assert X.shape == (1, spec.d)
    assert X[0, L.sl("state")].tolist() == [0, 0, 1]
    assert X[0, L.idx("pos_t")] == 1 and X[0, L.idx("pos_i")] == 1 and X[0, L.idx("pos_v")] == 1
    assert X[0, L.idx("pos_g")] == 1 and X[0, L.idx("pos_h")] == 1
    assert X[0, L.sl("pos_eh")].tolist() == [1, 0]


def test_one_step_positional_counters():
    spec = raw_spec()
    L = spec.layout
    X = embed(spec, [(0, 1, 3, 0.25)], current_state=1)
    assert X[:, L.idx("pos_i")].tolist() == [1, 2, 3]
    assert X[:, L.idx("pos_i2")].tolist() == [1, 4, 9]
    assert X[:, L.idx("pos_v")].tolist() == [1, 0, 1]
    assert X[:, L.idx("pos_h")].tolist() == [1, 1, 2]
    assert X[1, L.sl("act_a")].tolist() == [0, 1] and X[1, L.sl("act_b")].tolist() == [0, 0, 0, 1]
    assert X[1, L.idx("reward")] == 0.25
    assert not X[:, L.sl("out")].any() and not X[:, L.sl("scratch")].any()


def test_decentralized_view_never_encodes_opponent():
    spec = raw_spec("decentralized_max")
    names = [n for n, _ in spec.layout.blocks]
    assert "act_b" not in names and spec.layout.span("act")[1] == spec.A
    X = embed(spec, [(0, 1, 0.5), (2, 0, 0.1)], current_state=0)
    # Only own action one-hots appear in the action block; width equals A.
    assert X[:, spec.layout.sl("act")].sum() == 2
    mn = raw_spec("decentralized_min")
    assert mn.num_outputs == mn.B and mn.layout.span("act")[1] == mn.B


def test_normalized_positions_and_round_trip():
    spec = EmbeddingSpec("decentralized_min", 2, 1, 3, 3, 10)
    assert EmbeddingSpec.from_dict(spec.to_dict()) == spec
    X = state_tokens(spec, np.array([0]), tau=19)
    L = spec.layout
    assert X[0, L.idx("pos_t")] == 1.0 and X[0, L.idx("pos_g")] == 1.0
    assert X[0, L.idx("pos_i")] == pytest.approx(39 / 40)
    with pytest.raises(ValueError):
        EmbeddingSpec("joint", 1, 1, 2, 2, 3)
