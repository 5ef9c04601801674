import time

import numpy as np
import pytest

from icgp.dataset import GameFamily, TrajectoryRecord, collect_pretraining, split_decentralized
from icgp.games import EpisodeStep, sample_markov_game, sample_matrix_game
from icgp.layout import EmbeddingSpec
from icgp.pretrain import (Batch, TrainConfig, build_windows, gradient_check, grad,
                           induced_policy, infer_play, load_checkpoint, mle_loss,
                           save_checkpoint, train)
from icgp.transformer import Layer, MlpLayer, TransformerParams


def tiny_params(rng, d=8, M=2, L=1, hidden=6, out=(0, 3), clip=None):
    layers = [Layer(*(rng.normal(size=(M, d, d)) / np.sqrt(d) for _ in range(3)),
                    MlpLayer(rng.normal(size=(hidden, d)) / np.sqrt(d),
                             rng.normal(size=(d, hidden)) / np.sqrt(hidden)))
              for _ in range(L)]
    return TransformerParams(layers, d, out, head_mode="softmax", clip_radius=clip)


def tiny_batch(rng, b=3, n=5, d=8, K=3, side=False):
    X = rng.normal(size=(b, n, d))
    if side:
        pos = np.array([1.0, 3.0, 5.0, 6.0])
        return Batch(X, rng.integers(K, size=(b, pos.size)), Y=rng.normal(size=(b, pos.size, d)),
                     side_pos=pos)
    q = np.arange(0, n, 2)
    return Batch(X, rng.integers(K, size=(b, q.size)), query_pos=q)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("side", [False, True])
def test_gradient_matches_finite_differences(seed, side):
    rng = np.random.default_rng(seed)
    params = tiny_params(rng, clip=2.5 if side else None)
    report = gradient_check(params, tiny_batch(rng, side=side), probes=100, seed=seed)
    assert report["max_rel_error"] <= 1e-4


def test_zero_logits_give_log_k():
    rng = np.random.default_rng(0)
    p = tiny_params(rng, out=(0, 5))
    for l in p.layers:
        l.V[:] = 0
        l.mlp.W2[:] = 0
    X = rng.normal(size=(2, 4, 8))
    X[..., :5] = 0
    b = Batch(X, rng.integers(5, size=(2, 2)), query_pos=np.array([0, 2]))
    assert mle_loss(p, b) == pytest.approx(np.log(5), abs=1e-14)
    zeta = TransformerParams(tiny_params(rng).layers, 8, (0, 3), head_mode="zeta", zeta=1.0)
    assert mle_loss(zeta, tiny_batch(rng)) == pytest.approx(np.log(3), abs=1e-14)
    with pytest.raises(ValueError):
        mle_loss(TransformerParams(p.layers, 8, (0, 5), head_mode="simplex"), b)


def test_query_key_gradients_vanish_when_values_are_zero():
    rng = np.random.default_rng(1)
    p = tiny_params(rng)
    p.layers[0].V[:] = 0
    _, g = grad(p, tiny_batch(rng))
    assert not g[0].any() and not g[1].any()
    assert g[2].any()


def test_duplicated_sample_leaves_mean_gradient_unchanged():
    rng = np.random.default_rng(2)
    p = tiny_params(rng)
    one = tiny_batch(rng, b=1)
    two = Batch(np.concatenate([one.X, one.X]), np.concatenate([one.targets, one.targets]),
                query_pos=one.query_pos)
    l1, g1 = grad(p, one)
    l2, g2 = grad(p, two)
    assert l1 == pytest.approx(l2, abs=1e-14)
    assert all(np.allclose(a, b, atol=1e-14) for a, b in zip(g1, g2))


def _constant_records(n=3, G=30, A=3, B=3):
    recs = []
    rng = np.random.default_rng(0)
    for k in range(n):
        steps = [EpisodeStep(g, 0, 0, 0, 0, float(rng.random())) for g in range(G)]
        recs.append(TrajectoryRecord(k, (1, 1, A, B), steps, [(g, 0, 0, 0) for g in range(G)]))
    return recs


def test_constant_policy_is_learned():
    cfg = TrainConfig(epochs=100, batch_size=4, lr=5e-3, layers=1, heads=2, hidden=8, window=20)
    _, rep = train(cfg, _constant_records(), "decentralized_max")
    assert rep.final_nll < 0.05


def test_single_game_memorization():
    fam = GameFamily(3, 3, 1, 1, 20)
    recs = collect_pretraining(fam, "exp3", 1, seed=3)
    _, rep = train(TrainConfig(epochs=100, batch_size=1, lr=1e-2), recs, "decentralized_max")
    assert rep.final_nll <= 0.5 * rep.initial_nll


def test_training_is_seed_deterministic(tmp_path):
    recs = collect_pretraining(GameFamily(2, 2, 2, 2, 6), "v_learning", 2, seed=1)
    cfg = TrainConfig(epochs=3, batch_size=2, layers=1, heads=2, hidden=4, window=8)
    paths = []
    for k in range(2):
        params, rep = train(cfg, recs, "decentralized_min")
        paths.append(tmp_path / f"c{k}.bin")
        save_checkpoint(params, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert rep.to_csv().splitlines()[0] == "epoch,mean_nll"


def test_checkpoint_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(4)
    p = tiny_params(rng, L=2, clip=3.0)
    p.spec["note"] = "x"
    path = tmp_path / "p.bin"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    assert (q.d, q.extraction, q.head_mode, q.clip_radius, q.spec) == \
        (p.d, p.extraction, p.head_mode, p.clip_radius, p.spec)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_windows_cover_every_step():
    recs = collect_pretraining(GameFamily(2, 2, 1, 1, 11), "exp3", 2, seed=0)
    spec = EmbeddingSpec("decentralized_max", 1, 1, 2, 2, 11)
    data = build_windows(recs, spec, 8)
    starts = sorted(s for k, s in data.windows if k == 0)
    assert starts == [0, 8, 14] and data.length == 8
    covered = set()
    for s in starts:
        covered |= set(range(s // 2, s // 2 + 4))
    assert covered == set(range(11))
    with pytest.raises(ValueError):
        TrainConfig(window=7)
    with pytest.raises(ValueError):
        TrainConfig(head_mode="simplex")


def _trained(mode_pair, dims, G, seed=0):
    A, B, S, H = dims
    recs = collect_pretraining(GameFamily(A, B, S, H, G), "v_learning" if S > 1 or H > 1
                               else "exp3", 2, seed=seed)
    cfg = TrainConfig(epochs=2, batch_size=2, layers=1, heads=2, hidden=4)
    return [train(cfg, recs, m)[0] for m in mode_pair]


def test_first_step_policy_is_model_prior():
    pM, pm = _trained(("decentralized_max", "decentralized_min"), (3, 3, 1, 1), 5)
    game = sample_matrix_game(3, 3, 42)
    res = infer_play([game], 1, [np.random.default_rng(0)], pM, pm)
    assert len(res.steps[0]) == 1
    assert np.allclose(res.policies["max"][0, 0, 0], induced_policy(pM, [], 0), atol=1e-14)


def test_decentralized_prompts_are_own_views():
    pM, pm = _trained(("decentralized_max", "decentralized_min"), (3, 2, 2, 2), 4)
    game = sample_markov_game(3, 2, 2, 2, 7)
    res = infer_play([game], 4, [np.random.default_rng(1)], pM, pm)
    steps = [EpisodeStep(g, h, s, a, b, r) for g, h, s, a, b, r in res.steps[0]]
    rec = TrajectoryRecord(0, game.dims, steps, [])
    mx, mn = split_decentralized(rec)
    for tau in range(8):
        for s in range(2):
            assert np.allclose(res.policies["max"][0, tau, s], induced_policy(pM, mx.steps[:tau], s),
                               atol=1e-12)
            assert np.allclose(res.policies["min"][0, tau, s], induced_policy(pm, mn.steps[:tau], s),
                               atol=1e-12)


def test_centralized_inference_shapes_and_role_checks():
    (pj,) = _trained(("centralized",), (2, 3, 2, 2), 4)
    game = sample_markov_game(2, 3, 2, 2, 5)
    res = infer_play([game, game], 3, [np.random.default_rng(0), np.random.default_rng(1)],
                     params_joint=pj)
    assert res.policies["joint"].shape == (2, 6, 2, 2, 3)
    assert np.allclose(res.policies["joint"].sum(axis=(-1, -2)), 1.0)
    with pytest.raises(ValueError):
        infer_play([game], 5, [np.random.default_rng(0)], params_joint=pj)
    with pytest.raises(ValueError):
        infer_play([game], 2, [np.random.default_rng(0)], params_max=pj, params_min=pj)


def test_inference_cost_grows_at_most_quadratically():
    pM, pm = _trained(("decentralized_max", "decentralized_min"), (3, 3, 1, 1), 240)
    game = sample_matrix_game(3, 3, 1)

    def cost(G):
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            infer_play([game], G, [np.random.default_rng(0)], pM, pm, window=480)
            best = min(best, time.perf_counter() - t0)
        return best

    small, large = cost(60), cost(240)
    assert large <= 4 ** 2 * 2 * small
