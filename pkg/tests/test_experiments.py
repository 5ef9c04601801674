import csv
import io
import json

import numpy as np
import pytest

from icgp import experiments as ex
from icgp.games import sample_matrix_game

TINY = """
mode = decentralized   # matrix game, EXP3 context
A = 2
B = 2
G = 12
n_pretrain = 2,3
inference_games = 2
train_seeds = 0
epochs = 2
batch_size = 2
layers = 1
heads = 2
hidden = 4
window = 8
"""


def tiny(**kw):
    return ex.parse_config(TINY, **kw)


def test_parse_config_values_and_defaults():
    cfg = tiny()
    assert cfg.n_pretrain == (2, 3) and cfg.G == 12 and cfg.context_tag == "exp3"
    assert cfg.delta is None and cfg.lr == ex.ExperimentConfig().lr
    assert tiny(seed=4).seed == 4 and tiny(seed=None).seed == 0
    assert ex.parse_config("mode = centralized\nS = 2\nH = 2").context_tag == "vi_ulcb"
    assert ex.parse_config("S = 2\nH = 2").context_tag == "v_learning"


@pytest.mark.parametrize("text", ["colour = red", "A = 2\nA = 3", "A = two", "A", "mode = joint",
                                  "G = 0", "mode = centralized\ncontext = exp3",
                                  "S = 2\ncontext = exp3", "window = 7", "final_frac = 0",
                                  "round2 = maybe"])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ex.ConfigError):
        ex.parse_config(text)


def test_digest_tracks_every_field():
    assert tiny().digest() == tiny().digest()
    assert tiny().digest() != tiny(seed=1).digest()
    assert tiny().digest() == ex.parse_config(TINY + "\ncontext = exp3").digest()


def test_matrix_gap_curve_of_fixed_policies():
    game = sample_matrix_game(3, 3, 0)
    R = game.reward[0, 0]
    mu = np.tile([0.2, 0.3, 0.5], (4, 1))
    nu = np.tile([0.6, 0.4, 0.0], (4, 1))
    want = np.max(R.T @ mu[0]) * 0 + np.max(R @ nu[0]) - np.min(mu[0] @ R)
    assert np.allclose(ex.matrix_gap_curve(R, mu, nu), want, atol=1e-14)


def test_curves_csv_schema_and_round_trip(tmp_path):
    series = {"a": np.array([[0.4, 0.2, -1e-15], [0.2, 0.2, 0.0]]), "b": np.array([[1.0, 0.5, 0.25]])}
    text = ex.curves_csv(series)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ex.CSV_HEADER and len(rows) == 1 + 6
    path = tmp_path / "c.csv"
    path.write_text(text)
    back = ex.read_curves(path)
    assert np.allclose(back["a"]["mean_gap"], [0.3, 0.2, 0.0])
    assert back["a"]["mean_gap"].min() >= 0
    assert np.allclose(back["a"]["stderr"], [0.1, 0.0, 0.0])
    assert back["b"]["episode"].tolist() == [1, 2, 3] and not back["b"]["stderr"].any()
    path.write_text("x,y\n")
    with pytest.raises(ValueError):
        ex.read_curves(path)


def _snapshot(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "timings.json"}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    ex.run_pipeline(tiny(), out)
    return out


def test_pipeline_artifacts(tiny_run):
    names = {p.name for p in tiny_run.iterdir()}
    for n in (2, 3):
        assert {f"ckpt-N{n}-seed0-max.bin", f"ckpt-N{n}-seed0-min.bin"} <= names
    assert {"dataset.jsonl", "training-log.csv", "curves.csv", "curves.svg", "manifest.json",
            "timings.json"} <= names
    man = json.loads((tiny_run / "manifest.json").read_text())
    assert all(man["stages"][s]["done"] for s in ex.STAGES)
    assert man["stages"]["train"]["truncation_window_tokens"] == 8
    curves = ex.read_curves(tiny_run / "curves.csv")
    assert set(curves) == {"context-exp3", "transformer-N2", "transformer-N3"}
    assert all(len(v["episode"]) == 12 for v in curves.values())
    log = (tiny_run / "training-log.csv").read_text().splitlines()
    assert log[0] == "N,train_seed,role,epoch,mean_nll" and len(log) == 1 + 4 * (1 + 2)  # epoch 0 is the untrained loss
    assert (tiny_run / "curves.svg").read_text().startswith("<svg")


def test_rerun_is_a_byte_identical_no_op(tiny_run, tmp_path):
    before = _snapshot(tiny_run)
    ex.run_pipeline(tiny(), tiny_run)
    assert _snapshot(tiny_run) == before
    fresh = tmp_path / "fresh"
    ex.run_pipeline(tiny(), fresh)
    assert _snapshot(fresh) == before


def test_tampered_artifact_reruns_its_stage(tiny_run, tmp_path):
    out = tmp_path / "copy"
    out.mkdir()
    for name, data in _snapshot(tiny_run).items():
        (out / name).write_bytes(data)
    (out / "curves.csv").write_text("garbage")
    ex.run_pipeline(tiny(), out)
    assert (out / "curves.csv").read_bytes() == (tiny_run / "curves.csv").read_bytes()


def test_config_change_resets_the_manifest(tiny_run, tmp_path):
    out = tmp_path / "other"
    out.mkdir()
    (out / "manifest.json").write_bytes((tiny_run / "manifest.json").read_bytes())
    man = ex.Manifest(out, tiny(seed=9))
    assert man.data["stages"] == {}


def test_missing_checkpoint_is_an_error(tiny_run, tmp_path):
    out = tmp_path / "partial"
    out.mkdir()
    (out / "dataset.jsonl").write_bytes((tiny_run / "dataset.jsonl").read_bytes())
    with pytest.raises(FileNotFoundError, match="ckpt-N2-seed0-max.bin"):
        ex.run_pipeline(tiny(), out, stages=("infer",))
    with pytest.raises(FileNotFoundError):
        ex.run_pipeline(tiny(), tmp_path / "empty", stages=("eval",))


def test_worker_count_does_not_change_results(tiny_run, tmp_path, monkeypatch):
    monkeypatch.setenv("ICGP_THREADS", "2")
    out = tmp_path / "par"
    ex.run_pipeline(tiny(), out)
    assert _snapshot(out) == _snapshot(tiny_run)


def test_uniform_checkpoint_on_symmetric_game_has_zero_gap(tiny_run):
    from icgp.games import MarkovGame
    from icgp.pretrain import infer_play, load_checkpoint

    params = [load_checkpoint(tiny_run / f"ckpt-N2-seed0-{r}.bin") for r in ("max", "min")]
    for p in params:  # silence every update so the head sees zero logits
        for layer in p.layers:
            layer.V[:] = 0
            if layer.mlp is not None:
                layer.mlp.W2[:] = 0
    game = MarkovGame(np.ones((1, 1, 2, 2, 1)), np.eye(2).reshape(1, 1, 2, 2))
    res = infer_play([game], 12, [np.random.default_rng(0)], *params)
    assert np.allclose(res.policies["max"], 0.5) and np.allclose(res.policies["min"], 0.5)
    curve = ex.decentralized_gap_curve(game, res.policies["max"][0], res.policies["min"][0])
    assert curve.shape == (12,) and np.allclose(curve, 0.0, atol=1e-14)
