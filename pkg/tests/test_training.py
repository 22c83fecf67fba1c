import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smileage import functional as fn
from smileage.data import SyntheticSpec, generate_synthetic
from smileage.network import ModelParams, model_forward, predict, toy_config
from smileage.training import (
    DEFAULT_GRIDS,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    clip_gradients,
    fit,
    grid_candidates,
    grid_search,
    is_weight,
    make_batches,
    model_for,
    rmsprop_step,
    select_best,
    write_history,
)

from oracles import mae_loop


@pytest.fixture(scope="module")
def tiny():
    data = generate_synthetic(SyntheticSpec(n_subjects=6, videos_per_subject=1, frames=(4, 5), seed=4))
    return data.subset(range(4)), data.subset(range(4, 6))


# loss and optimizer --------------------------------------------------------------


def test_mae_matches_loop_oracle():
    r = np.random.default_rng(0)
    for _ in range(20):
        n = int(r.integers(1, 30))
        p, y = r.normal(40, 15, n), r.normal(40, 15, n)
        assert abs(fn.mae_loss(p, y).item() - mae_loop(p, y)) < 1e-12


def test_clip_examples():
    assert clip_gradients(np.array([7.0, -9.0, 0.3])).tolist() == [5.0, -5.0, 0.3]
    g = {"a": np.array([1.0, -2.0])}
    assert clip_gradients(g)["a"].tolist() == [1.0, -2.0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6)))
def test_clipped_gradients_are_bounded(g):
    assert np.abs(clip_gradients(g)).max() <= 5


def test_zero_gradient_leaves_parameters_unchanged():
    theta = {"w.weight": np.array([1.0, -2.0])}
    rmsprop_step(theta, {"w.weight": np.zeros(2)}, OptimizerState(), TrainConfig(learning_rate=0.1))
    assert theta["w.weight"].tolist() == [1.0, -2.0]


def test_first_step_without_averaging_is_sign_like():
    theta = {"w": np.array([0.5, 0.5, 0.5])}
    rmsprop_step(theta, {"w": np.array([3.0, -0.02, 1e-9])}, OptimizerState(),
                 TrainConfig(learning_rate=0.1, rmsprop_decay=0.0, rmsprop_epsilon=1e-12))
    np.testing.assert_allclose(theta["w"][:2], [0.4, 0.6], rtol=1e-8)
    assert abs(theta["w"][2] - 0.5) < 0.1  # |g| comparable to sqrt(eps): damped step


def test_rmsprop_matches_hand_computed_two_steps():
    cfg = TrainConfig(learning_rate=0.01, rmsprop_decay=0.9, rmsprop_epsilon=1e-8)
    theta, state = {"w": np.array([1.0])}, OptimizerState()
    rmsprop_step(theta, {"w": np.array([2.0])}, state, cfg)
    acc = 0.1 * 4.0
    expected = 1.0 - 0.01 * 2.0 / math.sqrt(acc + 1e-8)
    rmsprop_step(theta, {"w": np.array([-1.0])}, state, cfg)
    acc = 0.9 * acc + 0.1 * 1.0
    expected += 0.01 / math.sqrt(acc + 1e-8)
    assert abs(theta["w"][0] - expected) < 1e-15
    assert state.step == 2 and state.square_avg["w"].shape == (1,)


def test_no_update_uses_unclipped_gradient():
    cfg = TrainConfig(learning_rate=0.01, rmsprop_decay=0.5)
    big, clipped = {"w": np.array([0.0, 0.0])}, {"w": np.array([0.0, 0.0])}
    s1, s2 = OptimizerState(), OptimizerState()
    for g in ([100.0, -3.0], [-40.0, 2.0], [7.0, 9.0]):
        rmsprop_step(big, {"w": np.array(g)}, s1, cfg)
        rmsprop_step(clipped, {"w": np.clip(g, -5, 5)}, s2, cfg)
    assert big["w"].tolist() == clipped["w"].tolist()
    assert np.all(s1.square_avg["w"] <= 25)


def test_l2_applies_to_weights_only():
    assert is_weight("conv1.weight") and is_weight("rnn2.V") and is_weight("regressor.k")
    assert not is_weight("conv1.bias") and not is_weight("spatial.fusion_bias") and not is_weight("regressor.b")
    cfg = TrainConfig(learning_rate=0.1, l2_lambda=1.0, rmsprop_decay=0.0)
    theta = {"a.weight": np.array([2.0]), "a.bias": np.array([2.0])}
    rmsprop_step(theta, {"a.weight": np.zeros(1), "a.bias": np.zeros(1)}, OptimizerState(), cfg)
    assert theta["a.bias"][0] == 2.0
    assert theta["a.weight"][0] < 2.0


def test_rmsprop_converges_on_quadratic():
    curvature, minimum = np.array([1.0, 4.0]), np.array([1.0, -2.0])
    theta, state = {"w": np.zeros(2)}, OptimizerState()
    cfg = TrainConfig(learning_rate=0.05, rmsprop_decay=0.9)
    for _ in range(100):
        rmsprop_step(theta, {"w": curvature * (theta["w"] - minimum)}, state, cfg)
    assert np.abs(theta["w"] - minimum).max() < 1e-3


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(clip_min=5, clip_max=-5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig.from_dict(TrainConfig(l2_lambda=3e-4).to_dict()) == TrainConfig(l2_lambda=3e-4)


# batching and history ------------------------------------------------------------


def test_batches_cover_every_video_once_and_share_length():
    data = generate_synthetic(SyntheticSpec(n_subjects=10, videos_per_subject=2, frames=(3, 6), seed=1))
    batches = make_batches(list(data), 3, np.random.default_rng(0))
    assert sorted(i for b in batches for i in b) == list(range(20))
    assert all(len({data[i].length for i in b}) == 1 and len(b) <= 3 for b in batches)
    assert [len(b) for b in make_batches(list(data), 1, np.random.default_rng(0))] == [1] * 20


def test_history_csv_layout(tmp_path):
    rows = [{"epoch": 1, "train_mae": 3.5, "val_mae": float("nan"), "grad_norm": 0.25}]
    path = write_history(rows, tmp_path / "h.csv")
    assert path.read_text().splitlines() == ["epoch,train_mae,val_mae,grad_norm", "1,3.5,nan,0.25"]


# fit -----------------------------------------------------------------------------


def test_fit_history_and_best_checkpoint(tiny, tmp_path):
    train, val = tiny
    result = fit(ModelParams.init(toy_config(), 0), train, val,
                 TrainConfig(learning_rate=1e-3, epochs=6, patience=None), history_path=tmp_path / "h.csv")
    assert [r["epoch"] for r in result.history] == list(range(1, 7))
    best = min(result.history, key=lambda r: r["val_mae"])
    assert result.best_epoch == best["epoch"]
    got = float(np.mean(np.abs(predict(list(val), result.params) - val.ages)))
    assert got == best["val_mae"]
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert len(rows) == 6 and float(rows[0]["train_mae"]) == result.history[0]["train_mae"]


def test_fit_does_not_mutate_initial_params(tiny):
    params = ModelParams.init(toy_config(), 0)
    before = params.state()
    fit(params, tiny[0], None, TrainConfig(learning_rate=1e-3, epochs=1))
    assert all(np.array_equal(before[k], params[k].data) for k in before)


def test_early_stopping_respects_patience(tiny):
    result = fit(ModelParams.init(toy_config(), 0), tiny[0], tiny[1],
                 TrainConfig(learning_rate=0.0, epochs=50, patience=3, init_bias=None))
    assert len(result.history) == 4 and result.best_epoch == 1


def test_fit_is_deterministic(tiny):
    cfg = TrainConfig(learning_rate=1e-3, epochs=3, dropout_conv=0.2, dropout_rnn=0.1, seed=9, batch_size=2)
    one = fit(ModelParams.init(toy_config(), 1), tiny[0], tiny[1], cfg)
    two = fit(ModelParams.init(toy_config(), 1), tiny[0], tiny[1], cfg)
    assert repr(one.history) == repr(two.history)
    assert all(one.params[k].data.tobytes() == two.params[k].data.tobytes() for k in one.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_dump(tiny, tmp_path):
    params = ModelParams.init(toy_config(), 0)
    params["regressor.k"].data[...] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        fit(params, tiny[0], None, TrainConfig(epochs=1, init_bias=None), dump_dir=tmp_path)
    assert info.value.dump["epoch"] == 1 and info.value.dump["video_ids"]
    assert list(tmp_path.glob("diverged_epoch1.npz"))


def test_large_l2_shrinks_weight_norms(tiny):
    def weight_norm(params):
        return math.sqrt(sum(float(np.sum(t.data**2)) for k, t in params.items() if is_weight(k)))

    init = ModelParams.init(toy_config(), 2)
    norms = [weight_norm(init)]
    for epochs in range(1, 5):
        cfg = TrainConfig(learning_rate=1e-3, l2_lambda=10.0, epochs=epochs, patience=None)
        norms.append(weight_norm(fit(init, tiny[0], None, cfg).final_params))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_gradient_flows_to_every_group(tiny):
    params = ModelParams.init(toy_config(), 3)
    v = tiny[0][0]
    fn.mae_loss(model_forward(v.frames, params).age, [v.age]).backward()
    norms = {}
    for name, t in params.items():
        norms[params.group(name)] = norms.get(params.group(name), 0.0) + float(np.sum(t.grad**2))
    assert all(math.sqrt(n) > 1e-12 for n in norms.values()), norms


@pytest.mark.slow
def test_overfits_single_video():
    data = generate_synthetic(SyntheticSpec(n_subjects=1, videos_per_subject=1, seed=3))
    result = fit(ModelParams.init(toy_config(), 0), data, None,
                 TrainConfig(learning_rate=1e-3, epochs=500, patience=None, init_bias=None))
    error = abs(predict(list(data), result.params)[0] - data[0].age)
    assert error < 0.5
    assert result.history[-1]["train_mae"] < result.history[0]["train_mae"]


# grid search ---------------------------------------------------------------------


def test_default_grid_has_336_candidates():
    assert len(grid_candidates(TrainConfig())) == 3 * 16 * 7 == 336
    assert set(DEFAULT_GRIDS) == {"hidden_units", "dropout_conv", "dropout_rnn", "l2_lambda"}


def test_empty_grid_axis_rejected():
    with pytest.raises(ValueError):
        grid_candidates(TrainConfig(), {"l2_lambda": []})


def test_hidden_units_scale_the_model():
    assert model_for(TrainConfig(hidden_units=256), toy_config(), 1 / 16).hidden == 16


def test_single_point_grid_returns_that_point(tiny):
    base = TrainConfig(epochs=1, learning_rate=1e-3)
    grid = {"hidden_units": [128], "dropout_conv": [0.1], "dropout_rnn": [0.0], "l2_lambda": [1e-4]}
    result = grid_search(tiny[0], tiny[1], toy_config(), base, grid, hidden_scale=1 / 16)
    assert len(result.rows) == 1
    assert result.best == base.__class__(**{**base.to_dict(), "dropout_conv": 0.1, "l2_lambda": 1e-4})


def test_grid_search_selects_planted_winner(tiny):
    base = TrainConfig(epochs=5, init_bias=None, patience=None)
    grid = {"learning_rate": [0.0, 3e-3, 0.0], "l2_lambda": [0.0, 1e-3]}
    result = grid_search(tiny[0], tiny[1], toy_config(), base, grid, hidden_scale=1 / 16)
    assert len(result.rows) == 6
    assert result.best.learning_rate == 3e-3
    crippled = [r["val_mae"] for r in result.rows if r["config"].learning_rate == 0.0]
    assert min(crippled) > min(r["val_mae"] for r in result.rows)


def test_tie_break_prefers_smaller_model_then_smaller_l2():
    rows = [{"config": TrainConfig(hidden_units=h, l2_lambda=l2), "val_mae": 1.0}
            for h in (256, 128, 512) for l2 in (1e-3, 0.0, 3e-4)]
    assert (select_best(rows).hidden_units, select_best(rows).l2_lambda) == (128, 0.0)
    rows.append({"config": TrainConfig(hidden_units=512, l2_lambda=5e-3), "val_mae": 0.9})
    assert select_best(rows).hidden_units == 512
