import json

import numpy as np
import pytest

from respmtl.autodiff import Adam, class_weights, load_checkpoint
from respmtl.metrics import TooFewRuns
from respmtl.models import HARD, SOFT, EncoderSpec, TaskSet, build_model
from respmtl.training import (LOG_HEADER, NumericalFailure, TaskData, TrainConfig, aggregate_cell, evaluate,
                              read_aggregate, read_epoch_log, run_experiment, run_seed, task_weights, train_epoch)

SPEC = EncoderSpec("mini_transformer", 8, 1, 2, (2, 3), (2, 3), "mean", (4, 6), 2)
TWO = TaskSet(("lung", "disease"))


def toy_data(n, seed=0, meta=False):
    r = np.random.default_rng(seed)
    lung = np.arange(n) % 4
    disease = (np.arange(n) // 2) % 2
    x = r.normal(size=(n, 4, 6)) * 0.1
    x[:, 0, :] += lung[:, None]
    x[:, 3, :] += 2 * disease[:, None]
    labels = {"lung": lung, "disease": disease}
    masks = {"lung": np.ones(n, bool), "disease": np.ones(n, bool)}
    if meta:
        labels["meta"] = np.arange(n) % 2
        masks["meta"] = np.arange(n) % 3 != 0
    return TaskData(x, labels, masks, [f"s{i}_0" for i in range(n)])


def config(**kw):
    base = dict(lr=1e-3, epochs=3, batch_size=4, seeds=(0, 1), precision="float64")
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation_lists_everything():
    errors = TrainConfig(lr=-1, epochs=0, batch_size=0, seeds=(), precision="half", select_on="x").validate()
    assert len(errors) == 6


def test_task_weights():
    data = toy_data(12)
    data.labels["disease"] = np.array([0] * 3 + [1] * 9)
    w = task_weights(data, TWO, "all")
    np.testing.assert_allclose(w["disease"], class_weights([3, 9]))
    np.testing.assert_allclose(w["lung"], [1, 1, 1, 1])
    assert (task_weights(data, TWO, "disease")["lung"] == 1).all()
    assert (task_weights(data, TWO, "none")["disease"] == 1).all()
    data.labels["lung"][:] = 0
    np.testing.assert_allclose(task_weights(data, TWO)["lung"], [1, 1, 1, 1])


def test_lr_zero_keeps_parameters():
    model = build_model(SPEC, TWO, SOFT, seed=0)
    before = model.state_arrays()
    stats = train_epoch(model, Adam(model.parameters(), lr=0.0), toy_data(8), config(lr=0.0),
                        np.random.default_rng(0))
    assert set(stats) == {"total", "lung", "disease", "reg"}
    assert all(np.array_equal(before[k], v) for k, v in model.state_arrays().items())


def test_one_step_is_adam_first_step():
    spec = EncoderSpec("mlp", 2, 1, input_shape=(1, 2))
    ts = TaskSet(("disease",))
    model = build_model(spec, ts, HARD, seed=0)
    data = toy_data(2)
    data = TaskData(data.x[:, :1, :2], {"disease": np.array([0, 1])}, {"disease": np.ones(2, bool)})
    before = model.state_arrays()
    # reference gradient on the same (single, whole) batch
    ref = build_model(spec, ts, HARD, seed=0)
    from respmtl.autodiff import backward
    from respmtl.models import model_loss
    backward(model_loss(ref, ref(data.x), data.labels, data.masks).total)
    grads = {n: p.grad for n, p in ref.parameters().items()}
    train_epoch(model, Adam(model.parameters(), lr=0.01), data, config(batch_size=2), np.random.default_rng(0))
    for n, v in model.state_arrays().items():
        g = grads[n]
        want = before[n] - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(v, want, rtol=1e-12, atol=1e-15)


def test_same_seed_same_trajectory():
    a = run_seed(toy_data(12), toy_data(8, 1), TWO, SOFT, SPEC, config(), 0)
    b = run_seed(toy_data(12), toy_data(8, 1), TWO, SOFT, SPEC, config(), 0)
    assert [r.losses for r in a.epochs] == [r.losses for r in b.epochs]
    c = run_seed(toy_data(12), toy_data(8, 1), TWO, SOFT, SPEC, config(), 1)
    assert [r.losses for r in a.epochs] != [r.losses for r in c.epochs]


def test_selection_picks_best_mean_sc():
    run = run_seed(toy_data(16), toy_data(8, 1), TWO, HARD, SPEC, config(epochs=4), 0)
    scores = [r.eval.selection_score("mean") for r in run.epochs]
    assert run.selected_epoch == 1 + int(np.argmax(scores))
    lung = [r.eval.scores["lung"].sc for r in run.epochs]
    assert run.per_task_selected["lung"] == 1 + int(np.argmax(lung))


def test_nan_aborts_with_batch_id():
    data = toy_data(8)
    data.x[5] = np.nan
    model = build_model(SPEC, TWO, HARD, seed=0)
    with pytest.raises(NumericalFailure, match="batch"):
        train_epoch(model, Adam(model.parameters()), data, config(), np.random.default_rng(0))


def test_meta_task_with_missing_labels_trains():
    tri = TaskSet(("lung", "disease", "meta"), "sex")
    run = run_seed(toy_data(12, meta=True), toy_data(6, 1, meta=True), tri, SOFT, SPEC, config(epochs=1), 0)
    assert 0.0 <= run.selected.eval.scores["meta"] <= 1.0


def test_soft_lambda_zero_matches_single_task_runs():
    cfg = config(lam=0.0, batch_size=3)
    data = toy_data(12)
    soft = build_model(SPEC, TWO, SOFT, lam=0.0, seed=0)
    singles = {t: build_model(SPEC, TaskSet((t,)), SOFT, lam=0.0, seed=0) for t in TWO.tasks}
    opts = {m: Adam(m.parameters(), lr=cfg.lr) for m in [soft, *singles.values()]}
    rngs = {m: np.random.default_rng(7) for m in opts}
    for _ in range(3):  # 4 steps per epoch
        soft_loss = train_epoch(soft, opts[soft], data, cfg, rngs[soft])
        for t, m in singles.items():
            loss = train_epoch(m, opts[m], data, cfg, rngs[m])
            assert abs(soft_loss[t] - loss[t]) <= 1e-12 * abs(loss[t])
            state = soft.state_arrays()
            for n, v in m.state_arrays().items():
                np.testing.assert_allclose(state[n], v, rtol=1e-12, atol=0)


def test_aggregate_and_files(tmp_path):
    res = run_experiment(toy_data(12), toy_data(8, 1), TWO, SOFT, SPEC, config(), tmp_path)
    cell = read_aggregate(tmp_path / "aggregate.json")
    assert cell.method == "Two-MTL Soft"
    assert cell.scores["lung"]["sc"].n == 2
    sel = [r.selected.eval.scores["lung"].sc for r in res.runs]
    assert cell.scores["lung"]["sc"].mean == pytest.approx(np.mean(sel))
    assert cell.scores["lung"]["sc"].std == pytest.approx(np.std(sel, ddof=1))
    rows = read_epoch_log(tmp_path / "seed_0" / "epochs.csv")
    assert list(rows[0]) == LOG_HEADER and len(rows) == 3 * 2
    arrays, state, meta = load_checkpoint(tmp_path / "seed_1" / "model.ckpt")
    assert meta["seed"] == 1 and meta["selected_epoch"] == res.runs[1].selected_epoch
    np.testing.assert_array_equal(arrays["heads.lung.weight"], res.runs[1].params["heads.lung.weight"])
    doc = json.loads((tmp_path / "aggregate.json").read_text())
    assert doc["select_on"] == "mean" and doc["seeds"] == [0, 1]


def test_single_cell_has_no_other_columns():
    run = run_seed(toy_data(8), toy_data(8, 1), TaskSet(("lung",)), SOFT, SPEC, config(epochs=1), 0)
    cell = aggregate_cell([run, run], TaskSet(("lung",)), SOFT)
    assert set(cell.scores) == {"lung"}
    assert cell.scores["lung"]["sc"].std == 0.0


def test_evaluate_scores_shape():
    model = build_model(SPEC, TWO, HARD, seed=0)
    ev = evaluate(model, toy_data(8))
    assert set(ev.scores) == {"lung", "disease"}
    assert ev.predictions["lung"].shape == (8,)
