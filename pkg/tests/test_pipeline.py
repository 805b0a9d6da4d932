import json

import pytest
import torch
from filelock import FileLock, Timeout

from classprune.architectures import vgg
from classprune.checkpoint import load_checkpoint
from classprune.data import make_synthetic
from classprune.engine import PruneConfig, PruningPlan
from classprune.forward import init_weights, weights_digest
from classprune.pipeline import (
    ACCURACY_UNRECOVERABLE, EMPTY_PLAN, MAX_ITERATIONS, run_pipeline, run_regularizer_ablation,
    run_strategy_comparison,
)
from classprune.scoring import ClassScoreTable
from classprune.training import TrainConfig, train


@pytest.fixture(scope="module")
def data():
    return make_synthetic(4, per_class=24, shape=(1, 6, 6), noise=1.5, seed=11)


@pytest.fixture(scope="module")
def net():
    return vgg([8, "M", 8], input_shape=(1, 6, 6), num_classes=4, batchnorm=False)


@pytest.fixture(scope="module")
def tcfg():
    return TrainConfig(batch_size=16, epochs=4, max_finetune_epochs=2, lr_drop_epochs=[],
                       learning_rate=0.05)


@pytest.fixture(scope="module")
def trained(data, net, tcfg):
    return train(net, init_weights(net, seed=tcfg.seed), data, tcfg)


def test_zero_threshold_stops_with_empty_plan(data, net, tcfg, trained):
    state = run_pipeline(data, net, tcfg, PruneConfig(class_score_threshold=0),
                         weights=trained, progress=lambda s: None)
    assert state.termination == EMPTY_PLAN
    assert len(state.history) == 1 and state.history[0].status == "empty_plan"
    assert state.graph == net
    assert weights_digest(state.weights) == weights_digest(trained)


def test_zero_budget_reverts_aggressive_iteration(data, net, tcfg, trained, tmp_path):
    # every filter scores the full C here, so "aggressive" means ignoring the
    # threshold and cutting each layer down to its floor
    pcfg = PruneConfig(strategy="percentage", max_prune_fraction=1.0, accuracy_drop_budget=0.0)
    state = run_pipeline(data, net, tcfg, pcfg, tmp_path, weights=trained,
                         progress=lambda s: None)
    assert state.termination == ACCURACY_UNRECOVERABLE
    rep = state.history[-1]
    assert rep.status == "reverted"
    assert rep.acc_after < state.baseline_accuracy
    # the returned model is the pre-iteration one, bit for bit
    assert state.graph == net
    assert weights_digest(state.weights) == weights_digest(trained)
    assert state.accuracy == rep.acc_before == state.baseline_accuracy
    g, w, blob = load_checkpoint(tmp_path / "final" / "model.ckpt")
    assert weights_digest(w) == weights_digest(trained)
    assert blob["accuracy"] == state.baseline_accuracy


def test_max_iterations_bound(data, net, tcfg, trained):
    pcfg = PruneConfig(strategy="percentage", accuracy_drop_budget=100, max_iterations=2)
    state = run_pipeline(data, net, tcfg, pcfg, weights=trained, progress=lambda s: None)
    assert state.termination == MAX_ITERATIONS
    assert [r.status for r in state.history] == ["accepted", "accepted"]


def test_compression_is_monotone(data, net, tcfg, trained):
    pcfg = PruneConfig(strategy="percentage", max_prune_fraction=0.2,
                       accuracy_drop_budget=100, max_iterations=4)
    state = run_pipeline(data, net, tcfg, pcfg, weights=trained, progress=lambda s: None)
    prev = state.original_params
    for rep in state.history:
        if rep.status == "accepted":
            assert rep.params_before == prev
            assert rep.params_after < rep.params_before
            assert rep.flops_after <= rep.flops_before
            prev = rep.params_after
        assert 0 <= rep.acc_after <= 1
    assert state.params == prev


@pytest.fixture(scope="module")
def full_run(data, net, tcfg, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    pcfg = PruneConfig(strategy="percentage", accuracy_drop_budget=100, max_iterations=2)
    lines = []
    state = run_pipeline(data, net, tcfg, pcfg, run_dir, progress=lines.append)
    return run_dir, state, lines, pcfg


def test_run_directory_layout(full_run):
    run_dir, state, lines, _ = full_run
    for name in ("config.json", "baseline.ckpt", "baseline_curve.csv",
                 "final/model.ckpt", "final/scores.csv", "final/summary.json"):
        assert (run_dir / name).is_file(), name
    for k in (1, 2):
        for name in ("plan.json", "scores.csv", "report.json", "model.ckpt",
                     "finetune_curve.csv"):
            assert (run_dir / f"iter_{k}" / name).is_file(), (k, name)
        report = json.loads((run_dir / f"iter_{k}" / "report.json").read_text())
        assert {"iteration", "acc_before", "acc_after", "params", "flops", "histogram",
                "layer_means"} <= set(report)
        plan = PruningPlan.load(run_dir / f"iter_{k}" / "plan.json")
        assert plan.total_removed == sum(report["removed"].values())
        table = ClassScoreTable.from_csv(run_dir / f"iter_{k}" / "scores.csv")
        assert sum(report["histogram"]["counts"]) == len(table)
    assert any(line.startswith("iter 1:") for line in lines)


def test_summary_file_matches_state(full_run):
    run_dir, state, _, _ = full_run
    stored = json.loads((run_dir / "final" / "summary.json").read_text())
    assert stored["weights_sha256"] == weights_digest(state.weights)
    assert stored["pruning_ratio"] == state.summary()["pruning_ratio"]
    assert stored["termination"] == MAX_ITERATIONS


def test_runs_are_reproducible(full_run, data, net, tcfg, tmp_path):
    run_dir, state, _, pcfg = full_run
    again = run_pipeline(data, net, tcfg, pcfg, tmp_path, progress=lambda s: None)
    assert [r.to_json() for r in again.history] == [r.to_json() for r in state.history]
    assert weights_digest(again.weights) == weights_digest(state.weights)
    for k in (1, 2):
        a = (run_dir / f"iter_{k}" / "plan.json").read_text()
        b = (tmp_path / f"iter_{k}" / "plan.json").read_text()
        assert a == b


def test_locked_run_directory_is_refused(data, net, tcfg, trained, tmp_path):
    with FileLock(str(tmp_path / ".lock")):
        with pytest.raises(Timeout):
            run_pipeline(data, net, tcfg, PruneConfig(), tmp_path, weights=trained)


def test_regularizer_ablation_shares_seed(data, net, tcfg):
    runs = run_regularizer_ablation(data, net, tcfg, PruneConfig(), ("none", "l1+orth"),
                                    prune=False)
    assert set(runs) == {"none", "l1+orth"}
    for r in runs.values():
        assert len(r["table"]) == len(net.filter_keys())
        assert 0 <= r["accuracy"] <= 1
    # switching the regularisers off changes training, so the tables differ
    assert runs["none"]["table"].digest() != runs["l1+orth"]["table"].digest()


def test_strategy_comparison_uses_one_baseline(data, net, tcfg):
    pcfg = PruneConfig(accuracy_drop_budget=100, max_iterations=1)
    runs = run_strategy_comparison(data, net, tcfg, pcfg, ("percentage", "threshold"))
    base = {r["summary"]["original_acc"] for r in runs.values()}
    assert len(base) == 1
    assert torch.tensor([r["summary"]["iterations"] for r in runs.values()]).max() <= 1
