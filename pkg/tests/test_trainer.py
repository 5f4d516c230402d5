import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hsimamba.data import generate_synthetic_cube, stratified_split
from hsimamba.model import apply_ablation, load_checkpoint, save_checkpoint
from hsimamba.trainer import (TrainConfig, TrainingDiverged, build_model, classification_metrics,
                              compute_loss, confusion_matrix, evaluate, learning_rate,
                              sparsity_penalty, train, unmixing_metrics)
from hsimamba.unmixing import reconstruct

SMALL = dict(endmembers=3, variants=2, dim=8, groups=4, state=4)


@pytest.fixture(scope="module")
def tiny():
    cube, gt = generate_synthetic_cube(3, 12, 8, 8, snr_db=30, seed=1)
    labels = stratified_split(gt.labels(), 0.3, 0.3, seed=1)
    return cube, gt, labels


def tiny_model(tiny, **overrides):
    cube, _, labels = tiny
    config = TrainConfig(**{**SMALL, **overrides})
    return build_model(cube.values, labels.num_classes, config), config


# -- loss -----------------------------------------------------------------------

def test_perfect_logits_give_zero_ce():
    labels = np.array([[1, 2], [2, 1]])
    logits = torch.full((2, 2, 2), -1e4, dtype=torch.float64)
    for r in range(2):
        for c in range(2):
            logits[labels[r, c] - 1, r, c] = 1e4
    cube = torch.rand(3, 2, 2, dtype=torch.float64) + 0.1
    A = torch.full((2, 2, 2), 0.5, dtype=torch.float64)
    loss = compute_loss(logits, labels, np.ones((2, 2), bool), cube, cube, A)
    assert loss.ce.item() == 0
    assert loss.sad_recon.item() == pytest.approx(0, abs=1e-7)


def test_uniform_abundance_sparsity_is_two():
    A = torch.full((4, 5, 5), 0.25, dtype=torch.float64)
    assert sparsity_penalty(A).item() == pytest.approx(2.0, abs=1e-6)


def test_empty_mask_rejected():
    cube = torch.rand(3, 2, 2, dtype=torch.float64)
    with pytest.raises(ValueError, match="mask"):
        compute_loss(torch.zeros(2, 2, 2, dtype=torch.float64), np.ones((2, 2), int),
                     np.zeros((2, 2), bool), cube, cube, torch.full((2, 2, 2), 0.5, dtype=torch.float64))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_loss_decomposition_exact_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(size=(3, 4, 4)))
    labels = rng.integers(1, 4, size=(4, 4))
    mask = rng.uniform(size=(4, 4)) < 0.5
    mask[0, 0] = True
    cube = torch.from_numpy(rng.uniform(0.1, 1, size=(5, 4, 4)))
    recon = torch.from_numpy(rng.uniform(0.1, 1, size=(5, 4, 4)))
    A = torch.from_numpy(rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1).copy())
    loss = compute_loss(logits, labels, mask, cube, recon, A)
    f = loss.as_floats()
    assert min(f.values()) >= 0
    assert f["total"] == f["ce"] + 0.01 * f["sad_recon"] + 0.001 * f["sparsity"]


def test_ce_ignores_unlabeled_pixels(rng):
    logits = torch.from_numpy(rng.normal(size=(3, 4, 4)))
    labels = rng.integers(1, 4, size=(4, 4))
    mask = np.zeros((4, 4), bool)
    mask[:2] = True
    cube = torch.from_numpy(rng.uniform(0.1, 1, size=(5, 4, 4)))
    A = torch.full((3, 4, 4), 1 / 3, dtype=torch.float64)
    a = compute_loss(logits, labels, mask, cube, cube, A).ce
    logits2 = logits.clone()
    logits2[:, 2:] += torch.from_numpy(rng.normal(size=(3, 2, 4))) * 10
    assert compute_loss(logits2, labels, mask, cube, cube, A).ce.item() == a.item()


# -- schedule and optimization ---------------------------------------------------------

def test_learning_rate_schedule():
    assert learning_rate(1e-3, 49) == 1e-3
    assert learning_rate(1e-3, 50) == pytest.approx(9e-4, rel=1e-12)
    assert learning_rate(1e-3, 100) == pytest.approx(8.1e-4, rel=1e-12)


def test_zero_epochs_leaves_parameters(tiny):
    model, config = tiny_model(tiny, epochs=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    result = train(model, tiny[0].values, tiny[2], config)
    assert result.history == []
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_zero_learning_rate_step_changes_nothing(tiny):
    model, config = tiny_model(tiny, epochs=1, lr_cls=0.0, lr_um=0.0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, tiny[0].values, tiny[2], config)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_parameter_groups_partition_model(tiny):
    model, _ = tiny_model(tiny)
    cls = {id(p) for p in model.classification_parameters()}
    um = {id(p) for p in model.unmixing_parameters()}
    assert not cls & um
    assert cls | um == {id(p) for p in model.parameters() if p.requires_grad}
    assert {id(p) for p in model.patch_embed.parameters()} <= cls


def test_history_records_decayed_rates(tiny):
    model, config = tiny_model(tiny, epochs=4, decay_every=2)
    hist = train(model, tiny[0].values, tiny[2], config).history
    assert [h["lr_cls"] for h in hist] == [1e-3, 1e-3, 1e-3 * 0.9, 1e-3 * 0.9]
    assert [h["lr_um"] for h in hist] == [5e-4, 5e-4, 5e-4 * 0.9, 5e-4 * 0.9]


def test_training_is_bitwise_deterministic(tiny):
    runs = []
    for _ in range(2):
        model, config = tiny_model(tiny, epochs=8, seed=3)
        runs.append(train(model, tiny[0].values, tiny[2], config).history)
    assert runs[0] == runs[1]


def test_best_checkpoint_is_restored(tiny):
    model, config = tiny_model(tiny, epochs=12)
    result = train(model, tiny[0].values, tiny[2], config)
    oas = [h["val_oa"] for h in result.history]
    assert result.best_epoch == max(i for i, v in enumerate(oas) if v == max(oas))
    for k, v in model.state_dict().items():
        assert torch.equal(v, result.best_state["params"][k])


def test_divergence_aborts_with_epoch(tiny):
    model, config = tiny_model(tiny, epochs=5)
    with torch.no_grad():
        model.head.logits.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        train(model, tiny[0].values, tiny[2], config)
    assert info.value.epoch == 0


def test_abundance_state_advances_once_per_epoch(tiny):
    model, _ = tiny_model(tiny)
    cube = torch.from_numpy(tiny[0].values)
    for _ in range(3):
        model.advance_abundance(model(cube).abundance)
    assert model.abundance_state.epoch == 2  # first call initializes the EMA


def test_loss_decreases_over_fifty_epoch_windows(smoke_data):
    cube, _, labels = smoke_data
    ok = 0
    for seed in range(10):
        config = TrainConfig(endmembers=5, epochs=100, seed=seed)
        model = build_model(cube.values, labels.num_classes, config)
        totals = [h["total"] for h in train(model, cube.values, labels, config).history]
        windows = [totals[i + 50] <= totals[i] for i in range(0, len(totals) - 50, 10)]
        ok += all(windows)
    assert ok >= 9


# -- metrics -----------------------------------------------------------------------

def test_perfect_predictions():
    y = np.array([1, 2, 3, 3, 2])
    rep = classification_metrics(y, y, 3)
    assert rep.oa == rep.aa == rep.kappa == 1


def test_constant_prediction_on_balanced_classes():
    rep = classification_metrics(np.array([1, 1, 2, 2]), np.array([1, 1, 1, 1]), 2)
    assert rep.oa == 0.5
    assert rep.kappa == 0
    assert rep.aa == 0.5


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 60), k=st.integers(2, 6))
def test_metric_properties(seed, n, k):
    rng = np.random.default_rng(seed)
    true = rng.integers(1, k + 1, size=n)
    pred = np.where(rng.uniform(size=n) < 0.6, true, rng.integers(1, k + 1, size=n))
    rep = classification_metrics(true, pred, k)
    assert rep.confusion.sum() == n
    assert rep.kappa <= rep.oa + 1e-12
    assert 0 <= rep.oa <= 1 and 0 <= rep.aa <= 1
    assert rep.oa == pytest.approx(np.mean(true == pred))
    perm = rng.permutation(k) + 1
    relabeled = classification_metrics(perm[true - 1], perm[pred - 1], k)
    assert relabeled.aa == pytest.approx(rep.aa)
    assert relabeled.kappa == pytest.approx(rep.kappa)


def test_confusion_rows_are_reference():
    cm = confusion_matrix(np.array([1, 1, 2]), np.array([2, 1, 2]), 2)
    np.testing.assert_array_equal(cm, [[1, 1], [0, 1]])


def test_unmixing_metrics_invariant_to_endmember_order():
    _, gt = generate_synthetic_cube(3, 10, 6, 6, seed=0)
    perm = [2, 0, 1]
    sad, rmse = unmixing_metrics(gt.true_endmembers[perm], gt.true_abundance[perm], gt)
    assert sad == pytest.approx(0, abs=1e-7)
    assert rmse == 0


def test_evaluate_reports_unmixing_and_counts(tiny):
    model, _ = tiny_model(tiny)
    cube, gt, labels = tiny
    rep = evaluate(model, cube.values, labels, "test", gt)
    assert rep.total == labels.test_mask.sum()
    assert rep.endmember_sad is not None and rep.abundance_rmse is not None


# -- ablations and checkpoints ---------------------------------------------------------

def test_no_flags_is_identity(tiny):
    model, _ = tiny_model(tiny)
    assert apply_ablation(model) is model
    assert apply_ablation(model, no_topk=False) is model


def test_no_variability_gives_lmm(tiny):
    model, _ = tiny_model(tiny)
    ablated = apply_ablation(model, no_variability=True)
    out = ablated(torch.from_numpy(tiny[0].values))
    assert out.weights.shape[1] == 1
    lmm = torch.einsum("pc,phw->chw", out.spectra[:, 0], out.abundance)
    torch.testing.assert_close(out.recon, lmm, rtol=0, atol=1e-12)
    torch.testing.assert_close(reconstruct(out.abundance, out.spectra, out.weights), lmm)


def test_no_topk_scans_every_pixel_in_every_block(tiny):
    model, _ = tiny_model(tiny)
    out = apply_ablation(model, no_topk=True)(torch.from_numpy(tiny[0].values))
    assert out.plan.scanned_tokens == (3 + 1) * 64


@pytest.mark.parametrize("flag,gate", [("no_pos_um", "pos_um"), ("no_pos_cls", "pos_cls")])
def test_positional_ablation_is_passthrough(tiny, flag, gate):
    model, _ = tiny_model(tiny)
    ablated = apply_ablation(model, **{flag: True})
    feat = torch.randn(8, 8, 8, dtype=torch.float64)
    assert getattr(ablated, gate)(feat) is feat
    assert torch.equal(ablated.abundance_net.layers[0].weight, model.abundance_net.layers[0].weight)


def test_checkpoint_roundtrip(tiny, tmp_path):
    model, config = tiny_model(tiny, epochs=3)
    train(model, tiny[0].values, tiny[2], config)
    save_checkpoint(model, tmp_path / "ckpt", {"note": "x"})
    loaded, manifest = load_checkpoint(tmp_path / "ckpt")
    assert manifest["hyperparameters"] == {"D": 8, "P": 3, "R": 2, "G": 4, "s": 4}
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    x = torch.from_numpy(tiny[0].values)
    with torch.no_grad():
        torch.testing.assert_close(model(x).logits, loaded(x).logits, rtol=0, atol=0)
