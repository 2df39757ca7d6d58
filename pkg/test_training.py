import math

import numpy as np
import pytest

from config import EOS_ID, METRICS_COLUMNS, PAD_ID
from data import collate, make_batches
from errors import ConfigError, ContractError, TrainingDivergedError
from tensor import Tensor, backward, finite_diff_check
from training import (
    MetricsLog,
    OptimizerState,
    TrainConfig,
    adam_step,
    ce_loss,
    compute_loss,
    evaluate_loss,
    forward_variant,
    future_loss,
    future_targets,
    joint_loss,
    lr_schedule,
    smoothed_targets,
    train_model,
    train_step,
)


def _grads(params, batch, variant, cfg):
    params.zero_grad()
    joint, _ = compute_loss(batch, params, variant, cfg, "train")
    backward(joint, leaves=params.tensors.values())
    return {name: t.grad.copy() for name, t in params.items()}


# ===== Функции потерь =====

def test_smoothed_targets_exclude_pad():
    target = smoothed_targets(np.array([2]), 5, 0.1)[0]
    np.testing.assert_allclose(target, [0.0, 0.1 / 3, 0.9, 0.1 / 3, 0.1 / 3])
    assert target.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(smoothed_targets(np.array([3]), 5, 0.0)[0], [0, 0, 0, 1, 0])


@pytest.mark.parametrize("eps", [0.0, 0.1])
def test_uniform_logits_give_log_vocab(eps):
    logits = Tensor(np.zeros((2, 3, 7)))
    labels = np.array([[4, 5, EOS_ID], [6, EOS_ID, PAD_ID]])
    loss = ce_loss(logits, labels, labels == PAD_ID, eps)
    assert loss.item() == pytest.approx(math.log(7), abs=1e-12)


def test_confident_correct_logits_approach_zero_loss():
    logits = np.zeros((1, 2, 6))
    logits[0, 0, 4] = 60.0
    logits[0, 1, EOS_ID] = 60.0
    labels = np.array([[4, EOS_ID]])
    assert ce_loss(Tensor(logits), labels, labels == PAD_ID, 0.0).item() < 1e-20


def test_smoothed_ce_matches_direct_formula():
    logits = np.array([[[1.0, 2.0, 0.5, -1.0]]])
    labels = np.array([[1]])
    log_probs = logits[0, 0] - math.log(np.exp(logits[0, 0]).sum())
    expected = -(0.9 * log_probs[1] + 0.05 * log_probs[2] + 0.05 * log_probs[3])
    assert ce_loss(Tensor(logits), labels, labels == PAD_ID, 0.1).item() == pytest.approx(expected, abs=1e-12)


def test_ce_ignores_padded_positions(rng):
    logits = rng.normal(size=(1, 3, 6))
    labels = np.array([[4, 5, EOS_ID]])
    base = ce_loss(Tensor(logits), labels, labels == PAD_ID, 0.1).item()
    padded_logits = np.concatenate([logits, rng.normal(size=(1, 4, 6)) * 10], axis=1)
    padded_labels = np.array([[4, 5, EOS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]])
    padded = ce_loss(Tensor(padded_logits), padded_labels, padded_labels == PAD_ID, 0.1).item()
    assert padded == pytest.approx(base, abs=1e-12)


def test_ce_rejects_all_pad_and_bad_eps():
    labels = np.array([[PAD_ID, PAD_ID]])
    with pytest.raises(ContractError):
        ce_loss(Tensor(np.zeros((1, 2, 5))), labels, labels == PAD_ID, 0.0)
    with pytest.raises(ContractError):
        ce_loss(Tensor(np.zeros((1, 1, 5))), np.array([[4]]), np.array([[False]]), 1.0)


def test_future_targets_shift_and_end_with_eos():
    tgt_out = np.array([[5, 6, EOS_ID], [5, EOS_ID, PAD_ID]])
    labels, mask = future_targets(tgt_out)
    np.testing.assert_array_equal(labels, [[6, EOS_ID, PAD_ID], [EOS_ID, PAD_ID, PAD_ID]])
    np.testing.assert_array_equal(mask, labels == PAD_ID)

    single, _ = future_targets(np.array([[7, EOS_ID]]))
    np.testing.assert_array_equal(single, [[EOS_ID, PAD_ID]])

    with_f0, _ = future_targets(np.array([[5, 6, EOS_ID]]), include_f0=True)
    np.testing.assert_array_equal(with_f0, [[5, 6, EOS_ID, PAD_ID]])


def test_future_loss_two_step_case(rng):
    logits = rng.normal(size=(1, 3, 6))
    labels, mask = future_targets(np.array([[4, 5, EOS_ID]]))
    log_probs = logits[0] - np.log(np.exp(logits[0]).sum(axis=-1, keepdims=True))
    expected = -(log_probs[0, 5] + log_probs[1, EOS_ID]) / 2
    assert future_loss(Tensor(logits), labels, mask, 0.0).item() == pytest.approx(expected, abs=1e-12)


def test_joint_loss_arithmetic():
    assert joint_loss(2.0, 3.0, 1.0) == 5.0
    assert joint_loss(1.0, 0.5, 0.7) == pytest.approx(1.35, abs=1e-15)
    assert joint_loss(1.25, 9.0, 0.0) == 1.25
    assert joint_loss(1.25, None, 0.7) == 1.25


# ===== Расписание и оптимизатор =====

def test_lr_schedule_values():
    assert lr_schedule(1, 512, 8000) == pytest.approx(512 ** -0.5 * 8000 ** -1.5, rel=1e-15)
    at_warmup = lr_schedule(400, 64, 400)
    assert at_warmup == pytest.approx(64 ** -0.5 * 400 ** -0.5, rel=1e-12)
    rates = [lr_schedule(s, 64, 400) for s in range(1, 1200)]
    assert all(a < b for a, b in zip(rates[:399], rates[1:400]))
    assert all(lr_schedule(400 + k, 64, 400) < at_warmup for k in range(1, 500))
    assert lr_schedule(10, 64, 400, factor=0.5) == pytest.approx(0.5 * lr_schedule(10, 64, 400))


def test_lr_schedule_rejects_step_zero():
    with pytest.raises(ContractError):
        lr_schedule(0, 64, 400)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    params = {"w": np.array([1.0, -2.0])}
    state = OptimizerState()
    adam_step(params, {"w": np.array([0.5, 0.5])}, state, 0.01)
    m_before = state.m["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, state, 0.01)
    np.testing.assert_allclose(state.m["w"], 0.9 * m_before)
    assert state.step == 2

    fresh = {"w": np.array([3.0])}
    adam_step(fresh, {"w": np.zeros(1)}, OptimizerState(), 0.1)
    np.testing.assert_array_equal(fresh["w"], [3.0])


def test_adam_constant_gradient_moves_by_rate():
    params = {"w": np.array([0.0])}
    state = OptimizerState()
    for _ in range(200):
        before = params["w"].copy()
        adam_step(params, {"w": np.array([0.3])}, state, 0.01)
    assert before[0] - params["w"][0] == pytest.approx(0.01, rel=1e-6)


def test_adam_two_scalar_steps_by_hand():
    b1, b2, eps, rate = 0.9, 0.98, 1e-9, 0.1
    params = {"w": np.array([1.0])}
    state = OptimizerState()
    adam_step(params, {"w": np.array([0.5])}, state, rate, b1, b2, eps)
    adam_step(params, {"w": np.array([-1.0])}, state, rate, b1, b2, eps)

    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -1.0], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= rate * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert params["w"][0] == pytest.approx(w, abs=1e-14)


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(ContractError, match="shape"):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(), 0.1)


# ===== Варианты =====

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_=-0.1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(label_smoothing=1.0).validate()
    with pytest.raises(ConfigError, match="validate_bleu"):
        TrainConfig(select_by="bleu").validate()
    assert TrainConfig.from_dict(TrainConfig(lambda_=0.3).to_dict()).lambda_ == 0.3


def test_forward_rejects_variant_mismatch(make_params, tiny_batch):
    with pytest.raises(ContractError):
        forward_variant(tiny_batch, make_params("model1"), "model2", TrainConfig(), "eval")


@pytest.mark.parametrize("variant", ["model1", "model2"])
def test_breakdown_joint_is_ce_plus_weighted_future(make_params, tiny_batch, variant):
    cfg = TrainConfig(variant=variant, lambda_=0.7)
    _, part = compute_loss(tiny_batch, make_params(variant, seed=2), variant, cfg, "eval")
    assert abs(part.joint - (part.ce + 0.7 * part.future)) < 1e-12
    assert part.token_count == tiny_batch.token_count


def test_baseline_breakdown_has_no_future_term(make_params, tiny_batch):
    _, part = compute_loss(tiny_batch, make_params("baseline"), "baseline", TrainConfig(variant="baseline", lambda_=0.0), "eval")
    assert part.future is None
    assert part.joint == part.ce


def test_full_length_pair_goes_through_joint_loss(make_params):
    from data import SentencePair, build_vocab

    vocab = build_vocab(["a b c"])
    words = (["a", "b", "c"] * 22)[:64]
    batch = collate([SentencePair(words, words)], vocab, vocab)
    _, part = compute_loss(batch, make_params("model2", seed=2), "model2", TrainConfig(variant="model2"), "eval")
    assert part.token_count == 65
    assert math.isfinite(part.joint)


def test_include_f0_loss_adds_one_step(make_params, tiny_batch):
    params = make_params("model1", seed=1)
    plain = forward_variant(tiny_batch, params, "model1", TrainConfig(variant="model1"), "eval")
    with_f0 = forward_variant(tiny_batch, params, "model1", TrainConfig(variant="model1", include_f0_loss=True), "eval")
    assert with_f0.future_logits.shape[1] == plain.future_logits.shape[1] + 1
    np.testing.assert_array_equal(with_f0.future_labels[:, 0], tiny_batch.tgt_out_ids[:, 0])


def test_model1_keeps_baseline_translation_path(make_params, tiny_batch):
    baseline = forward_variant(tiny_batch, make_params("baseline", seed=3), "baseline", TrainConfig(variant="baseline"), "eval")
    model1 = forward_variant(tiny_batch, make_params("model1", seed=3), "model1", TrainConfig(variant="model1"), "eval")
    np.testing.assert_array_equal(model1.logits.data, baseline.logits.data)


def test_model2_with_zero_future_matches_baseline_ce(make_params, tiny_batch):
    # Z = σ(50) = 1 и S = 0, поэтому F ≡ 0 и H̄ = H
    model2 = make_params("model2", seed=3, future_bias=True)
    for name in ("W_r", "U_r", "W_z", "U_z", "W", "U"):
        model2[f"future.{name}"].data[...] = 0.0
    model2["future.b_z"].data[...] = 50.0
    baseline = make_params("baseline", seed=3, future_bias=True)
    ce_base, _ = compute_loss(tiny_batch, baseline, "baseline", TrainConfig(variant="baseline", lambda_=0.0), "eval")
    _, part = compute_loss(tiny_batch, model2, "model2", TrainConfig(variant="model2", lambda_=0.0), "eval")
    assert part.ce == ce_base.item()


def test_zero_lambda_gradients_match_baseline(make_params, tiny_batch):
    base = _grads(make_params("baseline", seed=4), tiny_batch, "baseline", TrainConfig(variant="baseline", lambda_=0.0))
    model1 = _grads(make_params("model1", seed=4), tiny_batch, "model1", TrainConfig(variant="model1", lambda_=0.0))
    for name, grad in base.items():
        np.testing.assert_array_equal(model1[name], grad, err_msg=name)


def test_stop_gradient_keeps_future_loss_out_of_decoder(make_params, tiny_batch):
    base = _grads(make_params("baseline", seed=4), tiny_batch, "baseline", TrainConfig(variant="baseline", lambda_=0.0))
    cfg = TrainConfig(variant="model1", lambda_=1.0, stop_gradient=True)
    model1 = _grads(make_params("model1", seed=4), tiny_batch, "model1", cfg)
    # E входит в ячейку напрямую
    for name in (n for n in base if n != "tgt_embedding"):
        np.testing.assert_array_equal(model1[name], base[name], err_msg=name)

    full = _grads(make_params("model1", seed=4), tiny_batch, "model1", TrainConfig(variant="model1", lambda_=1.0))
    assert not np.array_equal(full["dec.0.ffn.w1"], base["dec.0.ffn.w1"])


def test_zero_lambda_trajectory_matches_baseline(make_params, copy_pairs, copy_vocab):
    baseline, model1 = make_params("baseline", seed=5), make_params("model1", seed=5)
    future_before = {n: model1[n].data.copy() for n in model1.future_names()}
    batches = make_batches(copy_pairs, copy_vocab, 8, seed=2)[:4]
    states = OptimizerState(), OptimizerState()
    for batch in batches:
        train_step(batch, baseline, "baseline", TrainConfig(variant="baseline", lambda_=0.0, warmup_steps=4), states[0])
        train_step(batch, model1, "model1", TrainConfig(variant="model1", lambda_=0.0, warmup_steps=4), states[1])
    for name in baseline.names():
        np.testing.assert_array_equal(model1[name].data, baseline[name].data, err_msg=name)
    for name, value in future_before.items():
        np.testing.assert_array_equal(model1[name].data, value)


def test_train_step_aborts_on_non_finite_loss(make_params, tiny_batch):
    params = make_params("model2")
    params["out.W_w"].data[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError, match="step 1"):
        train_step(tiny_batch, params, "model2", TrainConfig(), OptimizerState())


def test_joint_loss_gradients_model2(make_params, copy_pairs, copy_vocab):
    params = make_params("model2", seed=6)
    batch = collate(copy_pairs[:2], copy_vocab, copy_vocab)
    cfg = TrainConfig(variant="model2", lambda_=0.7, include_f0_loss=True)

    def loss():
        joint, _ = compute_loss(batch, params, "model2", cfg, "eval")
        return joint

    report = finite_diff_check(loss, dict(params.items()), tol=1e-4)
    assert report.ok, report.failures


def test_evaluate_loss_is_token_weighted(make_params, copy_pairs, copy_vocab):
    params = make_params("model1", seed=2)
    cfg = TrainConfig(variant="model1")
    batches = make_batches(copy_pairs[:10], copy_vocab, 4, seed=None)
    parts = [compute_loss(b, params, "model1", cfg, "eval")[1] for b in batches]
    total = evaluate_loss(batches, params, "model1", cfg)
    tokens = sum(p.token_count for p in parts)
    assert total.token_count == tokens
    assert total.ce == pytest.approx(sum(p.ce * p.token_count for p in parts) / tokens, abs=1e-12)
    assert total.future == pytest.approx(sum(p.future * p.token_count for p in parts) / tokens, abs=1e-12)


# ===== Журнал и цикл обучения =====

def test_metrics_log_format(tmp_path):
    path = tmp_path / "metrics.tsv"
    log = MetricsLog(str(path))
    log.append({"step": 0, "dev_ce": 2.5, "dev_joint": 3.0})
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].split("\t") == METRICS_COLUMNS
    row = dict(zip(METRICS_COLUMNS, lines[1].split("\t")))
    assert row["step"] == "0"
    assert row["dev_ce"] == "2.500000"
    assert row["lr"] == "-"


def _tiny_run(make_params, copy_pairs, copy_vocab, path, **overrides):
    cfg = TrainConfig(**{"variant": "model2", "max_steps": 40, "validate_every": 20, "batch_size": 8,
                         "warmup_steps": 10, "seed": 3, **overrides})
    dev = make_batches(copy_pairs[:8], copy_vocab, 8, seed=None)
    params = make_params(cfg.variant, seed=1)
    return train_model(params, copy_pairs, copy_vocab, copy_vocab, dev, cfg, metrics_path=str(path))


def test_train_model_learns_and_logs(make_params, copy_pairs, copy_vocab, tmp_path):
    result = _tiny_run(make_params, copy_pairs, copy_vocab, tmp_path / "m.tsv")
    steps = [r["step"] for r in result.records]
    assert steps == [0, 20, 40]
    assert result.last_step == 40
    assert result.records[-1]["dev_joint"] < result.records[0]["dev_joint"]
    assert result.best_step in (20, 40)
    assert result.optimizer.step == 40
    assert len((tmp_path / "m.tsv").read_text(encoding="utf-8").splitlines()) == 4


def test_train_model_is_deterministic(make_params, copy_pairs, copy_vocab, tmp_path):
    _tiny_run(make_params, copy_pairs, copy_vocab, tmp_path / "a.tsv", max_steps=10, validate_every=5)
    _tiny_run(make_params, copy_pairs, copy_vocab, tmp_path / "b.tsv", max_steps=10, validate_every=5)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_train_model_selects_by_bleu(make_params, copy_pairs, copy_vocab):
    scores = iter([10.0, 30.0, 20.0])
    cfg = TrainConfig(variant="baseline", lambda_=0.0, max_steps=4, validate_every=2, batch_size=8,
                      warmup_steps=2, validate_bleu=True, select_by="bleu")
    dev = make_batches(copy_pairs[:8], copy_vocab, 8, seed=None)
    result = train_model(make_params("baseline"), copy_pairs, copy_vocab, copy_vocab, dev, cfg,
                         bleu_fn=lambda params: next(scores))
    assert result.best_step == 2
    assert result.best_score == -30.0
    assert [r["dev_bleu"] for r in result.records] == [10.0, 30.0, 20.0]


def test_train_model_needs_bleu_function(make_params, copy_pairs, copy_vocab):
    cfg = TrainConfig(variant="baseline", lambda_=0.0, validate_bleu=True)
    with pytest.raises(ConfigError):
        train_model(make_params("baseline"), copy_pairs, copy_vocab, copy_vocab, [], cfg)


@pytest.mark.slow
def test_copy_task_loss_drops_after_100_steps(make_params, copy_pairs, copy_vocab):
    cfg = TrainConfig(variant="model2", max_steps=100, validate_every=100, batch_size=8, warmup_steps=20)
    dev = make_batches(copy_pairs[:8], copy_vocab, 8, seed=None)
    result = train_model(make_params("model2", seed=2), copy_pairs, copy_vocab, copy_vocab, dev, cfg)
    assert result.records[-1]["dev_joint"] < result.records[0]["dev_joint"]


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["baseline", "model1", "model2"])
def test_map_task_is_learned_at_desk_scale(variant):
    from cli import load_datasets, translate_tokens
    from decoding import DecodeConfig
    from evaluation import bleu4, token_accuracy
    from run_config import RunConfig
    from transformer import init_model_params

    run = RunConfig(variant=variant, task="map", task_vocab=20, task_min_len=3, task_max_len=12, dev_size=200, test_size=200)
    run.validate()
    data = load_datasets(run)
    cfg = run.train_config()
    params = init_model_params(run.model_config(len(data.src_vocab), len(data.tgt_vocab)), variant, run.seed)
    dev_batches = make_batches(data.dev, data.src_vocab, cfg.batch_size, seed=None, tgt_vocab=data.tgt_vocab)
    result = train_model(params, data.train, data.src_vocab, data.tgt_vocab, dev_batches, cfg)

    hyps = translate_tokens([p.source for p in data.test], result.best_params, data.src_vocab, data.tgt_vocab, DecodeConfig(beam_size=1))
    refs = [p.target for p in data.test]
    assert token_accuracy(hyps, refs) >= 0.99
    assert bleu4(hyps, refs).bleu >= 95.0
    if variant != "baseline":
        best = next(r for r in result.records if r["step"] == result.best_step)
        assert best["dev_future"] <= 0.5 * result.records[0]["dev_future"]
