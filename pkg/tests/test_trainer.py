from pathlib import Path

import numpy as np
import pytest

from compression import CompressorConfig, CompressorKind, compress, decompress
from collectives import WorkerGroup
from dataset import chrono_split, generate_synthetic
from errors import ConfigError, DatasetError, ShapeError
from evaluation import evaluate_topk
from experiment_config import load_config
from numerics import SeededRng
from strategies import HyperParams, Mode, StrategyConfig, sync_data_parallel_step
from trainer import RecModel, TripleSampler, Triples, bpr_gradient, bpr_loss, train

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _random_model(num_users=5, num_items=6, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return RecModel(
        user_factors=rng.normal(size=(num_users, dim)),
        item_factors=rng.normal(size=(num_items, dim)),
        item_bias=rng.normal(size=num_items),
    )


def _batch():
    return Triples(
        users=np.array([0, 1, 1, 4, 2, 0]),
        positives=np.array([1, 2, 5, 0, 3, 1]),
        negatives=np.array([3, 0, 4, 5, 1, 2]),
    )


def test_model_shapes_are_checked():
    with pytest.raises(ShapeError):
        RecModel(np.zeros((3, 2)), np.zeros((4, 3)), np.zeros(4))
    with pytest.raises(ShapeError):
        RecModel(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros(3))


def test_params_round_trip_through_blocks():
    model = _random_model()
    theta = model.params()
    assert [stop - start for start, stop in model.blocks()] == [15, 18, 6]
    rebuilt = model.with_params(theta)
    assert np.array_equal(rebuilt.user_factors, model.user_factors)
    assert np.array_equal(rebuilt.item_bias, model.item_bias)


@pytest.mark.parametrize("reg", [0.0, 0.1])
def test_gradient_matches_finite_differences(reg):
    model, batch = _random_model(), _batch()
    loss, grad = bpr_gradient(model, batch, reg)
    assert loss == pytest.approx(bpr_loss(model, batch, reg), rel=1e-12)
    theta = model.params()
    eps = 1e-6
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        up = bpr_loss(model.with_params(theta + step), batch, reg)
        down = bpr_loss(model.with_params(theta - step), batch, reg)
        numeric[i] = (up - down) / (2 * eps)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-8)


def test_sampler_never_draws_seen_negatives(small_split):
    sampler = TripleSampler(small_split.train, SeededRng(1))
    batch = sampler.draw(500)
    train = small_split.train
    seen = set(zip(train.users.tolist(), train.items.tolist()))
    assert len(batch) == 500
    assert all((u, i) in seen for u, i in zip(batch.users.tolist(), batch.positives.tolist()))
    assert not any((u, i) in seen for u, i in zip(batch.users.tolist(), batch.negatives.tolist()))


def _init(split, dim=4, seed=0):
    return RecModel.init(split.num_users, split.num_items, dim, SeededRng(seed))


def test_training_is_deterministic(small_split):
    h = HyperParams(learning_rate=0.5, batch_size=64, steps=30)
    strategy = StrategyConfig(data_degree=4)
    first = train(_init(small_split), small_split, strategy, h, seed=7, loss_every=10)
    second = train(_init(small_split), small_split, strategy, h, seed=7, loss_every=10, max_workers=4)
    assert np.array_equal(first.model.params(), second.model.params())
    assert [p.loss for p in first.loss_curve] == [p.loss for p in second.loss_curve]
    assert [p.step for p in first.loss_curve] == [10, 20, 30]


@pytest.mark.parametrize("P", [2, 4, 8])
def test_sync_workers_match_single_worker(small_split, P):
    h = HyperParams(learning_rate=0.5, batch_size=64, steps=20)
    single = train(_init(small_split), small_split, StrategyConfig(), h, seed=3)
    parallel = train(_init(small_split), small_split, StrategyConfig(data_degree=P), h, seed=3)
    np.testing.assert_allclose(parallel.model.params(), single.model.params(), rtol=0, atol=1e-8)


def test_training_lowers_the_loss(small_split):
    h = HyperParams(learning_rate=1.0, batch_size=128, steps=300)
    result = train(_init(small_split), small_split, StrategyConfig(data_degree=2), h, seed=0, loss_every=50)
    assert result.loss_curve[-1].loss < result.loss_curve[0].loss


def test_trainer_runs_data_parallelism_only(small_split):
    h = HyperParams(learning_rate=0.1, batch_size=64, steps=1)
    with pytest.raises(ConfigError, match="tensor_degree"):
        train(_init(small_split), small_split, StrategyConfig(tensor_degree=2), h, seed=0)
    with pytest.raises(ConfigError, match="divisible"):
        train(_init(small_split), small_split, StrategyConfig(data_degree=3), h, seed=0)


def test_async_staleness(small_split):
    h = HyperParams(learning_rate=0.1, batch_size=64, steps=25)
    strategy = StrategyConfig(data_degree=4, mode=Mode.ASYNC)
    result = train(_init(small_split), small_split, strategy, h, seed=0)
    assert result.max_staleness_seen == 3
    assert result.dropped_updates == 0
    capped = train(_init(small_split), small_split, strategy, h, seed=0, max_staleness=1)
    assert capped.dropped_updates == 2 * h.steps


def test_async_single_worker_matches_sync(small_split):
    h = HyperParams(learning_rate=0.3, batch_size=32, steps=15)
    sync = train(_init(small_split), small_split, StrategyConfig(), h, seed=9)
    unsync = train(_init(small_split), small_split, StrategyConfig(mode=Mode.ASYNC), h, seed=9)
    assert np.array_equal(sync.model.params(), unsync.model.params())


def test_compressed_training_keeps_error_feedback_identity(small_split):
    h = HyperParams(learning_rate=0.5, batch_size=64, steps=200)
    for compressor in (CompressorConfig(CompressorKind.ONEBIT), CompressorConfig(CompressorKind.TOPK, top_k_ratio=0.1)):
        result = train(_init(small_split), small_split, StrategyConfig(data_degree=4, compressor=compressor), h, seed=0)
        assert result.ef_identity_error <= 1e-12
        assert np.all(np.isfinite(result.model.params()))


@pytest.mark.slow
@pytest.mark.parametrize(
    "compressor",
    [CompressorConfig(CompressorKind.ONEBIT), CompressorConfig(CompressorKind.TOPK, top_k_ratio=0.1)],
    ids=["onebit", "topk"],
)
def test_error_feedback_identity_over_long_runs(small_split, compressor):
    h = HyperParams(learning_rate=0.5, batch_size=64, steps=10_000)
    strategy = StrategyConfig(data_degree=2, compressor=compressor)
    result = train(_init(small_split), small_split, strategy, h, seed=0, loss_every=1000)
    assert result.ef_identity_error <= 1e-12


def test_model_save_and_load(tmp_path):
    model = _random_model()
    path = tmp_path / "model.npz"
    model.save(path)
    loaded = RecModel.load(path)
    assert np.array_equal(loaded.params(), model.params())
    with pytest.raises(DatasetError, match="not found"):
        RecModel.load(tmp_path / "missing.npz")


def _quadratic_gap(error_feedback: bool, steps: int = 3000) -> float:
    # f(x) = 0.5 * (x0^2 + (x1 - 1)^2) with +-sigma alternating noise on x0
    sigma, eta = 2.0, 0.005
    x = np.array([0.5, 0.0])
    cfg = StrategyConfig(compressor=CompressorConfig(CompressorKind.TOPK, top_k=1))
    h = HyperParams(learning_rate=eta)
    states = None
    for t in range(steps):
        noise = sigma if t % 2 == 0 else -sigma
        g = np.array([x[0] + noise, x[1] - 1.0])
        if error_feedback:
            result = sync_data_parallel_step(WorkerGroup([g]), x, h, cfg, states)
            x, states = result.params, result.ef_states
        else:
            x = x - eta * decompress(compress(g, cfg.compressor))
    return 0.5 * (x[0] ** 2 + (x[1] - 1.0) ** 2)


def test_error_feedback_preserves_convergence():
    assert _quadratic_gap(error_feedback=True) <= 1e-3
    assert _quadratic_gap(error_feedback=False) > 0.1


@pytest.fixture(scope="module")
def quality_runs():
    cfg = load_config(CONFIG_DIR / "quality.cfg")
    section = cfg.trainer
    s = section.dataset.synthetic
    ds = generate_synthetic(s.num_users, s.num_items, s.num_interactions, cfg.seed)
    split = chrono_split(ds, section.ratios)
    initial = RecModel.init(ds.num_users, ds.num_items, section.model.dim, SeededRng(cfg.seed))
    h = section.hyper.to_hyper()

    results, scores = {}, {}
    for variant in section.variants:
        result = train(
            initial, split, variant.to_strategy(), h, cfg.seed,
            loss_every=section.loss_every, max_staleness=variant.max_staleness,
        )
        scores[variant.name] = evaluate_topk(result.model, split, section.eval.k, section.eval.negatives, cfg.seed)
        results[variant.name] = result
    return results, scores


@pytest.mark.slow
def test_aggregation_schemes_keep_recommendation_quality(quality_runs):
    _, scores = quality_runs
    dense = scores["dense_sync"]
    for name, r in scores.items():
        assert abs(r.hr_at_10 - dense.hr_at_10) <= 0.01, name
        assert abs(r.ndcg_at_10 - dense.ndcg_at_10) <= 0.01, name


@pytest.mark.slow
def test_topk_with_error_feedback_tracks_dense_loss(quality_runs):
    results, _ = quality_runs
    dense = results["dense_sync"].loss_curve[-1].loss
    topk = results["topk_10pct"].loss_curve[-1].loss
    assert abs(topk - dense) / dense < 0.05
