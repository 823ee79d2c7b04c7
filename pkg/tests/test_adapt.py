import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compact_nmt.adapt import (
    ZERO, AdaptationConfig, Dense, GroupLassoConfig, OffsetSet, SparseRows, Zero,
    batch_adapt, clip_offsets, compose, group_lasso_penalty, group_lasso_subgradient,
    group_lasso_term, incremental_adapt, mean_abs_offset, method_config, offset_param_count,
    restrict_to_observed_vocab, select_fixed_tensors, update_until,
)
from compact_nmt.data import ParallelCorpus, Segment, SyntheticTaskConfig, Vocabulary, generate_synthetic
from compact_nmt.errors import CompatibilityError, ConfigError, DataError, DimensionError
from compact_nmt.metrics import bleu
from compact_nmt.model import BOS, EOS, REGIONS, init_params, param_shapes, region_of, translate
from compact_nmt.tensor import Tensor, finite_difference_check

from conftest import tiny_config

LASSO = GroupLassoConfig()


@pytest.fixture(scope="module")
def small_task():
    return generate_synthetic(SyntheticTaskConfig(vocab=8, min_len=2, max_len=6, n_baseline=40,
                                                  n_heldout=5, n_adapt=12, n_test=6, seed=4))


@pytest.fixture(scope="module")
def small_model():
    config = tiny_config(enc_layers=3, dec_layers=3)
    return config, init_params(config, seed=11)


def random_offsets(rng, shapes, kinds=("zero", "dense", "sparse")):
    entries = {}
    for name, shape in shapes.items():
        kind = kinds[rng.integers(len(kinds))]
        if kind == "dense":
            entries[name] = Dense(rng.normal(size=shape))
        elif kind == "sparse" and len(shape) == 2:
            ids = np.flatnonzero(rng.random(shape[0]) < 0.5)
            entries[name] = SparseRows(shape, ids, rng.normal(size=(len(ids), shape[1])))
        else:
            entries[name] = ZERO
    return OffsetSet(entries)


# --------------------------------------------------------------------------
# offset entries and composition


class TestEntries:
    def test_sparse_rows_must_increase(self):
        with pytest.raises(ValueError):
            SparseRows((4, 2), np.array([2, 1]), np.zeros((2, 2)))

    def test_sparse_rows_in_range(self):
        with pytest.raises(ValueError):
            SparseRows((4, 2), np.array([4]), np.zeros((1, 2)))

    def test_sparse_rows_width(self):
        with pytest.raises(ValueError):
            SparseRows((4, 2), np.array([1]), np.zeros((1, 3)))

    def test_missing_name_is_zero(self):
        assert isinstance(OffsetSet({})["anything"], Zero)

    def test_validate_rejects_unknown_name(self, small_model):
        config, params = small_model
        with pytest.raises(KeyError):
            OffsetSet({"nope": Dense(np.zeros(2))}).validate(params)


class TestCompose:
    def test_all_zero_is_identity(self, small_model, small_task):
        config, params = small_model
        composed = compose(params, OffsetSet.zeros(params))
        for name in params:
            np.testing.assert_array_equal(composed[name], params[name])
        sources = small_task.test.sources
        assert translate(sources, composed, config) == translate(sources, params, config)

    def test_sparse_rows_touch_only_listed_rows(self, small_model):
        _, params = small_model
        shape = params["Y_o"].shape
        offsets = OffsetSet({"Y_o": SparseRows(shape, np.array([3, 7]), np.ones((2, shape[1])))})
        out = compose(params, offsets)["Y_o"]
        others = np.setdiff1d(np.arange(shape[0]), [3, 7])
        np.testing.assert_array_equal(out[others], params["Y_o"][others])
        np.testing.assert_array_equal(out[[3, 7]], params["Y_o"][[3, 7]] + 1.0)

    def test_negative_baseline_gives_zero(self, small_model):
        _, params = small_model
        out = compose(params, OffsetSet({"enc.0.ffn.w1": Dense(-params["enc.0.ffn.w1"])}))
        assert not out["enc.0.ffn.w1"].any()

    def test_baseline_not_mutated(self, small_model):
        _, params = small_model
        before = {k: v.copy() for k, v in params.items()}
        rng = np.random.default_rng(0)
        compose(params, random_offsets(rng, param_shapes(small_model[0])))
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_shape_mismatch(self, small_model):
        _, params = small_model
        with pytest.raises(DimensionError):
            compose(params, OffsetSet({"Y_o": Dense(np.zeros((2, 2)))}))

    def test_checksum_mismatch(self, small_model):
        _, params = small_model
        with pytest.raises(CompatibilityError):
            compose(params, OffsetSet({}, b"a" * 32), baseline_checksum=b"b" * 32)


# --------------------------------------------------------------------------
# group lasso


def brute_force_penalty(offsets: OffsetSet) -> float:
    total = 0.0
    for name, entry in offsets.items():
        if isinstance(entry, Dense):
            values, size = entry.values.ravel(), entry.values.size
        elif isinstance(entry, SparseRows):
            values, size = entry.rows.ravel(), entry.shape[0] * entry.shape[1]
        else:
            continue
        sq = 0.0
        for v in values:
            sq += float(v) * float(v)
        total += math.sqrt(size) * math.sqrt(sq)
    return total


class TestPenalty:
    def test_zero(self):
        assert group_lasso_penalty(OffsetSet({"a": ZERO, "b": Dense(np.zeros((3, 3)))})) == 0.0

    def test_one_tensor(self):
        assert group_lasso_penalty(OffsetSet({"a": Dense(np.full((2, 2), 0.5))})) == pytest.approx(2.0)

    def test_two_tensors(self):
        s = OffsetSet({"a": Dense(np.full((2, 2), 0.5)), "b": Dense(np.full((2, 2), -0.5))})
        assert group_lasso_penalty(s) == pytest.approx(4.0)

    def test_sparse_rows_use_full_tensor_size(self):
        s = OffsetSet({"a": SparseRows((9, 1), np.array([4]), np.array([[0.5]]))})
        assert group_lasso_penalty(s) == pytest.approx(3 * 0.5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        shapes = {f"t{i}": tuple(rng.integers(1, 6, size=rng.integers(1, 3)))
                  for i in range(rng.integers(1, 6))}
        offsets = random_offsets(rng, shapes)
        expected = brute_force_penalty(offsets)
        got = group_lasso_penalty(offsets)
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-300)


class TestSubgradient:
    def test_zero_norm(self):
        g = group_lasso_subgradient(OffsetSet({"a": Dense(np.zeros((2, 3)))}), GroupLassoConfig(lam=1.0))
        assert isinstance(g["a"], Zero) or not g["a"].values.any()

    def test_zero_entry(self):
        g = group_lasso_subgradient(OffsetSet({"a": ZERO}), GroupLassoConfig(lam=1.0))
        assert isinstance(g["a"], Zero)

    def test_scalar_hand_value(self):
        g = group_lasso_subgradient(OffsetSet({"a": Dense(np.array([[0.3]]))}), GroupLassoConfig(lam=1.0))
        assert g["a"].values[0, 0] == pytest.approx(1.0, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100.0))
    def test_direction_invariant_to_scale(self, seed, c):
        delta = np.random.default_rng(seed).normal(size=(3, 4))
        cfg = GroupLassoConfig(lam=0.5)
        a = group_lasso_subgradient(OffsetSet({"t": Dense(delta)}), cfg)["t"].values
        b = group_lasso_subgradient(OffsetSet({"t": Dense(c * delta)}), cfg)["t"].values
        np.testing.assert_allclose(a, b, rtol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        cfg = GroupLassoConfig(lam=0.7)
        shapes = {"a": (3, 4), "b": (5,), "c": (1, 1)}
        deltas = {n: Tensor(rng.normal(size=s)) for n, s in shapes.items()}
        for d in deltas.values():
            assert np.linalg.norm(d.data) >= 10 * cfg.norm_floor
        err = finite_difference_check(lambda p: group_lasso_term(p, cfg), deltas)
        assert err < 1e-5
        # the differentiable term and the standalone subgradient agree
        for d in deltas.values():
            d.requires_grad = True
        group_lasso_term(deltas, cfg).backward()
        sub = group_lasso_subgradient(OffsetSet({n: Dense(d.data) for n, d in deltas.items()}), cfg)
        for n, d in deltas.items():
            np.testing.assert_allclose(d.grad, sub[n].values, rtol=1e-12)


class TestClip:
    def test_below_threshold(self):
        d = np.array([[5e-5, -5e-5], [-5e-5, 5e-5]])
        out = clip_offsets(OffsetSet({"enc.0.ffn.w1": Dense(d)}), LASSO)
        assert isinstance(out["enc.0.ffn.w1"], Zero)

    def test_exempt(self):
        d = np.array([[5e-5, -5e-5], [-5e-5, 5e-5]])
        for name in ("Y_o", "X_e", "Y_e"):
            out = clip_offsets(OffsetSet({name: Dense(d)}), LASSO)
            np.testing.assert_array_equal(out[name].values, d)

    def test_above_threshold(self):
        d = np.full((2, 2), 2e-4)
        out = clip_offsets(OffsetSet({"enc.0.ffn.w1": Dense(d)}), LASSO)
        np.testing.assert_array_equal(out["enc.0.ffn.w1"].values, d)

    def test_absolute_not_signed_mean(self):
        d = np.array([[1e-3, -1e-3], [1e-3, -1e-3]])
        out = clip_offsets(OffsetSet({"w": Dense(d)}), LASSO)
        assert isinstance(out["w"], Dense)

    def test_sparse_mean_uses_full_size(self):
        e = SparseRows((100, 2), np.array([0]), np.array([[1e-3, 1e-3]]))
        assert mean_abs_offset(e) == pytest.approx(2e-3 / 200)
        assert isinstance(clip_offsets(OffsetSet({"w": e}), LASSO)["w"], Zero)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0, 1.0))
    def test_idempotent(self, seed, theta):
        rng = np.random.default_rng(seed)
        shapes = {n: (3, 4) for n in ("X_e", "Y_o", "a", "b", "c", "d")}
        offsets = random_offsets(rng, shapes)
        cfg = GroupLassoConfig(theta=theta)
        once = clip_offsets(offsets, cfg)
        twice = clip_offsets(once, cfg)
        for name in shapes:
            assert type(once[name]) is type(twice[name])
            if not isinstance(once[name], Zero):
                np.testing.assert_array_equal(once[name].to_dense() if isinstance(once[name], SparseRows)
                                              else once[name].values,
                                              twice[name].to_dense() if isinstance(twice[name], SparseRows)
                                              else twice[name].values)


class TestSelectFixed:
    def test_examples(self):
        s = OffsetSet({"a": Dense(np.full((2, 2), 0.003)), "b": Dense(np.full((2, 2), -0.001)),
                       "c": ZERO})
        assert select_fixed_tensors(s, 0.002) == {"a"}

    def test_all_zero(self):
        assert select_fixed_tensors(OffsetSet.zeros(["a", "b"]), 0.002) == set()


# --------------------------------------------------------------------------
# vocabulary restriction


def corpus_with_targets(targets, v=10):
    vocab = Vocabulary([f"w{i}" for i in range(v - 4)])
    return ParallelCorpus([Segment((4,), tuple(t)) for t in targets], vocab, vocab)


class TestRestrict:
    def test_specials_included(self):
        corpus = corpus_with_targets([[3, 7], [7]])
        out = restrict_to_observed_vocab(OffsetSet({"Y_o": Dense(np.ones((10, 2)))}), corpus)
        assert out["Y_o"].row_ids.tolist() == [BOS, EOS, 3, 7]

    def test_full_coverage_same_effect(self):
        rng = np.random.default_rng(0)
        corpus = corpus_with_targets([list(range(10))])
        base = {"Y_o": rng.normal(size=(10, 3))}
        dense = OffsetSet({"Y_o": Dense(rng.normal(size=(10, 3)))})
        restricted = restrict_to_observed_vocab(dense, corpus)
        np.testing.assert_array_equal(compose(base, restricted)["Y_o"], compose(base, dense)["Y_o"])

    def test_zero_stays_zero(self):
        out = restrict_to_observed_vocab(OffsetSet({"Y_o": ZERO}), corpus_with_targets([[5]]))
        assert isinstance(out["Y_o"], Zero)

    def test_source_side_for_encoder_embedding(self):
        vocab = Vocabulary([f"w{i}" for i in range(6)])
        corpus = ParallelCorpus([Segment((8, 9), (5,))], vocab, vocab)
        out = restrict_to_observed_vocab(
            OffsetSet({"X_e": Dense(np.ones((10, 2))), "Y_e": Dense(np.ones((10, 2)))}), corpus)
        assert out["X_e"].row_ids.tolist() == [BOS, EOS, 8, 9]
        assert out["Y_e"].row_ids.tolist() == [BOS, EOS, 5]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_commutes_with_compose(self, seed):
        rng = np.random.default_rng(seed)
        v, d = 12, 3
        targets = [rng.integers(0, v, size=rng.integers(1, 5)).tolist() for _ in range(3)]
        corpus = corpus_with_targets(targets, v)
        base = {"Y_o": rng.normal(size=(v, d)), "w": rng.normal(size=(2, 2))}
        offsets = random_offsets(rng, {"Y_o": (v, d), "w": (2, 2)})
        left = compose(base, restrict_to_observed_vocab(offsets, corpus))
        right = compose(base, offsets)
        keep = sorted({i for t in targets for i in t} | {BOS, EOS})
        drop = np.setdiff1d(np.arange(v), keep)
        right["Y_o"] = right["Y_o"].copy()
        right["Y_o"][drop] = base["Y_o"][drop]
        for name in base:
            np.testing.assert_array_equal(left[name], right[name])


# --------------------------------------------------------------------------
# configuration


class TestConfig:
    def test_batch_defaults(self):
        c = AdaptationConfig()
        assert (c.lr, c.epochs, c.batch_tokens, c.dropout, c.eps_ls) == (0.1, 10, 7000, 0.1, 0.1)

    def test_incremental_defaults(self):
        c = AdaptationConfig(mode="incremental")
        assert (c.lr, c.dropout, c.eps_ls, c.max_updates_per_segment, c.ppl_stop) == (0.01, 0, 0, 3, 1.5)

    def test_incremental_forces_no_dropout(self):
        c = AdaptationConfig(mode="incremental", dropout=0.3, eps_ls=0.2)
        assert c.dropout == 0.0 and c.eps_ls == 0.0

    def test_unknown_region(self):
        with pytest.raises(ConfigError):
            AdaptationConfig(region_mask=frozenset({"decoder"}))

    def test_lasso_config_bounds(self):
        with pytest.raises(ConfigError):
            GroupLassoConfig(norm_floor=0.0)
        with pytest.raises(ConfigError):
            GroupLassoConfig(lam=-1.0)

    def test_methods(self, small_model):
        config, _ = small_model
        lasso = method_config("lasso")
        assert lasso.sparse_vocab and lasso.lasso == GroupLassoConfig()
        names = set(lasso.trainable(config))
        assert "Y_o" in names and not names & {"X_e", "Y_e"}
        fixed = method_config("fixed", fixed_tensors={"X_e", "enc.1.ffn.w1"})
        assert set(fixed.trainable(config)) == {"enc.1.ffn.w1", "Y_o"}
        assert method_config("region:inner-layers").region_mask == {"inner-layers"}
        assert method_config("sparse-output").trainable(config) == ["Y_o"]
        with pytest.raises(ConfigError):
            method_config("region:nowhere")
        with pytest.raises(ConfigError):
            method_config("fixed")

    def test_with_mode_resets_hyperparameters(self):
        c = method_config("lasso", lr=0.5).with_mode("incremental")
        assert c.lr == 0.01 and c.lasso is not None and c.sparse_vocab


# --------------------------------------------------------------------------
# batch adaptation


FAST = dict(epochs=2, batch_tokens=60, lr=0.5)


class TestBatchAdapt:
    def test_output_projection_only(self, small_model, small_task):
        config, params = small_model
        before = {k: v.copy() for k, v in params.items()}
        cfg = AdaptationConfig(region_mask=frozenset({"output-projection"}), **FAST)
        out = batch_adapt(params, small_task.adapt, cfg, config)
        assert out.nonzero() == ["Y_o"]
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_zero_learning_rate(self, small_model, small_task):
        config, params = small_model
        out = batch_adapt(params, small_task.adapt, AdaptationConfig(**{**FAST, "lr": 0.0}), config)
        assert out.nonzero() == []
        assert offset_param_count(out).total == 0

    def test_empty_corpus(self, small_model, small_task):
        config, params = small_model
        with pytest.raises(DataError):
            batch_adapt(params, small_task.adapt.subset([]), AdaptationConfig(), config)

    def test_wrong_mode(self, small_model, small_task):
        config, params = small_model
        with pytest.raises(ConfigError):
            batch_adapt(params, small_task.adapt, AdaptationConfig(mode="incremental"), config)

    def test_deterministic(self, small_model, small_task):
        config, params = small_model
        cfg = AdaptationConfig(**FAST)
        a = batch_adapt(params, small_task.adapt, cfg, config)
        b = batch_adapt(params, small_task.adapt, cfg, config)
        for name in params:
            np.testing.assert_array_equal(compose(params, a)[name], compose(params, b)[name])

    def test_reduces_loss(self, small_model, small_task):
        from compact_nmt.model import batch_loss
        from compact_nmt.train import to_batch
        config, params = small_model
        batch = to_batch(small_task.adapt.segments)
        before = batch_loss(batch, params, config)[0].item()
        out = batch_adapt(params, small_task.adapt, AdaptationConfig(epochs=5, batch_tokens=60, lr=0.2,
                                                                   dropout=0.0), config)
        after = batch_loss(batch, compose(params, out), config)[0].item()
        assert after < before

    def test_sparse_vocab_rows(self, small_model, small_task):
        config, params = small_model
        corpus = small_task.adapt.subset(small_task.adapt.segments[:2])
        out = batch_adapt(params, corpus, method_config("sparse-output", **FAST), config)
        observed = corpus.target_ids() | {BOS, EOS}
        assert set(out["Y_o"].row_ids.tolist()) <= observed
        composed = compose(params, out)["Y_o"]
        unseen = sorted(set(range(config.tgt_vocab)) - observed)
        np.testing.assert_array_equal(composed[unseen], params["Y_o"][unseen])

    def test_embeddings_stay_row_sparse(self, small_model, small_task):
        config, params = small_model
        corpus = small_task.adapt.subset(small_task.adapt.segments[:1])
        out = batch_adapt(params, corpus, AdaptationConfig(**FAST), config)
        assert isinstance(out["X_e"], SparseRows)
        assert set(out["X_e"].row_ids.tolist()) <= corpus.source_ids() | {BOS, EOS}
        assert isinstance(out["Y_o"], Dense)

    def test_lasso_clips_small_tensors(self, small_model, small_task):
        config, params = small_model
        cfg = method_config("lasso", lam=1e-6, theta=10.0, **FAST)
        out = batch_adapt(params, small_task.adapt, cfg, config)
        assert out.nonzero() == ["Y_o"]

    def test_init_offsets_continue(self, small_model, small_task):
        config, params = small_model
        cfg = AdaptationConfig(region_mask=frozenset({"inner-layers"}), **FAST)
        first = batch_adapt(params, small_task.adapt, cfg, config)
        second = batch_adapt(params, small_task.adapt, AdaptationConfig(**{**FAST, "lr": 0.0}),
                             config, init=first)
        for name in first.nonzero():
            np.testing.assert_array_equal(compose(params, second)[name], compose(params, first)[name])


@pytest.mark.parametrize("region", REGIONS)
def test_region_freezing(region, small_model, small_task):
    config, params = small_model
    cfg = AdaptationConfig(region_mask=frozenset({region}), **FAST)
    out = batch_adapt(params, small_task.adapt, cfg, config)
    composed = compose(params, out)
    assert out.nonzero(), "the trainable region should move"
    for name in params:
        if region_of(name, config) != region:
            assert isinstance(out[name], Zero)
            np.testing.assert_array_equal(composed[name], params[name])


# --------------------------------------------------------------------------
# incremental adaptation


class TestUpdateUntil:
    def _run(self, perplexities):
        calls = []
        seq = iter(perplexities)
        history = update_until(lambda: calls.append(1), lambda: next(seq), 3, 1.5)
        return len(calls), history

    def test_stops_after_one(self):
        assert self._run([1.4, 1.2, 1.1]) == (1, [1.4])

    def test_three_when_stuck(self):
        assert self._run([5.0, 5.0, 5.0, 5.0]) == (3, [5.0, 5.0, 5.0])

    def test_boundary_inclusive(self):
        assert self._run([2.0, 1.5, 1.0])[0] == 2


class TestIncremental:
    def test_update_counts_follow_perplexity(self, small_model, small_task):
        config, params = small_model
        result = incremental_adapt(params, None, small_task.test, AdaptationConfig(mode="incremental"), config)
        assert len(result.translations) == len(small_task.test)
        for s in result.stats:
            assert 1 <= s.updates <= 3
            assert s.updates == len(s.perplexities)
            assert all(p > 1.5 for p in s.perplexities[:-1])
            assert s.updates == 3 or s.perplexities[-1] <= 1.5

    def test_quick_convergence_means_one_update(self, small_model, small_task):
        config, params = small_model
        cfg = AdaptationConfig(mode="incremental", ppl_stop=1e6)
        result = incremental_adapt(params, None, small_task.test, cfg, config)
        assert [s.updates for s in result.stats] == [1] * len(small_task.test)

    def test_never_converging_means_three(self, small_model, small_task):
        config, params = small_model
        cfg = AdaptationConfig(mode="incremental", ppl_stop=1.0)
        result = incremental_adapt(params, None, small_task.test, cfg, config)
        assert [s.updates for s in result.stats] == [3] * len(small_task.test)

    def test_causality(self, small_model, small_task):
        config, params = small_model
        cfg = AdaptationConfig(mode="incremental", lr=0.5)
        test = small_task.test
        clean = incremental_adapt(params, None, test, cfg, config).translations
        rng = np.random.default_rng(0)
        for i in range(len(test)):
            corrupted = [s if k <= i else Segment(s.source, tuple(rng.integers(4, 12, 3).tolist()))
                         for k, s in enumerate(test.segments)]
            got = incremental_adapt(params, None, test.subset(corrupted), cfg, config).translations
            assert got[: i + 1] == clean[: i + 1]

    def test_empty_test(self, small_model, small_task):
        config, params = small_model
        with pytest.raises(DataError):
            incremental_adapt(params, None, small_task.test.subset([]),
                              AdaptationConfig(mode="incremental"), config)

    def test_lasso_in_incremental_updates(self, small_model, small_task):
        config, params = small_model
        cfg = method_config("lasso", mode="incremental", theta=10.0)
        result = incremental_adapt(params, None, small_task.test, cfg, config)
        assert result.offsets.nonzero() == ["Y_o"]


@pytest.mark.slow
def test_repeated_segment_improves(desk_baseline, desk_task):
    """Ten copies of one user-domain segment: later copies translate better than the first."""
    ck = desk_baseline
    base = translate(desk_task.test.sources[:50], ck.params, ck.config)
    worst = min(range(50), key=lambda i: bleu([base[i]], [desk_task.test.targets[i]]).score)
    seg = desk_task.test[worst]
    repeated = desk_task.test.subset([seg] * 10)
    result = incremental_adapt(ck.params, None, repeated, AdaptationConfig(mode="incremental"),
                               ck.config)
    scores = [bleu([h], [list(seg.target)]).score for h in result.translations]
    assert min(scores[1:]) >= scores[0]
    assert max(scores[1:]) > scores[0]


class TestAccounting:
    def test_all_zero(self):
        assert offset_param_count(OffsetSet.zeros(["a", "b"])).total == 0

    def test_dense(self):
        assert offset_param_count(OffsetSet({"a": Dense(np.zeros((256, 512)))})).total == 131072

    def test_sparse(self):
        e = SparseRows((40000, 256), np.arange(10), np.zeros((10, 256)))
        assert offset_param_count(OffsetSet({"Y_o": e})).total == 2560

    def test_per_region(self, small_model):
        config, _ = small_model
        rng = np.random.default_rng(1)
        offsets = random_offsets(rng, param_shapes(config))
        counts = offset_param_count(offsets, config)
        assert sum(counts.per_region.values()) == counts.total
