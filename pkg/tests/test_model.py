import numpy as np
import pytest
from scipy.special import expit

from senn_icu import autodiff as ad
from senn_icu.imputer import MaskedSeries
from senn_icu.model import (
    PROB_EPS,
    BaselineModel,
    Batch,
    LossWeights,
    ModelConfig,
    ModelOutput,
    SennModel,
    baseline_forward,
    build_model,
    compute_losses,
    mortality_from_concepts,
    recombine,
    senn_forward,
    total_loss,
)

TOY = dict(d_x=3, d_s=2, n_concepts=6, lstm_hidden=4, lstm_layers=1, imputer_hidden=3, head_dims=(4, 3, 2),
           dropout=0.0)


def toy_batch(rng, T=4, B=2, d_x=3, d_s=2, N=6, lengths=None):
    values = rng.normal(size=(T, B, d_x))
    mask = (rng.random((T, B, d_x)) < 0.7).astype(float)
    valid = np.ones((T, B), dtype=bool)
    if lengths is not None:
        for b, n in enumerate(lengths):
            valid[n:, b] = False
    mask[~valid] = 0.0
    values[mask == 0] = np.nan
    return Batch(
        MaskedSeries(values, mask),
        rng.normal(size=(B, d_s)),
        valid,
        list(range(B)),
        rng.random((T, B, N)),
        (rng.random((T, B)) < 0.4).astype(float),
    )


def const_output(concepts, relevance):
    c, r = ad.constant(concepts), ad.constant(relevance)
    return ModelOutput(c, r, mortality_from_concepts(c, r))


class TestRecombination:
    def test_zero_relevance_gives_half(self):
        out = const_output(np.random.default_rng(0).random((5, 6)), np.zeros((5, 6)))
        assert np.all(out.mortality_prob.data == 0.5)

    def test_all_ones(self):
        out = const_output(np.ones((2, 6)), np.ones((2, 6)))
        np.testing.assert_allclose(out.mortality_prob.data, 1 / (1 + np.exp(-6.0)), rtol=0, atol=1e-15)
        assert abs(out.mortality_prob.data[0] - 0.9975) < 1e-4

    def test_forward_identity(self):
        rng = np.random.default_rng(1)
        model = SennModel(ModelConfig(**TOY), seed=3)
        for _ in range(5):
            out, _ = senn_forward(model, toy_batch(rng))
            redo = expit(np.sum(out.relevance.data * out.concepts.data, axis=1))
            assert np.max(np.abs(redo - out.mortality_prob.data)) <= 1e-12
            assert np.max(np.abs(recombine(out.concepts.data, out.relevance.data) - out.mortality_prob.data)) <= 1e-12

    def test_monotone_in_concepts(self):
        rng = np.random.default_rng(2)
        c, r = rng.random((50, 6)), rng.random((50, 6))
        base = recombine(c, r)
        for j in range(6):
            bumped = c.copy()
            bumped[:, j] += rng.random(50)
            assert np.all(recombine(bumped, r) >= base)

    def test_outputs_in_open_unit_interval(self):
        model = SennModel(ModelConfig(**TOY), seed=4)
        out, _ = model.forward(toy_batch(np.random.default_rng(3)))
        for t in (out.concepts, out.relevance, out.mortality_prob):
            assert np.all((t.data > 0) & (t.data < 1))


class TestArchitecture:
    def test_heads_disjoint(self):
        model = SennModel(ModelConfig(**TOY))
        names = model.parameters().keys()
        concept = {n for n in names if n.startswith("concept.")}
        relevance = {n for n in names if n.startswith("relevance.")}
        assert concept and relevance and not concept & relevance
        ids = {id(model.params[n]) for n in concept}
        assert not ids & {id(model.params[n]) for n in relevance}

    def test_default_head_dims(self):
        cfg = ModelConfig()
        assert cfg.head_dims == (256, 128, 64) and cfg.lstm_layers == 3 and cfg.n_concepts == 6
        shapes = {s.name: s.shape for s in SennModel.param_specs(cfg)}
        assert shapes["concept.h0.W"] == (128 + 24, 256)
        assert shapes["concept.out.W"] == (64, 6) and shapes["relevance.out.W"] == (64, 6)

    def test_baseline_has_no_concept_parameters(self):
        model = BaselineModel(ModelConfig(**dict(TOY, kind="baseline")))
        assert not any(n.startswith(("concept.", "relevance.")) for n in model.parameters())
        assert model.params["head.out.W"].shape == (2, 1)

    def test_baseline_zero_head_gives_half(self):
        model = BaselineModel(ModelConfig(**dict(TOY, kind="baseline")), seed=1)
        model.params["head.out.W"].data[...] = 0.0
        p, _ = baseline_forward(model, toy_batch(np.random.default_rng(4)))
        assert np.all(p.data == 0.5)

    def test_encoder_equivalence(self):
        senn = SennModel(ModelConfig(**TOY), seed=5)
        base = BaselineModel(ModelConfig(**dict(TOY, kind="baseline")), seed=6)
        for k, t in senn.params.items():
            if k.startswith(("imputer.", "encoder.")):
                base.params[k].data = t.data.copy()
        batch = toy_batch(np.random.default_rng(5))
        hs_a, _ = senn.encode(batch)
        hs_b, _ = base.encode(batch)
        for a, b in zip(hs_a, hs_b):
            assert np.array_equal(a.data, b.data)

    def test_dim_mismatch(self):
        model = SennModel(ModelConfig(**TOY))
        with pytest.raises(ad.ShapeError, match="d_x"):
            model.forward(toy_batch(np.random.default_rng(0), d_x=4))
        with pytest.raises(ad.ShapeError, match="d_s"):
            model.forward(toy_batch(np.random.default_rng(0), d_s=5))

    def test_parameter_set_checked(self):
        params = SennModel(ModelConfig(**TOY)).params
        params.pop("concept.out.b")
        with pytest.raises(ad.ShapeError, match="missing"):
            SennModel(ModelConfig(**TOY), params)

    def test_build_model_dispatch(self):
        assert isinstance(build_model(ModelConfig(**TOY)), SennModel)
        assert isinstance(build_model(ModelConfig(**dict(TOY, kind="baseline"))), BaselineModel)
        with pytest.raises(ValueError):
            ModelConfig(kind="other")

    def test_config_round_trip(self):
        cfg = ModelConfig(**TOY)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_padding_does_not_change_real_rows(self):
        rng = np.random.default_rng(6)
        model = SennModel(ModelConfig(**TOY), seed=7)
        full = toy_batch(rng, T=5, B=2, lengths=[5, 3])
        out, _ = model.forward(full)
        probs = out.mortality_prob.data.reshape(5, 2)
        solo = Batch(
            MaskedSeries(full.series.values[:3, 1:2], full.series.mask[:3, 1:2]),
            full.static[1:2],
            np.ones((3, 1), dtype=bool),
        )
        solo_out, _ = model.forward(solo)
        np.testing.assert_allclose(probs[:3, 1], solo_out.mortality_prob.data, rtol=0, atol=1e-14)


class TestLosses:
    def test_perfect_predictions(self):
        y = np.array([0.0, 1.0, 1.0])
        labels = np.random.default_rng(0).random((3, 6))
        out = ModelOutput(ad.constant(labels), ad.constant(np.ones((3, 6))),
                          ad.constant(np.clip(y, PROB_EPS, 1 - PROB_EPS)))
        L = compute_losses(out, ad.constant(0.0), labels, y, np.ones(3, dtype=bool))
        assert L.aux.item() == 0.0
        assert L.mort.item() <= 1.7e-7

    def test_bce_half(self):
        out = ModelOutput(None, None, ad.constant([0.5]))
        L = compute_losses(out, ad.constant(0.0), None, [1.0], [True])
        assert abs(L.mort.item() - np.log(2)) < 1e-15
        assert abs(L.mort.item() - 0.693147) < 1e-6

    def test_invalid_steps_ignored(self):
        out = ModelOutput(ad.constant(np.full((3, 6), 0.5)), ad.constant(np.zeros((3, 6))),
                          ad.constant([0.5, 0.999, 0.001]))
        labels = np.zeros((3, 6))
        labels[1:] = 1.0  # large errors only at invalid steps
        L = compute_losses(out, ad.constant(0.0), labels, [1.0, 0.0, 1.0], [True, False, False])
        assert abs(L.mort.item() - np.log(2)) < 1e-15
        assert L.aux.item() == 0.25

    def test_all_invalid_rejected(self):
        out = ModelOutput(None, None, ad.constant([0.5]))
        with pytest.raises(ValueError, match="no valid"):
            compute_losses(out, ad.constant(0.0), None, [1.0], [False])

    def test_composition_default_weights(self):
        assert LossWeights() == LossWeights(1.0, 10.0, 0.001)
        got = total_loss(0.7, 0.02, 3.0)
        assert abs(got - 0.903) <= np.spacing(0.903)

    def test_total_is_weighted_sum(self):
        rng = np.random.default_rng(1)
        model = SennModel(ModelConfig(**TOY), seed=2)
        batch = toy_batch(rng)
        out, imp = model.forward(batch)
        w = LossWeights(0.5, 3.0, 0.25)
        L = compute_losses(out, imp, batch.concept_labels, batch.mortality_labels, batch.valid, w)
        v = L.values()
        assert v["total"] == 0.5 * v["mort"] + 3.0 * v["aux"] + 0.25 * v["impute"]

    def test_pure_bce_when_other_weights_zero(self):
        rng = np.random.default_rng(2)
        model = SennModel(ModelConfig(**TOY), seed=3)
        batch = toy_batch(rng)
        out, imp = model.forward(batch)
        L = compute_losses(out, imp, batch.concept_labels, batch.mortality_labels, batch.valid,
                           LossWeights(1.0, 0.0, 0.0))
        assert L.total.item() == L.mort.item()

    def test_baseline_has_no_aux_term(self):
        rng = np.random.default_rng(3)
        model = BaselineModel(ModelConfig(**dict(TOY, kind="baseline")), seed=1)
        batch = toy_batch(rng)
        out, imp = model.forward(batch)
        L = compute_losses(out, imp, batch.concept_labels, batch.mortality_labels, batch.valid)
        assert L.aux.item() == 0.0
        assert L.total.item() == L.mort.item() + 0.001 * L.impute.item()

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(1.0, -1.0, 0.0)


class TestGradients:
    def _check(self, model, batch):
        params = list(model.parameters().values())

        def f():
            out, imp = model.forward(batch)
            return compute_losses(out, imp, batch.concept_labels, batch.mortality_labels, batch.valid).total

        return ad.finite_difference_check(f, params, step=1e-5, tolerance=1e-4)

    def test_senn_full_loss(self):
        rep = self._check(SennModel(ModelConfig(**TOY), seed=11), toy_batch(np.random.default_rng(11)))
        assert rep.ok, rep

    def test_baseline_two_patients(self):
        model = BaselineModel(ModelConfig(**dict(TOY, kind="baseline")), seed=12)
        rep = self._check(model, toy_batch(np.random.default_rng(12), lengths=[4, 3]))
        assert rep.ok, rep

    def test_train_mode_dropout_differs_from_eval(self):
        model = SennModel(ModelConfig(**dict(TOY, dropout=0.5)), seed=13)
        batch = toy_batch(np.random.default_rng(13))
        a, _ = model.forward(batch)
        b, _ = model.forward(batch)
        c, _ = model.forward(batch, train=True, rng=np.random.default_rng(0))
        assert np.array_equal(a.mortality_prob.data, b.mortality_prob.data)
        assert not np.array_equal(a.mortality_prob.data, c.mortality_prob.data)
