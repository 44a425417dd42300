"""Quantized latent embedding: codebook ops, losses, index sets, PCA."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagma import autodiff as ad
from lagma import vq
from _oracles import fd_probe


def make_model(n_codes=4, latent_dim=2, state_dim=3, seed=0, **kw):
    cfg = vq.VqConfig(n_codes=n_codes, latent_dim=latent_dim, **kw)
    return vq.VqModel(cfg, state_dim, np.random.default_rng(seed))


def zero_params(model, prefix):
    for name in model.params.names():
        if name.startswith(prefix):
            model.params[name].data[...] = 0.0


class TestEncodeDecode:
    def test_zero_network_encodes_to_zero(self):
        model = make_model()
        zero_params(model, "enc")
        out = vq.encode(model, np.array([1.0, -2.0, 3.0]))
        assert np.all(out.data == 0.0)

    def test_encode_deterministic(self):
        model = make_model(seed=5)
        s = np.array([0.1, 0.2, 0.3])
        a = vq.encode(model, s).data
        b = vq.encode(model, s).data
        np.testing.assert_array_equal(a, b)

    def test_encode_small_perturbation_small_output_change(self):
        model = make_model(seed=7)
        s = np.random.default_rng(1).standard_normal(3)
        x0 = vq.encode(model, s).data
        x1 = vq.encode(model, s + 1e-9).data
        assert np.linalg.norm(x1 - x0) < 1e-6

    def test_encode_dimension_mismatch_rejected(self):
        model = make_model()
        with pytest.raises(ad.ShapeError, match="encode"):
            vq.encode(model, np.zeros(5))

    def test_zero_decoder_outputs_zero(self):
        model = make_model()
        zero_params(model, "dec")
        out = vq.decode(model, np.array([1.0, 1.0]))
        assert np.all(out.data == 0.0)

    def test_decode_shape_contract(self):
        model = make_model(latent_dim=2, state_dim=3)
        out = vq.decode(model, np.zeros(2))
        assert out.data.shape == (3,)
        with pytest.raises(ad.ShapeError, match="decode"):
            vq.decode(model, np.zeros(4))


class TestQuantize:
    def test_nearest_by_inspection(self):
        model = make_model(n_codes=2, latent_dim=2)
        model.params["code"].data[...] = [[0.0, 0.0], [1.0, 1.0]]
        z, x_q = vq.quantize(model, np.array([0.9, 0.8]))
        assert z == 1
        assert x_q.tolist() == [1.0, 1.0]

    def test_exact_code_hit(self):
        model = make_model(n_codes=2, latent_dim=2)
        model.params["code"].data[...] = [[0.0, 0.0], [1.0, 1.0]]
        z, x_q = vq.quantize(model, np.array([0.0, 0.0]))
        assert z == 0
        assert x_q.tolist() == [0.0, 0.0]

    def test_equidistant_tie_takes_lowest_index(self):
        model = make_model(n_codes=2, latent_dim=2)
        model.params["code"].data[...] = [[0.0, 0.0], [1.0, 1.0]]
        z, _ = vq.quantize(model, np.array([0.5, 0.5]))
        assert z == 0

    def test_returned_vector_is_a_copy(self):
        model = make_model(n_codes=2, latent_dim=2)
        _, x_q = vq.quantize(model, np.array([0.0, 0.0]))
        x_q[0] = 99.0
        assert model.codebook[0, 0] != 99.0

    def test_idempotence_on_distinct_rows(self):
        model = make_model(n_codes=8, latent_dim=3, seed=3)
        z, _ = vq.quantize(model, model.codebook)
        assert z.tolist() == list(range(8))


class TestComputeJ:
    def test_hand_case_t0(self):
        assert vq.compute_J(0, 10, 64).tolist() == [0, 1, 2, 3, 4, 5, 60]

    def test_hand_case_t5(self):
        assert vq.compute_J(5, 10, 64).tolist() == [30, 31, 32, 33, 34, 35]

    def test_hand_case_small_codebook(self):
        assert vq.compute_J(7, 20, 8).tolist() == [2]

    def test_bad_arguments_rejected(self):
        with pytest.raises(ValueError):
            vq.compute_J(10, 10, 64)
        with pytest.raises(ValueError):
            vq.compute_J(-1, 10, 64)
        with pytest.raises(ValueError):
            vq.compute_J(0, 0, 64)
        with pytest.raises(ValueError):
            vq.compute_J(0, 10, 0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 80), st.integers(1, 512))
    def test_partition_property(self, T, n_c):
        if n_c < T:
            return  # d = 0: sharing, not partitioning
        seen = []
        for t in range(T):
            j = vq.compute_J(t, T, n_c)
            assert len(set(j.tolist())) == len(j)
            seen.extend(j.tolist())
        assert sorted(seen) == list(range(n_c))

    def test_coverage_weights_rows_sum_to_one(self):
        w = vq.coverage_weights(10, 64)
        np.testing.assert_allclose(w.sum(axis=1), 1.0)


class TestVqLosses:
    def test_default_scales_and_sizes(self):
        cfg = vq.VqConfig()
        assert cfg.n_codes == 64
        assert cfg.latent_dim == 8
        assert cfg.lambda_vq == 1.0
        assert cfg.lambda_commit == 0.5
        assert cfg.lambda_cvr == 0.5

    def _surgical_model(self, code_row, enc_out, dec_out):
        model = make_model(n_codes=1, latent_dim=2, state_dim=2)
        zero_params(model, "enc")
        zero_params(model, "dec")
        model.params["enc.b3"].data[...] = enc_out
        model.params["dec.b3"].data[...] = dec_out
        model.params["code"].data[...] = [code_row]
        return model

    def test_hand_case_unit_distances(self):
        s = np.array([0.3, 0.7])
        model = self._surgical_model([0.0, 0.0], [1.0, 0.0], s)
        l_vq, l_cvr, l_tot = vq.vq_losses(model, s, t=0, T=5, mode="none")
        cfg = model.config
        assert l_vq.item() == pytest.approx(cfg.lambda_vq * 1.0 + cfg.lambda_commit * 1.0)
        assert l_cvr.item() == 0.0
        assert l_tot.item() == pytest.approx(l_vq.item())

    def test_perfect_reconstruction_zero_loss(self):
        s = np.array([0.3, 0.7])
        model = self._surgical_model([1.0, 0.0], [1.0, 0.0], s)
        l_vq, _, l_tot = vq.vq_losses(model, s, t=0, T=5, mode="none")
        assert l_vq.item() == 0.0
        assert l_tot.item() == 0.0

    def test_coverage_matches_direct_formula(self):
        model = make_model(n_codes=6, latent_dim=2, state_dim=3, seed=11)
        rng = np.random.default_rng(2)
        states = rng.standard_normal((4, 3))
        t_idx = np.array([0, 1, 2, 2])
        T = 3
        weights = np.full(4, 0.25)
        _, l_cvr, _ = vq.vq_loss_batch(model, states, t_idx, T, "cvr", weights)
        x = vq.encode(model, states).data
        code = model.codebook
        expected = 0.0
        for i in range(4):
            j = vq.compute_J(int(t_idx[i]), T, 6)
            d = ((x[i][None, :] - code[j]) ** 2).sum(axis=1)
            expected += weights[i] * d.mean()
        assert l_cvr.item() == pytest.approx(expected, rel=1e-12)

    def test_coverage_all_matches_direct_formula(self):
        model = make_model(n_codes=5, latent_dim=2, state_dim=3, seed=13)
        rng = np.random.default_rng(3)
        states = rng.standard_normal((3, 3))
        weights = np.full(3, 1.0 / 3.0)
        _, l_cvr, _ = vq.vq_loss_batch(
            model, states, np.zeros(3, dtype=int), 1, "cvr_all", weights
        )
        x = vq.encode(model, states).data
        code = model.codebook
        expected = 0.0
        for i in range(3):
            d = ((x[i][None, :] - code) ** 2).sum(axis=1)
            expected += weights[i] * d.mean()
        assert l_cvr.item() == pytest.approx(expected, rel=1e-12)

    def test_unknown_mode_rejected(self):
        model = make_model()
        with pytest.raises(ValueError, match="mode"):
            vq.vq_losses(model, np.zeros(3), 0, 1, "bogus")

    def test_total_combines_with_lambda_cvr(self):
        model = make_model(n_codes=4, latent_dim=2, state_dim=3, seed=17,
                           lambda_cvr=0.25)
        s = np.random.default_rng(4).standard_normal(3)
        l_vq, l_cvr, l_tot = vq.vq_losses(model, s, 0, 2, "cvr")
        assert l_tot.item() == pytest.approx(l_vq.item() + 0.25 * l_cvr.item())

    def test_encoder_gets_no_gradient_through_codebook_pull(self):
        # With the decoder zeroed (constant reconstruction) and the commitment
        # scale at zero, the only x-dependent term is sg-wrapped, so phi sees
        # exactly zero gradient while the codebook still gets pulled.
        model = make_model(n_codes=3, latent_dim=2, state_dim=3, seed=19,
                           lambda_commit=0.0)
        zero_params(model, "dec")
        s = np.random.default_rng(5).standard_normal(3)
        model.params.zero_grad()
        tape = ad.Tape()
        _, _, l_tot = vq.vq_losses(model, s, 0, 2, "none", tape)
        ad.backward(tape, l_tot)
        for name in model.params.names():
            if name.startswith("enc"):
                assert np.all(model.params[name].grad == 0.0), name
        assert np.any(model.params["code"].grad != 0.0)

    def test_encoder_gradient_flows_through_reconstruction(self):
        model = make_model(n_codes=3, latent_dim=2, state_dim=3, seed=23)
        s = np.random.default_rng(6).standard_normal(3)
        model.params.zero_grad()
        tape = ad.Tape()
        l_vq, _, _ = vq.vq_losses(model, s, 0, 2, "none", tape)
        ad.backward(tape, l_vq)
        enc_norm = sum(
            float(np.abs(model.params[n].grad).sum())
            for n in model.params.names()
            if n.startswith("enc")
        )
        assert enc_norm > 0.0

    def test_encoder_and_decoder_networks_match_finite_differences(self):
        model = make_model(n_codes=4, latent_dim=2, state_dim=3, seed=29)
        rng = np.random.default_rng(7)
        states = rng.standard_normal((5, 3))
        latents = rng.standard_normal((5, 2))

        def fn(tape):
            a = ad.sqsum(tape, vq.encode(model, states, tape))
            b = ad.sqsum(tape, vq.decode(model, ad.Tensor(latents), tape))
            return ad.add(tape, a, b)

        model.params.zero_grad()
        tape = ad.Tape()
        ad.backward(tape, fn(tape))
        names = model.params.names()
        arrays = [model.params[n].data for n in names]
        analytic = [model.params[n].grad for n in names]
        err = fd_probe(lambda: fn(None).item(), arrays, analytic,
                       np.random.default_rng(8), n_probes=80)
        assert err < 1e-4

    def test_codebook_gradients_match_finite_differences(self):
        # Finite differences see the true derivative of the loss value, so
        # they can only be compared where no estimator intervenes: gradient
        # flow through straight-through and stop-gradient wrappers diverges
        # from FD by construction. With the decoder zeroed (no bypass path)
        # and the commitment scale at zero (no sg[x_q] dependence on e), the
        # codebook gradient from the pull and coverage terms is exact.
        model = make_model(n_codes=4, latent_dim=2, state_dim=3, seed=1,
                           lambda_commit=0.0)
        zero_params(model, "dec")
        rng = np.random.default_rng(7)
        states = rng.standard_normal((5, 3))
        t_idx = np.array([0, 1, 2, 3, 3])

        # Guard against nearest-code assignments flipping under probe steps.
        x = vq.encode(model, states).data
        code = model.codebook
        d2 = ((x[:, None, :] - code[None, :, :]) ** 2).sum(-1)
        gaps = np.sort(d2, axis=1)
        assert (gaps[:, 1] - gaps[:, 0]).min() > 5e-3

        def fn(tape):
            _, _, l_tot = vq.vq_loss_batch(model, states, t_idx, 4, "cvr",
                                           tape=tape)
            return l_tot

        model.params.zero_grad()
        tape = ad.Tape()
        ad.backward(tape, fn(tape))
        err = fd_probe(lambda: fn(None).item(), [model.params["code"].data],
                       [model.params["code"].grad],
                       np.random.default_rng(8), n_probes=8)
        assert err < 1e-4


class FakeValueTable:
    def __init__(self):
        self.updates = []

    def update(self, z, r):
        self.updates.append((z, r))


class TestTrainStep:
    def _batch(self, model, rng, episodes=2, steps=4):
        states = rng.standard_normal((episodes, steps + 1, model.state_dim))
        returns = rng.standard_normal((episodes, steps + 1))
        filled = np.ones((episodes, steps + 1), dtype=bool)
        return states, returns, filled

    def test_off_cadence_leaves_model_bitwise_unchanged(self):
        model = make_model(seed=31)
        rng = np.random.default_rng(9)
        states, returns, filled = self._batch(model, rng)
        before = {n: model.params[n].data.copy() for n in model.params.names()}
        table = FakeValueTable()
        stats = vq.train_vqvae_step(model, states, returns, filled,
                                    episode_counter=7, n_freq_vq=10,
                                    n_freq_cd=40, value_table=table,
                                    optimizer=ad.Adam())
        assert not stats["updated"]
        assert not table.updates
        for name, data in before.items():
            np.testing.assert_array_equal(model.params[name].data, data)

    def test_value_cadence_feeds_every_valid_state(self):
        model = make_model(seed=37)
        rng = np.random.default_rng(10)
        states, returns, filled = self._batch(model, rng, episodes=2, steps=3)
        filled[1, 3:] = False
        table = FakeValueTable()
        vq.train_vqvae_step(model, states, returns, filled, episode_counter=40,
                            n_freq_vq=7, n_freq_cd=8, value_table=table,
                            optimizer=ad.Adam())
        assert len(table.updates) == int(filled.sum())

    def test_overfit_decreases_loss(self):
        model = make_model(n_codes=4, latent_dim=2, state_dim=3, seed=41)
        rng = np.random.default_rng(11)
        states, _, _ = self._batch(model, rng, episodes=1, steps=7)
        returns = np.zeros((1, 8))
        filled = np.ones((1, 8), dtype=bool)
        table = FakeValueTable()
        opt = ad.Adam(lr=5e-3)
        first = None
        last = None
        for step in range(200):
            stats = vq.train_vqvae_step(model, states, returns, filled,
                                        episode_counter=step, n_freq_vq=1,
                                        n_freq_cd=10 ** 9, value_table=table,
                                        optimizer=opt)
            if first is None:
                first = stats["l_tot"]
            last = stats["l_tot"]
        assert last < 0.8 * first

    def test_empty_batch_warns_and_noops(self, caplog):
        import logging

        model = make_model(seed=43)
        filled = np.zeros((1, 3), dtype=bool)
        with caplog.at_level(logging.WARNING, logger="lagma.vq"):
            stats = vq.train_vqvae_step(model, np.zeros((1, 3, 3)),
                                        np.zeros((1, 3)), filled, 0, 1, 1,
                                        FakeValueTable(), ad.Adam())
        assert not stats["updated"]
        assert any("empty batch" in r.message for r in caplog.records)

    def test_memorize_single_state_reconstruction(self):
        model = make_model(n_codes=4, latent_dim=3, state_dim=5, seed=47)
        s = np.random.default_rng(12).standard_normal(5)
        states = s[None, None, :].repeat(2, axis=1)
        returns = np.zeros((1, 2))
        filled = np.ones((1, 2), dtype=bool)
        opt = ad.Adam(lr=5e-3)
        for step in range(500):
            vq.train_vqvae_step(model, states, returns, filled, step, 1,
                                10 ** 9, FakeValueTable(), opt, mode="none")
        x = vq.encode(model, s).data
        _, x_q = vq.quantize(model, x)
        recon = vq.decode(model, x_q).data
        assert np.linalg.norm(recon - s) < 0.1 * np.linalg.norm(s)


class TestPca:
    def test_collinear_points_have_no_second_component(self):
        direction = np.array([1.0, 2.0, 3.0])
        pts = np.outer(np.linspace(-1, 1, 20), direction)
        _, ratios = vq.pca_project(pts, 2, np.random.default_rng(0))
        assert ratios[0] == pytest.approx(1.0, abs=1e-9)
        assert ratios[1] < 1e-9

    def test_isotropic_2d_explains_everything(self):
        pts = np.random.default_rng(1).standard_normal((200, 2))
        _, ratios = vq.pca_project(pts, 2, np.random.default_rng(0))
        assert ratios.sum() == pytest.approx(1.0, abs=1e-9)

    def test_matches_dense_eigensolver(self):
        pts = np.random.default_rng(2).standard_normal((100, 3)) * [3.0, 1.0, 0.3]
        _, ratios = vq.pca_project(pts, 2, np.random.default_rng(0))
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered / (len(pts) - 1)
        eigs = np.sort(np.linalg.eigvalsh(cov))[::-1]
        expected = eigs[:2] / np.trace(cov)
        np.testing.assert_allclose(ratios, expected, atol=1e-6)

    def test_fewer_than_two_points_rejected(self):
        with pytest.raises(ValueError, match="2 points"):
            vq.pca_project(np.zeros((1, 3)))

    def test_deterministic_given_seed(self):
        pts = np.random.default_rng(3).standard_normal((50, 4))
        c1, r1 = vq.pca_project(pts, 2, np.random.default_rng(9))
        c2, r2 = vq.pca_project(pts, 2, np.random.default_rng(9))
        np.testing.assert_array_equal(c1, c2)
        np.testing.assert_array_equal(r1, r2)
