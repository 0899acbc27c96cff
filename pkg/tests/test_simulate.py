import numpy as np
import pytest

from tweedievec.cooccur import check_symmetry
from tweedievec.model import row_score
from tweedievec.optimizer import ConvergenceConfig
from tweedievec.simulate import (DEFAULT_PHI_COMPONENTS, SimSpec,
                                 compare_optimizers, generate)
from tweedievec.trainer import init_params
from tweedievec.tweedie import sample_cpg_many


class TestSimSpec:
    def test_defaults(self):
        spec = SimSpec(n=10, d=4)
        assert spec.vector_source == "random-unit"
        assert spec.phi_values == DEFAULT_PHI_COMPONENTS
        assert len(DEFAULT_PHI_COMPONENTS) == 6
        assert all(v > 0 for v in DEFAULT_PHI_COMPONENTS)

    def test_validation(self):
        with pytest.raises(ValueError):
            SimSpec(n=0, d=4)
        with pytest.raises(ValueError):
            SimSpec(n=3, d=3, vector_source="file")
        with pytest.raises(ValueError):
            SimSpec(n=3, d=3, phi_values=(0.5, -1.0))


class TestGenerate:
    def test_store_is_exactly_symmetric(self, tmp_path):
        spec = SimSpec(n=25, d=5, seed=3)
        store, _, _ = generate(spec, tmp_path / "s.cooc")
        check_symmetry(store)

    def test_truth_has_unit_vectors_and_zero_biases(self, tmp_path):
        spec = SimSpec(n=20, d=6, seed=1)
        _, truth, disp = generate(spec, tmp_path / "s.cooc")
        assert np.linalg.norm(truth.W, axis=1) == pytest.approx(np.ones(20))
        assert np.array_equal(truth.W, truth.Wt)
        assert np.all(truth.b == 0.0) and np.all(truth.bt == 0.0)
        assert np.all((disp.p_row > 0.5) & (disp.p_row < 1.0))
        assert np.array_equal(disp.p_row, disp.p_col)
        assert set(np.round(disp.phi_row, 12)) <= \
            set(np.round(DEFAULT_PHI_COMPONENTS, 12))

    def test_fixed_seed_reproduces_store_bytes(self, tmp_path):
        spec = SimSpec(n=15, d=4, seed=42)
        generate(spec, tmp_path / "a.cooc")
        generate(spec, tmp_path / "b.cooc")
        assert (tmp_path / "a.cooc").read_bytes() == (tmp_path / "b.cooc").read_bytes()

    def test_vectors_from_file(self, tmp_path):
        rng = np.random.default_rng(0)
        mat = rng.standard_normal((8, 3))
        path = tmp_path / "vecs.txt"
        with open(path, "w") as fh:
            for k, row in enumerate(mat):
                fh.write(f"tok{k} " + " ".join(f"{v:.8f}" for v in row) + "\n")
        spec = SimSpec(n=8, d=3, seed=0, vector_source="file",
                       vectors_path=str(path))
        _, truth, _ = generate(spec, tmp_path / "s.cooc")
        assert np.linalg.norm(truth.W, axis=1) == pytest.approx(np.ones(8))

    def test_zero_norm_file_vector_rejected(self, tmp_path):
        path = tmp_path / "vecs.txt"
        path.write_text("a 0 0 0\nb 1 0 0\n")
        spec = SimSpec(n=2, d=3, seed=0, vector_source="file",
                       vectors_path=str(path))
        with pytest.raises(ValueError, match="zero-norm"):
            generate(spec, tmp_path / "s.cooc")

    def test_identical_unit_vectors_give_mu_e(self, rng, tmp_path):
        # mu_ij = exp(w . w) = e when all vectors coincide; check the
        # empirical mean of replicate draws at a fixed pair
        mu = np.full(20_000, np.e)
        draws = sample_cpg_many(mu, 0.8, 1.5, rng)
        assert draws.mean() == pytest.approx(np.e, rel=0.02)

    def test_score_at_truth_much_smaller_than_at_random(self, tmp_path):
        # low-dispersion instance so the mean-zero score noise at the truth
        # sits well below the systematic mismatch of random parameters
        spec = SimSpec(n=200, d=20, seed=9, phi_values=(0.25,))
        store, truth, disp = generate(spec, tmp_path / "s.cooc")
        random_params = init_params(200, 20, seed=77)
        norm_truth = 0.0
        norm_rand = 0.0
        for row in store.iter_rows():
            norm_truth += float(np.linalg.norm(row_score(truth, disp, row)))
            norm_rand += float(np.linalg.norm(row_score(random_params, disp, row)))
        assert norm_rand > 10.0 * norm_truth


class TestCompareOptimizers:
    def test_shared_iteration_zero_and_csv_layout(self, tmp_path):
        spec = SimSpec(n=12, d=3, seed=5)
        store, _, disp = generate(spec, tmp_path / "s.cooc")
        out_dir = tmp_path / "cmp"
        res = compare_optimizers(store, disp, 3, seed=1,
                                 convergence=ConvergenceConfig(epsilon=1e-5,
                                                               maxit=4),
                                 out_dir=out_dir)
        assert set(res) == {"fisher", "fisher_lr", "adam"}
        iter0 = {}
        for arm in res:
            lines = (out_dir / f"trajectory_{arm}.csv").read_text().splitlines()
            assert lines[0] == "arm,iter,loss,u_beta_norm,u_betatilde_norm"
            first = lines[1].split(",")
            assert first[0] == arm and first[1] == "0"
            iter0[arm] = first[2:]
        assert iter0["fisher"] == iter0["fisher_lr"] == iter0["adam"]
        epoch_lines = (out_dir / "epochs_fisher.csv").read_text().splitlines()
        assert epoch_lines[0] == "arm,row,epoch,loss"
        assert epoch_lines[1].split(",")[:3] == ["fisher", "0", "1"]

    def test_fisher_and_fisher_lr_coincide_at_t1_with_unit_lr(self, tmp_path):
        spec = SimSpec(n=10, d=2, seed=8)
        store, _, disp = generate(spec, tmp_path / "s.cooc")
        res = compare_optimizers(store, disp, 2, seed=2, lr=1.0,
                                 arms=("fisher", "fisher_lr"),
                                 convergence=ConvergenceConfig(epsilon=1e-9,
                                                               maxit=1))
        a = res["fisher"].history.records[0].loss
        b = res["fisher_lr"].history.records[0].loss
        assert a == b  # lr / 1**(1/4) == 1 makes the schedules identical

    def test_arm_errors_do_not_abort_others(self, tmp_path, monkeypatch):
        spec = SimSpec(n=8, d=2, seed=4)
        store, _, disp = generate(spec, tmp_path / "s.cooc")
        import tweedievec.simulate as sim
        orig_train = sim.train

        def exploding(store_, params, disp_, cfg, **kwargs):
            if cfg.optimizer == "fisher":
                raise RuntimeError("boom")
            return orig_train(store_, params, disp_, cfg, **kwargs)

        monkeypatch.setattr(sim, "train", exploding)
        res = sim.compare_optimizers(store, disp, 2, seed=2,
                                     convergence=ConvergenceConfig(epsilon=1e-5,
                                                                   maxit=2))
        assert isinstance(res["fisher"].error, RuntimeError)
        assert res["fisher_lr"].history is not None
        assert res["adam"].history is not None
