import numpy as np
import pytest

from conftest import random_dictionary

from sparseinv.energy import Dictionary, normalize_columns
from sparseinv.learning import (
    Model,
    TrainOptions,
    export_model_csv,
    infer_split,
    infer_unified,
    init_dictionary,
    inpaint,
    load_model,
    save_model,
    sparse_codes,
    train_invariant,
    train_sparse_coding,
    train_unified,
)
from sparseinv.learning import _project
from sparseinv.solver import SolverOptions


def unit_columns(D, tol=1e-9):
    return np.all(np.abs(np.linalg.norm(D.data, axis=0) - 1.0) <= tol)


class TestProjection:
    def test_unit_columns_after_any_step(self, rng):
        data = normalize_columns(rng.standard_normal((6, 9)))
        for _ in range(50):
            grad = rng.standard_normal((6, 9))
            data = _project(data, grad, rate=0.3, nonneg=False)
            assert np.abs(np.linalg.norm(data, axis=0) - 1.0).max() <= 1e-9

    def test_nonneg_stays_nonneg(self, rng):
        data = np.abs(normalize_columns(rng.standard_normal((6, 9))))
        for _ in range(50):
            grad = rng.standard_normal((6, 9))
            data = _project(data, grad, rate=0.3, nonneg=True)
            assert np.all(data >= 0.0)
            assert np.abs(np.linalg.norm(data, axis=0) - 1.0).max() <= 1e-9

    def test_dead_column_keeps_direction(self, rng):
        data = normalize_columns(rng.standard_normal((4, 3)))
        grad = data / 0.5  # a full step to exactly zero
        out = _project(data, grad, rate=0.5, nonneg=False)
        np.testing.assert_allclose(out, data, atol=1e-12)


class TestTrainSparseCoding:
    def test_single_unit_aligns_with_repeated_sample(self, rng):
        x = rng.standard_normal(12)
        samples = np.tile(x, (60, 1))
        # rate * z^2 must stay below 1 for the single-unit recursion to settle
        model = train_sparse_coding(samples, code_dim=1, alpha=0.1,
                                    opts=TrainOptions(learning_rate=0.02, epochs=3, seed=4))
        w = model.W.data[:, 0]
        cos = abs(w @ x) / np.linalg.norm(x)
        assert cos >= 0.99

    def test_columns_unit_norm(self, rng):
        samples = rng.standard_normal((30, 8))
        model = train_sparse_coding(samples, code_dim=6, alpha=0.2,
                                    opts=TrainOptions(epochs=1, seed=0))
        assert unit_columns(model.W)

    def test_deterministic(self, rng):
        samples = rng.standard_normal((25, 6))
        opts = TrainOptions(epochs=2, seed=9)
        m1 = train_sparse_coding(samples, 4, 0.2, opts)
        m2 = train_sparse_coding(samples, 4, 0.2, opts)
        np.testing.assert_array_equal(m1.W.data, m2.W.data)

    def test_bad_samples_rejected(self):
        with pytest.raises(ValueError):
            train_sparse_coding(np.zeros((0, 4)), 2, 0.1)


class TestTrainInvariant:
    def test_huge_beta_leaves_matrix_at_init(self, rng):
        codes = np.abs(rng.standard_normal((40, 10)))
        opts = TrainOptions(epochs=1, seed=3)
        model = train_invariant(codes, inv_dim=4, alpha=0.5, beta=1e6, opts=opts)
        init = init_dictionary(np.random.default_rng(3), 10, 4, nonneg=True)
        np.testing.assert_allclose(model.A.data, init.data, atol=1e-12)

    def test_nonneg_and_unit_columns(self, rng):
        codes = np.abs(rng.standard_normal((40, 10))) * 3
        model = train_invariant(codes, inv_dim=4, alpha=0.5, beta=0.2,
                                opts=TrainOptions(epochs=2, seed=3))
        assert np.all(model.A.data >= 0.0)
        assert unit_columns(model.A)

    def test_negative_codes_rejected(self, rng):
        with pytest.raises(ValueError):
            train_invariant(rng.standard_normal((10, 5)), 2, 0.5, 0.3)


class TestTrainUnified:
    def test_reduces_to_sparse_coding_when_gate_is_pinned(self, rng):
        # single frames and a beta too large for the pooled layer to fire:
        # the W trajectory must match plain sparse coding step for step
        samples = rng.standard_normal((15, 6))
        checkpoints = {}

        def record(tag):
            def cb(epoch, model):
                checkpoints.setdefault(tag, []).append(model.W.data.copy())
            return cb

        # identical inference options make the comparison exact
        opts = TrainOptions(epochs=3, seed=21,
                            infer=SolverOptions(max_iter=200, tol=1e-6, momentum="none"))
        train_sparse_coding(samples, 5, 0.4, opts, on_epoch=record("split"))
        train_unified(samples[:, None, :], 5, 3, 0.4, 1e8, opts, on_epoch=record("joint"))
        for w_split, w_joint in zip(checkpoints["split"], checkpoints["joint"]):
            assert np.abs(w_split - w_joint).max() <= 1e-10

    def test_unit_columns_both(self, rng):
        seqs = rng.standard_normal((12, 2, 6))
        model = train_unified(seqs, 5, 3, 0.4, 0.3, TrainOptions(epochs=1, seed=5))
        assert unit_columns(model.W)
        assert unit_columns(model.A)
        assert np.all(model.A.data >= 0.0)

    def test_deterministic(self, rng):
        seqs = rng.standard_normal((10, 2, 5))
        opts = TrainOptions(epochs=1, seed=13)
        m1 = train_unified(seqs, 4, 2, 0.4, 0.3, opts)
        m2 = train_unified(seqs, 4, 2, 0.4, 0.3, opts)
        np.testing.assert_array_equal(m1.W.data, m2.W.data)
        np.testing.assert_array_equal(m1.A.data, m2.A.data)


class TestInference:
    def test_split_inference_shapes(self, rng):
        W = random_dictionary(rng, 8, 12)
        A = random_dictionary(rng, 12, 5, nonneg=True)
        model = Model("split-layer2", W=W, A=A, alpha=0.3, beta=0.2)
        z, u = infer_split(model, rng.standard_normal(8))
        assert z.shape == (12,)
        assert u.shape == (5,)
        z2, u2 = infer_split(model, rng.standard_normal((3, 8)))
        assert z2.shape == (3, 12)
        assert u2.shape == (5,)

    def test_unified_inference_shapes(self, rng):
        W = random_dictionary(rng, 8, 12)
        A = random_dictionary(rng, 12, 5, nonneg=True)
        model = Model("unified", W=W, A=A, alpha=0.3, beta=0.2)
        z, u = infer_unified(model, rng.standard_normal((3, 8)))
        assert z.shape == (3, 12)
        assert u.shape == (5,)
        assert np.all(u >= 0.0)

    def test_sparse_codes_chunking_consistent(self, rng):
        # chunking changes the shared stopping/curvature state, so agreement
        # is at the solver tolerance in energy, not bitwise in coordinates
        from sparseinv.energy import SparseCodingProblem, eval_sparse_energy

        W = random_dictionary(rng, 6, 9)
        X = rng.standard_normal((7, 6))
        opts = SolverOptions(max_iter=800, tol=1e-11, momentum="fista")
        a = sparse_codes(W, X, 0.3, opts, chunk=2)
        b = sparse_codes(W, X, 0.3, opts, chunk=100)
        for t in range(7):
            p = SparseCodingProblem(W, X[t], 0.3)
            ea, eb = eval_sparse_energy(p, a[t]), eval_sparse_energy(p, b[t])
            assert abs(ea - eb) <= 1e-6 * max(1.0, abs(eb))


class TestInpaint:
    def test_full_mask_equals_plain_reconstruction(self, rng):
        W = random_dictionary(rng, 10, 14)
        model = Model("split-layer1", W=W, A=None, alpha=0.2)
        x = rng.standard_normal(10)
        opts = SolverOptions(max_iter=400, tol=0.0, momentum="fista")
        recon = inpaint(model, x, np.ones(10, dtype=bool), opts)
        z, _ = infer_split(model, x, opts)
        np.testing.assert_allclose(recon, W.data @ z, atol=1e-12)

    def test_recovers_a_dictionary_column(self, rng):
        W = random_dictionary(rng, 25, 10)
        model = Model("split-layer1", W=W, A=None, alpha=0.01)
        x = W.data[:, 3].copy()
        mask = np.ones(25, dtype=bool)
        mask[rng.choice(25, size=5, replace=False)] = False
        recon = inpaint(model, x, mask)
        hidden = ~mask
        rms = float(np.sqrt(np.mean((recon[hidden] - x[hidden]) ** 2)))
        assert rms <= 0.05

    def test_unified_kind_uses_two_layers(self, rng):
        W = random_dictionary(rng, 10, 8)
        A = random_dictionary(rng, 8, 3, nonneg=True)
        model = Model("unified", W=W, A=A, alpha=0.3, beta=0.2)
        x = rng.standard_normal(10)
        mask = rng.random(10) > 0.3
        recon = inpaint(model, x, mask)
        assert recon.shape == (10,)
        assert np.all(np.isfinite(recon))

    def test_empty_mask_rejected(self, rng):
        W = random_dictionary(rng, 6, 4)
        model = Model("split-layer1", W=W, A=None, alpha=0.2)
        with pytest.raises(ValueError, match="mask"):
            inpaint(model, rng.standard_normal(6), np.zeros(6, dtype=bool))


class TestSerialization:
    def _model(self, rng, kind="split-layer2"):
        W = random_dictionary(rng, 7, 11)
        A = random_dictionary(rng, 11, 4, nonneg=True)
        if kind == "split-layer1":
            return Model(kind, W=W, A=None, alpha=0.31)
        return Model(kind, W=W, A=A, alpha=0.31, beta=0.17)

    def test_roundtrip_bitwise(self, rng, tmp_path):
        for kind in ("split-layer1", "split-layer2", "unified"):
            model = self._model(rng, kind)
            path = tmp_path / f"{kind}.sinv"
            save_model(model, path)
            back = load_model(path)
            assert back.kind == model.kind
            assert back.alpha == model.alpha
            assert back.beta == model.beta
            np.testing.assert_array_equal(back.W.data, model.W.data)
            if model.A is not None:
                np.testing.assert_array_equal(back.A.data, model.A.data)
                assert back.A.nonneg
            # byte-stable: saving the loaded model reproduces the file
            path2 = tmp_path / f"{kind}2.sinv"
            save_model(back, path2)
            assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sinv"
        path.write_bytes(b"NOTAMODL" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_truncated_matrix(self, rng, tmp_path):
        model = self._model(rng)
        path = tmp_path / "m.sinv"
        save_model(model, path)
        clipped = tmp_path / "clipped.sinv"
        clipped.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_model(clipped)

    def test_trailing_garbage(self, rng, tmp_path):
        model = self._model(rng)
        path = tmp_path / "m.sinv"
        save_model(model, path)
        bloated = tmp_path / "bloated.sinv"
        bloated.write_bytes(path.read_bytes() + b"\x00\x01")
        with pytest.raises(ValueError, match="trailing"):
            load_model(bloated)

    def test_csv_export(self, rng, tmp_path):
        model = self._model(rng)
        written = export_model_csv(model, tmp_path)
        assert {p.name for p in written} == {"W.csv", "A.csv"}
        W = np.loadtxt(tmp_path / "W.csv", delimiter=",")
        np.testing.assert_array_equal(W, model.W.data)


class TestModelValidation:
    def test_kind_checked(self, rng):
        with pytest.raises(ValueError, match="kind"):
            Model("bogus", W=random_dictionary(rng, 3, 3), A=None, alpha=0.1)

    def test_dims_checked(self, rng):
        with pytest.raises(ValueError, match="code units"):
            Model("unified", W=random_dictionary(rng, 4, 5),
                  A=random_dictionary(rng, 6, 2, nonneg=True), alpha=0.1, beta=0.1)
