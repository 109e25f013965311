import os
from dataclasses import astuple, replace
from types import SimpleNamespace

import numpy as np
import pytest

from oracles import metrics_from_sets
from paresseg.backbone import NetworkConfig, build_network
from paresseg.checkpoint import load_checkpoint
from paresseg.data import PhantomSpec, Volume, dilate_liver, load_volume, save_volume, synth_dataset
from paresseg.errors import ConfigurationError, DivergenceError, InferenceError, UsageError
from paresseg.pipeline import (
    TABLE_COLUMNS,
    AblationRow,
    TrainConfig,
    ablation_matrix,
    batch_loss,
    draw_batch,
    evaluate,
    infer_volume,
    mean_marginal_tpr,
    report_from_masks,
    slice_probability,
    train,
)
from paresseg.substrate import Tensor

SPEC = PhantomSpec(n_cases=5, dims=(16, 40, 40), tumor_radius_min=2.5, tumor_radius_max=5.0)
NET = NetworkConfig.tiny(patch_size=32, stage_channels=(4, 8, 8, 8, 8, 8))


@pytest.fixture(scope="module")
def cases():
    return synth_dataset(SPEC, seed=11)


def _cfg(**kw):
    base = dict(network=NET, lr=2e-3, batch_size=4, epochs=2, samples_per_epoch=24, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class ConstantModel:
    """Predicts the same tumor probability everywhere."""

    def __init__(self, p, patch=32, fusion="msf"):
        self.p = p
        self.config = SimpleNamespace(patch_size=patch, fusion=fusion)

    def predict(self, pv, art=None, batch_size=16):
        out = np.empty((pv.shape[0], 2) + pv.shape[2:])
        out[:, 0], out[:, 1] = 1 - self.p, self.p
        return out


class BrightArtModel(ConstantModel):
    """Tumor probability equals the windowed ART intensity of the centre slice."""

    def __init__(self):
        super().__init__(0.0)

    def predict(self, pv, art=None, batch_size=16):
        out = np.empty((pv.shape[0], 2) + pv.shape[2:])
        out[:, 1] = np.clip(art[:, 1], 0, 1)
        out[:, 0] = 1 - out[:, 1]
        return out


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(loss_kind="dice")
        with pytest.raises(ConfigurationError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_size=0)

    def test_default_epoch_size(self, cases):
        cfg = TrainConfig(batch_size=8).resolved(cases)
        n = sum(c.liver_slices().size for c in cases)
        assert cfg.samples_per_epoch == 4 * n
        assert cfg.steps_per_epoch == -(-4 * n // 8)
        with pytest.raises(UsageError):
            TrainConfig().steps_per_epoch

    def test_flat_and_dict_round_trip(self):
        cfg = TrainConfig.from_flat({"fusion": "pa_msf", "loss_kind": "be", "lr": "0.001", "seed": "4",
                                     "stage_channels": "4,8,8,8,8,8", "samples_per_epoch": "none"})
        assert cfg.network.fusion == "pa_msf" and cfg.network.stage_channels == (4, 8, 8, 8, 8, 8)
        assert cfg.lr == 0.001 and cfg.seed == 4 and cfg.samples_per_epoch is None
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigurationError, match="bogus"):
            TrainConfig.from_flat({"bogus": "1"})


class TestTrain:
    def test_loss_decreases(self, cases):
        run = train(cases, _cfg(epochs=3))
        assert len(run.step_losses) == 18 and len(run.epoch_losses) == 3
        assert run.epoch_losses[0] < run.step_losses[0]
        assert run.epoch_losses[-1] < run.step_losses[0]

    def test_deterministic(self, cases, tmp_path):
        a = train(cases, _cfg(), tmp_path / "a")
        b = train(cases, _cfg(), tmp_path / "b")
        assert a.step_losses == b.step_losses
        assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
        c = train(cases, _cfg(seed=4))
        assert c.step_losses != a.step_losses

    def test_config_snapshot_reproduces(self, cases):
        a = train(cases, _cfg())
        b = train(cases, TrainConfig.from_dict(a.config))
        assert a.step_losses == b.step_losses

    def test_unit_weight_be_equals_ce(self, cases):
        unit = [replace(c, weight_map=Volume(np.ones(c.dims, np.float32))) for c in cases]
        ce = train(unit, _cfg(loss_kind="ce"))
        be = train(unit, _cfg(loss_kind="be"))
        assert ce.step_losses == be.step_losses

    def test_divergence_guard(self, cases, monkeypatch):
        import paresseg.pipeline as pl

        real = pl.batch_loss
        calls = {"n": 0}

        def flaky(model, batch, cfg):
            calls["n"] += 1
            loss = real(model, batch, cfg)
            return Tensor(np.array(np.nan)) if calls["n"] == 3 else loss

        monkeypatch.setattr(pl, "batch_loss", flaky)
        with pytest.raises(DivergenceError) as info:
            train(cases, _cfg())
        assert info.value.step == 2

    def test_rejects_small_cases(self, cases):
        with pytest.raises(UsageError):
            train(cases, _cfg(network=NetworkConfig.tiny()))
        with pytest.raises(UsageError):
            train([], _cfg())

    def test_mpf_independent_gradients(self, cases):
        cfg = _cfg(network=NET.with_(fusion="mpf", dtype="float64"))
        model = build_network(cfg.network, 0)
        batch = draw_batch(cases, np.random.default_rng(0), cfg)
        batch_loss(model, batch, cfg).backward()
        joint = {k: p.grad.copy() for k, p in model.params.items()}
        # the pv branch's gradient should equal that of the pv branch loss alone
        model.zero_grad()
        from paresseg.pipeline import _objective

        prob_pv, _ = model.branch_outputs(batch["pv"], batch["art"])
        _objective(prob_pv, batch, cfg).backward()
        for k, p in model.params.items():
            if k.startswith("pv."):
                np.testing.assert_allclose(joint[k], p.grad, rtol=1e-12, atol=1e-15)


class TestInfer:
    def test_constant_high_fills_roi(self, cases):
        c = cases[0]
        mask = infer_volume(ConstantModel(0.9), c)
        np.testing.assert_array_equal(mask.data.astype(bool), dilate_liver(c.liver))

    def test_constant_low_is_empty(self, cases):
        assert not infer_volume(ConstantModel(0.1), cases[0]).data.any()

    def test_patch_too_large(self, cases):
        with pytest.raises(InferenceError):
            infer_volume(ConstantModel(0.9, patch=64), cases[0])

    def test_output_inside_roi(self, cases):
        model = build_network(NET.with_(fusion="single"), 0).eval()
        for c in cases[:2]:
            mask = infer_volume(model, c)
            assert mask.dims == c.dims and mask.data.dtype == np.uint8
            assert not np.any(mask.data.astype(bool) & ~dilate_liver(c.liver))

    def test_slice_probability_single_tile_matches_predict(self, cases):
        model = build_network(NET.with_(fusion="msf"), 1)
        pv, art = cases[0].inputs()
        x, y = pv[3:6, 4:36, 4:36], art[3:6, 4:36, 4:36]
        direct = model.predict(x[None], y[None])[0, 1]
        np.testing.assert_allclose(slice_probability(model, x, y), direct, atol=1e-7)


class TestEvaluate:
    def test_ground_truth_scores_one(self, cases):
        rep = report_from_masks(cases, {c.case_id: c.tumor for c in cases})
        assert rep.aggregate.dpc == 1.0 and rep.aggregate.dg == 1.0
        assert mean_marginal_tpr(cases, {c.case_id: c.tumor for c in cases}) == 1.0

    def test_empty_prediction(self, cases):
        rep = evaluate(ConstantModel(0.1), cases)
        assert rep.aggregate.dpc == 0.0 and rep.aggregate.tnr == 1.0

    def test_matches_offline_recomputation(self, cases, tmp_path):
        model = BrightArtModel()
        rep = evaluate(model, cases)
        assert 0 < rep.aggregate.dpc < 1
        for c in cases:
            save_volume(infer_volume(model, c), tmp_path / c.case_id)
        for rec in rep.per_case:
            pred = load_volume(tmp_path / rec.case_id).data
            gt = next(c for c in cases if c.case_id == rec.case_id).tumor
            want = metrics_from_sets(gt, pred)
            for key in ("dice", "voe", "tpr", "tnr", "acc"):
                assert getattr(rec, key) == pytest.approx(want[key], abs=1e-12)

    def test_checkpoint_round_trip(self, cases, tmp_path):
        run = train(cases, _cfg(network=NET.with_(fusion="pa_msf")), tmp_path)
        loaded = load_checkpoint(run.checkpoint)
        for c in cases[:2]:
            _, before = infer_volume(run.model, c, return_probability=True)
            _, after = infer_volume(loaded, c, return_probability=True)
            assert np.max(np.abs(before - after)) < 1e-12

    def test_empty_case_list(self):
        with pytest.raises(UsageError):
            evaluate(ConstantModel(0.5), [])


def _seeded_cell(train_cases, test_cases, cfg, out_dir):
    return AblationRow(cfg.network.fusion, cfg.loss_kind, cfg.seed, 0.1 * cfg.seed, 0.5, 0.5, 0.0, None, os.getpid())


class TestAblation:
    def test_workers_keep_matrix_order(self):
        args = ([], [], ["single", "pa_msf"], ["ce", "be"], [0, 1])
        seq = ablation_matrix(*args, cell_fn=_seeded_cell)
        par = ablation_matrix(*args, cell_fn=_seeded_cell, workers=3)
        strip = lambda t: [r[:-1] for r in map(astuple, t.rows)]
        assert strip(par) == strip(seq)
        assert len({r.seconds for r in par.rows} - {os.getpid()}) >= 1
        with pytest.raises(ConfigurationError):
            ablation_matrix(*args, workers=0)

    def test_bookkeeping(self):
        seen = []

        def fake_cell(train_cases, test_cases, cfg, out_dir):
            seen.append((cfg.network.fusion, cfg.loss_kind, cfg.seed))
            return AblationRow(cfg.network.fusion, cfg.loss_kind, cfg.seed, 0.5 + cfg.seed / 10, 0.6, 0.4, 0.1, 0.7)

        table = ablation_matrix([], [], ["single", "msf", "pa_msf"], ["ce", "be"], [0, 1, 2], cell_fn=fake_cell)
        assert len(table.rows) == 18 and len(set(seen)) == 18
        means = table.means()
        assert len(means) == 6
        assert means[("msf", "be")]["dpc"] == pytest.approx(0.6)
        assert TABLE_COLUMNS == ("DPC", "DG", "VOE", "RVD")
        text = table.text()
        assert all(col in text.splitlines()[0] for col in TABLE_COLUMNS)
        assert len(text.splitlines()) == 2 + 18 + 1 + 6

    def test_write(self, tmp_path):
        rows = [AblationRow("single", "ce", 0, 0.5, 0.6, 0.4, None, 0.7)]
        from paresseg.pipeline import AblationTable

        txt, js = AblationTable(rows).write(tmp_path / "t")
        assert "n/a" in txt.read_text() and js.exists()

    def test_invalid_names(self):
        with pytest.raises(ConfigurationError):
            ablation_matrix([], [], ["bogus"], ["ce"], [0])
        with pytest.raises(ConfigurationError):
            ablation_matrix([], [], ["msf"], ["dice"], [0])
