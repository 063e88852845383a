import numpy as np
import pytest

from flowsr import autodiff as ad
from flowsr import checkpoint as ckpt_mod
from flowsr import data, trainer
from flowsr.errors import CheckpointError, ConfigError, NumericalError, TrainingError
from flowsr.params import ParamStore

from helpers import scalar_adam


class TestAdam:
    def _single(self, w0=0.0):
        store = ParamStore(dtype=np.float64)
        store.add("w", np.full((1, 1, 1, 1), w0))
        return store

    def test_hand_computed_first_step(self):
        store = self._single()
        state = trainer.AdamState()
        trainer.adam_step(store, {"w": np.ones((1, 1, 1, 1))}, state, lr=0.1)
        # m_hat = 1, v_hat = 1 -> step = -0.1 / (1 + 1e-8)
        expected = -0.1 / (1.0 + 1e-8)
        assert store["w"].var.data.reshape(()) == pytest.approx(expected, rel=1e-12)
        assert state.t == 1

    def test_zero_gradient_no_update(self):
        store = self._single(w0=0.7)
        trainer.adam_step(store, {"w": np.zeros((1, 1, 1, 1))}, trainer.AdamState(), 0.1)
        assert store["w"].var.data.reshape(()) == 0.7

    def test_two_steps_match_scalar_oracle(self):
        store = self._single(w0=0.3)
        state = trainer.AdamState()
        g = np.full((1, 1, 1, 1), 0.5)
        trainer.adam_step(store, {"w": g}, state, lr=0.05)
        trainer.adam_step(store, {"w": g}, state, lr=0.05)
        expected = scalar_adam(0.3, [0.5, 0.5], lr=0.05)
        assert store["w"].var.data.reshape(()) == pytest.approx(expected, rel=1e-12)

    def test_missing_gradient_raises(self):
        store = self._single()
        with pytest.raises(TrainingError, match="missing gradient"):
            trainer.adam_step(store, {}, trainer.AdamState(), 0.1)

    def test_frozen_parameter_skipped(self):
        store = self._single(w0=1.0)
        store["w"].trainable = False
        trainer.adam_step(store, {}, trainer.AdamState(), 0.1)
        assert store["w"].var.data.reshape(()) == 1.0

    def test_equalized_scale_reaches_adam_through_gradient(self):
        # loss = sum(r * (c * stored)): grad wrt stored is c*r, and the Adam
        # trajectory matches the scalar oracle fed that gradient, per coordinate
        rng = np.random.default_rng(0)
        stored0 = rng.standard_normal((1, 1, 2, 2))
        r = rng.standard_normal((1, 1, 2, 2))
        c = 0.37
        store = ParamStore(dtype=np.float64)
        store.add("w", stored0, scale=c)
        state = trainer.AdamState()
        for _ in range(3):
            with ad.Tape():
                loss = ad.reduce_sum(ad.mul(store["w"].effective(), ad.Variable(r)))
                grads = ad.backward(loss, [store["w"].var])
            np.testing.assert_allclose(grads[store["w"].var].data, c * r, rtol=1e-12)
            trainer.adam_step(store, {"w": grads[store["w"].var].data}, state, 0.02)
        flat = store["w"].var.data.ravel()
        for i, (w0, gi) in enumerate(zip(stored0.ravel(), (c * r).ravel())):
            assert flat[i] == pytest.approx(scalar_adam(w0, [gi] * 3, 0.02), rel=1e-10)


class TestTrainConfig:
    def test_grow_steps_must_increase(self):
        with pytest.raises(ConfigError):
            trainer.TrainConfig(stage="sr", total_iters=100, grow_steps=(50, 50))
        with pytest.raises(ConfigError):
            trainer.TrainConfig(stage="sr", total_iters=100, grow_steps=(60, 40))

    def test_grow_steps_before_end(self):
        with pytest.raises(ConfigError):
            trainer.TrainConfig(stage="sr", total_iters=100, grow_steps=(100,))

    def test_bad_stage(self):
        with pytest.raises(ConfigError):
            trainer.TrainConfig(stage="nope", total_iters=10)

    def test_production_scale_schedules_accepted(self):
        trainer.TrainConfig(stage="sr", total_iters=160_000, grow_steps=(20_000, 80_000),
                            final_scale=8)
        trainer.TrainConfig(stage="sr_unpaired", total_iters=280_000,
                            grow_steps=(40_000, 120_000), final_scale=8)
        trainer.TrainConfig(stage="sr", total_iters=160_000, grow_steps=(60_000,),
                            final_scale=4)
        trainer.TrainConfig(stage="degrade", total_iters=180_000, lr=2e-4,
                            lr_decay="linear_last_half")


class TestLrSchedule:
    def test_constant(self):
        cfg = trainer.TrainConfig(stage="sr", total_iters=100, lr=0.003)
        assert trainer.lr_at(cfg, 1) == trainer.lr_at(cfg, 100) == 0.003

    def test_linear_last_half_desk_points(self):
        cfg = trainer.TrainConfig(stage="degrade", total_iters=300, lr=2e-4,
                                  lr_decay="linear_last_half")
        assert trainer.lr_at(cfg, 150) == 2e-4
        assert trainer.lr_at(cfg, 225) == pytest.approx(1e-4)
        assert trainer.lr_at(cfg, 300) == 0.0


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer_corpus")
    data.write_procedural_corpus(root, count=8, hr_size=16, lr_factor=2, seed=1)
    return root


def small_stage1_cfg(**kw):
    base = dict(stage="degrade", total_iters=6, batch=2, seed=5, lr=1e-3,
                degrade_width=8, scale_factor=2, log_every=1, dtype="float32")
    base.update(kw)
    return trainer.TrainConfig(**base)


def small_stage2_cfg(**kw):
    base = dict(stage="sr", total_iters=6, batch=2, seed=5, lr=0.003,
                base_width=8, final_scale=2, scale_factor=2, log_every=1,
                dtype="float32")
    base.update(kw)
    return trainer.TrainConfig(**base)


class TestStage1Run:
    def test_run_writes_log_and_checkpoint(self, corpus, tmp_path):
        idx = data.build_index(corpus / "hr", corpus / "lr", "unpaired", 2)
        path = trainer.run_stage1(small_stage1_cfg(), idx, tmp_path / "run")
        assert path.exists()
        lines = (tmp_path / "run" / "loss.tsv").read_text().strip().splitlines()
        assert len(lines) == 6 * 6  # six scalars per iteration
        first = lines[0].split("\t")
        assert first[0] == "1" and first[1] == "d_adv"

    def test_seeded_rerun_bit_identical(self, corpus, tmp_path):
        idx = data.build_index(corpus / "hr", corpus / "lr", "unpaired", 2)
        p1 = trainer.run_stage1(small_stage1_cfg(), idx, tmp_path / "a")
        p2 = trainer.run_stage1(small_stage1_cfg(), idx, tmp_path / "b")
        assert (tmp_path / "a" / "loss.tsv").read_bytes() == \
            (tmp_path / "b" / "loss.tsv").read_bytes()
        assert p1.read_bytes() == p2.read_bytes()

    def test_nan_input_aborts_with_diagnostics(self, tmp_path):
        bad = np.full((1, 3, 8, 8), np.nan, dtype=np.float32)
        rec = data.ImageRecord("bad.png", bad, (8, 8))
        idx = data.DatasetIndex("unpaired", [rec], [rec])
        with pytest.raises(NumericalError, match="iteration 1"):
            trainer.run_stage1(small_stage1_cfg(batch=1), idx, tmp_path / "x")

    def test_generator_step_leaves_discriminator_untouched(self, corpus):
        from flowsr.degradation import (DegradeGenerator, DegradeNetConfig,
                                        LRDiscriminator, loss_adv_lr, loss_identity,
                                        loss_smooth, stage1_total)
        rng = np.random.default_rng(0)
        net_cfg = DegradeNetConfig(8, 2.0, "float64")
        gen = DegradeGenerator(net_cfg, rng)
        disc = LRDiscriminator(net_cfg, rng)
        d_before = {k: v.copy() for k, v in disc.params.arrays().items()}
        clean = ad.Variable(rng.uniform(-1, 1, (2, 3, 8, 8)))
        real = ad.Variable(rng.uniform(-1, 1, (2, 3, 8, 8)))
        with ad.Tape():
            out = gen.forward(clean)
            _, g_adv = loss_adv_lr(disc, real, out.degraded)
            total = stage1_total(g_adv, loss_identity(out.intermediate, clean),
                                 loss_smooth(out.flow))
            trainer._apply_grads(gen.params, total, trainer.AdamState(), 1e-3)
        for name, arr in disc.params.arrays().items():
            assert arr.tobytes() == d_before[name].tobytes()


class TestStage2Run:
    def test_run_completes_and_logs(self, corpus, tmp_path):
        idx = data.build_index(corpus / "hr", None, "paired_synthetic", 2)
        path = trainer.run_stage2(small_stage2_cfg(), idx, tmp_path / "run")
        ck = ckpt_mod.load_checkpoint(path)
        assert ck.meta["stage"] == "sr"
        assert ck.meta["active_levels"] == 1
        text = (tmp_path / "run" / "loss.tsv").read_text()
        assert "\trec\t" in text and "\tr1\t" in text

    def test_seeded_rerun_bit_identical(self, corpus, tmp_path):
        idx = data.build_index(corpus / "hr", None, "paired_synthetic", 2)
        trainer.run_stage2(small_stage2_cfg(), idx, tmp_path / "a")
        trainer.run_stage2(small_stage2_cfg(), idx, tmp_path / "b")
        assert (tmp_path / "a" / "loss.tsv").read_bytes() == \
            (tmp_path / "b" / "loss.tsv").read_bytes()

    def test_grow_doubles_scale_mid_run(self, corpus, tmp_path):
        idx = data.build_index(corpus / "hr", None, "paired_synthetic", 4)
        cfg = small_stage2_cfg(total_iters=6, grow_steps=(4,), final_scale=4,
                               scale_factor=4)
        path = trainer.run_stage2(cfg, idx, tmp_path / "run")
        ck = ckpt_mod.load_checkpoint(path)
        assert ck.meta["active_levels"] == 2
        rows = [line.split("\t") for line in
                (tmp_path / "run" / "loss.tsv").read_text().strip().splitlines()]
        scales = {int(r[0]): float(r[2]) for r in rows if r[1] == "scale"}
        assert scales[3] == 2.0 and scales[4] == 4.0

    def test_unpaired_mode_uses_cycle(self, corpus, tmp_path):
        idx = data.build_index(corpus / "hr", corpus / "lr", "unpaired", 2)
        cfg = small_stage2_cfg(stage="sr_unpaired", total_iters=4)
        path = trainer.run_stage2(cfg, idx, tmp_path / "run")
        assert path.exists()


class TestCheckpointFile:
    def _roundtrip_material(self, tmp_path):
        rng = np.random.default_rng(7)
        meta = {"stage": "sr", "final_scale": 2, "active_levels": 1, "iteration": 3,
                "config": {"stage": "sr", "total_iters": 4}}
        tensors = {"g/a.w": rng.standard_normal((2, 1, 3, 3)).astype(np.float32),
                   "g/a.b": np.zeros((1, 2, 1, 1), dtype=np.float32)}
        p = tmp_path / "c.sfsr"
        ckpt_mod.save_checkpoint(p, meta, tensors)
        return p, meta, tensors

    def test_save_load_save_byte_identical(self, tmp_path):
        p, meta, tensors = self._roundtrip_material(tmp_path)
        ck = ckpt_mod.load_checkpoint(p)
        p2 = tmp_path / "c2.sfsr"
        ckpt_mod.save_checkpoint(p2, ck.meta, ck.tensors)
        assert p.read_bytes() == p2.read_bytes()

    def test_values_round_trip(self, tmp_path):
        p, meta, tensors = self._roundtrip_material(tmp_path)
        ck = ckpt_mod.load_checkpoint(p)
        assert ck.meta == meta
        for name, arr in tensors.items():
            np.testing.assert_array_equal(ck.tensors[name], arr)

    def test_corrupted_tail_is_checksum_error(self, tmp_path):
        p, _, _ = self._roundtrip_material(tmp_path)
        blob = bytearray(p.read_bytes())
        blob[-6] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            ckpt_mod.load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        p, _, _ = self._roundtrip_material(tmp_path)
        p.write_bytes(p.read_bytes()[:20])
        with pytest.raises(CheckpointError):
            ckpt_mod.load_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.sfsr"
        p.write_bytes(b"JUNKJUNKJUNKJUNK")
        with pytest.raises(CheckpointError):
            ckpt_mod.load_checkpoint(p)

    def test_stage_and_scale_mismatch(self, tmp_path):
        p, meta, _ = self._roundtrip_material(tmp_path)
        ck = ckpt_mod.load_checkpoint(p)
        with pytest.raises(CheckpointError, match="stage mismatch"):
            ckpt_mod.expect_meta(ck.meta, stage="degrade")
        with pytest.raises(CheckpointError, match="scale mismatch"):
            ckpt_mod.expect_meta(ck.meta, stage="sr", final_scale=4)


class TestReload:
    def test_stage1_generator_reproduces_outputs(self, corpus, tmp_path):
        idx = data.build_index(corpus / "hr", corpus / "lr", "unpaired", 2)
        path = trainer.run_stage1(small_stage1_cfg(total_iters=3), idx, tmp_path / "run")
        gen = trainer.load_stage1_generator(ckpt_mod.load_checkpoint(path))
        rng = np.random.default_rng(3)
        x = ad.Variable(rng.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float32))
        a = gen.forward(x).degraded.data
        b = gen.forward(x).degraded.data
        assert a.tobytes() == b.tobytes()

    def test_sr_generator_restores_scale(self, corpus, tmp_path):
        idx = data.build_index(corpus / "hr", None, "paired_synthetic", 4)
        cfg = small_stage2_cfg(total_iters=6, grow_steps=(3,), final_scale=4,
                               scale_factor=4)
        path = trainer.run_stage2(cfg, idx, tmp_path / "run")
        gen = trainer.load_sr_generator(ckpt_mod.load_checkpoint(path))
        out = gen.forward(ad.Variable(np.zeros((1, 3, 4, 4), dtype=np.float32)))
        assert out.shape == (1, 3, 16, 16)
