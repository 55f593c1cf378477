import math

import numpy as np
import numpy.testing as npt
import pytest

from picoweave import tensor as pt
from picoweave.checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, save_checkpoint
from picoweave.corpus import CorpusSpec, generate_corpus
from picoweave.optim import AdamW, lr_at_step
from picoweave.packing import collate_batch
from picoweave.probes import eval_linear_probe, eval_retrieval_probe, held_out_pairs, probe_dataset
from picoweave.tensor import NonFiniteError, Tensor
from picoweave.training import (
    TrainConfig,
    build_batches,
    build_model,
    checkpoint_arrays,
    load_model_checkpoint,
    parse_kv_text,
    run_plain_lm_training,
    run_training,
    structural_config,
)

MICRO = dict(vision_depth=1, lm_depth=1, vision_hidden_dim=32, lm_hidden_dim=32,
             vision_heads=2, lm_heads=2, context_dim=32, proj_dim=16,
             total_steps=10, warmup_steps=2, batch_images=8, max_len=64)


def micro_docs(n=16, seed=0, **kw):
    spec = CorpusSpec(n_documents=n, min_images=1, max_images=2, distractor_rate=0.3, **kw)
    return generate_corpus(spec, seed=seed)


class TestLrSchedule:
    def test_peak_at_warmup_end(self):
        assert lr_at_step(100, 3e-4, 100, 1000) == 3e-4

    def test_zero_at_start_and_min_at_end(self):
        assert lr_at_step(0, 3e-4, 100, 1000) == 0.0
        assert lr_at_step(1000, 3e-4, 100, 1000) == 0.0
        assert lr_at_step(1000, 3e-4, 100, 1000, min_lr=1e-5) == pytest.approx(1e-5, abs=1e-18)

    def test_cosine_midpoint_identity(self):
        peak, mn = 3e-4, 1e-5
        mid = 100 + (1000 - 100) // 2
        lr = lr_at_step(mid, peak, 100, 1000, min_lr=mn)
        assert abs(lr - (peak + mn) / 2) < 1e-10

    def test_out_of_range_is_error(self):
        with pytest.raises(ValueError, match="outside"):
            lr_at_step(1001, 3e-4, 100, 1000)
        with pytest.raises(ValueError, match="outside"):
            lr_at_step(-1, 3e-4, 100, 1000)

    def test_monotone_warmup_then_decay(self):
        lrs = [lr_at_step(s, 1e-3, 50, 200) for s in range(201)]
        assert all(a <= b + 1e-15 for a, b in zip(lrs[:50], lrs[1:51]))
        assert all(a >= b - 1e-15 for a, b in zip(lrs[50:200], lrs[51:201]))


class TestAdamW:
    def param(self, vals):
        return Tensor(np.asarray(vals, dtype=np.float64), requires_grad=True)

    def test_zero_grad_zero_decay_leaves_params(self):
        p = self.param([1.0, -2.0])
        opt = AdamW({"p": p}, weight_decay=0.0)
        p.accumulate_grad(np.zeros(2))
        opt.step(1e-3)
        npt.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step_is_sign_step_of_lr_magnitude(self):
        p = self.param([0.0])
        opt = AdamW({"p": p}, weight_decay=0.0)
        g = np.asarray([0.37])
        p.accumulate_grad(g)
        opt.step(1e-2)
        # zero moments: update = -lr * g / (|g| + eps)
        expected = -1e-2 * g / (np.abs(g) + 1e-8)
        npt.assert_allclose(p.data, expected, rtol=1e-9)

    def test_decay_only_multiplies(self):
        p = self.param([2.0])
        opt = AdamW({"p": p}, weight_decay=0.1)
        p.accumulate_grad(np.zeros(1))
        opt.step(1e-2)
        npt.assert_allclose(p.data, [2.0 * (1 - 1e-2 * 0.1)], rtol=1e-12)

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(0)
        p = self.param(rng.normal(size=5))
        ref = p.data.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        opt = AdamW({"p": p}, beta1=0.9, beta2=0.95, weight_decay=0.1)
        for t in range(1, 6):
            g = np.random.default_rng(t).normal(size=5)
            p.zero_grad()
            p.accumulate_grad(g)
            opt.step(3e-3)
            m = 0.9 * m + 0.1 * g
            v = 0.95 * v + 0.05 * g * g
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.95**t)
            ref = ref - 3e-3 * mh / (np.sqrt(vh) + 1e-8)
            ref = ref - 3e-3 * 0.1 * ref
            npt.assert_allclose(p.data, ref, rtol=1e-12)

    def test_non_finite_grad_names_parameter(self):
        p = self.param([1.0])
        opt = AdamW({"vision.blocks.0.w": p})
        p.accumulate_grad(np.asarray([np.nan]))
        with pytest.raises(NonFiniteError, match="vision.blocks.0.w"):
            opt.step(1e-3)

    def test_skips_parameters_without_grad(self):
        p = self.param([1.0])
        q = self.param([2.0])
        opt = AdamW({"p": p, "q": q}, weight_decay=0.1)
        p.accumulate_grad(np.asarray([0.5]))
        opt.step(1e-3)
        npt.assert_array_equal(q.data, [2.0])  # untouched, no decay either


class TestConfigParsing:
    def test_roundtrip_and_aliases(self):
        text = """
        # comment line
        peak_lr = 5e-4
        lambda = 0.5
        total_steps = 50
        warmup_steps = 5
        gen_specials = false
        packing = window
        """
        cfg = parse_kv_text(text, TrainConfig, {"lambda": "lam"})
        assert cfg.peak_lr == 5e-4 and cfg.lam == 0.5
        assert cfg.gen_specials is False and cfg.packing == "window"

    def test_unknown_key_is_error(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse_kv_text("nonsense = 1", TrainConfig)

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ValueError, match="warmup"):
            TrainConfig(warmup_steps=100, total_steps=50)

    def test_bad_boolean_rejected(self):
        with pytest.raises(ValueError, match="boolean"):
            parse_kv_text("gen_specials = maybe", TrainConfig)


class TestCheckpointContainer:
    def arrays(self):
        rng = np.random.default_rng(0)
        return {"a.w": rng.normal(size=(3, 4)).astype(np.float32),
                "b.v": rng.normal(size=(7,)).astype(np.float64)}

    def test_bit_exact_roundtrip(self, tmp_path):
        path = tmp_path / "c.pwckpt"
        arrays = self.arrays()
        save_checkpoint(path, 5, {"x": 1}, arrays, metrics={"loss": 2.5}, opt_step=9)
        ck = load_checkpoint(path)
        assert ck.step == 5 and ck.opt_step == 9 and ck.metrics["loss"] == 2.5
        for k, v in arrays.items():
            assert ck.arrays[k].dtype == v.dtype
            assert ck.arrays[k].tobytes() == v.tobytes()

    def test_truncated_file_names_section(self, tmp_path):
        path = tmp_path / "c.pwckpt"
        save_checkpoint(path, 1, {}, self.arrays())
        data = path.read_bytes()
        bad = tmp_path / "bad.pwckpt"
        bad.write_bytes(data[:-8])
        with pytest.raises(CheckpointError, match="array section"):
            load_checkpoint(bad)
        bad.write_bytes(data[:10])
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(bad)

    def test_config_mismatch_lists_fields(self, tmp_path):
        path = tmp_path / "c.pwckpt"
        save_checkpoint(path, 1, {"vocab_size": 64, "lm_depth": 4}, self.arrays())
        with pytest.raises(ConfigMismatchError, match="vocab_size"):
            load_checkpoint(path, expect_config={"vocab_size": 128, "lm_depth": 4})


class TestTrainingLoop:
    def test_run_twice_bitwise_identical(self):
        docs = micro_docs()
        cfg = TrainConfig(seed=3, **MICRO)
        lines1 = [r.to_line() for r in run_training(cfg, docs=docs).reports]
        lines2 = [r.to_line() for r in run_training(cfg, docs=docs).reports]
        assert lines1 == lines2

    def test_loss_total_identity_every_step(self):
        docs = micro_docs()
        res = run_training(TrainConfig(seed=1, **MICRO), docs=docs)
        for r in res.reports:
            assert abs(r.L_total - (r.lam * r.L_con + r.L_gen)) <= 1e-6

    def test_checkpoint_roundtrip_reproduces_forward(self, tmp_path):
        docs = micro_docs()
        cfg = TrainConfig(seed=2, out_dir=str(tmp_path), **MICRO)
        res = run_training(cfg, docs=docs)
        model = res.model
        batch = build_batches(docs, cfg)[0]
        before = model(batch).text_logits.data
        loaded, _ = load_model_checkpoint(res.checkpoint_path, cfg)
        after = loaded(batch).text_logits.data
        assert before.tobytes() == after.tobytes()

    def test_checkpoint_refuses_structural_mismatch(self, tmp_path):
        docs = micro_docs()
        cfg = TrainConfig(seed=2, out_dir=str(tmp_path), **MICRO)
        res = run_training(cfg, docs=docs)
        other = dict(MICRO)
        other["lm_hidden_dim"] = 48
        other["context_dim"] = 48
        with pytest.raises(ConfigMismatchError, match="lm_hidden_dim"):
            load_model_checkpoint(res.checkpoint_path, TrainConfig(seed=2, **other))

    def test_metrics_log_file_matches_reports(self, tmp_path):
        docs = micro_docs()
        cfg = TrainConfig(seed=5, out_dir=str(tmp_path), **MICRO)
        res = run_training(cfg, docs=docs)
        lines = open(res.log_path).read().splitlines()
        assert lines == [r.to_line() for r in res.reports]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_cleanly(self):
        docs = micro_docs()
        cfg = TrainConfig(seed=1, peak_lr=1e9, **{**MICRO, "warmup_steps": 0})  # guaranteed blow-up
        res = run_training(cfg, docs=docs)
        assert res.diverged
        assert len(res.reports) < cfg.total_steps


class TestDegenerationToPlainLM:
    def test_text_only_pipeline_equals_plain_lm(self):
        docs = micro_docs(n=12, seed=4, text_only=True)
        cfg = TrainConfig(seed=7, lam=0.1, **MICRO)
        full = run_training(cfg, docs=docs)
        plain = run_plain_lm_training(cfg, docs)
        assert len(full.reports) == len(plain)
        for rep, ref in zip(full.reports, plain):
            assert rep.n_images == 0 and rep.L_con == 0.0
            assert abs(rep.L_total - ref) <= 1e-6


class TestProbes:
    def test_retrieval_needs_two_pairs(self):
        model = build_model(TrainConfig(**MICRO))
        with pytest.raises(ValueError, match="at least 2"):
            eval_retrieval_probe(model, held_out_pairs(16, seed=0)[:1])

    def test_untrained_retrieval_is_chance_level(self):
        model = build_model(TrainConfig(seed=11, **MICRO))
        pairs = held_out_pairs(128, seed=1)
        res = eval_retrieval_probe(model, pairs)
        # 3-sigma binomial band around 1/128
        p = 1.0 / 128
        bound = p + 3 * math.sqrt(p * (1 - p) / 128)
        assert res["TR@1"] <= bound and res["IR@1"] <= bound

    def test_perfect_embeddings_give_recall_one(self):
        model = build_model(TrainConfig(seed=0, **MICRO))
        pairs = held_out_pairs(32, seed=2)

        import picoweave.probes as probes

        n = len(pairs)
        eye = np.eye(n, dtype=np.float32)
        orig_img, orig_txt = probes._image_embeddings, probes._caption_context_embeddings
        probes._image_embeddings = lambda m, px: eye[: px.shape[0]]
        try:
            probes._caption_context_embeddings = lambda m, caps: eye[: len(caps)]
            res = probes.eval_retrieval_probe(model, pairs)
        finally:
            probes._image_embeddings = orig_img
            probes._caption_context_embeddings = orig_txt
        assert res["TR@1"] == 1.0 and res["IR@1"] == 1.0

    def test_classifier_probe_needs_two_classes(self):
        model = build_model(TrainConfig(**MICRO))
        imgs, labels, ncls = probe_dataset(4, "shape", seed=0)
        with pytest.raises(ValueError, match="2 classes"):
            eval_linear_probe(model, imgs[:4], np.zeros(4, dtype=int), ncls)

    def test_probe_learns_linearly_separable_labels(self):
        # realizable case: labels are a linear readout of the frozen latents
        cfg = TrainConfig(seed=9, **MICRO)
        model = build_model(cfg)
        imgs, _, _ = probe_dataset(24, "shape", seed=3)
        with pt.no_grad():
            latents = model.vision.encode(Tensor(imgs.astype(np.float32))).patches.data
        pooled = latents.mean(axis=1)
        w = np.random.default_rng(0).normal(size=(pooled.shape[1], 3))
        scores = pooled @ w
        margin = np.sort(scores, axis=1)
        keep = (margin[:, -1] - margin[:, -2]) > 0.05 * np.abs(margin[:, -1])
        imgs, labels = imgs[keep], scores[keep].argmax(axis=1)
        if np.unique(labels).size < 2:
            pytest.skip("degenerate label draw")
        res = eval_linear_probe(model, imgs, labels, 3, seed=1, steps=400, lr=3e-2, train_frac=0.7)
        assert res["accuracy"] >= 0.9

    def test_untrained_classifier_below_ceiling(self):
        # random projections of these procedural images are themselves
        # informative features, so an untrained encoder sits well above
        # chance; what must hold is a clear gap to perfect separation
        # (trained-vs-untrained gaps are asserted by the acceptance runs)
        cfg = TrainConfig(seed=21, **MICRO)
        model = build_model(cfg)
        imgs, labels, ncls = probe_dataset(16, "shape", seed=7)
        res = eval_linear_probe(model, imgs, labels, ncls, seed=2, steps=60, lr=1e-3)
        assert 1.0 / ncls <= res["accuracy"] <= 0.95


class TestCheckpointArrays:
    def test_moments_saved_alongside_params(self, tmp_path):
        docs = micro_docs()
        cfg = TrainConfig(seed=2, **MICRO)
        model = build_model(cfg)
        opt = AdamW(dict(model.named_parameters()))
        batch = build_batches(docs, cfg)[0]
        out = model(batch)
        bundle = model.compute_losses(batch, out, lam=0.1)
        pt.backward(bundle.total)
        opt.step(1e-4)
        arrays = checkpoint_arrays(model, opt)
        names = set(arrays)
        for pname, _ in model.named_parameters():
            assert pname in names
            assert f"adamw/{pname}.m" in names
            assert f"adamw/{pname}.v" in names
