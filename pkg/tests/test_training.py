import numpy as np
import pytest
import torch

from fsacdm.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fsacdm.config import RunConfig
from fsacdm.diffusion import LossBundle, NoiseSchedule
from fsacdm.numerics import NumericsError, normal_tensor
from fsacdm.training import (LOG_HEADER, Adam, build_model, sample_documents,
                             train, train_step, _weights)


def _cfg(corpus_dir, run_dir, **kw):
    base = dict(seed=0, d_model=8, conv_channels=(2, 3, 4, 4),
                unet_channels=(2, 3, 4), ccam_blocks=1, crossattn_blocks=1,
                T=8, batch=3, num_negatives=1, lam=0.005, lr=1e-3,
                steps=6, checkpoint_every=3,
                corpus_dir=str(corpus_dir), run_dir=str(run_dir))
    base.update(kw)
    return RunConfig(**base).validate()


class TestAdam:
    def _params(self, seed=0):
        return {"w": normal_tensor(seed, "adam-w", (), (4, 3)).clone(),
                "b": normal_tensor(seed, "adam-b", (), (3,)).clone()}

    def _grads(self, params, step):
        for i, k in enumerate(sorted(params)):
            params[k].grad = normal_tensor(1, "adam-g", (step, i),
                                           params[k].shape)

    def test_matches_torch_adam_bitwise(self):
        params = self._params()
        ref_params = {k: v.clone() for k, v in params.items()}
        mine = Adam(params, lr=0.01)
        ref = torch.optim.Adam([ref_params[k] for k in sorted(ref_params)],
                               lr=0.01, betas=(0.9, 0.999), eps=1e-8)
        for step in range(3):
            self._grads(params, step)
            for k in params:
                ref_params[k].grad = params[k].grad.clone()
            mine.step()
            ref.step()
        for k in params:
            assert torch.equal(params[k], ref_params[k]), k

    def test_state_round_trip_resumes_bitwise(self, tmp_path):
        straight = self._params()
        direct = Adam(straight, lr=0.02)
        for step in range(4):
            self._grads(straight, step)
            direct.step()

        resumed = self._params()
        opt = Adam(resumed, lr=0.02)
        for step in range(2):
            self._grads(resumed, step)
            opt.step()
        path = tmp_path / "opt.fsac"
        tensors = dict(resumed)
        tensors.update(opt.state_tensors())
        save_checkpoint(path, tensors)

        data = load_checkpoint(path)
        fresh = {k: torch.from_numpy(data[k].copy()) for k in ("w", "b")}
        opt2 = Adam(fresh, lr=0.02)
        opt2.load_state(data)
        assert opt2.t == 2
        for step in range(2, 4):
            self._grads(fresh, step)
            opt2.step()
        for k in straight:
            assert torch.equal(fresh[k], straight[k]), k

    def test_missing_state_rejected(self):
        opt = Adam(self._params(), lr=0.01)
        with pytest.raises(CheckpointError, match="adam.m.w"):
            opt.load_state({"adam.t": np.array([1.0])})

    def test_state_shape_mismatch_rejected(self):
        params = self._params()
        opt = Adam(params, lr=0.01)
        bad = {f"adam.{kind}.{k}": np.zeros(9)
               for kind in ("m", "v") for k in params}
        bad["adam.t"] = np.array([1.0])
        with pytest.raises(CheckpointError, match="shape"):
            opt.load_state(bad)

    def test_zero_grad_and_none_grads(self):
        params = self._params()
        opt = Adam(params, lr=0.01)
        self._grads(params, 0)
        opt.zero_grad()
        assert all(p.grad is None for p in params.values())
        before = {k: v.clone() for k, v in params.items()}
        opt.step()  # no grads anywhere: parameters must not move
        assert opt.t == 1
        for k in params:
            assert torch.equal(params[k], before[k])


class TestTrainStep:
    def test_deterministic_across_fresh_models(self, small_corpus):
        root, docs, images_np = small_corpus
        images = torch.from_numpy(images_np).to(torch.float64)
        cfg = _cfg(root, "unused")
        sched = NoiseSchedule.linear(cfg.T, cfg.beta_start, cfg.beta_end)
        results = []
        for _ in range(2):
            model = build_model(cfg)
            opt = Adam(model.param_tensors(), lr=cfg.lr)
            bundle = train_step(model, opt, sched, _weights(cfg), cfg,
                                docs, images, step=1)
            results.append((bundle, model))
        a, b = results
        assert torch.equal(a[0].total, b[0].total)
        for pa, pb in zip(a[1].parameters(), b[1].parameters()):
            assert torch.equal(pa, pb)

    def test_batch_larger_than_corpus_rejected(self, small_corpus):
        root, docs, images_np = small_corpus
        images = torch.from_numpy(images_np).to(torch.float64)
        cfg = _cfg(root, "unused", batch=len(docs) + 1, num_negatives=1)
        sched = NoiseSchedule.linear(cfg.T)
        model = build_model(cfg)
        opt = Adam(model.param_tensors(), lr=cfg.lr)
        with pytest.raises(ValueError, match="batch"):
            train_step(model, opt, sched, _weights(cfg), cfg, docs, images, 1)

    def test_nonfinite_loss_raises_before_update(self, small_corpus):
        root, docs, images_np = small_corpus
        images = torch.from_numpy(images_np).to(torch.float64)
        cfg = _cfg(root, "unused")
        sched = NoiseSchedule.linear(cfg.T)
        model = build_model(cfg)
        with torch.no_grad():
            model.unet.out_conv.weight.fill_(float("nan"))
        before = {k: v.detach().clone() for k, v in model.named_parameters()}
        opt = Adam(model.param_tensors(), lr=cfg.lr)
        with pytest.raises(NumericsError, match="step 1"):
            train_step(model, opt, sched, _weights(cfg), cfg, docs, images, 1)
        assert opt.t == 0
        for k, v in model.named_parameters():
            if k == "unet.out_conv.weight":
                continue  # the poisoned tensor is NaN, equal() rejects NaN
            assert torch.equal(v, before[k])
        for m in opt.m.values():
            assert torch.equal(m, torch.zeros_like(m))


class TestTrainLoop:
    def test_writes_log_and_checkpoint(self, small_corpus, tmp_path):
        root, _, _ = small_corpus
        cfg = _cfg(root, tmp_path / "run", steps=2, checkpoint_every=2)
        res = train(cfg)
        assert res.steps_run == 2
        lines = (tmp_path / "run" / "loss_log.csv").read_text().strip().splitlines()
        assert lines[0] == LOG_HEADER
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "1"
        assert len(first) == 1 + len(LossBundle.FIELDS)
        # repr round trip: every logged float parses back exactly
        assert float(first[-1]) == res.first_total
        assert float(lines[-1].split(",")[-1]) == res.last_total
        data = load_checkpoint(res.checkpoint_path)
        assert data["meta.step"][0] == 2.0

    def test_two_runs_are_byte_identical(self, small_corpus, tmp_path):
        root, _, _ = small_corpus
        ra = train(_cfg(root, tmp_path / "a"))
        rb = train(_cfg(root, tmp_path / "b"))
        assert (tmp_path / "a" / "loss_log.csv").read_bytes() == \
               (tmp_path / "b" / "loss_log.csv").read_bytes()
        assert (tmp_path / "a" / "model.fsac").read_bytes() == \
               (tmp_path / "b" / "model.fsac").read_bytes()
        assert ra.last_total == rb.last_total

    def test_resume_continues_bitwise(self, small_corpus, tmp_path):
        root, _, _ = small_corpus
        train(_cfg(root, tmp_path / "full"))

        part_cfg = _cfg(root, tmp_path / "part", steps=3)
        train(part_cfg)
        res = train(_cfg(root, tmp_path / "part"),
                    resume=str(tmp_path / "part" / "model.fsac"))
        assert res.steps_run == 3
        assert (tmp_path / "part" / "model.fsac").read_bytes() == \
               (tmp_path / "full" / "model.fsac").read_bytes()
        assert (tmp_path / "part" / "loss_log.csv").read_text() == \
               (tmp_path / "full" / "loss_log.csv").read_text()

    def test_resume_requires_step_counter(self, small_corpus, tmp_path):
        root, _, _ = small_corpus
        cfg = _cfg(root, tmp_path / "r", steps=2, checkpoint_every=2)
        train(cfg)
        data = load_checkpoint(tmp_path / "r" / "model.fsac")
        del data["meta.step"]
        save_checkpoint(tmp_path / "r" / "model.fsac", data)
        with pytest.raises(CheckpointError, match="meta.step"):
            train(cfg, resume=str(tmp_path / "r" / "model.fsac"))

    def test_lam_zero_logs_zero_negative_terms(self, small_corpus, tmp_path):
        root, _, _ = small_corpus
        cfg = _cfg(root, tmp_path / "z", steps=2, checkpoint_every=2, lam=0.0)
        train(cfg)
        lines = (tmp_path / "z" / "loss_log.csv").read_text().strip().splitlines()
        cols = LOG_HEADER.split(",")
        for line in lines[1:]:
            row = dict(zip(cols, line.split(",")))
            assert row["eubo_neg_term"] == "0.0"
            assert row["l_cl"] == "0.0"


class TestSampleDocuments:
    def test_deterministic_and_in_range(self, small_corpus):
        root, docs, _ = small_corpus
        cfg = _cfg(root, "unused")
        model = build_model(cfg)
        seqs = [docs[0].tokens, docs[1].tokens]
        a = sample_documents(model, cfg, seqs)
        b = sample_documents(model, cfg, seqs)
        assert torch.equal(a, b)
        assert a.shape == (2, 32, 128)
        assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0

    def test_purpose_changes_draws(self, small_corpus):
        root, docs, _ = small_corpus
        cfg = _cfg(root, "unused")
        model = build_model(cfg)
        seqs = [docs[0].tokens]
        a = sample_documents(model, cfg, seqs, purpose="sample")
        b = sample_documents(model, cfg, seqs, purpose="other")
        assert not torch.equal(a, b)
