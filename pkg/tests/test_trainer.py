import json
from pathlib import Path

import numpy as np
import pytest

from lgfd import config as cfgmod
from lgfd.ablation import ARM_SETS, ablate, resolve_arms, run_one, seed_list
from lgfd.data import SceneSpec, generate_dataset, make_batches
from lgfd.losses import alignment_loss, detection_loss, disentangle_levels, similarity_matrix, targets_for, total_loss
from lgfd.model import LGFDModel
from lgfd.tensor import ConfigError, Tensor
from lgfd.trainer import (
    TINY_CATEGORIES,
    TrainConfig,
    TrainingAborted,
    compute_losses,
    grad_check,
    load_model,
    tiny_config,
    train,
)

FIXTURE = Path(__file__).parent / "fixtures" / "fixture.ini"
SPEC = SceneSpec(image_size=32, categories=TINY_CATEGORIES)


def tiny_train(**kw):
    model_kw = kw.pop("model", {})
    kw.setdefault("epochs", 1)
    kw.setdefault("batch_size", 4)
    return TrainConfig(model=tiny_config(**model_kw), **kw)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SPEC, 8)


class TestTrain:
    def test_one_epoch_artifacts(self, tmp_path, data):
        rec = train(tiny_train(), data, data, run_dir=tmp_path, config_text="# cfg\n")
        rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert len(rows) == 1 and rows[0]["epoch"] == 1
        assert set(rows[0]) >= {"l_det", "l_al", "l_ds", "total", "eval"}
        for name in ("ckpt_best.bin", "ckpt_last.bin", "report.json"):
            assert (tmp_path / name).exists()
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["final"] == rows[0]["eval"] == rec.final.to_dict()
        assert "wall_time" not in report and rec.wall_time > 0

    def test_checkpoint_round_trip(self, tmp_path, data):
        rec = train(tiny_train(), data, run_dir=tmp_path)
        model, meta = load_model(tmp_path / "ckpt_last.bin")
        assert meta["epoch"] == 1
        for (ka, a), (kb, b) in zip(sorted(rec.model.state_dict().items()), sorted(model.state_dict().items())):
            assert ka == kb and np.array_equal(a, b)
        x = np.stack([im.pixels for im in data.images[:2]])
        pa = rec.model.forward_infer(Tensor(x))
        pb = model.forward_infer(Tensor(x))
        assert all(np.array_equal(a.data, b.data) for a, b in zip(pa.objectness, pb.objectness))

    def test_replay_bit_identical(self, tmp_path, data):
        cfg = tiny_train(epochs=2)
        train(cfg, data, data, run_dir=tmp_path / "a", config_text="x")
        train(cfg, data, data, run_dir=tmp_path / "b", config_text="x")
        for name in ("metrics.jsonl", "ckpt_last.bin", "ckpt_best.bin", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_baseline_and_full_diverge_after_one_step(self, data):
        one = generate_dataset(SPEC, 4)
        full = train(tiny_train(), one).model.state_dict()
        base = train(tiny_train(model=dict(alpha=0.0, beta=0.0)), one).model.state_dict()
        assert any(not np.array_equal(full[k], base[k]) for k in full)
        # the projector only learns through the alignment loss
        proj = [k for k in full if k.startswith("projector")]
        assert proj and any(not np.array_equal(full[k], base[k]) for k in proj)

    def test_nan_guard(self, data):
        bad = generate_dataset(SPEC, 4)
        bad.images[2].pixels[0, 3, 3] = np.nan
        with pytest.raises(TrainingAborted) as info:
            train(tiny_train(), bad)
        assert info.value.epoch == 1 and info.value.batch == 0

    def test_too_few_images(self):
        with pytest.raises(ValueError, match="fewer than one batch"):
            train(tiny_train(), generate_dataset(SPEC, 3))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            tiny_train(lr=0.0).validate()
        with pytest.raises(ConfigError):
            tiny_train(batch_size=1).validate()
        with pytest.raises(ConfigError):
            tiny_train(momentum=1.0).validate()


class TestObjective:
    def _grads(self, model, batch, name):
        for p in model.parameters():
            p.grad = None
        getattr(compute_losses(model, batch), name).backward()
        return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in model.parameters()]

    def test_total_gradient_is_weighted_sum(self, data):
        model = LGFDModel(tiny_config(alpha=0.7, beta=1.3), seed=3)
        batch = next(make_batches(data, 4, 3, 0, train=True, encoder=model.encoder))
        g = {name: self._grads(model, batch, name) for name in ("l_det", "l_al", "l_ds", "total")}
        for gd, ga, gs, gt in zip(g["l_det"], g["l_al"], g["l_ds"], g["total"]):
            assert np.max(np.abs(gt - (gd + 0.7 * ga + 1.3 * gs)), initial=0.0) <= 1e-10

    def test_total_value(self, data):
        model = LGFDModel(tiny_config(alpha=0.7, beta=1.3), seed=3)
        batch = next(make_batches(data, 4, 3, 0, train=True, encoder=model.encoder))
        b = compute_losses(model, batch)
        assert b.total.item() == pytest.approx(b.l_det.item() + 0.7 * b.l_al.item() + 1.3 * b.l_ds.item(), abs=1e-12)

    def test_zero_weights_keep_terms_out(self, data):
        model = LGFDModel(tiny_config(alpha=0.0, beta=0.0), seed=3)
        batch = next(make_batches(data, 4, 3, 0, train=True, encoder=model.encoder))
        b = compute_losses(model, batch)
        assert b.total.item() == b.l_det.item()
        b.total.backward()
        assert all(p.grad is None or not p.grad.any() for p in (q for proj in model.projectors.values() for q in proj.parameters()))


    def test_beta_zero_leaves_nobj_without_gradient(self, data):
        cfg = tiny_config(beta=0.0)
        model = LGFDModel(cfg, seed=5)
        batch = next(make_batches(data, 4, 5, 0, train=True, encoder=model.encoder))
        out = model.forward_train(batch.images, batch.captions)
        l_det = detection_loss(out.pred, targets_for(out.pred, batch.annotations))
        l_al = alignment_loss(similarity_matrix(out.obj_embed, out.text_embed), cfg.tau)
        total_loss(l_det, l_al, disentangle_levels(out.f_obj, out.f_nobj), cfg.alpha, 0.0).total.backward()
        k = cfg.obj_channels
        for lvl in cfg.decompose_levels:
            g = out.f_ori[lvl].grad
            assert not g[:, k:].any() and g[:, :k].any()

    def test_baseline_total_is_det_only(self, data):
        model = LGFDModel(tiny_config(alpha=0.0, beta=0.0), seed=6)
        batch = next(make_batches(data, 4, 6, 0, train=True, encoder=model.encoder))
        for gd, gt in zip(self._grads(model, batch, "l_det"), self._grads(model, batch, "total")):
            assert np.array_equal(gd, gt)


class TestGradCheck:
    def test_passes_on_tiny_model(self):
        rep = grad_check()
        assert rep.passed, rep.to_dict()
        assert all(n >= 20 for n in rep.checked.values())
        assert rep.head_grad_free_for_al

    def test_symmetric_and_abs_variants(self):
        rep = grad_check(tiny_config(symmetric_al=True, abs_ds=True), count=8)
        assert all(v <= 1e-4 for v in rep.max_rel_err.values()), rep.to_dict()


class TestAblation:
    def test_unknown_arm(self):
        with pytest.raises(ValueError, match="valid arm sets"):
            resolve_arms("table3,nope")

    def test_resolve_dedupes(self):
        arms = resolve_arms("table3,full,baseline")
        assert [a.name for a in arms] == ["baseline", "sfa", "ofd", "full"]

    def test_arm_sets(self):
        assert len(ARM_SETS["table5"]) == 8 and len(ARM_SETS["weights"]) == 9
        assert len(ARM_SETS["ratio"]) == 3 and len(ARM_SETS["table4"]) == 3

    def test_seed_list(self):
        base = cfgmod.load(FIXTURE).with_train(seed=42)
        assert seed_list(base, 3) == [42, 43, 44]

    def test_smoke_table3(self, tmp_path):
        base = cfgmod.load(FIXTURE)
        table = ablate(base, resolve_arms("table3"), seeds=1, cache_dir=tmp_path)
        assert [r.arm for r in table.rows] == ["baseline", "sfa", "ofd", "full"]
        lines = table.to_text().splitlines()
        assert len(lines) == 2 + 4 and lines[0].split()[:2] == ["arm", "setting"]
        d = table.to_dict()["rows"][0]
        assert d["ap50_std"] == 0.0 and len(d["ap50"]) == 1
        assert len(list(tmp_path.glob("*.json"))) == 4

    def test_cache_reused(self, tmp_path):
        cfg = cfgmod.load(FIXTURE)
        first = run_one(cfg, tmp_path)
        (path,) = tmp_path.glob("*.json")
        doc = json.loads(path.read_text())
        doc["final"]["ap50"] = -1.0  # marker proves the second call reads the cache
        path.write_text(json.dumps(doc))
        assert run_one(cfg, tmp_path)["final"]["ap50"] == -1.0
        assert first["config_text"] == cfgmod.dumps(cfg)
