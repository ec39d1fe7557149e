import json
import math

import numpy as np
import pytest

from volnet import checkpoint, cli, data, gradcheck, metrics, ops, train
from volnet.config import ConfigError, RunConfig, dump_config, parse_config
from volnet.model import ModelConfig, build_model, save_model


def write_cfg(path, **kv):
    path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    cfg = tmp_path_factory.mktemp("cfg") / "synth.cfg"
    write_cfg(cfg, tiny="true", data_dir=root, n_per_class=3, n_val_per_class=2, phantom_dims="20, 40, 40")
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    return root


def train_cfg(tmp_path, dataset, name="run", **kv):
    opts = dict(tiny="true", data_dir=dataset, out_dir=tmp_path / name, epochs=2, figures="false")
    opts.update(kv)
    return write_cfg(tmp_path / f"{name}.cfg", **opts)


class TestConfig:
    def test_defaults_are_paper_values(self):
        cfg = RunConfig()
        assert (cfg.lr, cfg.batch_size, cfg.epochs) == (1e-4, 4, 50)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_config("learning_rate = 0.1\n")

    def test_comments_and_types(self):
        cfg = parse_config("# c\nlr = 0.5  # tail\ntiny = yes\nphantom_dims = 8,16,16\nclamp_min=-1\nclamp_max=1\n")
        assert cfg.lr == 0.5 and cfg.tiny is True and tuple(cfg.phantom_dims) == (8, 16, 16)
        assert cfg.clamp_min == -1.0

    def test_dump_round_trip(self):
        cfg = RunConfig(variant="plain", lr=3e-4, tiny=True, phantom_dims=(8, 16, 16))
        assert parse_config(dump_config(cfg)) == cfg

    @pytest.mark.parametrize("text", ["variant = vgg", "lr = -1", "threshold = 2", "workers = 0", "clamp_min = 1",
                                      "batch_size = x", "eval_split = test"])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


class TestExitCodes:
    def test_usage(self, capsys):
        assert cli.main(["frobnicate"]) == 1
        assert cli.main([]) == 1
        assert cli.main(["train", "extra.volf"]) == 1

    def test_config_errors(self, tmp_path):
        assert cli.main(["train", "--config", write_cfg(tmp_path / "c.cfg", bogus=1)]) == 1
        assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 1

    def test_data_error(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.cfg", data_dir=tmp_path / "nowhere", out_dir=tmp_path / "o")
        assert cli.main(["train", "--config", cfg]) == 2
        assert not (tmp_path / "o").exists()

    def test_bad_volume_is_data_error(self, tmp_path):
        (tmp_path / "volumes").mkdir()
        (tmp_path / "volumes" / "a.volf").write_bytes(b"JUNK" + bytes(40))
        (tmp_path / "manifest.csv").write_text("id,path,label,split\na,volumes/a.volf,1,train\n")
        cfg = write_cfg(tmp_path / "c.cfg", tiny="true", data_dir=tmp_path, out_dir=tmp_path / "o", epochs=1)
        assert cli.main(["train", "--config", cfg]) == 2

    def test_nan_loss_exits_3(self, tmp_path, capsys):
        vol = np.zeros((16, 32, 32), dtype=np.float32)
        vol[0, 0, 0] = np.nan
        for i in range(2):
            data.write_volume(tmp_path / "volumes" / f"v{i}.volf", vol)
        (tmp_path / "manifest.csv").write_text(
            "id,path,label,split\nv0,volumes/v0.volf,1,train\nv1,volumes/v1.volf,0,train\n")
        cfg = write_cfg(tmp_path / "c.cfg", tiny="true", data_dir=tmp_path, out_dir=tmp_path / "o", epochs=1)
        assert cli.main(["train", "--config", cfg]) == 3
        assert "non-finite loss" in capsys.readouterr().err


class TestSynthPreprocess:
    def test_synth_counts_and_rerun(self, tmp_path):
        cfg = write_cfg(tmp_path / "s.cfg", data_dir=tmp_path / "d", n_per_class=2, n_val_per_class=0,
                        phantom_dims="8, 16, 16")
        assert cli.main(["synth", "--config", cfg]) == 0
        files = sorted((tmp_path / "d" / "volumes").iterdir())
        before = [f.read_bytes() for f in files]
        assert len(files) == 4
        assert cli.main(["synth", "--config", cfg]) == 0
        assert [f.read_bytes() for f in files] == before

    def test_preprocess_dims(self, tmp_path, dataset):
        cfg = write_cfg(tmp_path / "p.cfg", data_dir=dataset, preprocess_out=tmp_path / "pp")
        assert cli.main(["preprocess", "--config", cfg]) == 0
        out = data.read_manifest(tmp_path / "pp" / "manifest.csv")
        assert len(out) == 10
        for rec in out.records():
            assert data.read_volume(rec.path).shape == (50, 112, 112)


class TestTrainEval:
    def test_log_line_count_and_checkpoints(self, tmp_path, dataset):
        assert cli.main(["train", "--config", train_cfg(tmp_path, dataset)]) == 0
        log = train.read_log(tmp_path / "run" / "train_log.jsonl")
        steps = [e for e in log if e["kind"] == "step"]
        vals = [e for e in log if e["kind"] == "val"]
        assert len(steps) == 2 * math.ceil(6 / 4) and len(vals) == 2
        keys = [(e["epoch"], e.get("step", math.inf)) for e in log]
        assert keys == sorted(keys)
        assert (tmp_path / "run" / "best.vnck").exists() and (tmp_path / "run" / "last.vnck").exists()

    def test_determinism(self, tmp_path, dataset):
        for name in ("a", "b"):
            assert cli.main(["train", "--config", train_cfg(tmp_path, dataset, name)]) == 0
        la = [e["loss"] for e in train.read_log(tmp_path / "a" / "train_log.jsonl") if e["kind"] == "step"]
        lb = [e["loss"] for e in train.read_log(tmp_path / "b" / "train_log.jsonl") if e["kind"] == "step"]
        np.testing.assert_allclose(la, lb, rtol=0, atol=1e-6)
        assert (tmp_path / "a" / "last.vnck").read_bytes() == (tmp_path / "b" / "last.vnck").read_bytes()

    def test_workers_do_not_change_training(self, tmp_path, dataset):
        a = train.train(parse_config(open(train_cfg(tmp_path, dataset, "w1", epochs=1)).read()))
        b = train.train(parse_config(open(train_cfg(tmp_path, dataset, "w3", epochs=1, workers=3)).read()))
        assert a.losses == b.losses

    def test_resume_matches_uninterrupted(self, tmp_path, dataset):
        full = train.train(parse_config(open(train_cfg(tmp_path, dataset, "full", epochs=3)).read()))
        part = parse_config(open(train_cfg(tmp_path, dataset, "part", epochs=1)).read())
        first = train.train(part)
        rest = train.train(part.replace(epochs=3, resume=str(tmp_path / "part" / "last.vnck")))
        assert first.losses + rest.losses == full.losses
        log = train.read_log(tmp_path / "part" / "train_log.jsonl")
        assert [e["epoch"] for e in log if e["kind"] == "val"] == [0, 1, 2]

    def test_eval_report_schema(self, tmp_path, dataset, capsys):
        cfg = train_cfg(tmp_path, dataset, "e", epochs=1)
        assert cli.main(["train", "--config", cfg]) == 0
        capsys.readouterr()
        assert cli.main(["eval", "--config", cfg]) == 0
        text = capsys.readouterr().out
        report = json.loads((tmp_path / "e" / "eval_report.json").read_text())
        assert tuple(report) == metrics.REPORT_KEYS
        assert report["tp"] + report["fp"] + report["fn"] + report["tn"] == 4
        assert all(line.split(": ")[0] in metrics.REPORT_KEYS for line in text.strip().splitlines())

    def test_untrained_model_near_chance(self, tmp_path):
        root = tmp_path / "bal"
        data.generate_phantoms(data.PhantomSpec(dims=(20, 40, 40), window=16), root, 0, 10)
        save_model(tmp_path / "init.vnck", build_model(ModelConfig.tiny("with_mha"), seed=0))
        mp_, _ = train.load_model(tmp_path / "init.vnck")
        recs = data.read_manifest(root / "manifest.csv").records()
        report = train.evaluate_records(mp_, recs, data.Preprocessor(16, (32, 32)))
        assert 0.2 <= report.macro_f1 <= 0.7

    def test_predict_output(self, tmp_path, dataset, capsys):
        cfg = train_cfg(tmp_path, dataset, "pr", epochs=1)
        assert cli.main(["train", "--config", cfg]) == 0
        capsys.readouterr()
        vol = dataset / "volumes" / "val_0001.volf"
        assert cli.main(["predict", str(vol), "--config", cfg]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1
        rid, prob, decision = lines[0].split()
        assert rid == "val_0001" and 0 <= float(prob) <= 1 and decision == str(int(float(prob) >= 0.5))

    def test_eval_missing_checkpoint(self, tmp_path, dataset):
        cfg = train_cfg(tmp_path, dataset, "none")
        assert cli.main(["eval", "--config", cfg]) == 2

    def test_figures_written(self, tmp_path, dataset):
        cfg = train_cfg(tmp_path, dataset, "fig", epochs=1, figures="true")
        assert cli.main(["train", "--config", cfg]) == 0
        assert (tmp_path / "fig" / "loss.png").stat().st_size > 0


class TestGradcheck:
    def test_single_scope(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "g.cfg", gradcheck_scope="conv3d")
        assert cli.main(["gradcheck", "--config", cfg]) == 0
        assert "conv3d" in capsys.readouterr().out

    def test_unknown_scope(self, tmp_path):
        assert cli.main(["gradcheck", "--config", write_cfg(tmp_path / "g.cfg", gradcheck_scope="lstm")]) == 1

    def test_corrupted_backward_is_reported(self, tmp_path, monkeypatch, capsys):
        real = ops.softmax

        def broken(x, axis=-1):
            out = real(x, axis)
            node = ops.current_tape().nodes[out.node_id] if out.node_id is not None else None
            if node is not None:
                good = node.backward
                node.backward = lambda g: tuple(1.1 * gi for gi in good(g))
            return out

        monkeypatch.setattr(ops, "softmax", broken)
        cfg = write_cfg(tmp_path / "g.cfg", gradcheck_scope="softmax")
        assert cli.main(["gradcheck", "--config", cfg]) == 3
        assert "FAIL" in capsys.readouterr().out

    def test_registry_covers_required_kernels(self):
        for name in ("conv3d", "batchnorm3d_train", "softmax", "mha", "basic_block_stride2", "bce_with_logits",
                     "model_tiny_plain", "model_tiny_with_mha"):
            assert name in gradcheck.REGISTRY


class TestCheckpointFormat:
    def test_layout(self, tmp_path):
        checkpoint.save_checkpoint(tmp_path / "c.vnck", {"a.b": np.arange(6, dtype=np.float32).reshape(2, 3)})
        raw = (tmp_path / "c.vnck").read_bytes()
        assert raw[:4] == b"VNCK"
        back = checkpoint.load_checkpoint(tmp_path / "c.vnck")
        assert back["a.b"].tobytes() == np.arange(6, dtype=np.float32).tobytes()

    def test_corrupt(self, tmp_path):
        (tmp_path / "c.vnck").write_bytes(b"VNCK\x01\x00")
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_checkpoint(tmp_path / "c.vnck")


class TestAblationTable:
    def test_columns(self):
        rep = metrics.evaluate([0.9, 0.1], [1, 0])
        rows = [train.AblationRow("plain", rep, 0), train.AblationRow("with_mha", rep, 1)]
        header = train.table_csv(rows).splitlines()[0]
        assert header == "Architecture,Recall,Precision,Macro F1 Score"
        assert train.format_table(rows).splitlines()[2].startswith("ResNet3D-18 + MHA")
