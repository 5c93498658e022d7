import copy
import json
import os

import numpy as np
import pytest

from kanflux import cli
from kanflux import train
from kanflux.cli import ConfigError, load_config, validate_config


def tiny_config(out, epochs=2):
    return {
        "name": "tiny", "experiment": "respiration-linear",
        "encoder": "kan1", "seed": 0,
        "constraint": {"kind": "relu", "lambda_param": 1.0},
        "decoder": {"q10_init": 0.5, "q10_lr_multiplier": 100.0,
                    "rb_range": [0.0, 10.0]},
        "data": {"n": 600, "seed": 0, "split_seed": 0,
                 "ood_feature": "ta", "ood_quantile": 0.2},
        "train": {"lr": 0.01, "epochs": epochs, "patience": 50},
        "out": out,
    }


class TestConfigValidation:
    def test_presets_all_validate(self):
        for name in cli.PRESETS:
            load_config(name)

    def test_unknown_top_level_key(self):
        cfg = tiny_config("/tmp/x")
        cfg["optimzer"] = {}
        with pytest.raises(ConfigError, match="optimzer"):
            validate_config(cfg)

    def test_unknown_nested_key(self):
        cfg = tiny_config("/tmp/x")
        cfg["train"]["learning_rate"] = 0.1
        with pytest.raises(ConfigError):
            validate_config(cfg)
        cfg = tiny_config("/tmp/x")
        cfg["data"]["n_sample"] = 5
        with pytest.raises(ConfigError, match="n_sample"):
            validate_config(cfg)

    def test_pure_forbids_decoder_sections(self):
        cfg = tiny_config("/tmp/x")
        cfg["encoder"] = "pure-nn"
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_unknown_preset_or_path(self):
        with pytest.raises(ConfigError):
            load_config("no-such-preset")

    def test_config_file_round_trip(self, tmp_path):
        cfg = tiny_config(str(tmp_path / "run"))
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        loaded = load_config(str(p))
        assert loaded["experiment"] == "respiration-linear"

    def test_hash_is_order_insensitive(self):
        a = tiny_config("/tmp/x")
        b = dict(reversed(list(a.items())))
        assert cli.config_hash(a) == cli.config_hash(b)


class TestCommands:
    def test_generate_is_deterministic(self, tmp_path):
        cfg = tiny_config(str(tmp_path / "g1"))
        assert cli.cmd_generate(cfg) == 0
        cfg2 = copy.deepcopy(cfg)
        cfg2["out"] = str(tmp_path / "g2")
        assert cli.cmd_generate(cfg2) == 0
        a = (tmp_path / "g1" / "dataset.csv").read_text()
        b = (tmp_path / "g2" / "dataset.csv").read_text()
        assert a == b
        manifest = json.loads((tmp_path / "g1" / "manifest.json")
                              .read_text())
        assert manifest["dataset_meta"]["q10_true"] == 1.5

    def test_soil_manifest_embeds_relationships(self, tmp_path):
        cfg = load_config("soil-kan1")
        cfg["out"] = str(tmp_path / "soil")
        cfg["data"]["n_sites"] = 120
        assert cli.cmd_generate(cfg) == 0
        manifest = json.loads((tmp_path / "soil" / "manifest.json")
                              .read_text())
        rel = manifest["dataset_meta"]["relationships"]
        assert len(rel["active"]) == 4
        assert len(rel["active"][0]) == 10

    def test_train_then_eval_end_to_end(self, tmp_path):
        cfg = tiny_config(str(tmp_path / "run"), epochs=3)
        assert cli.cmd_train(cfg) == 0
        ckpt = tmp_path / "run" / "checkpoint.json"
        assert ckpt.exists()
        assert cli.cmd_eval(cfg) == 0
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert "r2_observed" in report

    def test_eval_of_untrained_model_scores_low(self, tmp_path):
        cfg = tiny_config(str(tmp_path / "run"))
        ds, (tr, va, te) = cli.build_dataset(cfg)
        model = cli.build_model(cfg, ds, tr)
        ckpt = str(tmp_path / "run")
        os.makedirs(ckpt, exist_ok=True)
        train.save_checkpoint(model, os.path.join(ckpt, "checkpoint.json"))
        assert cli.cmd_eval(cfg) == 0
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert report["r2_observed"] < 0.5

    def test_gradcheck_passes_on_fresh_pipeline(self, tmp_path, capsys):
        cfg = tiny_config(str(tmp_path / "run"))
        assert cli.cmd_gradcheck(cfg) == 0
        outp = capsys.readouterr().out
        assert "within tolerance" in outp

    def test_gradcheck_reports_corrupted_gradient(self, tmp_path,
                                                  monkeypatch):
        cfg = tiny_config(str(tmp_path / "run"))
        original = train.total_loss

        def corrupted(model, X, y, aux, tc, with_grads=False):
            out = original(model, X, y, aux, tc, with_grads=with_grads)
            if with_grads:
                model.store.grads["resp.raw_q10"] += 1.0
            return out

        monkeypatch.setattr(train, "total_loss", corrupted)
        assert cli.cmd_gradcheck(cfg) == 1

    def test_curves_writes_csv_and_svg(self, tmp_path):
        cfg = tiny_config(str(tmp_path / "run"), epochs=2)
        assert cli.cmd_train(cfg) == 0
        assert cli.cmd_curves(cfg) == 0
        assert (tmp_path / "run" / "curves.csv").exists()
        assert (tmp_path / "run" / "curves.svg").exists()


class TestMain:
    def test_main_train_and_ablation_flags(self, tmp_path):
        cfg = tiny_config(str(tmp_path / "run"), epochs=2)
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        rc = cli.main(["train", "--config", str(p), "--no-entropy",
                       "--no-l1", "--out", str(tmp_path / "run2")])
        assert rc == 0
        log = json.loads((tmp_path / "run2" / "train_log.json").read_text())
        assert all(r["entropy"] == 0.0 and r["l1"] == 0.0 for r in log)

    def test_main_bad_config_exits_nonzero(self, capsys):
        assert cli.main(["train", "--config", "missing.json"]) == 2
        assert "error" in capsys.readouterr().err

    def test_replay_from_manifest_reproduces_metrics(self, tmp_path):
        cfg = tiny_config(str(tmp_path / "a"), epochs=3)
        assert cli.cmd_train(cfg) == 0
        assert cli.cmd_eval(cfg) == 0
        manifest = tmp_path / "a" / "manifest.json"
        replay = load_config(str(manifest))
        replay["out"] = str(tmp_path / "b")
        assert cli.cmd_train(replay) == 0
        assert cli.cmd_eval(replay) == 0
        a = json.loads((tmp_path / "a" / "report.json").read_text())
        b = json.loads((tmp_path / "b" / "report.json").read_text())
        for key in ("r2_observed", "r2_latent", "mae_observed"):
            assert abs(a[key] - b[key]) <= 1e-10
