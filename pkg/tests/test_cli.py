import csv
import io
import json

import numpy as np
import pytest
import yaml

from fctkit import cli
from fctkit.config import (
    SHIPPED,
    ExperimentConfig,
    config_from_dict,
    dump_config,
    load_config,
    shipped_config_path,
)
from fctkit.errors import ConfigError
from fctkit.persistence import load_gallery
from fctkit.reports import emit_report, group_csv, reports_csv
from fctkit.retrieval import RetrievalReport

STAGE = {"epochs": 3, "batch_size": 64, "lr": 3.0e-3, "warmup_epochs": 1, "bn_freeze_epoch": None}
TINY = {
    "name": "tiny",
    "domain": {"sigma": 0.4},
    "data": {"train_per_cell": 32, "eval_per_cell": 4},
    "embedder": {"hidden": 16, "depth": 1, "d_old": 4, "d_new": 4},
    "side_info": {"d_side": 3, "hidden": 16},
    "transformation": {"width_multiplier": "1/8", "proj_width": 8, "mixer_width": 64},
    "train": {"old_embedder": STAGE, "new_embedder": STAGE, "side_info": STAGE,
              "transformation": dict(STAGE, bn_freeze_epoch=2)},
    "costs": {"device_count": 3, "records_per_device": 5},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


class TestConfig:
    def test_defaults_validate(self):
        ExperimentConfig().validate()

    @pytest.mark.parametrize("name", SHIPPED)
    def test_shipped_configs_load(self, name):
        cfg = load_config(shipped_config_path(name))
        assert cfg.name == name

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="typo"):
            config_from_dict({"typo": 1})
        with pytest.raises(ConfigError, match="sigmaa"):
            config_from_dict({"domain": {"sigmaa": 0.1}})
        with pytest.raises(ConfigError, match="lrr"):
            config_from_dict({"train": {"transformation": {"lrr": 1}}})

    @pytest.mark.parametrize("raw", [
        {"domain": {"dim": 4}},
        {"data": {"old_shapes": [7]}},
        {"data": {"old_shapes": []}},
        {"transformation": {"width_multiplier": "1/3"}},
        {"side_info": {"kind": "banana"}},
        {"train": {"side_info": {"epochs": 4, "warmup_epochs": 4}}},
        {"train": {"side_info": {"loss": "l1"}}},
        {"eval": {"ks": [0]}},
        {"seed": "abc"},
        {"eval": {"cka": "yes"}},
        {"domain": []},
    ])
    def test_invalid(self, raw):
        with pytest.raises(ConfigError):
            config_from_dict(raw)

    def test_dump_round_trip(self):
        cfg = config_from_dict(TINY)
        assert config_from_dict(yaml.safe_load(dump_config(cfg))) == cfg

    def test_run_seed_shifts_stage_seeds(self):
        cfg = config_from_dict(TINY)
        shifted = cfg.with_overrides(seed=2)
        assert shifted.stage_seed(7) == 2007 and cfg.stage_seed(7) == 7
        assert shifted.train.old_embedder.to_train_config(2).seed == cfg.train.old_embedder.seed + 2000


class TestReports:
    def row(self, case="new/new", cka=None):
        return RetrievalReport(case, {1: 0.5, 5: 0.123456}, 1 / 3, {"g": {1: 0.25, 5: 1.0}}, cka)

    def test_single_row_csv(self, tmp_path):
        emit_report([self.row()], tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines == ["case,cmc_top1,cmc_top5,map,cka", "new/new,0.5000,0.1235,0.3333,"]

    def test_cka_column(self):
        assert reports_csv([self.row(cka=0.0)]).splitlines()[1].endswith(",0.0000")

    def test_group_rows(self):
        assert group_csv([self.row(), self.row("old/old")]).splitlines()[1:] == [
            "new/new,g,0.2500,1.0000", "old/old,g,0.2500,1.0000"]

    def test_json(self, tmp_path):
        emit_report([self.row()], tmp_path / "r.json", fmt="json")
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["reports"][0]["cmc"] == {"1": 0.5, "5": 0.123456}

    def test_bad_format(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([self.row()], tmp_path / "r.x", fmt="xml")


class TestCli:
    def test_dry_run_writes_nothing(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["run", "--config", str(tiny_config), "--out", str(out), "--dry-run"]) == 0
        assert "train-transform" in capsys.readouterr().out
        assert not out.exists()

    def test_usage_errors_exit_1(self, tiny_config, tmp_path):
        assert cli.main([]) == 1
        assert cli.main(["bogus"]) == 1
        assert cli.main(["train-embedder", "--config", str(tiny_config), "--role", "mid"]) == 1
        assert cli.main(["run", "--seed", "x"]) == 1

    def test_config_errors_exit_1(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("domian: {}\n")
        assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        bad.write_text("domain: [\n")
        assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert cli.main(["run", "--config", "no_such_config"]) == 1
        assert not (tmp_path / "o").exists()

    def test_runtime_error_exit_2_no_partial_output(self, tiny_config, tmp_path):
        out = tmp_path / "out"
        # the transform stage needs embedders that were never trained
        assert cli.main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
        before = sorted(p.name for p in out.iterdir())
        assert cli.main(["train-transform", "--config", str(tiny_config), "--out", str(out)]) == 2
        assert sorted(p.name for p in out.iterdir()) == before
        assert not list(tmp_path.glob(".out-staging-*"))

    def test_stages_by_hand_match_run(self, tiny_config, tmp_path):
        by_hand, whole = tmp_path / "a", tmp_path / "b"
        args = ["--config", str(tiny_config), "--out", str(by_hand)]
        for cmd in (["gen-data"], ["train-embedder", "--role", "old"], ["train-side-info"],
                    ["train-embedder", "--role", "new"], ["train-transform"], ["eval"]):
            assert cli.main(cmd + args) == 0
        assert cli.main(["run", "--config", str(tiny_config), "--out", str(whole)]) == 0
        assert (by_hand / "report.csv").read_bytes() == (whole / "report.csv").read_bytes()
        rows = list(csv.reader(io.StringIO((whole / "report.csv").read_text())))
        assert rows[0] == ["case", "cmc_top1", "cmc_top5", "map", "cka"]
        cases = [r[0] for r in rows[1:]]
        assert cases == ["old/old", "new/new", "new/old", "new/h(old,psi)", "new/h(old,0)", "h/h"]
        for name in ("report.json", "report_groups.csv", "fig_retrieval.png", "fig_training.png",
                     "costs.csv", "fig_costs.png", "gallery_v1.fctg", "gallery_v2.fctg"):
            assert (whole / name).exists()

    def test_update_command(self, tiny_config, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["run", "--config", str(tiny_config), "--out", str(out)]) == 0
        dst = tmp_path / "upd"
        code = cli.main(["update", "--config", str(tiny_config), "--out", str(dst),
                         "--gallery", str(out / "gallery_v1.fctg"), "--transform", str(out / "h.npz")])
        assert code == 0
        moved, ref = load_gallery(dst / "gallery_v2.fctg"), load_gallery(out / "gallery_v2.fctg")
        assert moved.equals(ref) and moved.model_version == 2
        # the same plan cannot be reapplied to its own output at a mismatched layout
        code = cli.main(["update", "--config", str(tiny_config), "--out", str(tmp_path / "again"),
                         "--gallery", str(dst / "gallery_v2.fctg"), "--transform", str(out / "h.npz")])
        assert code == 2 and not (tmp_path / "again").exists()

    def test_corrupt_gallery_exit_2(self, tiny_config, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["run", "--config", str(tiny_config), "--out", str(out)]) == 0
        blob = bytearray((out / "gallery_v1.fctg").read_bytes())
        blob[30] ^= 0xFF
        (out / "bad.fctg").write_bytes(bytes(blob))
        assert cli.main(["update", "--config", str(tiny_config), "--out", str(tmp_path / "u"),
                         "--gallery", str(out / "bad.fctg"), "--transform", str(out / "h.npz")]) == 2

    def test_simulate_costs(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "c"
        assert cli.main(["simulate-costs", "--config", str(tiny_config), "--out", str(out),
                         "--devices", "0"]) == 0
        assert "FctTransform" in capsys.readouterr().out
        rows = (out / "costs.csv").read_text().splitlines()
        assert rows[0].split(",")[0] == "strategy" and len(rows) == 5
        assert cli.main(["simulate-costs", "--config", str(tiny_config), "--out", str(out),
                         "--devices", "-1"]) == 1

    def test_seed_changes_results(self, tiny_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["gen-data", "--config", str(tiny_config), "--out", str(a)]) == 0
        assert cli.main(["gen-data", "--config", str(tiny_config), "--out", str(b), "--seed", "1"]) == 0
        with np.load(a / "data.npz") as za, np.load(b / "data.npz") as zb:
            assert not np.array_equal(za["eval_inputs"], zb["eval_inputs"])
