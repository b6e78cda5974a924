import hashlib
import json
import os

import pytest

from encprop.cli import main

TINY_MODEL = {"stage_widths": [16, 8], "bottleneck_width": 8, "time_embed_dim": 8, "seed": 0}
NINE_KEY_PLAN = [50, 49, 48, 47, 45, 40, 35, 25, 15]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {
        "dataset": {"kind": "gmm8", "n": 1000, "seed": 1},
        "model": TINY_MODEL,
        "train": {"steps": 200, "batch_size": 64, "seed": 0},
        "out_dir": str(d),
    }
    cfg_path = d / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return d


def write_cfg(d, name, payload):
    path = d / name
    path.write_text(json.dumps(payload))
    return str(path)


def sha256(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestTrainCommand:
    def test_outputs_exist(self, workdir):
        assert (workdir / "checkpoint.json").exists()
        loss_lines = (workdir / "loss.csv").read_text().splitlines()
        assert loss_lines[0] == "step,loss"
        assert len(loss_lines) == 201

    def test_missing_config_names_path(self, capsys):
        code = main(["train", "--config", "/no/such/config.json"])
        assert code == 2
        assert "/no/such/config.json" in capsys.readouterr().err

    def test_rerun_reproduces_checkpoint_hash(self, workdir, tmp_path):
        cfg = {
            "dataset": {"kind": "gmm8", "n": 1000, "seed": 1},
            "model": TINY_MODEL,
            "train": {"steps": 200, "batch_size": 64, "seed": 0},
            "out_dir": str(tmp_path),
        }
        cfg_path = write_cfg(tmp_path, "train.json", cfg)
        assert main(["train", "--config", cfg_path]) == 0
        assert sha256(tmp_path / "checkpoint.json") == sha256(workdir / "checkpoint.json")


class TestSampleCommand:
    def _cfg(self, workdir, out, **over):
        cfg = {
            "checkpoint": str(workdir / "checkpoint.json"),
            "strategy": "encoder_prop",
            "plan": {"kind": "keys", "keys": NINE_KEY_PLAN},
            "seed": 5,
            "samples": 64,
            "out_dir": str(out),
        }
        cfg.update(over)
        return cfg

    def test_degenerate_plan_matches_full_byte_for_byte(self, workdir, tmp_path):
        all_keys = list(range(50, 0, -1))
        d1, d2 = tmp_path / "full", tmp_path / "prop"
        c1 = write_cfg(tmp_path, "full.json", self._cfg(workdir, d1, strategy="full"))
        c2 = write_cfg(
            tmp_path,
            "prop.json",
            self._cfg(workdir, d2, strategy="encoder_prop", plan={"kind": "keys", "keys": all_keys}),
        )
        assert main(["sample", "--config", c1]) == 0
        assert main(["sample", "--config", c2]) == 0
        assert sha256(d1 / "samples.csv") == sha256(d2 / "samples.csv")

    def test_default_plan_accepted_verbatim(self, workdir, tmp_path):
        cfg = write_cfg(tmp_path, "s.json", self._cfg(workdir, tmp_path))
        assert main(["sample", "--config", cfg]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["plan"]["key_steps"] == NINE_KEY_PLAN
        assert manifest["encoder_calls"] == 9
        assert manifest["decoder_calls"] == 50

    def test_worker_count_does_not_change_samples(self, workdir, tmp_path):
        d1, d2 = tmp_path / "w1", tmp_path / "w8"
        c1 = write_cfg(tmp_path, "w1.json", self._cfg(workdir, d1, strategy="encoder_prop_parallel", workers=1))
        c2 = write_cfg(tmp_path, "w8.json", self._cfg(workdir, d2, strategy="encoder_prop_parallel", workers=8))
        assert main(["sample", "--config", c1]) == 0
        assert main(["sample", "--config", c2]) == 0
        assert sha256(d1 / "samples.csv") == sha256(d2 / "samples.csv")

    def test_plan_schedule_mismatch_rejected(self, workdir, tmp_path, capsys):
        cfg = self._cfg(workdir, tmp_path, plan={"kind": "keys", "keys": [40, 20]})
        code = main(["sample", "--config", write_cfg(tmp_path, "bad.json", cfg)])
        assert code == 2

    def test_unknown_field_rejected(self, workdir, tmp_path):
        cfg = self._cfg(workdir, tmp_path)
        cfg["definitely_not_a_field"] = True
        code = main(["sample", "--config", write_cfg(tmp_path, "unk.json", cfg)])
        assert code == 2

    def test_inject_accepts_default_constants(self, workdir, tmp_path):
        cfg = self._cfg(workdir, tmp_path, inject={"alpha": 0.003, "tau": 25})
        assert main(["sample", "--config", write_cfg(tmp_path, "inj.json", cfg)]) == 0


class TestAnalyzeCommand:
    def test_row_counts_and_determinism(self, workdir, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        base = {"checkpoint": str(workdir / "checkpoint.json"), "samples": 32, "seed": 2}
        c1 = write_cfg(tmp_path, "a1.json", dict(base, out_dir=str(d1)))
        c2 = write_cfg(tmp_path, "a2.json", dict(base, out_dir=str(d2)))
        assert main(["analyze", "--config", c1]) == 0
        assert main(["analyze", "--config", c2]) == 0
        blocks = 2 * 2 + 1  # 2 stages: enc0, enc1, bot, dec0, dec1
        deltas = [ln for ln in (d1 / "deltas.csv").read_text().splitlines() if not ln.startswith("#")]
        norms = [ln for ln in (d1 / "norms.csv").read_text().splitlines() if not ln.startswith("#")]
        assert len(deltas) - 1 == blocks * 49
        assert len(norms) - 1 == blocks
        assert sha256(d1 / "deltas.csv") == sha256(d2 / "deltas.csv")
        assert sha256(d1 / "norms.csv") == sha256(d2 / "norms.csv")


class TestBenchCommand:
    def test_bench_outputs_and_flops_agree_with_analysis(self, workdir, tmp_path):
        from encprop import analysis, propagation, unet

        cfg = {
            "checkpoint": str(workdir / "checkpoint.json"),
            "plan": {"kind": "keys", "keys": NINE_KEY_PLAN},
            "samples": 64,
            "repetitions": 2,
            "workers": 2,
            "out_dir": str(tmp_path),
        }
        assert main(["bench", "--config", write_cfg(tmp_path, "b.json", cfg)]) == 0
        rows = (tmp_path / "bench.csv").read_text().splitlines()
        assert rows[0] == "strategy,median_ns,flops_total,savings_fraction"
        params = unet.load_params(str(workdir / "checkpoint.json"))
        plan = propagation.nonuniform_plan(50, NINE_KEY_PLAN)
        by_strategy = {r.split(",")[0]: r.split(",") for r in rows[1:]}
        for strategy in ("full", "encoder_prop", "encoder_prop_parallel"):
            rep = analysis.flops_report(params.cfg, plan, strategy)
            assert int(by_strategy[strategy][2]) == rep.total_macs
            assert float(by_strategy[strategy][3]) == rep.savings_fraction

    def test_single_repetition_warns_in_manifest(self, workdir, tmp_path):
        cfg = {
            "checkpoint": str(workdir / "checkpoint.json"),
            "samples": 32,
            "repetitions": 1,
            "out_dir": str(tmp_path),
        }
        assert main(["bench", "--config", write_cfg(tmp_path, "b1.json", cfg)]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["warnings"]


class TestCompareCommand:
    def test_rows_cover_cases_and_full_is_reference(self, workdir, tmp_path):
        cfg = {
            "checkpoint": str(workdir / "checkpoint.json"),
            "dataset": {"kind": "gmm8", "n": 400, "seed": 77},
            "cases": [
                {"strategy": "full"},
                {"strategy": "encoder_prop"},
                {"strategy": "both_prop", "plan": {"kind": "keys", "keys": [50, 35, 20]}},
            ],
            "samples": 400,
            "out_dir": str(tmp_path),
        }
        assert main(["compare", "--config", write_cfg(tmp_path, "c.json", cfg)]) == 0
        rows = (tmp_path / "compare.csv").read_text().splitlines()
        assert rows[0] == "strategy,plan,energy_distance,savings_fraction,wall_ns"
        assert len(rows) == 4
        assert rows[1].startswith("full,")
        for row in rows[1:]:
            float(row.split(",")[2])  # parses


class TestSuggestedPlan:
    def test_analyze_then_suggest_round_trip(self, workdir, tmp_path):
        ana = {
            "checkpoint": str(workdir / "checkpoint.json"),
            "samples": 32,
            "out_dir": str(tmp_path),
        }
        assert main(["analyze", "--config", write_cfg(tmp_path, "ana.json", ana)]) == 0
        cfg = {
            "checkpoint": str(workdir / "checkpoint.json"),
            "strategy": "encoder_prop",
            "plan": {"kind": "suggest", "budget": 9, "deltas_csv": str(tmp_path / "deltas.csv")},
            "samples": 32,
            "out_dir": str(tmp_path),
        }
        assert main(["sample", "--config", write_cfg(tmp_path, "sugg.json", cfg)]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        keys = manifest["plan"]["key_steps"]
        assert len(keys) == 9
        assert keys[0] == 50
        assert manifest["encoder_calls"] == 9


class TestOutputDirResolution:
    def test_env_var_fallback(self, workdir, tmp_path, monkeypatch):
        env_dir = tmp_path / "envout"
        monkeypatch.setenv("ENCPROP_OUT_DIR", str(env_dir))
        cfg = {
            "checkpoint": str(workdir / "checkpoint.json"),
            "strategy": "full",
            "samples": 16,
        }
        assert main(["sample", "--config", write_cfg(tmp_path, "e.json", cfg)]) == 0
        assert (env_dir / "samples.csv").exists()

    def test_flag_overrides_config(self, workdir, tmp_path):
        flag_dir = tmp_path / "flagout"
        cfg = {
            "checkpoint": str(workdir / "checkpoint.json"),
            "strategy": "full",
            "samples": 16,
            "out_dir": str(tmp_path / "cfgout"),
        }
        path = write_cfg(tmp_path, "f.json", cfg)
        assert main(["sample", "--config", path, "--out", str(flag_dir)]) == 0
        assert (flag_dir / "samples.csv").exists()
        assert not (tmp_path / "cfgout").exists()
