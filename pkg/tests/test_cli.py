import json

import pytest

from latentfuzz.cli import main, summary_line
from latentfuzz.config import DEFAULTS, ConfigError, validate
from latentfuzz.runtime import model_digest


def parse_summary(text):
    line = text.strip().splitlines()[-1]
    return dict(part.split("=", 1) for part in line.split())


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("train", "build-manifold", "profile", "quantize"):
        assert main([cmd, "--out", str(out)]) == 0
    return out


def test_train_accuracy_and_manifest_hash(pipeline, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--out", tmp_path)
    fields = parse_summary(out)
    assert code == 0 and fields["cmd"] == "train"
    assert float(fields["accuracy_train"]) >= 0.95
    assert model_digest(tmp_path / "model/model.json") == model_digest(pipeline / "model/model.json")


def test_summary_line_order():
    assert summary_line("x", {"b": 1, "a": 0.5}) == "cmd=x b=1 a=0.500000"


def test_fuzz_zero_budget_reports_init_only(pipeline, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"paths": {"report": str(tmp_path / "r0")}}))
    code, out, _ = run(capsys, "fuzz", "--config", cfg, "--out", pipeline, "--budget-steps", 0)
    assert code == 0
    report = json.loads((tmp_path / "r0/report.json").read_text())
    assert report["steps"] == 0 and len(report["curve"]) == 1
    assert report["final_coverage"] == report["init_coverage"]
    assert parse_summary(out)["steps"] == "0"


def test_fuzz_strategies_and_report_diff(pipeline, tmp_path, capsys):
    for strategy in ("trajectory", "random"):
        cfg = tmp_path / f"{strategy}.json"
        cfg.write_text(json.dumps({"fuzz": {"strategy": strategy, "budget_steps": 300},
                                   "paths": {"report": str(tmp_path / strategy)}}))
        code, out, _ = run(capsys, "fuzz", "--config", cfg, "--out", pipeline, "--deterministic")
        assert code == 0 and parse_summary(out)["strategy"] == strategy
    code, out, _ = run(capsys, "report", tmp_path / "trajectory", tmp_path / "random")
    assert code == 0
    fields = parse_summary(out)
    assert set(fields) == {"cmd", "d_nc", "d_kmnc", "d_nbc", "d_snac", "d_tknc", "d_faults"}
    code, out, _ = run(capsys, "report", tmp_path / "random")
    assert code == 0 and "nc" in parse_summary(out)


def test_quant_blackbox_and_retrain(pipeline, tmp_path, capsys):
    cfg = tmp_path / "bb.json"
    cfg.write_text(json.dumps({"mode": "blackbox-quant", "oracle": {"kind": "quant"},
                               "fuzz": {"budget_steps": 200}, "paths": {"report": str(tmp_path / "bb")}}))
    code, out, _ = run(capsys, "fuzz", "--config", cfg, "--out", pipeline)
    assert code == 0 and parse_summary(out)["mode"] == "blackbox-quant"
    cfg.write_text(json.dumps({"fuzz": {"budget_steps": 300}, "paths": {"report": str(tmp_path / "g"),
                               "retrained": str(tmp_path / "rt/model.json")}}))
    assert run(capsys, "fuzz", "--config", cfg, "--out", pipeline)[0] == 0
    code, out, _ = run(capsys, "retrain", "--config", cfg, "--out", pipeline)
    fields = parse_summary(out)
    assert code == 0 and int(fields["faults_used"]) >= 0
    assert (tmp_path / "rt/model.json").is_file()


def test_global_flags_before_subcommand(pipeline, capsys, tmp_path):
    code, out, _ = run(capsys, "--seed", 4, "--out", tmp_path, "train")
    assert code == 0 and (tmp_path / "model/model.json").is_file()
    assert model_digest(tmp_path / "model/model.json") != model_digest(pipeline / "model/model.json")


@pytest.mark.parametrize("doc, key", [
    ({"fuzz": {"bogus": 1}}, "fuzz.bogus"),
    ({"trian": {}}, "trian"),
    ({"fuzz": {"try_num": 0}}, "fuzz.try_num"),
    ({"mode": "blackbox-quant"}, "oracle.kind"),
    ({"dataset": {"kind": "idx"}}, "dataset.images"),
])
def test_config_errors_name_the_key(tmp_path, capsys, doc, key):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path)
    assert code == 2 and key in err


def test_malformed_json_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"fuzz": ')
    code, _, err = run(capsys, "fuzz", "--config", cfg)
    assert code == 2 and "malformed JSON" in err
    code, _, err = run(capsys, "fuzz", "--config", tmp_path / "missing.json")
    assert code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    code, _, err = run(capsys, "profile", "--out", tmp_path)
    assert code == 1 and "not found" in err
    code, _, err = run(capsys, "report", tmp_path / "nothing")
    assert code == 1


def test_validate_merges_defaults():
    cfg = validate({"fuzz": {"strategy": "random"}})
    assert cfg["fuzz"]["strategy"] == "random"
    assert cfg["fuzz"]["try_num"] == DEFAULTS["fuzz"]["try_num"]
    with pytest.raises(ConfigError):
        validate([])
