import json
from pathlib import Path

import pytest

from app import cli, core, util
from app.cli import Lab
from app.config import load_config
from app.util import NumericError
from tests.conftest import toy_config_text


@pytest.fixture
def toy_file(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(toy_config_text(epochs=1), encoding="utf-8")
    return str(path)


@pytest.fixture
def lab(tmp_path, toy_file):
    lab = Lab(data_dir=tmp_path / "data", out_dir=tmp_path / "runs", workers=2)
    reply = lab.handler({"action": "generate", "params": {"config": toy_file, "scenes": 3}})
    assert reply["exit_code"] == 0, reply
    return lab


def call(lab: Lab, action: str, **params) -> dict:
    return lab.handler({"action": action, "params": params})


def head_of(path: Path) -> tuple[str, list[str]]:
    """The config hash comment and the column header of a written CSV."""
    first, header = path.read_text(encoding="utf-8").splitlines()[:2]
    assert first.startswith("# config_hash=")
    return first.split("=", 1)[1], header.split(",")


def toy_hash(toy_file: str) -> str:
    return load_config(Path(toy_file)).config_hash


#
# Request handling
#


def test_unknown_action(lab):
    reply = call(lab, "fly")
    assert reply["exit_code"] == 2
    assert "unsupported action" in reply["error"]


def test_malformed_request(lab):
    assert lab.handler({"params": {}})["exit_code"] == 2
    assert lab.handler({"action": "generate", "params": []})["exit_code"] == 2


def test_unknown_parameter(lab, toy_file):
    assert call(lab, "generate", config=toy_file, colour="red")["exit_code"] == 2


#
# generate
#


def test_generate_writes_a_corpus(lab):
    manifest = json.loads((lab.data_dir / "manifest.json").read_text(encoding="utf-8"))
    assert [entry["split"] for entry in manifest["scenes"]] == ["train", "train", "val"]


def test_generate_refuses_a_non_empty_directory(lab, toy_file):
    assert call(lab, "generate", config=toy_file, scenes=3)["exit_code"] == 2
    assert call(lab, "generate", config=toy_file, scenes=3, force=True)["exit_code"] == 0


def test_generate_needs_a_scene(lab, toy_file, tmp_path):
    assert call(lab, "generate", config=toy_file, scenes=0, out=str(tmp_path / "empty"))["exit_code"] == 2


def test_generate_is_reproducible(lab, toy_file, tmp_path):
    call(lab, "generate", config=toy_file, scenes=3, out=str(tmp_path / "again"))
    first = (lab.data_dir / "manifest.json").read_bytes()
    second = (tmp_path / "again" / "manifest.json").read_bytes()
    assert first == second
    other = call(lab, "generate", config=toy_file, seed=9, scenes=3, out=str(tmp_path / "other"))
    assert other["exit_code"] == 0
    assert (tmp_path / "other" / "manifest.json").read_bytes() != first


#
# train and eval
#


def test_train_then_eval(lab, toy_file, tmp_path):
    reply = call(lab, "train", config=toy_file, out=str(tmp_path / "train"))
    assert reply["exit_code"] == 0, reply
    checkpoint = tmp_path / "train" / "checkpoint.bin"
    assert checkpoint.exists()
    assert (tmp_path / "train" / "run_record.json").exists()
    config_hash, rows = util.read_csv(tmp_path / "train" / "losses.csv")
    assert len(rows) == 1
    assert config_hash == load_config(tmp_path / "toy.cfg").config_hash

    assert call(lab, "train", config=toy_file, out=str(tmp_path / "train"))["exit_code"] == 2

    reply = call(lab, "eval", config=toy_file, checkpoint=str(checkpoint), out=str(tmp_path / "eval"))
    assert reply["exit_code"] == 0, reply
    assert set(reply["result"]) == {"intermediate", "no_fusion", "late_fusion"}
    assert head_of(tmp_path / "eval" / "metrics.csv") == (toy_hash(toy_file), cli.METRIC_HEADER)
    _, metrics = util.read_csv(tmp_path / "eval" / "metrics.csv")
    assert [row["mode"] for row in metrics] == ["intermediate", "no_fusion", "late_fusion"]
    assert all(row["setting"] == "perfect" for row in metrics)
    for row in metrics:
        assert float(row["ap50"]) == pytest.approx(reply["result"][row["mode"]]["ap50"], abs=1e-6)
        assert int(row["params"]) > 0
    assert head_of(tmp_path / "eval" / "predictions.csv")[1] == cli.PREDICTION_HEADER
    _, links = util.read_csv(tmp_path / "eval" / "link_budget.csv")
    assert len(links) == 2
    assert all(row["latency_ms"] == "0.000000" for row in links)


def test_eval_is_deterministic(lab, toy_file, tmp_path):
    for name in ("a", "b"):
        reply = call(lab, "eval", config=toy_file, out=str(tmp_path / name), noise="simple")
        assert reply["exit_code"] == 0, reply
    for table in ("metrics.csv", "predictions.csv", "link_budget.csv"):
        assert (tmp_path / "a" / table).read_text() == (tmp_path / "b" / table).read_text()


def test_fine_tuning_needs_a_base(lab, tmp_path):
    path = tmp_path / "fine.cfg"
    path.write_text(toy_config_text(training_type="fine-tuned"), encoding="utf-8")
    assert call(lab, "train", config=str(path), out=str(tmp_path / "ft"))["exit_code"] == 2


def test_numeric_failure_exit_code(lab, toy_file, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericError("non-finite logits")

    monkeypatch.setattr(core, "evaluate", explode)
    reply = call(lab, "eval", config=toy_file)
    assert reply["exit_code"] == 3
    assert "non-finite" in reply["error"]


#
# sweep, ablate, export
#


def test_sweep(lab, toy_file, tmp_path):
    reply = call(lab, "sweep", axis="latency", values=[0, 100], config=toy_file, out=str(tmp_path / "sw"))
    assert reply["exit_code"] == 0, reply
    assert [point[0] for point in reply["result"]["points"]] == [0.0, 100.0]
    _, rows = util.read_csv(tmp_path / "sw" / "sweep_latency.csv")
    assert [row["value"] for row in rows] == ["0.0", "100.0", "normal"]


def test_sweep_subset_rows_average_their_points(lab, toy_file, tmp_path):
    reply = call(lab, "sweep", axis="latency", values=[100, 300, 500], config=toy_file, out=str(tmp_path / "sw"))
    assert reply["exit_code"] == 0, reply
    path = tmp_path / "sw" / "sweep_latency.csv"
    assert head_of(path) == (toy_hash(toy_file), ["axis", "value", "ap50", "ap70"])
    _, rows = util.read_csv(path)
    assert [row["value"] for row in rows] == ["100.0", "300.0", "500.0", "normal", "severe"]
    assert all(row["axis"] == "latency" for row in rows)
    ap50 = {row["value"]: float(row["ap50"]) for row in rows}
    assert ap50["normal"] == pytest.approx(ap50["100.0"], abs=1e-6)
    assert ap50["severe"] == pytest.approx((ap50["300.0"] + ap50["500.0"]) / 2, abs=2e-6)



def test_sweep_rejects_unknown_axis(lab, toy_file):
    assert call(lab, "sweep", axis="weather", config=toy_file)["exit_code"] == 2
    assert call(lab, "sweep", axis="heading", values=[], config=toy_file)["exit_code"] == 2


def test_ablate(lab, toy_file, tmp_path):
    reply = call(lab, "ablate", config=toy_file, out=str(tmp_path / "ab"))
    assert reply["exit_code"] == 0, reply
    assert reply["result"] == {"variants": [label for label, _ in cli.ABLATIONS], "skipped": []}
    path = tmp_path / "ab" / "ablation.csv"
    assert head_of(path) == (toy_hash(toy_file), ["variant", "ap50", "ap70", "params", "flops"])
    _, rows = util.read_csv(path)
    params = {row["variant"]: int(row["params"]) for row in rows}
    assert params["ccl x1"] > params["ParCon"] > params["ccl x8"]
    assert all(0.0 <= float(row["ap50"]) <= 1.0 for row in rows)


def test_ablate_marks_global_attention_skipped_on_large_grids(lab, tmp_path):
    path = tmp_path / "capped.cfg"
    path.write_text(toy_config_text(epochs=1, global_attention_max_cells=10), encoding="utf-8")
    reply = call(lab, "ablate", config=str(path), out=str(tmp_path / "ab"))
    assert reply["exit_code"] == 0, reply
    assert reply["result"]["skipped"] == ["S-Att global"]
    _, rows = util.read_csv(tmp_path / "ab" / "ablation.csv")
    assert [row["variant"] for row in rows] == [label for label, _ in cli.ABLATIONS]
    marked = {row["variant"]: row for row in rows if row["ap50"] == "skipped"}
    assert list(marked) == ["S-Att global"]
    assert marked["S-Att global"]["ap70"] == "skipped"
    assert int(marked["S-Att global"]["flops"]) > 0



def test_export_ccl_sections(lab, toy_file, tmp_path):
    reply = call(lab, "export", what="ccl-sections", config=toy_file, out=str(tmp_path / "ex"))
    assert reply["exit_code"] == 0, reply
    path = tmp_path / "ex" / "ccl-sections.csv"
    header = ["depth", "section1", "section2", "section3", "section4"]
    assert head_of(path) == (toy_hash(toy_file), header)
    _, rows = util.read_csv(path)
    assert [row["depth"] for row in rows] == ["1", "2"]
    assert all(float(row[f"section{i}"]) > 0.0 for row in rows for i in range(1, 5))



def test_export_attention(lab, toy_file, tmp_path):
    reply = call(lab, "export", what="attention", config=toy_file, out=str(tmp_path / "ex"))
    assert reply["exit_code"] == 0, reply
    assert reply["result"]["rows"] == 2 * 3 * 3
    path = tmp_path / "ex" / "attention.csv"
    assert head_of(path) == (toy_hash(toy_file), ["depth", "query_slot", "key_slot", "weight"])
    _, rows = util.read_csv(path)
    totals = {}
    for row in rows:
        key = (row["depth"], row["query_slot"])
        totals[key] = totals.get(key, 0.0) + float(row["weight"])
    assert len(totals) == 2 * 3
    assert all(total == pytest.approx(1.0, abs=1e-5) for total in totals.values())



def test_export_unknown_target(lab, toy_file):
    assert call(lab, "export", what="weights", config=toy_file)["exit_code"] == 2


#
# Command line
#


def test_main_returns_exit_codes(toy_file, tmp_path, capsys):
    out = str(tmp_path / "corpus")
    assert cli.main(["generate", "--config", toy_file, "--scenes", "2", "--out", out]) == 0
    assert json.loads(capsys.readouterr().out) == {"out": out, "scenes": 2}
    assert cli.main(["generate", "--config", toy_file, "--scenes", "2", "--out", out]) == 2
    assert "not empty" in capsys.readouterr().err


def test_parser_rejects_unknown_noise():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["eval", "--noise", "loud"])
