import json

import pytest

from mstl import cli
from mstl.config import bundled_config, load_config, parse_config
from mstl.errors import ConfigError, ResolutionError
from mstl.metrics import compare_arms
from mstl.report import read_report

from conftest import TINY


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*"))


# -- config parsing ------------------------------------------------------------------------


def test_bundled_configs_parse():
    for name in ("synthetic.yaml", "synthetic_soft.yaml"):
        cfg = load_config(bundled_config(name))
        assert cfg.plan.stages[0].name == "source" and cfg.plan.target.name == "target"
        assert cfg.plan.baseline in cfg.plan.arms
    cfg = load_config(bundled_config())
    assert cfg.synthetic.shifts == {"source": 1.0, "transition": 0.5, "target": 0.0}
    assert cfg.plan.arms == {"mstl": ["source", "transition", "target"], "baseline": ["source", "target"]}
    assert cfg.plan.target.dropout_before_output == 0.5


def test_unknown_key_names_line_and_path():
    text = TINY.format(seed=0, labels="hard").replace("batch_size: 8}}\n  - {name: transition",
                                                      "batch_sise: 8}}\n  - {name: transition", 1)
    with pytest.raises(ConfigError) as exc:
        parse_config(text, source="exp.yaml")
    msg = str(exc.value)
    assert "exp.yaml:" in msg and "stages[0].train" in msg and "batch_sise" in msg
    line = int(msg.split(":")[1])
    assert "batch_sise" in text.splitlines()[line - 1]


def test_unknown_top_level_key():
    with pytest.raises(ConfigError, match="learning_rat"):
        parse_config(TINY.format(seed=0, labels="hard") + "learning_rat: 0.1\n")


def test_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(TINY.format(seed=0, labels="hard") + "seed: 3\n")


@pytest.mark.parametrize("old,new", [
    ("seed: 0", "seed: zero"),
    ("freeze: 0.0", "freeze: 1.5"),
    ("family: residual", "family: vgg"),
    ("baseline: [source, target]", "baseline: [source, transition]"),
    ("dataset: transition", "dataset: nowhere"),
    ("labels: hard", "labels: fuzzy"),
])
def test_invalid_values(old, new):
    text = TINY.format(seed=0, labels="hard").replace(old, new, 1)
    assert text != TINY.format(seed=0, labels="hard")
    with pytest.raises(ConfigError):
        parse_config(text)


def test_malformed_yaml():
    with pytest.raises(ConfigError):
        parse_config("seed: [1, 2\n")
    with pytest.raises(ConfigError):
        parse_config("- just a list\n")


def test_seed_override_changes_hash():
    cfg = parse_config(TINY.format(seed=0, labels="hard"))
    assert cfg.with_seed(None) is cfg
    other = cfg.with_seed(5)
    assert other.seed == 5 and other.plan.seed == 5 and other.config_hash() != cfg.config_hash()
    assert parse_config(TINY.format(seed=0, labels="hard")).config_hash() == cfg.config_hash()


def test_default_output_root_from_env(monkeypatch, tmp_path):
    monkeypatch.setenv("MSTL_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = load_config(bundled_config())
    assert cfg.output_dir == tmp_path / "root" / "synthetic"


def test_missing_manifest_is_resolution_error(tmp_path):
    text = TINY.format(seed=0, labels="hard").replace("transition: {synthetic: transition}",
                                                      "transition: {manifest: missing/manifest.tsv}")
    cfg = parse_config(text, source=str(tmp_path / "x.yaml"))
    with pytest.raises(ResolutionError, match="missing/manifest.tsv"):
        cfg.validate_refs()


# -- command line -----------------------------------------------------------------------------


def test_validate_ok_writes_nothing(capsys, tiny_yaml, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = tree(tmp_path)
    code, out, _ = run_cli(capsys, "validate", "--config", tiny_yaml)
    assert code == 0 and "config OK" in out and "arm mstl: source -> transition -> target" in out
    assert tree(tmp_path) == before


def test_validate_dangling_reference(capsys, tiny_yaml, tmp_path):
    text = tiny_yaml.read_text().replace("transition: {synthetic: transition}", "transition: {manifest: gone.tsv}")
    tiny_yaml.write_text(text)
    before = tree(tmp_path)
    code, out, err = run_cli(capsys, "validate", "--config", tiny_yaml)
    assert code == 3
    assert err.count("\n") == 1 and err.startswith("error: ResolutionError:") and "gone.tsv" in err
    assert tree(tmp_path) == before


def test_config_error_exit_code_and_line(capsys, tiny_yaml):
    tiny_yaml.write_text(tiny_yaml.read_text() + "bogus: 1\n")
    code, _, err = run_cli(capsys, "validate", "--config", tiny_yaml)
    assert code == 2 and err.startswith("error: ConfigError:") and "bogus" in err
    assert f"{tiny_yaml}:" in err and err.count("\n") == 1


def test_usage_errors(capsys, tmp_path):
    assert run_cli(capsys, "frobnicate")[0] == cli.USAGE_EXIT
    code, _, err = run_cli(capsys, "validate")
    assert code == cli.USAGE_EXIT and err.startswith("error: UsageError:")
    # a missing config file is an unresolved reference
    assert run_cli(capsys, "validate", "--config", tmp_path / "nope.yaml")[0] == 3


@pytest.fixture
def cli_run(capsys, tiny_yaml, tmp_path):
    out = tmp_path / "run"
    code, stdout, err = run_cli(capsys, "mstl", "--config", tiny_yaml, "--out", out)
    assert code == 0, err
    return out, stdout


def test_mstl_command(cli_run):
    out, stdout = cli_run
    assert "baseline: source/target" in stdout and "domain distance to target (mstl)" in stdout
    ckpts = sorted(p.relative_to(out).as_posix() for p in out.rglob("checkpoint.mstl"))
    assert ckpts == ["stages/source/checkpoint.mstl", "stages/source/target/checkpoint.mstl",
                     "stages/source/transition/checkpoint.mstl", "stages/source/transition/target/checkpoint.mstl"]
    files = json.loads((out / "files.json").read_text())["files"]
    listed = {f["path"] for f in files}
    assert {"config.json", "audit.json", "reports/target_mstl.json", "reports/target_baseline.json"} <= listed
    assert listed == {p for p in tree(out) if (out / p).is_file()} - {"files.json"}


def test_refuses_to_overwrite_without_force(capsys, cli_run, tiny_yaml):
    out, _ = cli_run
    before = (out / "files.json").read_bytes()
    code, _, err = run_cli(capsys, "mstl", "--config", tiny_yaml, "--out", out)
    assert code == 1 and "already exists" in err and "--force" in err
    assert (out / "files.json").read_bytes() == before
    code, _, _ = run_cli(capsys, "mstl", "--config", tiny_yaml, "--out", out, "--force")
    assert code == 0 and (out / "files.json").read_bytes() == before


def test_parallel_jobs_match_serial(capsys, cli_run, tiny_yaml, tmp_path):
    out, _ = cli_run
    code, _, err = run_cli(capsys, "mstl", "--config", tiny_yaml, "--out", tmp_path / "par", "--jobs", "2")
    assert code == 0, err
    assert (tmp_path / "par" / "files.json").read_bytes() == (out / "files.json").read_bytes()


def test_arm_selection(capsys, tiny_yaml, tmp_path):
    out = tmp_path / "one"
    assert run_cli(capsys, "mstl", "--config", tiny_yaml, "--out", out, "--arm", "baseline")[0] == 0
    assert not (out / "stages/source/transition").exists()
    assert (out / "reports/targets.json").is_file()
    code, _, err = run_cli(capsys, "mstl", "--config", tiny_yaml, "--out", tmp_path / "two", "--arm", "zzz")
    assert code == 3 and "zzz" in err


def test_compare_command_matches_library(capsys, cli_run, tmp_path):
    out, _ = cli_run
    b, m = out / "reports/target_baseline.json", out / "reports/target_mstl.json"
    code, stdout, _ = run_cli(capsys, "compare", b, m, "--out", tmp_path / "cmp")
    assert code == 0 and "recall" in stdout
    expected = compare_arms([read_report(b), read_report(m)])
    delta = expected["rows"][0]["deltas"]["recall"]
    assert f"{delta:+10.3f}" in stdout
    doc = json.loads((tmp_path / "cmp/comparison.json").read_text())
    assert doc["comparison"]["rows"][0]["deltas"] == expected["rows"][0]["deltas"]


def test_compare_rejects_mismatched_splits(capsys, cli_run, tmp_path):
    out, _ = cli_run
    code, _, err = run_cli(capsys, "compare", out / "reports/target_mstl.json", out / "stages/source/eval_val.json",
                           "--out", tmp_path / "cmp")
    assert code == 8 and err.startswith("error: ComparisonError:")


def test_report_command(capsys, cli_run, tmp_path):
    out, _ = cli_run
    code, stdout, _ = run_cli(capsys, "report", out / "reports/target_mstl.json", "--out", tmp_path / "rep",
                              "--format", "table-text")
    assert code == 0 and tree(tmp_path / "rep") == ["files.json", "report.txt"]
    assert "source/transition/target" in stdout


def test_eval_command_reproduces_target_report(capsys, cli_run, tmp_path):
    out, _ = cli_run
    code, _, err = run_cli(capsys, "eval", "--checkpoint", out / "stages/source/transition/target/checkpoint.mstl",
                           "--manifest", out / "data/target/manifest.tsv", "--out", tmp_path / "ev")
    assert code == 0, err
    fresh = read_report(tmp_path / "ev/eval.json")
    stored = read_report(out / "reports/target_mstl.json")
    assert fresh.confusion == stored.confusion and fresh.auc == stored.auc and fresh.roc == stored.roc


def test_synth_split_cluster_train(capsys, tiny_yaml, tmp_path):
    data = tmp_path / "data"
    assert run_cli(capsys, "synth", "--config", tiny_yaml, "--out", data)[0] == 0
    assert (data / "target/manifest.tsv").is_file() and (data / "files.json").is_file()

    code, stdout, _ = run_cli(capsys, "split", "--manifest", data / "source/manifest.tsv", "--ratios", "0.6,0.2,0.2",
                              "--out", tmp_path / "split")
    assert code == 0 and "train=24 val=8 test=8" in stdout

    src = tmp_path / "src"
    code, _, err = run_cli(capsys, "train", "--config", tiny_yaml, "--stage", "source", "--data", data, "--out", src)
    assert code == 0, err
    code, _, err = run_cli(capsys, "train", "--config", tiny_yaml, "--stage", "transition", "--data", data,
                           "--out", tmp_path / "tr")
    assert code == 3 and "--init" in err
    code, _, err = run_cli(capsys, "train", "--config", tiny_yaml, "--stage", "transition", "--data", data,
                           "--init", src / "checkpoint.mstl", "--out", tmp_path / "tr")
    assert code == 0, err

    code, stdout, err = run_cli(capsys, "cluster", "--checkpoint", src / "checkpoint.mstl", "--manifest",
                                data / "transition/manifest.tsv", "--grid", "2,3", "--folds", "3", "--out", tmp_path / "cl")
    assert code == 0, err
    sel = json.loads((tmp_path / "cl/selection.json").read_text())
    assert stdout.startswith(f"k={sel['k_best']}")


def test_train_single_stage_matches_full_run(capsys, cli_run, tiny_yaml, tmp_path):
    out, _ = cli_run
    code, _, err = run_cli(capsys, "train", "--config", tiny_yaml, "--stage", "source", "--data", out / "data",
                           "--out", tmp_path / "src")
    assert code == 0, err
    assert (tmp_path / "src/checkpoint.mstl").read_bytes() == (out / "stages/source/checkpoint.mstl").read_bytes()


def test_missing_input_files(capsys, tmp_path):
    code, _, err = run_cli(capsys, "eval", "--checkpoint", tmp_path / "none.mstl", "--manifest", tmp_path / "m.tsv",
                           "--out", tmp_path / "o")
    assert code != 0 and err.count("\n") == 1
    (tmp_path / "bad.mstl").write_bytes(b"MSTL\x01")
    code, _, err = run_cli(capsys, "eval", "--checkpoint", tmp_path / "bad.mstl", "--manifest", tmp_path / "m.tsv",
                           "--out", tmp_path / "o")
    assert code == 7 and "offset" in err
