import json

import pytest

from qgs import cli
from qgs.config import load_config, ConfigError

TINY_TOML = """\
out_dir = "{out}"

[generator]
num_topics = 4
items_per_topic = 4
session_len = 8
num_sessions = 24

[model]
d_f = 4
d_b = 4
d_h = 8
d_z = 8
num_layers = 1
l_max = 16
dropout_rate = 0.0
dnn_width = 8
d_e = 8
hfg_heads = 2
d_o = 8
tower_width = 8

[train]
batch_size = 4
epochs = 1
eval_fraction = 0.25
"""


def strip_wall_ms(csv_text):
    return "\n".join(ln.rsplit(",", 1)[0] for ln in csv_text.strip().split("\n"))


@pytest.fixture
def tiny_config(tmp_path):
    out = tmp_path / "out"
    path = tmp_path / "cfg.toml"
    path.write_text(TINY_TOML.format(out=out))
    return path, out


def test_load_config_defaults():
    cfg = load_config(None)
    assert cfg.train.batch_size == 16
    assert cfg.generator.num_topics == 8


def test_load_config_unknown_key(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\nbatch_sizes = 4\n")
    with pytest.raises(ConfigError, match="batch_sizes"):
        load_config(path)


def test_load_config_unknown_section(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="optimizer"):
        load_config(path)


def test_unknown_key_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\nlearning_rat = 0.1\n")
    code = cli.main(["train", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert "learning_rat" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path, capsys):
    code = cli.main(["train", "--config", str(tmp_path / "absent.toml")])
    assert code == cli.EXIT_MISSING_FILE
    assert "missing-file" in capsys.readouterr().err


def test_malformed_dataset_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.qgsd"
    bad.write_bytes(b"WRONG MAGIC AND MORE")
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(f'dataset_path = "{bad}"\nout_dir = "{tmp_path / "o"}"\n'
                   "[train]\nepochs = 1\n")
    code = cli.main(["train", "--config", str(cfg)])
    assert code == cli.EXIT_DATA_FORMAT
    assert "data-format" in capsys.readouterr().err


def test_generate_train_eval_pipeline(tiny_config, capsys):
    path, out = tiny_config
    assert cli.main(["generate", "--config", str(path)]) == cli.EXIT_OK
    assert (out / "dataset.qgsd").exists()
    assert (out / "resolved_config").exists()
    resolved = (out / "resolved_config").read_text()
    assert "num_topics = 4" in resolved and "batch_size = 4" in resolved

    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_OK
    assert (out / "model.qgsc").exists()
    metrics = (out / "metrics.csv").read_text()
    assert metrics.startswith("variant,seed,epoch,")

    assert cli.main([
        "eval", "--config", str(path), "--checkpoint", str(out / "model.qgsc"),
    ]) == cli.EXIT_OK
    capsys.readouterr()
    payload = json.loads((out / "eval.json").read_text())
    assert set(payload) == {"auc", "gauc", "num_requests"}
    assert 0.0 <= payload["auc"] <= 1.0


def test_eval_missing_checkpoint(tiny_config, capsys):
    path, out = tiny_config
    code = cli.main(["eval", "--config", str(path), "--checkpoint", str(out / "no.qgsc")])
    assert code == cli.EXIT_MISSING_FILE


def test_train_determinism_byte_identical(tiny_config, tmp_path, capsys):
    path, _ = tiny_config
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        assert cli.main([
            "train", "--config", str(path), "--out", str(out), "--threads", "1",
        ]) == cli.EXIT_OK
    # wall_ms (the last column) is a timing measurement and is excluded from
    # the byte-identity contract; everything else must match exactly
    a, b = (strip_wall_ms((o / "metrics.csv").read_text()) for o in outs)
    assert a == b
    assert (outs[0] / "model.qgsc").read_bytes() == (outs[1] / "model.qgsc").read_bytes()


def test_seed_override_changes_results(tiny_config, tmp_path, capsys):
    path, _ = tiny_config
    o1, o2 = tmp_path / "s0", tmp_path / "s1"
    cli.main(["train", "--config", str(path), "--out", str(o1), "--seed", "0"])
    cli.main(["train", "--config", str(path), "--out", str(o2), "--seed", "1"])
    assert (o1 / "metrics.csv").read_bytes() != (o2 / "metrics.csv").read_bytes()


def test_ablate_emits_rows(tmp_path, capsys):
    out = tmp_path / "out"
    path = tmp_path / "cfg.toml"
    path.write_text(
        TINY_TOML.format(out=out) + '\n[ablate]\nvariants = ["full", "item_only"]\n'
    )
    assert cli.main(["ablate", "--config", str(path)]) == cli.EXIT_OK
    lines = (out / "ablation.csv").read_text().strip().split("\n")
    assert lines[0] == "variant,gauc,auc,mean_epoch_wall_ms,loss_infonce"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["full", "item_only"]


def test_bench_emits_csvs(tmp_path, capsys):
    out = tmp_path / "out"
    path = tmp_path / "cfg.toml"
    path.write_text(
        f'out_dir = "{out}"\n[bench]\nlengths = [16, 32]\nd_h = 8\n'
        "num_layers = 1\nwarmup_iters = 1\nmeasured_iters = 20\n"
        "stream_positions = [4, 8]\n"
    )
    assert cli.main(["bench", "--config", str(path)]) == cli.EXIT_OK
    assert (out / "bench.csv").exists()
    stream = (out / "bench_stream.csv").read_text().strip().split("\n")
    assert stream[0] == "position,step_ms,state_bytes"
    assert len(stream) == 3


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "exit codes" in text
    assert "QGS_NO_NUMBA" in text
    assert "query_switch_prob" in text
