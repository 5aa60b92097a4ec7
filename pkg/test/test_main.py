import json

import pytest

from hierrisk.main import (
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    build_parser,
    main,
    make_settings,
    run,
    validate_args,
)
from hierrisk.train import BEST_CHECKPOINT, LAST_CHECKPOINT

TINY_CONFIG = """\
# two-level network for a 3x3 grid
p=2
q=1
n_levels=2
top_k=2
model_width=8
conv_layers=1
attention_blocks=1
ff_width=8
rs_channels=2
rs_tile=8
rs_conv_channels=2
ae_channels=2
ae_epochs=1
batch_size=16
epochs=1
learning_rate=0.001
"""


def _config(tmp_path) -> str:
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return str(path)


def _cli(*argv: str) -> int:
    with pytest.raises(SystemExit) as exc_info:
        main(list(argv))
    return exc_info.value.code


def _manifest(directory) -> dict:
    return json.loads((directory / "manifest.json").read_text(encoding="utf-8"))


def test_parser_subcommands() -> None:
    parser = build_parser()
    args = parser.parse_args(["train", "--out", "o", "--data", "d", "--hierarchy", "h.json"])
    assert args.command == "train"
    assert args.resume is None
    assert args.no_rs is False
    args = parser.parse_args(["build-data", "--out", "o"])
    assert (args.dataset, args.rows, args.cols, args.weeks) == ("synthetic", 16, 16, 8)
    args = parser.parse_args(["eval", "--out", "o", "--data", "d", "--hierarchy", "h",
                              "--checkpoint", "c.pt", "--split", "val", "--per-interval"])
    assert args.split == "val"
    assert args.per_interval is True


def test_out_is_required(capsys) -> None:
    with pytest.raises(SystemExit):
        build_parser().parse_args(["baseline", "--data", "d"])
    assert "--out" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv, message",
    [
        (["baseline", "--out", "o", "--data", "d", "--preset", "nyc", "--config", "c"],
         "--preset cannot be combined with --config"),
        (["baseline", "--out", "o", "--data", "d", "--seed", "-1"], "seed must be >= 0"),
        (["build-data", "--out", "o", "--dataset", "csv-dir"], "requires --input"),
        (["build-data", "--out", "o", "--rows", "0"], "rows, cols and weeks must be >= 1"),
        (["pretrain", "--out", "o", "--data", "d", "--epochs", "-2"], "epochs must be >= 0"),
        (["predict", "--out", "o", "--data", "d", "--hierarchy", "h", "--checkpoint", "c",
          "--target", "-1"], "target must be >= 0"),
    ],
)
def test_validate_args_rejects(argv, message, capsys) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    with pytest.raises(SystemExit) as exc_info:
        validate_args(args, parser)
    assert exc_info.value.code == 2
    assert message in capsys.readouterr().err


def test_make_settings_applies_overrides(tmp_path) -> None:
    parser = build_parser()
    args = parser.parse_args(
        ["baseline", "--out", "o", "--data", "d", "--config", _config(tmp_path),
         "--seed", "7", "--no-rs"]
    )
    h = make_settings(args)
    assert (h.seed, h.use_rs, h.p, h.model_width) == (7, False, 2, 8)

    args = parser.parse_args(["baseline", "--out", "o", "--data", "d", "--preset", "chicago"])
    assert make_settings(args).views == ("road", "risk")


def test_config_error_exit_code(tmp_path, caplog) -> None:
    bad = tmp_path / "bad.conf"
    bad.write_text("p=2\nwarp_factor=9\n", encoding="utf-8")
    out = tmp_path / "out"
    args = build_parser().parse_args(
        ["build-data", "--out", str(out), "--config", str(bad)]
    )
    with caplog.at_level("ERROR"):
        assert run(args) == EXIT_CONFIG_ERROR
    assert "unknown config key 'warp_factor'" in caplog.text
    assert not (out / "manifest.json").exists()


def test_missing_data_exit_code(tmp_path, caplog) -> None:
    out = tmp_path / "out"
    args = build_parser().parse_args(
        ["baseline", "--out", str(out), "--data", str(tmp_path / "nowhere")]
    )
    with caplog.at_level("ERROR"):
        assert run(args) == EXIT_DATA_ERROR
    assert "data error" in caplog.text
    assert not (out / "manifest.json").exists()


def test_build_data_and_pretrain(tmp_path, monkeypatch) -> None:
    monkeypatch.setattr("hierrisk.storage.git_describe", lambda: "test")
    conf = _config(tmp_path)
    data_out = tmp_path / "data"
    assert _cli("build-data", "--out", str(data_out), "--config", conf,
                "--rows", "3", "--cols", "3", "--weeks", "2") == 0
    assert (data_out / "dataset" / "dataset.json").is_file()
    manifest = _manifest(data_out)
    assert manifest["command"] == "build-data"
    assert manifest["seed"] == 0
    assert manifest["git_describe"] == "test"
    assert len(manifest["config"]["hash"]) == 64

    rs_out = tmp_path / "rs"
    assert _cli("pretrain", "--out", str(rs_out), "--config", conf,
                "--data", str(data_out / "dataset")) == 0
    assert (rs_out / "encoder.pt").is_file()
    losses = json.loads((rs_out / "pretrain.json").read_text(encoding="utf-8"))["losses"]
    assert len(losses) == 1
    assert _manifest(rs_out)["metrics"]["final_loss"] == pytest.approx(losses[0])


def test_full_flow_without_rs(tmp_path, monkeypatch, capsys) -> None:
    monkeypatch.setattr("hierrisk.storage.git_describe", lambda: "unknown")
    conf = _config(tmp_path)
    common = ("--config", conf, "--no-rs")
    data_out = tmp_path / "data"
    assert _cli("build-data", "--out", str(data_out), "--rows", "3", "--cols", "3",
                "--weeks", "2", *common) == 0
    data = str(data_out / "dataset")

    hier_out = tmp_path / "hier"
    assert _cli("build-hierarchy", "--out", str(hier_out), "--data", data, *common) == 0
    hierarchy = str(hier_out / "hierarchy.json")
    assert (hier_out / "graphs").is_dir()

    train_out = tmp_path / "train"
    assert _cli("train", "--out", str(train_out), "--data", data,
                "--hierarchy", hierarchy, *common) == 0
    assert (train_out / LAST_CHECKPOINT).is_file()
    assert (train_out / BEST_CHECKPOINT).is_file()
    history = json.loads((train_out / "history.json").read_text(encoding="utf-8"))
    assert [r["epoch"] for r in history] == [1]
    assert _manifest(train_out)["metrics"]["epochs"] == 1
    capsys.readouterr()

    checkpoint = str(train_out / LAST_CHECKPOINT)
    eval_out = tmp_path / "eval"
    assert _cli("eval", "--out", str(eval_out), "--data", data, "--hierarchy", hierarchy,
                "--checkpoint", checkpoint, "--per-interval", *common) == 0
    assert "RMSE" in capsys.readouterr().out
    assert (eval_out / "metrics.test.json").is_file()
    assert (eval_out / "intervals.test.csv").is_file()
    assert "rmse" in _manifest(eval_out)["metrics"]

    pred_out = tmp_path / "pred"
    assert _cli("predict", "--out", str(pred_out), "--data", data, "--hierarchy", hierarchy,
                "--checkpoint", checkpoint, "--target", "300", "--heatmap", *common) == 0
    assert (pred_out / "heatmap.t300.png").is_file()
    assert set(_manifest(pred_out)["metrics"]) == {"total_g1", "total_g2"}

    base_out = tmp_path / "base"
    assert _cli("baseline", "--out", str(base_out), "--data", data, *common) == 0
    assert (base_out / "baseline.test.json").is_file()

    # A checkpoint trained without RS does not fit an RS-enabled config.
    mismatch_out = tmp_path / "mismatch"
    assert _cli("eval", "--out", str(mismatch_out), "--data", data, "--hierarchy", hierarchy,
                "--checkpoint", checkpoint, "--config", conf) == EXIT_CONFIG_ERROR
    assert not (mismatch_out / "manifest.json").exists()
