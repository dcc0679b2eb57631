import json

import pytest

from groundnlq.cli import build_parser, main
from groundnlq.decode_eval import read_predictions

SUBCOMMANDS = ["synth", "build-corpus", "pretrain", "finetune", "predict", "eval", "ensemble", "gradcheck"]
SMALL = [
    "--set", "synth.num_videos=3", "--set", "synth.T_range=[20,30]", "--set", "synth.D=8",
    "--set", "synth.D_t=6", "--set", "synth.L_range=[2,3]",
]
TINY_MODEL = [
    "--set", "model.D_video_in=8", "--set", "model.D_text_in=6", "--set", "model.d_model=16",
    "--set", "model.n_heads=2", "--set", "model.n_text_blocks=1", "--set", "model.n_video_blocks=1",
]
ONE_EPOCH = ["--set", "train.total_epochs=1", "--set", "train.warmup_epochs=0"]


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_lists_flags(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_unknown_command(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag():
    assert main(["eval", "--preds", "p", "--gt", "g", "--bogus"]) == 1


def test_bad_override(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "synth.nope=1"]) == 1
    assert "synth.nope" in capsys.readouterr().err


def test_missing_feature_dir(tmp_path, capsys):
    narr = tmp_path / "n.jsonl"
    narr.write_text('{"video_id": "v", "query_id": "q", "timestamp_sec": 1.0}\n')
    missing = tmp_path / "no-features"
    code = main(["build-corpus", "--out", str(tmp_path / "o"), "--narrations", str(narr), "--features", str(missing)])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_eval_perfect(tmp_path, capsys):
    gt = tmp_path / "gt.jsonl"
    gt.write_text(
        '{"video_id": "v", "query_id": "a", "start_sec": 1.0, "end_sec": 4.0, "split": "val"}\n'
        '{"video_id": "v", "query_id": "b", "start_sec": 0.0, "end_sec": 2.5, "split": "val"}\n'
    )
    preds = tmp_path / "p.jsonl"
    preds.write_text(
        '{"query_id": "a", "predictions": [[1.0, 4.0, 0.9]]}\n{"query_id": "b", "predictions": [[0.0, 2.5, 0.8]]}\n'
    )
    assert main(["eval", "--preds", str(preds), "--gt", str(gt)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [float(x) for x in lines[1].split("|")] == [1.0, 1.0, 1.0, 1.0]


def test_gradcheck_f64(tmp_path, capsys):
    assert main(["gradcheck", "--precision", "f64", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    err = float(out.split("max_rel_err=")[1].split()[0])
    assert err <= 1e-6 and "PASS" in out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"]


def test_full_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), *SMALL, "--set", "synth.split=\"pretrain\""]) == 0
    assert main(["synth", "--out", str(data), *SMALL, "--append", "--set", "synth.split=\"train\"", "--set", "synth.seed=1"]) == 0
    assert main(["synth", "--out", str(data), *SMALL, "--append", "--set", "synth.split=\"val\"", "--set", "synth.seed=2"]) == 0
    for sub in ("features", "queries"):
        assert (data / sub).is_dir()
    assert json.loads((data / "config.json").read_text())["command"] == "synth"

    narr = tmp_path / "narr.jsonl"
    narr.write_text('{"video_id": "pretrain-s0-v0000", "query_id": "pretrain-s0-v0000-q0", "timestamp_sec": 3.0}\n'
                    '{"video_id": "unknown", "query_id": "x", "timestamp_sec": 3.0}\n')
    corpus = tmp_path / "corpus"
    assert main(["build-corpus", "--out", str(corpus), "--narrations", str(narr), "--features", str(data / "features")]) == 0
    assert "1 narrations skipped" in capsys.readouterr().out
    assert len((corpus / "annotations.jsonl").read_text().splitlines()) == 1

    pre, ft = tmp_path / "pre", tmp_path / "ft"
    assert main(["pretrain", "--out", str(pre), "--data", str(data), *TINY_MODEL, *ONE_EPOCH]) == 0
    cfg = json.loads((pre / "config.json").read_text())
    assert cfg["train"]["stage"] == "pretrain" and cfg["train"]["max_lr"] == 2e-4
    assert main(["finetune", "--out", str(ft), "--data", str(data), "--init", str(pre), *TINY_MODEL, *ONE_EPOCH]) == 0
    cfg = json.loads((ft / "config.json").read_text())
    assert cfg["train"]["max_lr"] == 1e-4 and cfg["train"]["init_checkpoint"] == str(pre)
    assert (ft / "manifest.json").exists() and (ft / "metrics.jsonl").exists()

    p1, p2, ens = tmp_path / "p1", tmp_path / "p2", tmp_path / "ens"
    assert main(["predict", "--out", str(p1), "--checkpoint", str(ft), "--data", str(data)]) == 0
    assert main(["predict", "--out", str(p2), "--checkpoint", str(pre), "--data", str(data)]) == 0
    preds = read_predictions(p1 / "predictions.jsonl")
    assert len(preds) == 3 and all(0 < len(v) <= 5 for v in preds.values())

    capsys.readouterr()
    assert main(["eval", "--preds", str(p1 / "predictions.jsonl"), "--gt", str(data / "annotations.jsonl"), "--split", "val"]) == 0
    assert "R1@0.3" in capsys.readouterr().out

    assert main(["ensemble", "--out", str(ens), "--preds", str(p1 / "predictions.jsonl"),
                 "--preds", str(p2 / "predictions.jsonl"), "--weights", "1.0", "0.5"]) == 0
    assert set(read_predictions(ens / "predictions.jsonl")) == set(preds)
    assert main(["ensemble", "--out", str(ens), "--preds", str(p1 / "predictions.jsonl"), "--weights", "1", "2"]) == 1


def test_predict_idempotent(tmp_path):
    data = tmp_path / "data"
    main(["synth", "--out", str(data), *SMALL, "--set", "synth.split=\"val\""])
    main(["finetune", "--out", str(tmp_path / "ck"), "--data", str(data), *TINY_MODEL, *ONE_EPOCH,
          "--set", "train.train_split=\"val\""])
    for name in ("a", "b"):
        assert main(["predict", "--out", str(tmp_path / name), "--checkpoint", str(tmp_path / "ck"), "--data", str(data)]) == 0
    assert (tmp_path / "a" / "predictions.jsonl").read_bytes() == (tmp_path / "b" / "predictions.jsonl").read_bytes()


def test_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"num_videos": 2, "T_range": [10, 12], "D": 4, "D_t": 3}}))
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 0
    resolved = json.loads((tmp_path / "d" / "config.json").read_text())
    assert resolved["synth"]["num_videos"] == 2
    cfg.write_text(json.dumps({"bogus": {}}))
    assert main(["synth", "--out", str(tmp_path / "e"), "--config", str(cfg)]) == 1
