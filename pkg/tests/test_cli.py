import json

import numpy as np
import pytest

from vesselforge import cli, data

SMALL = {
    "encoder_stages": [[8, 2], [16, 2]],
    "decoder_stages": [16, 8],
    "atrous_rates": [1, 2, 3, 4, 5, 6],
    "msb_branch_channels": 4,
    "msb_out_channels": 8,
    "max_iters": 3,
    "batch_size": 2,
    "checkpoint_every": 2,
    "patch_size": 32,
}


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--n", "2", "--n-test", "1", "--size", "64", "--seed", "7", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def _pipeline(root, cfg, out):
    common = ["--data-root", str(root), "--dataset", "synth"]
    assert cli.main(["train", *common, "--config", str(cfg), "--out", str(out / "run")]) == 0
    ckpt = str(out / "run" / "final.vslf")
    assert cli.main(["predict", *common, "--checkpoint", ckpt, "--scheme", "sp32", "--out", str(out / "pred")]) == 0
    assert cli.main(["eval", *common, "--pred", str(out / "pred"), "--out", str(out / "eval")]) == 0


def test_synth_is_deterministic(tmp_path, synth_root):
    again = tmp_path / "again"
    assert cli.main(["synth", "--n", "2", "--n-test", "1", "--size", "64", "--seed", "7", "--out", str(again)]) == 0
    assert _tree_bytes(again) == _tree_bytes(synth_root)


def test_unknown_flag_is_user_error(capsys):
    assert cli.main(["synth", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_missing_subcommand_and_required_flag(capsys):
    assert cli.main([]) == 1
    assert cli.main(["train", "--dataset", "synth"]) == 1
    assert "--data-root" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, synth_root, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    code = cli.main(["train", "--data-root", str(synth_root), "--dataset", "synth", "--config", str(cfg),
                     "--out", str(tmp_path / "o")])
    assert code == 1
    assert "learning_rate" in capsys.readouterr().err


def test_flags_override_config_values(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scheme": "sp32", "threshold": 0.3, "seed": 1}))
    args = cli.build_parser().parse_args(["predict", "--config", str(cfg), "--threshold", "0.7"])
    merged = cli._merged(args)
    assert merged["threshold"] == 0.7 and merged["scheme"] == "sp32" and merged["seed"] == 1


def test_missing_checkpoint_is_user_error(tmp_path, synth_root):
    code = cli.main(["predict", "--data-root", str(synth_root), "--dataset", "synth",
                     "--checkpoint", str(tmp_path / "nope.vslf"), "--out", str(tmp_path)])
    assert code == 1


def test_eval_without_predictions_is_user_error(tmp_path, synth_root):
    assert cli.main(["eval", "--data-root", str(synth_root), "--dataset", "synth", "--out", str(tmp_path)]) == 1


def test_internal_failure_exits_2(monkeypatch, capsys):
    def boom(args):
        raise AssertionError("invariant broken")

    monkeypatch.setitem(cli.COMMANDS, "synth", boom)
    assert cli.main(["synth", "--out", "x"]) == 2
    assert "internal error" in capsys.readouterr().err


def test_pipeline_report_matches_independent_count(tmp_path, synth_root, config_file):
    _pipeline(synth_root, config_file, tmp_path)
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    samples = {s.id: s for s in data.load(synth_root, "synth")}
    index = json.loads((tmp_path / "pred" / "predictions.json").read_text())
    assert index["scheme"] == "sp32" and index["ids"] == [s.id for s in samples.values() if s.split == "test"]
    for entry in report["images"]:
        s = samples[entry["id"]]
        binary, _ = data.read_pnm(tmp_path / "pred" / f"{entry['id']}_bin.pgm")
        pred = binary[s.fov] > 0.5
        gt = s.gt[s.fov].astype(bool)
        assert entry["acc"] == pytest.approx(np.count_nonzero(pred == gt) / pred.size, abs=1e-12)
    csv = (tmp_path / "eval" / "report.csv").read_text().splitlines()
    assert csv[0] == "id,AUC,Acc,Sens,Spec" and csv[-1].startswith("mean,")
    assert "seconds" not in (tmp_path / "eval" / "report.json").read_text()


def test_pipeline_outputs_are_byte_identical(tmp_path, synth_root, config_file):
    for run in ("a", "b"):
        _pipeline(synth_root, config_file, tmp_path / run)
    for sub, names in (("run", ["final.vslf", "ckpt_000002.vslf"]), ("eval", ["report.json", "report.csv"])):
        for name in names:
            assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()
    pa, pb = _tree_bytes(tmp_path / "a" / "pred"), _tree_bytes(tmp_path / "b" / "pred")
    pa.pop("timing.json"), pb.pop("timing.json")
    assert pa == pb


def test_resume_through_cli(tmp_path, synth_root, config_file):
    common = ["--data-root", str(synth_root), "--dataset", "synth"]
    assert cli.main(["train", *common, "--config", str(config_file), "--out", str(tmp_path / "full")]) == 0
    ckpt = tmp_path / "full" / "ckpt_000002.vslf"
    assert cli.main(["train", *common, "--checkpoint", str(ckpt), "--out", str(tmp_path / "resumed")]) == 0
    assert (tmp_path / "resumed" / "final.vslf").read_bytes() == (tmp_path / "full" / "final.vslf").read_bytes()


def test_patch_larger_than_images_is_user_error(tmp_path, synth_root, capsys):
    cfg = tmp_path / "big.json"
    cfg.write_text(json.dumps({**SMALL, "patch_size": 64}))
    code = cli.main(["train", "--data-root", str(synth_root), "--dataset", "synth", "--config", str(cfg),
                     "--out", str(tmp_path / "o")])
    assert code == 1
    assert "patch" in capsys.readouterr().err


def test_preprocess_writes_enhanced_tree(tmp_path, synth_root):
    out = tmp_path / "ace"
    assert cli.main(["preprocess", "--data-root", str(synth_root), "--dataset", "synth", "--out", str(out)]) == 0
    before = data.load(synth_root, "synth")
    after = data.load(out, "synth")
    assert [s.id for s in after] == [s.id for s in before]
    assert all(np.array_equal(a.gt, b.gt) for a, b in zip(after, before))
    assert not np.array_equal(after[0].image, before[0].image)


def test_selftest_quick_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out
