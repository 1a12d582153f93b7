import json

import pytest

from vqfont.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_decompose_prints_partition(capsys):
    code, out, _ = run(capsys, "decompose", "--char", "好", "--grid", "16")
    rec = json.loads(out)
    assert code == 0 and rec["category"] == "left-right"
    assert [len(c) for c in rec["components"]] == [128, 128]


def test_unknown_character(capsys):
    code, _, err = run(capsys, "decompose", "--char", "E000")
    assert code == 1 and err.startswith("error UNKNOWN_CHARACTER")


def test_evaluate_without_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "evaluate", "--data", str(tmp_path), "--out", str(tmp_path / "ev"))
    assert code == 1 and err.startswith("error MISSING_CHECKPOINT")


def test_train_without_stage_one(capsys, tmp_path):
    code, _, err = run(capsys, "train-vqfont", "--data", str(tmp_path), "--out", str(tmp_path / "s2"))
    assert code == 1 and "MISSING_CHECKPOINT" in err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text("preset: tiny\ndata:\n  synthetic_fonts: 3\n  split_ratios: [12, 6, 4]\n")
    assert main(["prepare-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["pretrain-vqgan", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "s1"), "--iterations", "3"]) == 0
    assert (
        main(["train-vqfont", "--data", str(root / "data"), "--vqgan-ckpt", str(root / "s1" / "vqgan.pt"), "--out", str(root / "s2"), "--iterations", "3"])
        == 0
    )
    return root


def test_pipeline_artifacts(tiny_run):
    assert (tiny_run / "s1" / "codebook.npy").is_file()
    assert (tiny_run / "s2" / "vqfont.pt").is_file()
    log = (tiny_run / "s2" / "vqfont_log.jsonl").read_text().splitlines()
    assert len(log) == 3 and "l_main" in json.loads(log[0])
    assert not (tiny_run / "s2" / ".lock").exists()


def test_evaluate_prints_tsv(tiny_run, capsys):
    capsys.readouterr()
    code, out, _ = run(capsys, "evaluate", "--ckpt", str(tiny_run / "s2" / "vqfont.pt"), "--data", str(tiny_run / "data"), "--out", str(tiny_run / "ev"), "--grid")
    lines = out.splitlines()
    assert code == 0 and lines[0].split("\t") == ["split", "count", "l1", "rmse", "psnr", "ssim"]
    assert [l.split("\t")[0] for l in lines[1:]] == ["SFUC", "UFUC"]
    assert (tiny_run / "ev" / "grid_ufuc.png").is_file()


def test_generate_and_attention(tiny_run, capsys):
    data = json.loads((tiny_run / "data" / "splits.json").read_text())
    font, refs, target = data["seen_fonts"][0], data["reference_chars"][:3], data["unseen_chars"][0]
    code, out, err = run(
        capsys, "generate", "--ckpt", str(tiny_run / "s2" / "vqfont.pt"), "--data", str(tiny_run / "data"),
        "--style-refs", ",".join(refs), "--font", font, "--chars", target, "--out", str(tiny_run / "gen"),
        "--dump-attention", str(tiny_run / "att"),
    )
    assert code == 0, err
    assert json.loads(out)["generated"] == 1
    assert (tiny_run / "gen" / f"{target}.png").is_file()
    assert any(p.suffix == ".png" for p in (tiny_run / "att").iterdir())


def test_locked_run_directory(tiny_run, capsys):
    (tiny_run / "busy").mkdir()
    (tiny_run / "busy" / ".lock").write_text("1")
    code, _, err = run(capsys, "pretrain-vqgan", "--data", str(tiny_run / "data"), "--out", str(tiny_run / "busy"), "--iterations", "1")
    assert code == 1 and "RUN_DIR_LOCKED" in err
