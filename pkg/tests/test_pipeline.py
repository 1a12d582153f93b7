import json

import pytest
import torch

from vqfont import pipeline as pl
from vqfont.config import validate_config
from vqfont.errors import MissingCheckpoint, RunDirectoryLocked, UnknownCharacter
from vqfont.refinement import CodepointLabels, VQFont
from vqfont.vqgan import VQGAN


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    cfg = validate_config({"preset": "tiny", "data": {"synthetic_fonts": 3, "split_ratios": [12, 6, 4]}})
    root = tmp_path_factory.mktemp("data")
    return pl.prepare_data(root, cfg), cfg


def test_prepare_data_layout(prepared):
    data, cfg = prepared
    s = data.splits
    assert (len(s.seen_chars), len(s.reference_chars), len(s.unseen_chars)) == (12, 6, 4)
    assert not (s.seen_chars & s.unseen_chars) and not (s.reference_chars & s.unseen_chars)
    assert len(s.unseen_fonts) == 1 and len(s.seen_fonts) == 2
    refs = json.loads((data.root / pl.REFERENCES_FILE).read_text())
    assert all(len(v) == cfg.data.refs_per_char for v in refs.values())
    assert all(int(r, 16) in s.reference_chars for v in refs.values() for r in v)


def test_prepare_data_is_deterministic(prepared, tmp_path):
    data, cfg = prepared
    again = pl.prepare_data(tmp_path, cfg)
    assert again.splits.seen_chars == data.splits.seen_chars
    assert again.references == data.references


def test_pairs_and_stage1_keys(prepared):
    data, _ = prepared
    keys = data.stage1_keys()
    unseen = data.splits.unseen_chars
    assert keys and all(c not in unseen for _, c in keys)
    assert all(f not in data.splits.unseen_fonts for f, _ in keys)
    train = data.pairs("train", 8)
    assert len(train) == 2 * 12 and train.k == 3
    ufuc = data.pairs("ufuc", 8)
    assert set(ufuc.font_ids) == data.splits.unseen_fonts


def test_parse_codepoint():
    assert pl.parse_codepoint("4E00") == pl.parse_codepoint("U+4e00") == pl.parse_codepoint("一") == 0x4E00
    with pytest.raises(UnknownCharacter):
        pl.parse_codepoint("zz")


def test_read_charset(tmp_path):
    p = tmp_path / "chars.txt"
    p.write_text("4E00 U+4E8C  # two\n三\n4E00\n", encoding="utf-8")
    assert pl.read_charset(p) == [0x4E00, 0x4E8C, 0x4E09]


def test_run_directory_lock(tmp_path):
    cfg = validate_config({"preset": "tiny"})
    with pl.RunDirectory.open(tmp_path / "run", cfg) as run:
        assert (run.path / "config.yaml").is_file()
        with pytest.raises(RunDirectoryLocked):
            pl.RunDirectory.open(tmp_path / "run")
        run.log("log.jsonl", [{"a": 1}, {"a": 2}])
    assert not (tmp_path / "run" / ".lock").exists()
    with pl.RunDirectory.open(tmp_path / "run") as run:
        run.log("log.jsonl", [{"a": 3}])
    lines = (tmp_path / "run" / "log.jsonl").read_text().splitlines()
    assert [json.loads(x)["a"] for x in lines] == [1, 2, 3]


def test_atomic_save_leaves_no_temp(tmp_path):
    pl.atomic_save({"x": torch.ones(2)}, tmp_path / "a.pt")
    assert [p.name for p in tmp_path.iterdir()] == ["a.pt"]


def test_checkpoint_round_trip(tmp_path):
    cfg = validate_config({"preset": "tiny"})
    torch.manual_seed(0)
    vq = VQGAN.from_config(cfg)
    pl.save_vqgan(tmp_path / "vq.pt", vq, cfg)
    back, cfg2 = pl.load_vqgan(tmp_path / "vq.pt")
    assert cfg2 == cfg
    assert all(torch.equal(a, b) for a, b in zip(vq.state_dict().values(), back.state_dict().values()))
    model = VQFont.from_config(vq, cfg)
    pl.save_vqfont(tmp_path / "f.pt", model, vq, cfg, CodepointLabels([0x4E00]))
    m2, _, ckpt = pl.load_vqfont(tmp_path / "f.pt")
    assert ckpt["labels"] == [0x4E00]
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), m2.state_dict().values()))
    with pytest.raises(MissingCheckpoint):
        pl.load_vqfont(tmp_path / "vq.pt")
    with pytest.raises(MissingCheckpoint):
        pl.load_vqgan(tmp_path / "nothing.pt")
