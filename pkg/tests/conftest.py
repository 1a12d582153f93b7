import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vqfont.config import validate_config  # noqa: E402
from vqfont.structure import default_structure_table  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def table():
    return default_structure_table()


@pytest.fixture
def tiny_cfg():
    return validate_config({"preset": "tiny"})


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_ttf(path: Path, codepoints, family: str = "Box") -> Path:
    """Write a minimal TrueType font whose glyphs are filled rectangles."""
    from fontTools.fontBuilder import FontBuilder
    from fontTools.pens.ttGlyphPen import TTGlyphPen

    names = [".notdef"] + [f"g{cp:04X}" for cp in codepoints]
    fb = FontBuilder(1000, isTTF=True)
    fb.setupGlyphOrder(names)
    fb.setupCharacterMap({cp: f"g{cp:04X}" for cp in codepoints})
    glyphs = {}
    for i, name in enumerate(names):
        pen = TTGlyphPen(None)
        if name != ".notdef":
            # vary the box per glyph so renders differ
            x0, y0 = 100 + 20 * (i % 5), 100
            pen.moveTo((x0, y0))
            pen.lineTo((x0, 700))
            pen.lineTo((800, 700))
            pen.lineTo((800, y0))
            pen.closePath()
        glyphs[name] = pen.glyph()
    fb.setupGlyf(glyphs)
    fb.setupHorizontalMetrics({n: (1000, 0) for n in names})
    fb.setupHorizontalHeader(ascent=880, descent=-120)
    fb.setupNameTable({"familyName": family, "styleName": "Regular"})
    fb.setupOS2(sTypoAscender=880, usWinAscent=880, usWinDescent=120)
    fb.setupPost()
    fb.save(str(path))
    return path


@pytest.fixture(scope="session")
def box_font(tmp_path_factory):
    return make_ttf(tmp_path_factory.mktemp("fonts") / "box.ttf", [0x4E00, 0x4E8C, 0x4E09])


@pytest.fixture(scope="session")
def overfit_glyphs(table):
    """50 synthetic glyphs (5 fonts x 10 characters) at 32 px."""
    from vqfont.synth import make_fonts

    fonts = make_fonts(5, table, seed=0)[1:]
    cps = sorted(table)[::25][:10]
    px = np.stack([f.glyph(cp, 32).pixels for f in fonts for cp in cps])
    return torch.from_numpy(px)[:, None]


@pytest.fixture(scope="session")
def stage1_overfit(overfit_glyphs):
    """One shared stage-1 overfit run on the 50 glyphs (tiny preset)."""
    from vqfont.vqgan import train_vqgan

    cfg = validate_config({"preset": "tiny", "vqgan": {"iterations": 600}})
    return train_vqgan(overfit_glyphs, cfg, log_every=0)


@pytest.fixture(scope="session")
def small_pairs(table, stage1_overfit):
    """Two styled fonts x six targets with three references each, ground-truth indices attached."""
    from vqfont.glyphs import assign_references
    from vqfont.pipeline import build_pairs, lookup_from_sources
    from vqfont.refinement import CodepointLabels, attach_gt_indices
    from vqfont.synth import make_fonts

    fonts = make_fonts(2, table, seed=0)
    cps = sorted(table)
    targets, pool = cps[0:60:10], cps[5:65:10]
    look = lookup_from_sources({f.font_id: f for f in fonts}, 32)
    refs = assign_references(targets, pool, table, 3)
    labels = CodepointLabels(targets)
    pairs = build_pairs(look, ["font000", "font001"], targets, refs, table, "content", 8, labels)
    return attach_gt_indices(pairs, stage1_overfit.model), labels


# -- acceptance summary -------------------------------------------------------------

_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1].removeprefix("test_criterion_").split("[")[0]
    if report.when == "call" or report.failed:
        if report.failed or _CRITERIA.get(name) != "FAIL":
            _CRITERIA[name] = "FAIL" if report.failed else ("PASS" if report.passed else "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        num, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(num):2d} {_CRITERIA[name]:4s} {label.replace('_', ' ')}")
