import pytest

from vitst_kit.config import SCHEMA, SEED_KEYS, RunConfig
from vitst_kit.errors import ConfigError


def test_defaults_match_schema():
    cfg = RunConfig()
    assert cfg["model.window"] == 7 and cfg["model.patch_size"] == 4
    assert cfg["train.lr"] == 2e-5 and cfg["augment.cutout_regions"] == 16
    assert len(cfg.lines()) == len(SCHEMA)
    assert cfg.lines() == sorted(cfg.lines())


def test_file_then_overrides_then_seed(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\ntrain.lr = 5e-4\nraster.cell_px=32x32  # trailing\n\nmodel.depths=2,2\n")
    cfg = RunConfig.load(p, ["train.lr=1e-3", "augment.cutout=off"], seed=9)
    assert cfg["train.lr"] == 1e-3
    assert cfg["raster.cell_px"] == (32, 32)
    assert cfg["augment.cutout"] is False
    assert all(cfg[k] == 9 for k in SEED_KEYS)
    tc = cfg.train_config()
    assert (tc.lr, tc.cell_px, tc.cutout, tc.seed) == (1e-3, (32, 32), False, 9)
    mc = cfg.model_config(num_classes=4)
    assert mc.num_classes == 4 and mc.depths == (2, 2)
    assert cfg.mim_config().seed == 9
    assert cfg.split_ratios() == (0.8, 0.1, 0.1)


def test_text_round_trip(tmp_path):
    cfg = RunConfig.load(None, ["raster.image_size=96x96", "static.template=A {Age} year old."])
    p = tmp_path / "echo.cfg"
    p.write_text(cfg.text())
    assert RunConfig.load(p).values == cfg.values
    assert cfg.as_dict()["raster.image_size"] == "96,96"


@pytest.mark.parametrize("text, needle", [
    ("nope.key=1", "unknown config key"),
    ("train.lr=fast", "bad value for train.lr"),
    ("augment.cutout=maybe", "not a boolean"),
    ("train.lr", "expected section.key=value"),
])
def test_override_errors(text, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig.load(None, [text])


def test_file_error_has_locus(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("train.lr=1\nbroken line\n")
    with pytest.raises(ConfigError, match=r"bad.cfg:2"):
        RunConfig.load(p)
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "missing.cfg")
