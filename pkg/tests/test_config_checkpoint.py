import pytest
import torch

from partforge.checkpoint import load_model, load_tensors, save_model, save_tensors
from partforge.config import ConfigError, DEFAULTS, config_text, load_config
from partforge.dit import ModelConfig, PartDiT


# -------------------------------------------------------------------- config

def test_defaults_without_file():
    cfg = load_config(None)
    assert cfg == DEFAULTS or cfg["data_dir"] != DEFAULTS["data_dir"]  # env override allowed
    assert cfg["cfg_scale"] == 3.5
    assert cfg["nms_iou"] == 0.7
    assert cfg["kmax"] == 30
    assert cfg["grid_n"] == 64


def test_config_file_parsing(tmp_path):
    p = tmp_path / "desk.cfg"
    p.write_text(
        """
        # desk-scale settings
        grid_n = 16
        cfg_scale = 1.0
        train.steps_coarse = 42
        train.augment = false
        """
    )
    cfg = load_config(p)
    assert cfg["grid_n"] == 16
    assert cfg["cfg_scale"] == 1.0
    assert cfg["train.steps_coarse"] == 42
    assert cfg["train.augment"] is False


def test_config_unknown_key_reports_path(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("grid.m = 3\n")
    with pytest.raises(ConfigError, match="grid.m"):
        load_config(p)


def test_config_bad_value_reports_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("grid_n = many\n")
    with pytest.raises(ConfigError, match="grid_n"):
        load_config(p)


def test_config_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/path.cfg")


def test_env_var_overrides_data_dir_only(tmp_path, monkeypatch):
    monkeypatch.setenv("PARTFORGE_DATA_DIR", "/custom/data")
    cfg = load_config(None)
    assert cfg["data_dir"] == "/custom/data"
    assert cfg["grid_n"] == DEFAULTS["grid_n"]


def test_config_text_roundtrip(tmp_path):
    cfg = load_config(None)
    p = tmp_path / "echo.cfg"
    p.write_text(config_text(cfg))
    assert load_config(p)["cfg_scale"] == cfg["cfg_scale"]


# ---------------------------------------------------------------- checkpoint

def test_tensor_container_roundtrip(tmp_path):
    path = tmp_path / "t.pfck"
    tensors = {
        "a": torch.arange(6, dtype=torch.float32).reshape(2, 3),
        "b": torch.tensor([1.5]),
    }
    save_tensors(path, {"note": "hi"}, tensors)
    meta, back = load_tensors(path)
    assert meta["note"] == "hi"
    assert torch.equal(back["a"], tensors["a"])
    assert torch.equal(back["b"], tensors["b"])


def test_container_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_tensors(p)


def test_model_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    cfg = ModelConfig(depth=2, width=16, heads=2, k_max=3, lattice=64,
                      data_widths={"tok": 8}, cond_tokens=2, cond_width=8,
                      cond_input_dim=12, time_features=8)
    model = PartDiT(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
    path = tmp_path / "m.pfck"
    save_model(path, model, stage={"kind": "layout", "codec_m": 4},
               extra_tensors={"codec.w": torch.ones(2, 2)})
    back, stage, extra = load_model(path)
    assert back.config == cfg
    assert stage["kind"] == "layout" and stage["codec_m"] == 4
    assert torch.equal(extra["codec.w"], torch.ones(2, 2))
    for (na, pa), (nb, pb) in zip(model.state_dict().items(), back.state_dict().items()):
        assert na == nb
        assert torch.equal(pa, pb), na


def test_checkpoint_output_is_deterministic(tmp_path):
    torch.manual_seed(1)
    cfg = ModelConfig(depth=2, width=16, heads=2, k_max=3, lattice=64,
                      data_widths={"tok": 8}, cond_tokens=2, cond_width=8,
                      cond_input_dim=12, time_features=8)
    model = PartDiT(cfg)
    save_model(tmp_path / "a.pfck", model)
    save_model(tmp_path / "b.pfck", model)
    assert (tmp_path / "a.pfck").read_bytes() == (tmp_path / "b.pfck").read_bytes()
