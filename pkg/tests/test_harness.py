import dataclasses
import json
import struct

import numpy as np
import pytest

from soco import checkpoint, config
from soco.cache import ProposalRecord, read_cache, write_cache
from soco.cli import main
from soco.config import DataConfig, RunConfig
from soco.data import gen_data, load_image
from soco.diagnostics import micro_config
from soco.errors import ConfigError, FormatError
from soco.proposals import BBox, iou
from soco.training import TrainState


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_empty_config_is_the_default():
    assert config.loads("") == RunConfig()
    assert config.loads("{}") == RunConfig()


def test_config_round_trip():
    cfg = config.apply_overrides(RunConfig(), ["train.steps=7", "views.crop_scale=[0.6, 0.9]",
                                               "model.mode=c4", "views.use_v3=false"])
    back = config.loads(config.dumps(cfg))
    assert back == cfg
    assert back.views.crop_scale == (0.6, 0.9) and back.model.mode == "c4"


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="unknown"):
        config.loads('{"train": {"stepz": 3}}')
    with pytest.raises(ConfigError):
        config.loads('{"train": {"steps": "many"}}')
    with pytest.raises(ConfigError):
        config.apply_overrides(RunConfig(), ["nope.x=1"])
    with pytest.raises(ConfigError):
        config.apply_overrides(RunConfig(), ["model.mode=resnet"])
    with pytest.raises(ConfigError):
        config.apply_overrides(RunConfig(), ["views.v3_size=16"])
    with pytest.raises(ConfigError):
        config.loads("[1, 2]")


def test_c4_variant_drops_v3():
    cfg = config.c4_variant(RunConfig())
    assert cfg.model.mode == "c4" and not cfg.views.use_v3


# ---------------------------------------------------------------------------
# proposal cache
# ---------------------------------------------------------------------------

def test_cache_round_trip_sorted(tmp_path):
    recs = [ProposalRecord("b", 10, 20, [BBox(1.5, 2, 3, 4)]), ProposalRecord("a", 5, 5, [])]
    path = tmp_path / "p.jsonl"
    write_cache(path, recs)
    back = read_cache(path)
    assert [r.image_id for r in back] == ["a", "b"]
    assert back[1] == recs[0]


def test_cache_bad_line(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text('{"image_id": "a", "width": 1}\n')
    with pytest.raises(FormatError):
        read_cache(path)
    with pytest.raises(FormatError):
        read_cache(tmp_path / "missing.jsonl")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _entries():
    rng = np.random.default_rng(0)
    return {"online.w": rng.standard_normal((2, 3, 4)), "meta.step": np.array(5.0),
            "lars.b": rng.standard_normal(3), "empty": np.zeros((0, 2))}


def test_checkpoint_round_trip_bitwise(tmp_path):
    e = _entries()
    path = checkpoint.save(tmp_path / "c.soco", e)
    back = checkpoint.load(path)
    assert set(back) == set(e)
    for k in e:
        assert back[k].shape == e[k].shape and back[k].tobytes() == e[k].tobytes()
    assert path.read_bytes() == checkpoint.encode(back)
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_layout_header():
    blob = checkpoint.encode({"a": np.array([1.0, 2.0])})
    assert blob[:4] == b"SOCO" and struct.unpack("<I", blob[4:8]) == (1,)
    assert struct.unpack("<I", blob[8:12]) == (1,) and blob[12:13] == b"a"
    assert struct.unpack("<BI", blob[13:18]) == (1, 1)
    assert struct.unpack("<Q", blob[18:26]) == (2,)
    assert np.frombuffer(blob[26:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-3],
    lambda b: b[:13] + bytes([7]) + b[14:],
    lambda b: b + b[8:],
])
def test_checkpoint_corruption_raises(mutate):
    blob = checkpoint.encode({"a": np.array([1.0, 2.0])})
    with pytest.raises(FormatError):
        checkpoint.decode(mutate(blob))


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FormatError):
        checkpoint.load(tmp_path / "nope.soco")


def test_train_state_round_trip():
    cfg = micro_config()
    state = TrainState.initial(cfg)
    back = TrainState.from_entries(checkpoint.decode(checkpoint.encode(state.to_entries())))
    assert (back.step, back.total_steps, back.seed) == (0, cfg.train.steps, cfg.seed)
    for a, b in ((state.params, back.params), (state.target, back.target), (state.slots, back.slots),
                 (state.buffers, back.buffers)):
        assert set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("mode", ["fpn", "c4"])
def test_export_contents(mode):
    cfg = micro_config(mode)
    entries = TrainState.initial(cfg).to_entries()
    out = checkpoint.export_weights(entries)
    assert out
    assert not any(k.startswith(("projector.", "predictor.")) for k in out)
    assert all(k.startswith(("backbone.", "fpn.", "head.")) for k in out)
    assert any(k.startswith("fpn.") for k in out) == (mode == "fpn")
    for k, v in out.items():
        src = entries.get(f"online.{k}", entries.get(f"buffers.{k}"))
        assert src.tobytes() == v.tobytes()
    n_online = sum(1 for k in entries if k.startswith("online.") and k[7:].startswith(("backbone.", "fpn.", "head.")))
    assert sum(1 for k in out if not k.endswith(("running_mean", "running_var"))) == n_online


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def test_gen_data_deterministic_and_valid(tmp_path):
    cfg = DataConfig()
    a = gen_data(tmp_path / "a", 12, cfg, seed=3)
    b = gen_data(tmp_path / "b", 12, cfg, seed=3)
    assert a == b
    for rec in a:
        assert (tmp_path / "a" / rec["file"]).read_bytes() == (tmp_path / "b" / rec["file"]).read_bytes()
        img = load_image(tmp_path / "a" / rec["file"])
        assert img.shape == (cfg.image_size, cfg.image_size, 3)
        boxes = [BBox(*s["bbox"]) for s in rec["shapes"]]
        assert 1 <= len(boxes) <= cfg.max_shapes
        for i, bx in enumerate(boxes):
            x0, y0, x1, y1 = bx.corners
            assert x0 >= 0 and y0 >= 0 and x1 <= cfg.image_size and y1 <= cfg.image_size
            for other in boxes[i + 1:]:
                assert iou(bx, other) <= cfg.iou_cap
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["images"]) == 12
    c = gen_data(tmp_path / "c", 2, cfg, seed=4)
    assert c[0]["shapes"] != a[0]["shapes"]


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["gen-data", "--set", "train.bogus=1", "--out", str(tmp_path)]) == 1
    assert main(["export", "--checkpoint", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert main(["proposals", "--images", str(tmp_path / "empty"), "--out", str(tmp_path / "p")]) == 1


def test_cli_proposals_uniform_image(tmp_path, capsys):
    from soco.data import save_png
    d = tmp_path / "imgs"
    d.mkdir()
    save_png(d / "flat.png", np.full((40, 60, 3), 0.5))
    (d / "junk.png").write_bytes(b"not an image")
    assert main(["proposals", "--images", str(d), "--out", str(tmp_path / "p.jsonl")]) == 0
    err = capsys.readouterr().err
    assert "junk.png" in err
    (rec,) = read_cache(tmp_path / "p.jsonl")
    assert (rec.image_id, rec.width, rec.height) == ("flat", 60, 40)
    assert rec.boxes == []  # the single full-frame box has relative size 1


def test_cli_gradcheck_ops_only(capsys):
    assert main(["gradcheck", "--no-model"]) == 0
    out = capsys.readouterr().out
    assert "roi_align" in out and "passed" in out


def _micro_run_config(tmp_path, **optim):
    cfg = micro_config()
    cfg = dataclasses.replace(
        cfg,
        train=dataclasses.replace(cfg.train, steps=3, batch_size=2, checkpoint_every=1),
        optim=dataclasses.replace(cfg.optim, **optim),
        paths=config.PathsConfig(data_dir=str(tmp_path / "data"), proposals=str(tmp_path / "p.jsonl"),
                                 out_dir=str(tmp_path / "run")))
    path = tmp_path / "cfg.json"
    path.write_text(config.dumps(cfg))
    return path


def test_cli_end_to_end_and_numeric_abort(tmp_path, capsys):
    cfg_path = _micro_run_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg_path), "--n", "4"]) == 0
    assert main(["proposals", "--config", str(cfg_path), "--workers", "2"]) == 0
    assert main(["pretrain", "--config", str(cfg_path)]) == 0
    run = tmp_path / "run"
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 3
    out = tmp_path / "weights.soco"
    assert main(["export", "--config", str(cfg_path), "--checkpoint", str(run / "ckpt_000003.soco"),
                 "--out", str(out)]) == 0
    assert all(k.startswith(("backbone.", "fpn.", "head.")) for k in checkpoint.load(out))
    capsys.readouterr()

    bad = _micro_run_config(tmp_path, base_lr=1e308, trust_coeff=1e308)
    assert main(["pretrain", "--config", str(bad), "--set", f"paths.out_dir={tmp_path / 'bad'}"]) == 2
    err = capsys.readouterr().err
    assert "last checkpoint" in err and "ckpt_" in err
