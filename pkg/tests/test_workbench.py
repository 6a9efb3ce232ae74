"""Synthetic world, manifest handling, preprocessing, and the CLI."""

import json
import os

import numpy as np
import pytest
import torch

from placerec import cli, data
from placerec.sampling import partition_cells
from placerec.synthworld import (APPEARANCE_LEVELS, SynthWorldConfig,
                                 generate_synth_world, render_place_view,
                                 _place_texture_params)


# --- manifests ---------------------------------------------------------------

def test_manifest_round_trip_lossless(tmp_path):
    places = [data.PlaceRecord("p0", [
        data.ImageEntry("a.png", 1.5, 2.5, 30.0, "pano", 2080, 320),
        data.ImageEntry("b.png", 1.0, 2.0, 0.0, "egocentric", 320, 320)]),
        data.PlaceRecord("p1", [
            data.ImageEntry("c.png", -3.25, 4.75, 359.9, "egocentric", 64, 64)])]
    path = str(tmp_path / "m.jsonl")
    data.write_manifest(places, path)
    back = data.load_manifest(path)
    assert [p.place_id for p in back] == ["p0", "p1"]
    assert back[0].images == places[0].images
    assert back[1].images == places[1].images


def test_manifest_error_reporting(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    with open(path, "w") as fh:
        fh.write("not json\n")
    with pytest.raises(data.ManifestError, match="line 1"):
        data.load_manifest(path)
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": "other", "version": 1}) + "\n")
    with pytest.raises(data.ManifestError, match="schema"):
        data.load_manifest(path)
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": data.MANIFEST_SCHEMA, "version": 1}) + "\n")
        fh.write('{"place_id": "p"}\n')  # missing image fields
    with pytest.raises(data.ManifestError, match="line 2"):
        data.load_manifest(path)


def test_filter_grouped_counts():
    places = [data.PlaceRecord("a", [None] * 4), data.PlaceRecord("b", [None])]
    kept, dropped = data.filter_grouped(places)
    assert [p.place_id for p in kept] == ["a"]
    assert dropped == 1


# --- preprocessing -----------------------------------------------------------

def test_preprocess_normalization_known_values():
    img = np.full((16, 16, 3), 255, dtype=np.uint8)
    out = data.preprocess(img, 8)
    assert out.shape == (3, 8, 8)
    for c in range(3):
        want = (1.0 - data.DEFAULT_MEAN[c]) / data.DEFAULT_STD[c]
        assert torch.allclose(out[c], torch.full((8, 8), want), atol=1e-5)


def test_preprocess_accepts_channels_first():
    chw = np.random.default_rng(0).integers(0, 255, (3, 20, 20)).astype(np.uint8)
    hwc = chw.transpose(1, 2, 0)
    assert torch.allclose(data.preprocess(chw, 16), data.preprocess(hwc, 16))
    with pytest.raises(ValueError):
        data.preprocess(np.zeros((4, 4)), 8)


def test_load_image_round_trip(tmp_path):
    import cv2
    rgb = np.random.default_rng(1).integers(0, 255, (10, 12, 3)).astype(np.uint8)
    path = str(tmp_path / "img.png")
    cv2.imwrite(path, rgb[:, :, ::-1])
    back = data.load_image(path)
    assert back.shape == (3, 10, 12)
    assert np.array_equal(back, rgb.transpose(2, 0, 1))
    with pytest.raises(FileNotFoundError):
        data.load_image(str(tmp_path / "nope.png"))


# --- synthetic world ---------------------------------------------------------

def test_world_config_validation():
    with pytest.raises(ValueError):
        SynthWorldConfig(num_places=1)
    with pytest.raises(ValueError):
        SynthWorldConfig(appearance_variation="extreme")
    with pytest.raises(ValueError):
        SynthWorldConfig(places_per_family=0)
    assert set(APPEARANCE_LEVELS) == {"none", "mild", "strong"}


def test_world_layout_and_manifest(micro_world, micro_places):
    assert len(micro_places) == 6
    for place in micro_places:
        panos = [i for i in place.images if i.kind == "pano"]
        egos = [i for i in place.images if i.kind == "egocentric"]
        assert len(panos) == 4 and len(egos) == 4
        for img in place.images:
            assert os.path.exists(os.path.join(os.path.dirname(micro_world),
                                               img.path))
        assert panos[0].width == 2080 and panos[0].height == 320


def test_world_supports_all_sampling_modes(micro_world, micro_places,
                                            shared_loader):
    root = os.path.dirname(micro_world)
    panos = data.pano_records(micro_places, root)
    assert len(panos) == 24
    assert partition_cells(panos, 15.0)  # cell mode has usable cells
    grouped, dropped = data.filter_grouped(
        [data.PlaceRecord(p.place_id,
                          [i for i in p.images if i.kind == "egocentric"])
         for p in micro_places])
    assert len(grouped) == 6 and dropped == 0


def test_family_members_share_texture_but_not_window():
    a = _place_texture_params(0, 0, places_per_family=2)
    b = _place_texture_params(0, 1, places_per_family=2)
    c = _place_texture_params(0, 2, places_per_family=2)
    for key in ("base", "freq_theta", "phase", "amp"):
        assert np.array_equal(a[key], b[key])      # same family
        assert not np.array_equal(a[key], c[key])  # next family differs
    assert abs(a["theta_shift"] - b["theta_shift"]) > 50.0


def test_render_determinism():
    cfg = SynthWorldConfig(num_places=4, texture_seed=3)
    v1 = render_place_view(cfg, 1, 90.0, 64, np.random.default_rng(5))
    v2 = render_place_view(cfg, 1, 90.0, 64, np.random.default_rng(5))
    assert np.array_equal(v1, v2)
    v3 = render_place_view(cfg, 1, 150.0, 64, np.random.default_rng(5))
    assert not np.array_equal(v1, v3)


# --- CLI ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """One synth -> pretrain -> finetune -> index chain shared by CLI tests."""
    base = tmp_path_factory.mktemp("cli")
    world = str(base / "world")
    assert cli.main(["synth", "--out", world, "--places", "4",
                     "--seed", "7"]) == 0
    manifest = os.path.join(world, "manifest.jsonl")
    pre = str(base / "pre")
    assert cli.main(["pretrain", "--manifest", manifest, "--out", pre,
                     "--preset", "tiny", "--steps", "2", "--seed", "0"]) == 0
    fine = str(base / "fine")
    assert cli.main(["finetune", "--manifest", manifest, "--checkpoint",
                     os.path.join(pre, "stage1.pt"), "--out", fine,
                     "--epochs", "1", "--seed", "0"]) == 0
    idx = str(base / "idx")
    ckpt = os.path.join(fine, "stage2.pt")
    assert cli.main(["index", "--manifest", manifest, "--checkpoint", ckpt,
                     "--out", idx]) == 0
    return {"base": base, "manifest": manifest, "ckpt": ckpt, "idx": idx,
            "world": world, "pre": pre, "fine": fine}


def test_cli_writes_config_snapshots(cli_run):
    for d, name in ((cli_run["world"], "synth"), (cli_run["pre"], "pretrain"),
                    (cli_run["fine"], "finetune"), (cli_run["idx"], "index")):
        snap = os.path.join(d, f"{name}.config.json")
        assert os.path.exists(snap)
        payload = json.load(open(snap))
        assert payload  # resolved config next to the outputs


def test_cli_retrieve_topn1_equals_no_refine(cli_run, capsys):
    args = ["retrieve", "--manifest", cli_run["manifest"], "--checkpoint",
            cli_run["ckpt"], "--index", cli_run["idx"], "--topn", "1"]
    assert cli.main(args) == 0
    refined = [l.split("\t")[:2] for l in
               capsys.readouterr().out.strip().splitlines()]
    assert cli.main(args + ["--no-refine"]) == 0
    plain = [l.split("\t")[:2] for l in
             capsys.readouterr().out.strip().splitlines()]
    assert refined == plain


def test_cli_eval_and_report(cli_run, tmp_path, capsys):
    out = str(tmp_path / "eval")
    assert cli.main(["eval", "--manifest", cli_run["manifest"], "--checkpoint",
                     cli_run["ckpt"], "--index", cli_run["idx"], "--out", out,
                     "--topn", "3", "--ns", "1,3"]) == 0
    csv_path = os.path.join(out, "recall.csv")
    assert os.path.exists(csv_path)
    capsys.readouterr()
    assert cli.main(["report", "--csv", csv_path]) == 0
    assert "refined" in capsys.readouterr().out


def test_cli_eval_without_index_is_actionable(cli_run, tmp_path, capsys):
    rc = cli.main(["eval", "--manifest", cli_run["manifest"], "--checkpoint",
                   cli_run["ckpt"], "--index", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "placerec index" in capsys.readouterr().err


def test_cli_retrieve_missing_index(cli_run, tmp_path, capsys):
    rc = cli.main(["retrieve", "--manifest", cli_run["manifest"],
                   "--checkpoint", cli_run["ckpt"],
                   "--index", str(tmp_path / "missing")])
    assert rc == 2


def test_cli_unknown_flag_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth", "--out", "/tmp/x", "--bogus-flag"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err.lower()
