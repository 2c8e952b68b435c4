import csv
import json

import numpy as np
import pytest
from PIL import Image

from mixsr import cli
from mixsr.imaging import PlanarImage, load_image, save_image
from mixsr.mixture import make_mixture
from mixsr.model_store import load_model, save_model

TINY = dict(dict_size=8, lista_stages=1, feature_channels=4, feature_kernel=3, recon_kernel=3)
GATE = dict(width1=4, width2=3, kernel=3)


@pytest.fixture
def image_dir(tmp_path, camera, astronaut):
    d = tmp_path / "images"
    d.mkdir()
    save_image(PlanarImage(camera.data[100:141, 180:230]), d / "cam.png")
    save_image(PlanarImage(astronaut.data[:40, 100:148]), d / "astro.png")
    return d


def model_file(tmp_path, n=2, seed=0):
    net = make_mixture(n, "scn", dict(TINY), seed=seed, weight_config=GATE)
    path = tmp_path / f"m{n}.mscn"
    save_model(net, path)
    return path


def test_prep_writes_pairs_and_manifest(tmp_path, image_dir):
    out = tmp_path / "prepped"
    assert cli.main(["prep", str(image_dir), "--out", str(out), "--scale", "3"]) == 0
    rows = list(csv.DictReader(open(out / "manifest.csv")))
    assert [r["name"] for r in rows] == ["astro", "cam"]
    cam = rows[1]
    hr, lr, bic = (load_image(out / cam[k]) for k in ("hr", "lr", "bicubic"))
    assert hr.shape == (39, 48) and lr.shape == (13, 16) and bic.shape == (39, 48)
    assert cam["cropped"] == "1"
    assert load_image(out / rows[0]["hr"]).channels == 3


def test_train_from_config(tmp_path, image_dir):
    cfg = {
        "corpus": str(image_dir),
        "model": {"n_experts": 2, "kind": "scn", "expert": TINY, "weight_module": GATE},
        "train": {"batch_size": 2, "patch_size": 16, "max_iterations": 3, "augment_scales": [], "log_every": 1},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "run"), "--seed", "4"]) == 0
    net = load_model(tmp_path / "run" / "model.mscn")
    assert net.n_experts == 2 and net.experts[0].config.dict_size == 8
    assert len((tmp_path / "run" / "loss_log.csv").read_text().splitlines()) == 4


def test_train_warm_start_and_relative_paths(tmp_path, image_dir):
    init = model_file(tmp_path, n=2, seed=5)
    cfg = {"corpus": "images", "init_model": init.name, "output": "run", "train": {"batch_size": 1, "patch_size": 16, "max_iterations": 0}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
    a, b = load_model(init), load_model(tmp_path / "run" / "model.mscn")
    for p, q in zip(a.parameters().values(), b.parameters().values()):
        np.testing.assert_array_equal(p.value, q.value)


def test_train_experts_seeded_from_pretrained_single_model(tmp_path, image_dir):
    single = make_mixture(1, "scn", dict(TINY), seed=11)
    save_model(single, tmp_path / "scn.mscn")
    cfg = {
        "corpus": "images",
        "init_experts": "scn.mscn",
        "model": {"n_experts": 3, "expert": TINY, "weight_module": GATE},
        "train": {"batch_size": 1, "patch_size": 16, "max_iterations": 0},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "run")]) == 0
    net = load_model(tmp_path / "run" / "model.mscn")
    for e in net.experts:
        np.testing.assert_array_equal(e.feature.weight.value, single.experts[0].feature.weight.value)
    cfg["model"]["expert"] = dict(TINY, dict_size=16)
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "run2")]) == cli.EXIT_USAGE


@pytest.mark.parametrize(
    "cfg,msg",
    [
        ({"corpus": "x", "bogus": 1}, "bogus"),
        ({"corpus": "x", "train": {"lr": 1}}, "lr"),
        ({"corpus": "x", "model": {"experts": 2}}, "experts"),
        ({"corpus": "x", "model": {"expert": {"dict_size": 4}}}, "dict_size"),
        ({"train": {}}, "corpus"),
        ({"corpus": "x", "model": {}, "init_model": "m"}, "excludes"),
    ],
)
def test_train_config_errors_are_usage_errors(tmp_path, cfg, msg, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_USAGE
    assert msg in capsys.readouterr().err


def test_sr_scale_three_runs_two_passes(tmp_path, image_dir):
    model = model_file(tmp_path)
    stats = cli.cmd_sr(str(model), str(image_dir / "cam.png"), 3, str(tmp_path / "out.png"))
    assert stats["passes"] == 2 and stats["downsized"]
    assert load_image(tmp_path / "out.png").shape == (123, 150)
    assert cli.main(["sr", str(image_dir / "astro.png"), "--model", str(model), "--scale", "2", "--out", str(tmp_path / "a.png")]) == 0
    assert load_image(tmp_path / "a.png").data.shape == (80, 96, 3)


def test_eval_writes_model_and_bicubic_columns(tmp_path, image_dir):
    model = model_file(tmp_path)
    rows = cli.cmd_eval(str(model), str(image_dir), [2, 3], str(tmp_path / "m.csv"))
    assert [r["name"] for r in rows] == ["astro", "cam", "mean"] * 2
    written = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert list(written[0]) == list(cli.EVAL_FIELDS)
    assert float(written[0]["psnr"]) == pytest.approx(rows[0]["psnr"])
    bic = cli.cmd_eval(None, str(image_dir), [2])
    assert bic[0]["psnr"] == bic[0]["bicubic_psnr"] == rows[0]["bicubic_psnr"]


def test_eval_on_prepped_directory(tmp_path, image_dir):
    cli.cmd_prep(str(image_dir), str(tmp_path / "p"), 2)
    rows = cli.cmd_eval(None, str(tmp_path / "p"), [2])
    assert [r["name"] for r in rows] == ["astro", "cam", "mean"]


def test_eval_respects_thread_cap(tmp_path, image_dir, monkeypatch):
    monkeypatch.setenv("MIXSR_THREADS", "1")
    assert cli.worker_count() == 1
    monkeypatch.setenv("MIXSR_THREADS", "lots")
    assert cli.main(["eval", str(image_dir)]) == cli.EXIT_USAGE


def test_maps_exports_normalized_maps_and_labels(tmp_path, image_dir):
    model = model_file(tmp_path, n=3)
    res = cli.cmd_maps(str(model), str(image_dir / "cam.png"), 2, str(tmp_path / "maps"), raw=True)
    assert res.weight_maps.shape == (3, 82, 100)
    raw = np.load(tmp_path / "maps" / "weight_maps.npy")
    np.testing.assert_array_equal(raw, res.weight_maps)
    for i in range(3):
        img = np.asarray(Image.open(tmp_path / "maps" / f"weight_map_{i + 1}.png"))
        assert img.min() == 0 and img.max() == 255
    label = Image.open(tmp_path / "maps" / "max_label_map.png")
    assert label.mode == "P"
    np.testing.assert_array_equal(np.asarray(label), np.argmax(raw, axis=0))


def test_maps_rejects_single_expert(tmp_path, image_dir):
    path = tmp_path / "one.mscn"
    save_model(make_mixture(1, "scn", dict(TINY)), path)
    assert cli.main(["maps", str(image_dir / "cam.png"), "--model", str(path), "--out", str(tmp_path / "m")]) == cli.EXIT_USAGE


def test_normalize_map_and_palette():
    np.testing.assert_array_equal(cli.normalize_map(np.array([[1.0, 2.0, 3.0]])), [[0, 128, 255]])
    assert not cli.normalize_map(np.ones((2, 2))).any()
    pal = cli.label_palette(12)
    colours = {tuple(pal[i : i + 3]) for i in range(0, 36, 3)}
    assert len(colours) == 12


def test_bench_sorted_by_time(tmp_path, image_dir):
    models = [str(model_file(tmp_path, n)) for n in (1, 2)]
    rows = cli.cmd_bench(models, str(image_dir), 2, repeats=2, out=str(tmp_path / "b.csv"))
    assert [r["mean_seconds"] for r in rows] == sorted(r["mean_seconds"] for r in rows)
    assert all(r["timed_images"] == 4 for r in rows)
    header = (tmp_path / "b.csv").read_text().splitlines()[0]
    assert header == ",".join(cli.BENCH_FIELDS)


def test_info_prints_manifest(tmp_path, capsys):
    model = model_file(tmp_path)
    assert cli.main(["info", "--model", str(model)]) == 0
    assert json.loads(capsys.readouterr().out)["n_experts"] == 2


def test_exit_codes(tmp_path, image_dir, capsys):
    assert cli.main(["sr", "x.png", "--model", str(tmp_path / "missing.mscn"), "--out", "y.png"]) == cli.EXIT_DATA
    (tmp_path / "bad.mscn").write_bytes(b"garbage!" * 4)
    assert cli.main(["info", "--model", str(tmp_path / "bad.mscn")]) == cli.EXIT_DATA
    assert cli.main(["eval", str(tmp_path / "nowhere")]) == cli.EXIT_DATA
    assert cli.main(["prep", str(image_dir), "--out", str(tmp_path / "p"), "--scale", "1"]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["sr", "x.png"])
    assert exc.value.code == cli.EXIT_USAGE


def test_numeric_abort_exit_code(tmp_path, image_dir, monkeypatch):
    from mixsr.training import NumericAbort

    def boom(*a, **k):
        raise NumericAbort("non-finite loss at iteration 1")

    monkeypatch.setattr(cli, "train", boom)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"corpus": str(image_dir)}))
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_NUMERIC
