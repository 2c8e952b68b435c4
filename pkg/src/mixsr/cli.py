"""Command-line workflow: ``prep``, ``train``, ``sr``, ``eval``, ``maps``, ``bench``, ``info``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import colorsys
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .experts import EXPERT_KINDS
from .imaging import (
    ImageError,
    PlanarImage,
    bicubic_resize,
    degrade,
    load_image,
    luminance,
    modcrop,
    save_image,
    shave_border,
)
from .metrics import psnr
from .mixture import MixtureNetwork, WeightModuleConfig, make_mixture, max_label_map
from .model_store import ModelFormatError, load_model, read_manifest
from .pipeline import super_resolve, target_size, upscale_luminance
from .training import MetricsRow, NumericAbort, TrainConfig, evaluate_image, mean_row, train

log = logging.getLogger("mixsr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_EXTENSIONS = (".png", ".ppm", ".pgm", ".pnm", ".bmp")
MANIFEST = "manifest.csv"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def worker_count() -> int:
    cap = os.environ.get("MIXSR_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"MIXSR_THREADS must be an integer, got {cap!r}") from None
    return n


def list_images(directory: str) -> List[str]:
    if not os.path.isdir(directory):
        raise DataError(f"not a directory: {directory}")
    files = sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTENSIONS))
    if not files:
        raise DataError(f"no images found in {directory}")
    return [os.path.join(directory, f) for f in files]


# ---------------------------------------------------------------------------
# prep


def _resize_any(img: PlanarImage, width: int, height: int) -> PlanarImage:
    if img.channels == 1:
        return bicubic_resize(img, width, height)
    planes = [bicubic_resize(PlanarImage(img.data[:, :, c]), width, height).data for c in range(3)]
    return PlanarImage(np.stack(planes, axis=-1))


def cmd_prep(in_dir: str, out_dir: str, scale: int) -> List[dict]:
    """Write HR (modulo-cropped), LR and bicubic-upscaled LR images plus ``manifest.csv``."""
    if scale < 2:
        raise UsageError(f"scale must be >= 2, got {scale}")
    paths = list_images(in_dir)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for path in paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        img = load_image(path)
        hr = modcrop(img, scale)
        lr = _resize_any(hr, hr.width // scale, hr.height // scale)
        bic = _resize_any(lr, hr.width, hr.height)
        names = {k: f"{stem}_x{scale}_{k}.png" for k in ("hr", "lr", "bicubic")}
        for key, im in (("hr", hr), ("lr", lr), ("bicubic", bic)):
            save_image(im, os.path.join(out_dir, names[key]))
        rows.append(
            {
                "name": stem,
                "scale": scale,
                "hr": names["hr"],
                "lr": names["lr"],
                "bicubic": names["bicubic"],
                "width": hr.width,
                "height": hr.height,
                "cropped": int((hr.width, hr.height) != (img.width, img.height)),
            }
        )
    with open(os.path.join(out_dir, MANIFEST), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_dataset(directory: str) -> List[tuple]:
    """``(name, hr_image)`` pairs from a prepped directory or a plain image folder."""
    manifest = os.path.join(directory, MANIFEST)
    if os.path.exists(manifest):
        with open(manifest, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"empty manifest {manifest}")
        return [(r["name"], load_image(os.path.join(directory, r["hr"]))) for r in rows]
    return [(os.path.splitext(os.path.basename(p))[0], load_image(p)) for p in list_images(directory)]


# ---------------------------------------------------------------------------
# train

_CONFIG_KEYS = {"corpus", "output", "model", "init_model", "init_experts", "train"}
_MODEL_KEYS = {"n_experts", "kind", "expert", "weight_module", "seed"}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise UsageError(f"config section {where!r} must be an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise UsageError(f"unknown config field(s) in {where}: {', '.join(unknown)}")


def build_model_from_config(spec: dict) -> MixtureNetwork:
    _reject_unknown(spec, _MODEL_KEYS, "model")
    kind = spec.get("kind", "scn")
    if kind not in EXPERT_KINDS:
        raise UsageError(f"model.kind must be one of {sorted(EXPERT_KINDS)}, got {kind!r}")
    try:
        expert_cfg = EXPERT_KINDS[kind][1].from_dict(spec.get("expert", {}))
        wm_cfg = WeightModuleConfig.from_dict(spec.get("weight_module", {}))
        return make_mixture(int(spec.get("n_experts", 1)), kind, expert_cfg, seed=int(spec.get("seed", 0)), weight_config=wm_cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def copy_experts(source: MixtureNetwork, target: MixtureNetwork) -> None:
    """Seed every expert of ``target`` from ``source`` (cycling when it has fewer experts)."""
    for i, expert in enumerate(target.experts):
        src = source.experts[i % source.n_experts]
        if src.kind != expert.kind or src.config != expert.config:
            raise UsageError(
                f"init_experts: source expert {i % source.n_experts} ({src.kind}, {src.config}) "
                f"does not match target expert {i} ({expert.kind}, {expert.config})"
            )
        for name, p in expert.parameters().items():
            p.value[...] = src.parameters()[name].value


def load_train_config(path: str) -> dict:
    """Parse and validate a training config; relative paths resolve against its directory."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    _reject_unknown(cfg, _CONFIG_KEYS, "config")
    if "corpus" not in cfg:
        raise UsageError("config field 'corpus' is required")
    if "init_model" in cfg and ("model" in cfg or "init_experts" in cfg):
        raise UsageError("config field 'init_model' excludes 'model' and 'init_experts'")
    base = os.path.dirname(os.path.abspath(path))
    for key in ("corpus", "output", "init_model", "init_experts"):
        if key in cfg and not os.path.isabs(cfg[key]):
            cfg[key] = os.path.join(base, cfg[key])
    try:
        cfg["train"] = TrainConfig.from_dict(cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc
    return cfg


def cmd_train(config_path: str, seed: Optional[int] = None, out: Optional[str] = None):
    cfg = load_train_config(config_path)
    tc: TrainConfig = cfg["train"]
    if seed is not None:
        tc.seed = seed
    if "init_model" in cfg:
        net = load_model(cfg["init_model"])
    else:
        model_spec = dict(cfg.get("model", {}))
        if seed is not None:
            model_spec.setdefault("seed", seed)
        net = build_model_from_config(model_spec)
        if "init_experts" in cfg:
            copy_experts(load_model(cfg["init_experts"]), net)
    out_dir = out or cfg.get("output") or "mixsr_run"
    corpus = [img for _, img in load_dataset(cfg["corpus"])]

    def progress(state):
        print(f"iteration {state.iteration:7d}  loss {state.loss:.6g}  ema {state.ema_loss:.6g}", flush=True)

    state = train(net, corpus, tc, out_dir=out_dir, progress=progress)
    print(f"wrote {state.model_path}")
    return state


# ---------------------------------------------------------------------------
# sr / eval


def cmd_sr(model_path: str, image_path: str, scale: float, out: str) -> Dict[str, object]:
    net = load_model(model_path)
    img = load_image(image_path)
    stats: Dict[str, object] = {}
    result = super_resolve(net, img, scale, stats)
    save_image(result, out)
    stats.update(path=out, width=result.width, height=result.height)
    return stats


EVAL_FIELDS = ("scale", "name", "psnr", "ssim", "bicubic_psnr", "bicubic_ssim")


def cmd_eval(model_path: Optional[str], dataset_dir: str, scales: Sequence[int], out: Optional[str] = None) -> List[dict]:
    """Per-image and mean PSNR/SSIM for each scale, with a bicubic baseline column.

    ``model_path=None`` evaluates bicubic only (model columns then repeat it).
    """
    net = load_model(model_path) if model_path else None
    data = load_dataset(dataset_dir)
    out_rows: List[dict] = []
    for scale in scales:
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            metrics = list(pool.map(lambda item: evaluate_image(net, item[1], scale), data))
        rows = [MetricsRow(name, *m) for (name, _), m in zip(data, metrics)]
        rows.append(mean_row(rows))
        out_rows.extend({"scale": scale, **asdict(r)} for r in rows)
    if out:
        _write_csv(out, EVAL_FIELDS, out_rows)
    return out_rows


def _write_csv(path: str, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# maps


def label_palette(n: int) -> List[int]:
    """``n`` distinct RGB colours as a flat PIL palette."""
    base = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230)]
    colours = base[:n]
    for i in range(len(colours), n):
        r, g, b = colorsys.hsv_to_rgb((i * 0.618033988749895) % 1.0, 0.8, 0.9)
        colours.append((int(r * 255), int(g * 255), int(b * 255)))
    return [v for c in colours for v in c]


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255] uint8; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


@dataclass
class MapsResult:
    weight_maps: np.ndarray
    labels: np.ndarray
    paths: List[str]


def cmd_maps(model_path: str, image_path: str, scale: float, out_dir: str, raw: bool = False) -> MapsResult:
    """Export one grayscale image per weight map plus a paletted max-label image.

    The input is bicubic-upscaled to the target grid and passed once through
    the mixture. With ``raw`` the unnormalized maps are also saved as
    ``weight_maps.npy``.
    """
    net = load_model(model_path)
    if net.n_experts < 2:
        raise UsageError("model has a single expert: its gate is implicitly all ones, there are no weight maps to export")
    y = luminance(load_image(image_path))
    tw, th = target_size(y.width, y.height, scale)
    up = bicubic_resize(y, tw, th)
    _, maps, _ = net.forward_all(up.data[None, None], cache=False)
    maps = maps[0]
    labels = max_label_map(maps)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(net.n_experts):
        p = os.path.join(out_dir, f"weight_map_{i + 1}.png")
        Image.fromarray(normalize_map(maps[i])).save(p)
        paths.append(p)
    label_img = Image.fromarray(labels.astype(np.uint8), mode="P")
    label_img.putpalette(label_palette(net.n_experts))
    p = os.path.join(out_dir, "max_label_map.png")
    label_img.save(p)
    paths.append(p)
    if raw:
        np.save(os.path.join(out_dir, "weight_maps.npy"), maps)
    return MapsResult(maps, labels, paths)


# ---------------------------------------------------------------------------
# bench

BENCH_FIELDS = ("model", "n_experts", "mean_psnr", "mean_seconds")


def cmd_bench(model_paths: Sequence[str], dataset_dir: str, scale: int, repeats: int = 1, out: Optional[str] = None) -> List[dict]:
    """Mean PSNR and mean per-image inference time per model, sorted by time.

    One untimed warm-up pass per model precedes ``repeats`` timed passes
    over the whole set. Images are processed sequentially.
    """
    if not model_paths:
        raise UsageError("bench needs at least one model")
    if repeats < 1:
        raise UsageError(f"repeats must be >= 1, got {repeats}")
    data = load_dataset(dataset_dir)
    pairs = []
    for name, img in data:
        y = luminance(img)
        lr, _ = degrade(y, scale)
        pairs.append((modcrop(y, scale), lr))
    rows = []
    for path in model_paths:
        net = load_model(path)
        upscale_luminance(net, pairs[0][1], scale)
        times = []
        scores = []
        for r in range(repeats):
            for hr, lr in pairs:
                t0 = time.perf_counter()
                sr = upscale_luminance(net, lr, scale)
                times.append(time.perf_counter() - t0)
                if r == 0:
                    scores.append(psnr(shave_border(sr, scale), shave_border(hr, scale)))
        rows.append(
            {"model": path, "n_experts": net.n_experts, "mean_psnr": float(np.mean(scores)), "mean_seconds": float(np.mean(times)), "timed_images": len(times)}
        )
    rows.sort(key=lambda r: r["mean_seconds"])
    if out:
        _write_csv(out, BENCH_FIELDS, [{k: r[k] for k in BENCH_FIELDS} for r in rows])
    return rows


# ---------------------------------------------------------------------------
# info


def cmd_info(model_path: str) -> dict:
    return read_manifest(model_path)


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixsr", description="Mixture-of-experts single-image super-resolution.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="build LR/HR pairs from a folder of images")
    p.add_argument("in_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=2)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("sr", help="super-resolve one image")
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--scale", type=float, default=2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM on a dataset")
    p.add_argument("dataset")
    p.add_argument("--model")
    p.add_argument("--scale", type=int, action="append")
    p.add_argument("--out")

    p = sub.add_parser("maps", help="export weight maps and the max-label map")
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--scale", type=float, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", action="store_true", help="also save unnormalized maps as .npy")

    p = sub.add_parser("bench", help="PSNR versus inference time")
    p.add_argument("dataset")
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out")

    p = sub.add_parser("info", help="print a model's manifest")
    p.add_argument("--model", required=True)
    return parser


def _print_rows(rows: Sequence[dict], fields: Sequence[str]) -> None:
    writer = csv.DictWriter(sys.stdout, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "prep":
            rows = cmd_prep(args.in_dir, args.out, args.scale)
            print(f"prepared {len(rows)} images in {args.out}")
        elif args.command == "train":
            cmd_train(args.config, seed=args.seed, out=args.out)
        elif args.command == "sr":
            stats = cmd_sr(args.model, args.image, args.scale, args.out)
            print(f"wrote {stats['path']} ({stats['width']}x{stats['height']}, {stats['passes']} cascade passes)")
        elif args.command == "eval":
            rows = cmd_eval(args.model, args.dataset, args.scale or [2], args.out)
            _print_rows(rows, EVAL_FIELDS)
        elif args.command == "maps":
            res = cmd_maps(args.model, args.image, args.scale, args.out, raw=args.raw)
            print("\n".join(res.paths))
        elif args.command == "bench":
            rows = cmd_bench(args.model, args.dataset, args.scale, args.repeats, args.out)
            _print_rows(rows, BENCH_FIELDS)
        elif args.command == "info":
            print(json.dumps(cmd_info(args.model), indent=2, sort_keys=True))
    except UsageError as exc:
        print(f"mixsr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"mixsr: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ImageError, ModelFormatError, FileNotFoundError, ValueError) as exc:
        print(f"mixsr: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
