"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

The batch pipeline (gen-data / train / eval / plot) runs locally against the
filesystem. `serve` exposes inference over HTTP; `infer --url` sends the
request to such a server instead of loading the checkpoint locally.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .geometry import BoundingBox, read_rig
from .harness import (
    InferView,
    TrainConfig,
    evaluate,
    infer,
    load_model,
    parse_kv_file,
    plot_data,
    train,
    train_config_from_file,
    write_report,
)
from .hand_model import write_obj
from .synth import GenConfig, generate_dataset, read_pgm

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="direg3d",
                     description="Stereo fisheye hand tracking at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--report", required=True)

    p = sub.add_parser("infer", help="run inference on one or two crops")
    p.add_argument("--ckpt")
    p.add_argument("--left", help="left-view crop (PGM)")
    p.add_argument("--right", help="right-view crop (PGM)")
    p.add_argument("--left-box", help="full-frame box x_min,y_min,x_max,y_max")
    p.add_argument("--right-box")
    p.add_argument("--rig", required=True)
    p.add_argument("--obj", help="write the posed mesh as OBJ")
    p.add_argument("--url", help="send to a running service instead of running locally")

    p = sub.add_parser("plot", help="emit plot-ready TSV tables")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rig", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _gen_config_from_file(path: str) -> GenConfig:
    kv = parse_kv_file(path)
    known = {f.name for f in dc_fields(GenConfig)}
    unknown = set(kv) - known
    if unknown:
        raise DataError(f"{path}: unknown gen-data keys {sorted(unknown)}")
    kwargs = {}
    for key, value in kv.items():
        kwargs[key] = float(value) if key == "stereo_fraction" else int(value)
    return GenConfig(**kwargs)


def _parse_box(text: str) -> BoundingBox:
    try:
        vals = [float(x) for x in text.split(",")]
        if len(vals) != 4:
            raise ValueError
    except ValueError:
        raise DataError(f"box must be 'x_min,y_min,x_max,y_max', got {text!r}") from None
    return BoundingBox(*vals)


def _collect_views(args) -> list[tuple[str, Path, BoundingBox]]:
    views = []
    for name, img, box in (("left", args.left, args.left_box),
                           ("right", args.right, args.right_box)):
        if img is None:
            continue
        if box is None:
            raise DataError(f"--{name} requires --{name}-box")
        views.append((name, Path(img), _parse_box(box)))
    if not views:
        raise DataError("infer needs at least one of --left / --right")
    return views


def _cmd_infer(args) -> int:
    views = _collect_views(args)
    if args.url:
        return _cmd_infer_remote(args, views)
    if not args.ckpt:
        raise DataError("infer needs --ckpt (or --url)")
    bundle = load_model(args.ckpt)
    rig = read_rig(args.rig)
    infer_views = [InferView(name, read_pgm(path), box) for name, path, box in views]
    pred, state, _decoded = infer(bundle, infer_views, rig)
    mode = "stereo" if len(views) == 2 else "mono"
    print(f"mode\t{mode}")
    for k, (x, y, z) in enumerate(np.asarray(pred.indep_keypoints)):
        print(f"keypoint\t{k}\t{x!r}\t{y!r}\t{z!r}")
    if args.obj:
        write_obj(args.obj, np.asarray(state.vertices), bundle.template.faces)
        print(f"obj\t{args.obj}")
    return EXIT_OK


def _cmd_infer_remote(args, views) -> int:
    import base64
    import json
    import urllib.request

    payload = {
        "views": [
            {
                "camera": name,
                "image_pgm_b64": base64.b64encode(path.read_bytes()).decode(),
                "box": [box.x_min, box.y_min, box.x_max, box.y_max],
            }
            for name, path, box in views
        ],
        "include_mesh": bool(args.obj),
    }
    req = urllib.request.Request(
        args.url.rstrip("/") + "/infer",
        data=json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"},
    )
    with urllib.request.urlopen(req) as resp:
        body = json.loads(resp.read())
    print(f"mode\t{body['mode']}")
    for k, (x, y, z) in enumerate(body["keypoints3d"]):
        print(f"keypoint\t{k}\t{x!r}\t{y!r}\t{z!r}")
    if args.obj:
        Path(args.obj).write_text(body["obj"])
        print(f"obj\t{args.obj}")
    return EXIT_OK


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "gen-data":
        config = _gen_config_from_file(args.config)
        manifest = generate_dataset(config, seed=args.seed, out_dir=args.out,
                                    workers=args.workers)
        print(f"wrote {manifest.n_records} records to {args.out} "
              f"({manifest.stereo_count} stereo, "
              f"{manifest.resampled} resampled)")
        return EXIT_OK

    if args.command == "train":
        config = train_config_from_file(args.config)
        train(config, args.data, args.out)
        print(f"checkpoint written to {args.out}")
        return EXIT_OK

    if args.command == "eval":
        bundle = load_model(args.ckpt)
        report = evaluate(bundle, args.data, split=args.split)
        write_report(args.report, report)
        stereo = "-" if report.mkpe_stereo is None else f"{report.mkpe_stereo:.2f}"
        print(f"mono MKPE {report.mkpe_mono:.2f} mm (AUC {report.auc_mono:.3f}); "
              f"stereo MKPE {stereo} mm; report at {args.report}")
        return EXIT_OK

    if args.command == "infer":
        return _cmd_infer(args)

    if args.command == "plot":
        written = plot_data(args.report, args.out)
        for path in written:
            print(f"wrote {path}")
        return EXIT_OK

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        app = create_app(ckpt_path=args.ckpt, rig_path=args.rig)
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
        return EXIT_OK

    raise _UsageError(f"unknown command {args.command}")


def main() -> None:
    try:
        sys.exit(run(sys.argv[1:]))
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        sys.exit(EXIT_DATA)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        sys.exit(EXIT_NUMERIC)


if __name__ == "__main__":
    main()
