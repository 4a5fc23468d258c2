"""Command-line front end: ``python -m deal <subcommand>``.

Exit codes: 0 success, 1 input error, 2 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..errors import InputError, NumericError


def _cmd_simulate(args) -> None:
    from ..simulator import SimConfig, generate_pair
    from .io import write_manifest, write_pair

    cfg = SimConfig.from_file(args.config) if args.config else SimConfig()
    n = args.pairs if args.pairs is not None else cfg.pairs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        seed = args.seed + i
        entries.append(write_pair(out, i, generate_pair(cfg, seed), seed))
    write_manifest(out / "manifest.json", {"pairs": entries, "threshold_px": cfg.threshold_px})


def _cmd_detect(args) -> None:
    from ..network import to_gray
    from .detect import detect_keypoints
    from .io import load_image, write_keypoints

    kps = detect_keypoints(to_gray(load_image(args.image)), args.max_n)
    write_keypoints(args.out, kps)


def _cmd_describe(args) -> None:
    from .io import describe_file

    describe_file(args.image, args.keypoints, args.model, args.out)


def _cmd_match(args) -> None:
    from .io import read_descriptors, read_keypoints
    from .matching import match_nn

    da, db = read_descriptors(args.desc_a), read_descriptors(args.desc_b)
    matches = match_nn(da, db, mutual=args.mutual)
    kpa = read_keypoints(args.kp_a) if args.kp_a else None
    kpb = read_keypoints(args.kp_b) if args.kp_b else None
    rows = []
    for m in matches:
        row = {"ia": m.index_a, "ib": m.index_b, "distance": m.distance}
        if kpa is not None and kpb is not None:
            row["pa"] = [kpa[m.index_a].x, kpa[m.index_a].y]
            row["pb"] = [kpb[m.index_b].x, kpb[m.index_b].y]
        rows.append(row)
    Path(args.out).write_text(json.dumps({"matches": rows}, indent=2) + "\n")


def _cmd_eval(args) -> None:
    from .io import load_dataset, read_checkpoint
    from .matching import describe_and_evaluate

    _, pairs = load_dataset(args.manifest)
    weights = read_checkpoint(args.model)
    report = describe_and_evaluate(pairs, weights, args.threshold, mutual=args.mutual)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def _cmd_train(args) -> None:
    from .training import TrainConfig, train_manifest

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    train_manifest(args.manifest, cfg, args.out)


def _cmd_track(args) -> None:
    from .tracking import ransac_tps_track

    try:
        raw = json.loads(Path(args.matches).read_text())
        pts = np.array([[m["pa"], m["pb"]] for m in raw["matches"]], dtype=np.float64)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.matches}: matches need 'pa'/'pb' point pairs ({exc})") from None
    warp, mask = ransac_tps_track(pts.reshape(-1, 2, 2), args.iters, args.inlier_px, args.seed)
    out = {"warp": warp.to_dict(), "inliers": mask.astype(int).tolist(), "n_inliers": int(mask.sum())}
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deal", description="Deformation-aware local descriptors.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render simulated image pairs with ground truth")
    p.add_argument("--config", help="simulation config JSON (defaults if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, help="override the config's pair count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("detect", help="detect DoG keypoints")
    p.add_argument("--image", required=True)
    p.add_argument("--max-n", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("describe", help="describe keypoints with a checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_describe)

    p = sub.add_parser("match", help="nearest-neighbour matching of two descriptor files")
    p.add_argument("--desc-a", required=True)
    p.add_argument("--desc-b", required=True)
    p.add_argument("--kp-a", help="keypoints of A, to store point coordinates")
    p.add_argument("--kp-b", help="keypoints of B, to store point coordinates")
    p.add_argument("--mutual", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("eval", help="MS / MMA over a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=3.0)
    p.add_argument("--mutual", action="store_true")
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="training config JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("track", help="RANSAC + TPS warp from point matches")
    p.add_argument("--matches", required=True)
    p.add_argument("--iters", type=int, default=1500)
    p.add_argument("--inlier-px", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_track)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
