"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .annotate import ClasswiseTally, annotate_frame, apply_click_noise, miou
from .annoserve import AnnotationService, make_server
from .clustering import ClusterBudget, cluster_frame, load_clustering, save_clustering
from .datamodel import (
    load_frame,
    load_manifest,
    load_manifest_frame,
    load_pseudo_labels,
    save_pseudo_labels,
)
from .errors import ConfigError, MillisegError
from . import annotate as annotate_mod
from .pipeline import (
    PipelineConfig,
    StageError,
    derive_seed,
    read_kept,
    read_selection,
    run_pipeline,
    run_prune,
    run_select,
)
from .semisup import (
    PointwiseClassifier,
    SemiSupConfig,
    load_model,
    save_model,
    train_two_stage,
)
from .synthetic import SyntheticSpec, generate_dataset


def _common(sub):
    sub.add_argument("--seed", type=int, default=0, help="base random seed")
    sub.add_argument("--threads", type=int, default=1, help="frame-level parallelism")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milliseg",
        description="Click-efficient lidar annotation pipeline",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("prune", help="drop near-duplicate consecutive frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_prune)

    p = subs.add_parser("select", help="rank kept frames by diversity")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kept", required=True, help="output of the prune stage")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--budget-frames", type=int, default=None)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_select)

    p = subs.add_parser("cluster", help="budgeted k-means over one frame")
    p.add_argument("--frame", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--min-factor", type=int, default=10)
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--features", choices=["features", "coords"], default="features")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_cluster)

    p = subs.add_parser("annotate", help="annotate selected frames and report quality")
    p.add_argument("--manifest", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--mode", choices=["oracle", "serve"], default="oracle")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--min-factor", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--features", choices=["features", "coords"], default="features")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--report", required=True)
    _common(p)
    p.set_defaults(func=cmd_annotate)

    p = subs.add_parser("train", help="two-stage training on pseudo-labeled frames")
    p.add_argument("--labeled", required=True, help="dir of .mlnf + .mlnl pairs")
    p.add_argument("--unlabeled", default=None, help="dir of .mlnf files")
    p.add_argument("--config", default=None, help="JSON with SemiSupConfig fields")
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--hidden", default="32,32")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="mIoU of a trained model on labeled frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", default=None)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("pipeline", help="run every stage with resume")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out-dir", default=None)
    _common(p)
    p.set_defaults(func=cmd_pipeline)

    p = subs.add_parser("gen-synthetic", help="write a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--points-per-frame", type=int, default=2000)
    p.add_argument("--frames", type=int, default=10, help="frames per sequence")
    p.add_argument("--sequences", type=int, default=2)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--drift", type=float, default=0.08)
    _common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = subs.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clusterings", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--queue-order", choices=["cluster", "spatial"], default="cluster")
    _common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def cmd_prune(args) -> int:
    manifest = load_manifest(args.manifest)
    kept = run_prune(manifest, args.tau, Path(args.out), args.threads)
    print(f"kept {len(kept)} of {len(manifest.all_frames())} frames -> {args.out}")
    return 0


def cmd_select(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.num_classes is not None and args.num_classes != manifest.num_classes:
        raise ConfigError(
            f"--num-classes {args.num_classes} conflicts with manifest "
            f"({manifest.num_classes})"
        )
    kept_ids = [fid for _, fid in read_kept(Path(args.kept))]
    chosen = run_select(
        manifest, kept_ids, args.budget_frames, args.seed, Path(args.out), args.threads
    )
    print(f"selected {len(chosen)} of {len(kept_ids)} frames -> {args.out}")
    return 0


def cmd_cluster(args) -> int:
    frame = load_frame(args.frame)
    budget = ClusterBudget(alpha=args.alpha, min_factor=args.min_factor)
    clustering = cluster_frame(
        frame,
        budget,
        args.num_classes,
        args.seed,
        use_coords=args.features == "coords",
    )
    save_clustering(clustering, args.out)
    print(f"k={clustering.num_clusters} clusters for {frame.num_points} points -> {args.out}")
    return 0


def cmd_annotate(args) -> int:
    manifest = load_manifest(args.manifest)
    selected = [fid for fid, _ in read_selection(Path(args.selection))]
    out_dir = Path(args.out_dir)
    clustering_dir = out_dir / "clusterings"
    labels_dir = out_dir / "labels"
    clustering_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)
    budget = ClusterBudget(alpha=args.alpha, min_factor=args.min_factor)
    use_coords = args.features == "coords"

    for fid in selected:
        path = clustering_dir / f"{fid}.mlnc"
        if path.exists():
            continue
        frame = load_manifest_frame(manifest, fid)
        clustering = cluster_frame(
            frame,
            budget,
            manifest.num_classes,
            derive_seed(args.seed, f"cluster:{fid}"),
            use_coords=use_coords,
        )
        save_clustering(clustering, path)

    if args.mode == "serve":
        from .annoserve import serve_until_complete

        service = AnnotationService(manifest, clustering_dir, out_dir)
        serve_until_complete(service, selected)
    else:
        for fid in selected:
            frame = load_manifest_frame(manifest, fid)
            data = frame.points if use_coords else frame.features
            clustering = load_clustering(clustering_dir / f"{fid}.mlnc", features=data)

            def annotator(fr, queue, fid=fid):
                responses = annotate_mod.oracle_annotate(fr, queue)
                if args.noise > 0:
                    rng = np.random.default_rng(derive_seed(args.seed, f"noise:{fid}"))
                    responses = apply_click_noise(
                        responses, manifest.num_classes, args.noise, rng
                    )
                return responses

            pl = annotate_frame(frame, clustering, annotator=annotator)
            save_pseudo_labels(pl, labels_dir / f"{fid}.mlnl")

    report = _annotation_report(manifest, selected, labels_dir)
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    avg = report.get("average")
    print(f"annotated {len(selected)} frames, {report['clicks']} clicks"
          + (f", average classwise accuracy {avg:.4f}" if avg is not None else ""))
    return 0


def _annotation_report(manifest, selected, labels_dir) -> dict:
    tally = ClasswiseTally(manifest.num_classes, manifest.ignore_classes)
    clicks = 0
    points = 0
    have_gt = True
    for fid in selected:
        frame = load_manifest_frame(manifest, fid)
        pl = load_pseudo_labels(
            labels_dir / f"{fid}.mlnl", num_classes=manifest.num_classes
        )
        clicks += pl.num_clicked
        points += frame.num_points
        if frame.gt_labels is None:
            have_gt = False
        else:
            tally.add(pl.labels, frame.gt_labels)
    report = {
        "frames": len(selected),
        "clicks": clicks,
        "points": points,
        "pct_labels": 100.0 * clicks / points if points else 0.0,
    }
    if have_gt:
        rep = tally.report()
        report["per_class"] = {
            manifest.class_names[c]: acc for c, acc in rep.per_class.items()
        }
        report["absent"] = [manifest.class_names[c] for c in rep.absent]
        report["average"] = rep.average
    return report


def cmd_train(args) -> int:
    labeled_dir = Path(args.labeled)
    labeled = []
    for frame_path in sorted(labeled_dir.glob("*.mlnf")):
        label_path = frame_path.with_suffix(".mlnl")
        if not label_path.exists():
            raise ConfigError(f"no label file next to {frame_path}")
        frame = load_frame(frame_path)
        pl = load_pseudo_labels(label_path, num_classes=args.num_classes)
        labeled.append((frame.features.astype(np.float64), pl.labels.astype(np.int64)))
    unlabeled = []
    if args.unlabeled:
        for frame_path in sorted(Path(args.unlabeled).glob("*.mlnf")):
            unlabeled.append(load_frame(frame_path).features.astype(np.float64))

    cfg = SemiSupConfig(**json.loads(Path(args.config).read_text())) if args.config else SemiSupConfig()
    hidden = tuple(int(h) for h in str(args.hidden).split(",") if h)
    if not labeled:
        raise ConfigError(f"no .mlnf frames in {labeled_dir}")
    feature_dim = labeled[0][0].shape[1]
    model = PointwiseClassifier((feature_dim, *hidden, args.num_classes))
    result = train_two_stage(labeled, unlabeled, model, cfg, args.seed)
    save_model(model, result.params, args.out)
    if args.trace:
        cols = ["stage", "epoch", "loss", "train_miou"]
        lines = [",".join(cols)]
        lines += [",".join(str(r[c]) for c in cols) for r in result.trace]
        Path(args.trace).write_text("\n".join(lines) + "\n")
    print(f"trained model ({model.num_params} parameters) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    model, params = load_model(args.model)
    preds, gts = [], []
    for _, mf in manifest.all_frames():
        frame = load_manifest_frame(manifest, mf.frame_id)
        if frame.gt_labels is None:
            continue
        logits = model.forward(frame.features.astype(np.float64), params)
        preds.append(np.argmax(logits, axis=1))
        gts.append(frame.gt_labels.astype(np.int64))
    if not preds:
        raise ConfigError("manifest has no frames with ground truth")
    score = miou(
        np.concatenate(preds),
        np.concatenate(gts),
        manifest.num_classes,
        ignore=manifest.ignore_classes,
    )
    print(f"miou {score:.6f}")
    if args.report:
        Path(args.report).write_text(json.dumps({"miou": score}, indent=2) + "\n")
    return 0


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig.from_file(args.config, out_dir=args.out_dir)
    if args.threads != 1:
        cfg.threads = args.threads
    report = run_pipeline(cfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        points_per_frame=args.points_per_frame,
        frames_per_sequence=args.frames,
        sequences=args.sequences,
        feature_dim=args.feature_dim,
        separation=args.separation,
        drift=args.drift,
        seed=args.seed,
    )
    manifest = generate_dataset(spec, args.out_dir)
    print(
        f"wrote {len(manifest.all_frames())} frames "
        f"({spec.sequences} sequences) -> {args.out_dir}"
    )
    return 0


def cmd_serve(args) -> int:
    manifest = load_manifest(args.manifest)
    service = AnnotationService(
        manifest, args.clusterings, args.out_dir, queue_order=args.queue_order
    )
    server = make_server(service, args.host, args.port)
    print(
        f"annotation service on http://{args.host}:{server.server_address[1]}",
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error [{exc.code}] {exc}", file=sys.stderr)
        return exc.exit_code
    except MillisegError as exc:
        print(f"error [{exc.code}] {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
