"""File-based pipeline: prune, select, cluster, annotate, train, eval.

Every stage reads and writes plain artifacts under the run directory, so a
rerun with the same configuration skips whatever already finished, and every
number in the final report can be recomputed from what is on disk. Stage
completion (plus its wall time and a config hash) is tracked in state.json;
the report itself is rebuilt from artifacts on every run, which makes
reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import annotate as annotate_mod
from .annotate import ClasswiseTally, annotate_frame, apply_click_noise, miou
from .clustering import (
    ClusterBudget,
    cluster_frame,
    load_clustering,
    save_clustering,
)
from .datamodel import (
    DatasetManifest,
    load_manifest,
    load_manifest_frame,
    load_pseudo_labels,
    save_pseudo_labels,
)
from .errors import ConfigError, MillisegError, NoGroundTruthError
from .pruning import PruneConfig, prune_sequence
from .datamodel import frame_descriptor
from .selection import (
    DiversityScore,
    diversity_scores,
    scene_signature,
    select_frames,
)
from .semisup import (
    PointwiseClassifier,
    SemiSupConfig,
    load_model,
    save_model,
    train_two_stage,
)

STAGES = ("prune", "select", "cluster", "annotate", "train", "eval")


class StageError(MillisegError):
    """A pipeline stage failed; earlier artifacts are kept for resume."""

    exit_code = 4

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-item seed: independent of processing order and platform."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _map_frames(fn, items, threads: int):
    """Apply fn over items, optionally on a thread pool, keeping input order."""
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    workers = threads if threads > 0 else None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class PipelineConfig:
    """One run's knobs. Exactly one of alpha / clicks / frames sets the budget.

    ``frames`` caps how many scans are selected (alpha then defaults to 0.01,
    one click per hundred points); ``alpha`` or ``clicks`` annotate every
    frame that survives pruning.
    """

    manifest: str
    out_dir: str
    tau: float = 0.95
    alpha: float | None = None
    clicks: int | None = None
    frames: int | None = None
    min_factor: int = 10
    seed: int = 0
    mode: str = "oracle"
    noise: float = 0.0
    use_coords: bool = False
    threads: int = 1
    hidden: tuple[int, ...] = (32, 32)
    semisup: SemiSupConfig = field(default_factory=SemiSupConfig)

    def __post_init__(self):
        given = [v is not None for v in (self.alpha, self.clicks, self.frames)]
        if sum(given) != 1:
            raise ConfigError(
                "exactly one of alpha, clicks, frames must be set, "
                f"got alpha={self.alpha} clicks={self.clicks} frames={self.frames}"
            )
        if self.mode not in ("oracle", "serve"):
            raise ConfigError(f"mode must be oracle or serve, got {self.mode!r}")

    @classmethod
    def from_file(cls, path: str | Path, out_dir: str | None = None) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read pipeline config {path}: {exc}") from exc
        semisup = SemiSupConfig(**doc.pop("semisup", {}))
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        doc.setdefault("out_dir", str(Path(path).parent / "run"))
        if out_dir:
            doc["out_dir"] = out_dir
        try:
            return cls(semisup=semisup, **doc)
        except TypeError as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from exc

    def to_dict(self) -> dict:
        d = {
            "manifest": str(self.manifest),
            "out_dir": str(self.out_dir),
            "tau": self.tau,
            "alpha": self.alpha,
            "clicks": self.clicks,
            "frames": self.frames,
            "min_factor": self.min_factor,
            "seed": self.seed,
            "mode": self.mode,
            "noise": self.noise,
            "use_coords": self.use_coords,
            "hidden": list(self.hidden),
            "semisup": {
                "lambda_ce": self.semisup.lambda_ce,
                "lambda_lovasz": self.semisup.lambda_lovasz,
                "temperature": self.semisup.temperature,
                "lambda_kl": self.semisup.lambda_kl,
                "beta": self.semisup.beta,
                "epochs": self.semisup.epochs,
                "lr": self.semisup.lr,
                "batch": self.semisup.batch,
                "jitter": self.semisup.jitter,
            },
        }
        return d

    def budget(self, total_points_selected: int) -> ClusterBudget:
        if self.alpha is not None:
            return ClusterBudget(alpha=self.alpha, min_factor=self.min_factor)
        if self.clicks is not None:
            return ClusterBudget(
                clicks=self.clicks,
                total_points=total_points_selected,
                min_factor=self.min_factor,
            )
        return ClusterBudget(alpha=0.01, min_factor=self.min_factor)


class PipelineRun:
    """Stage driver bound to one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "clusterings").mkdir(exist_ok=True)
        (self.out / "labels").mkdir(exist_ok=True)
        self.manifest = load_manifest(cfg.manifest)
        self.state = self._load_state()
        # Threads must not change results, only wall time: config hashes
        # deliberately exclude the threads knob.
        cfg_for_hash = self.cfg.to_dict()
        self._cfg_hash = hashlib.sha256(
            json.dumps(cfg_for_hash, sort_keys=True).encode()
        ).hexdigest()

    # -- state -----------------------------------------------------------

    def _load_state(self) -> dict:
        p = self.out / "state.json"
        if p.exists():
            try:
                return json.loads(p.read_text())
            except json.JSONDecodeError:
                return {}
        return {}

    def _save_state(self) -> None:
        (self.out / "state.json").write_text(
            json.dumps(self.state, indent=2, sort_keys=True) + "\n"
        )

    def _stage_hash(self, stage: str) -> str:
        prev = ""
        for s in STAGES:
            if s == stage:
                break
            prev = self.state.get(s, {}).get("hash", "")
        return hashlib.sha256(f"{self._cfg_hash}:{stage}:{prev}".encode()).hexdigest()

    def _done(self, stage: str, artifacts: list[Path]) -> bool:
        entry = self.state.get(stage)
        return (
            entry is not None
            and entry.get("hash") == self._stage_hash(stage)
            and entry.get("completed", False)
            and all(p.exists() for p in artifacts)
        )

    def _run_stage(self, stage: str, artifacts: list[Path], fn) -> None:
        if self._done(stage, artifacts):
            return
        start = time.perf_counter()
        try:
            fn()
        except MillisegError as exc:
            raise StageError(stage, exc) from exc
        self.state[stage] = {
            "hash": self._stage_hash(stage),
            "completed": True,
            "wall_time_s": round(time.perf_counter() - start, 6),
        }
        self._save_state()

    # -- artifact paths -----------------------------------------------------

    @property
    def pruned_path(self) -> Path:
        return self.out / "pruned.txt"

    @property
    def selection_path(self) -> Path:
        return self.out / "selection.txt"

    def clustering_path(self, frame_id: str) -> Path:
        return self.out / "clusterings" / f"{frame_id}.mlnc"

    def labels_path(self, frame_id: str) -> Path:
        return self.out / "labels" / f"{frame_id}.mlnl"

    @property
    def model_path(self) -> Path:
        return self.out / "model.mlnm"

    @property
    def stage1_model_path(self) -> Path:
        return self.out / "model_stage1.mlnm"

    @property
    def trace_path(self) -> Path:
        return self.out / "trace.csv"

    @property
    def report_path(self) -> Path:
        return self.out / "report.json"

    # -- stage bodies ------------------------------------------------------

    def stage_prune(self) -> None:
        run_prune(self.manifest, self.cfg.tau, self.pruned_path, self.cfg.threads)

    def stage_select(self) -> None:
        kept = read_kept(self.pruned_path)
        run_select(
            self.manifest,
            [fid for _, fid in kept],
            self.cfg.frames,
            self.cfg.seed,
            self.selection_path,
            self.cfg.threads,
        )

    def _selected(self) -> list[str]:
        return [fid for fid, _ in read_selection(self.selection_path)]

    def _selected_points(self, selected: list[str]) -> int:
        total = 0
        for fid in selected:
            total += load_manifest_frame(self.manifest, fid).num_points
        return total

    def stage_cluster(self) -> None:
        selected = self._selected()
        budget = self.cfg.budget(self._selected_points(selected))

        def one(fid: str):
            frame = load_manifest_frame(self.manifest, fid)
            clustering = cluster_frame(
                frame,
                budget,
                self.manifest.num_classes,
                derive_seed(self.cfg.seed, f"cluster:{fid}"),
                use_coords=self.cfg.use_coords,
            )
            save_clustering(clustering, self.clustering_path(fid))

        _map_frames(one, selected, self.cfg.threads)

    def stage_annotate(self) -> None:
        selected = self._selected()
        if self.cfg.mode == "serve":
            self._annotate_over_http(selected)
            return

        def one(fid: str):
            frame = load_manifest_frame(self.manifest, fid)
            data = frame.points if self.cfg.use_coords else frame.features
            clustering = load_clustering(self.clustering_path(fid), features=data)

            def annotator(fr, queue):
                responses = annotate_mod.oracle_annotate(fr, queue)
                if self.cfg.noise > 0:
                    rng = np.random.default_rng(
                        derive_seed(self.cfg.seed, f"noise:{fid}")
                    )
                    responses = apply_click_noise(
                        responses, self.manifest.num_classes, self.cfg.noise, rng
                    )
                return responses

            pl = annotate_frame(frame, clustering, annotator=annotator)
            save_pseudo_labels(pl, self.labels_path(fid))

        _map_frames(one, selected, self.cfg.threads)

    def _annotate_over_http(self, selected: list[str]) -> None:
        from .annoserve import AnnotationService, serve_until_complete

        service = AnnotationService(
            self.manifest,
            clustering_dir=self.out / "clusterings",
            out_dir=self.out,
        )
        serve_until_complete(service, selected)

    def stage_train(self) -> None:
        selected = self._selected()
        labeled = []
        for fid in selected:
            frame = load_manifest_frame(self.manifest, fid)
            pl = load_pseudo_labels(
                self.labels_path(fid), num_classes=self.manifest.num_classes
            )
            labeled.append(
                (frame.features.astype(np.float64), pl.labels.astype(np.int64))
            )
        unlabeled = []
        for _, mf in self.manifest.all_frames():
            if mf.frame_id in set(selected):
                continue
            frame = load_manifest_frame(self.manifest, mf.frame_id)
            unlabeled.append(frame.features.astype(np.float64))

        model = PointwiseClassifier(
            (self.manifest.feature_dim, *self.cfg.hidden, self.manifest.num_classes)
        )
        result = train_two_stage(
            labeled,
            unlabeled,
            model,
            self.cfg.semisup,
            derive_seed(self.cfg.seed, "train"),
        )
        save_model(model, result.params, self.model_path)
        save_model(model, result.stage1_params, self.stage1_model_path)
        cols = ["stage", "epoch", "loss", "train_miou"]
        lines = [",".join(cols)]
        for row in result.trace:
            lines.append(",".join(str(row[c]) for c in cols))
        self.trace_path.write_text("\n".join(lines) + "\n")

    def stage_eval(self) -> None:
        # The eval stage only marks completion; the numbers themselves are
        # recomputed from artifacts whenever the report is built.
        if not self.model_path.exists():
            raise NoGroundTruthError("no trained model to evaluate")

    # -- reporting -----------------------------------------------------------

    def _eval_model(self, model_path: Path) -> float:
        model, params = load_model(model_path)
        preds, gts = [], []
        for _, mf in self.manifest.all_frames():
            frame = load_manifest_frame(self.manifest, mf.frame_id)
            if frame.gt_labels is None:
                continue
            logits = model.forward(frame.features.astype(np.float64), params)
            preds.append(np.argmax(logits, axis=1))
            gts.append(frame.gt_labels.astype(np.int64))
        if not preds:
            raise NoGroundTruthError("no ground truth available for evaluation")
        return miou(
            np.concatenate(preds),
            np.concatenate(gts),
            self.manifest.num_classes,
            ignore=self.manifest.ignore_classes,
        )

    def build_report(self) -> dict:
        selected = self._selected()
        points_dataset = 0
        for _, mf in self.manifest.all_frames():
            points_dataset += load_manifest_frame(self.manifest, mf.frame_id).num_points

        points_selected = 0
        clicks = 0
        tally = ClasswiseTally(self.manifest.num_classes, self.manifest.ignore_classes)
        pseudo_pred, pseudo_gt = [], []
        have_gt = True
        for fid in selected:
            frame = load_manifest_frame(self.manifest, fid)
            pl = load_pseudo_labels(
                self.labels_path(fid), num_classes=self.manifest.num_classes
            )
            points_selected += frame.num_points
            clicks += pl.num_clicked
            if frame.gt_labels is None:
                have_gt = False
                continue
            tally.add(pl.labels, frame.gt_labels)
            pseudo_pred.append(pl.labels.astype(np.int64))
            pseudo_gt.append(frame.gt_labels.astype(np.int64))

        names = self.manifest.class_names
        report = {
            "frames_total": len(self.manifest.all_frames()),
            "frames_kept": len(read_kept(self.pruned_path)),
            "frames_selected": len(selected),
            "points_dataset": points_dataset,
            "points_selected": points_selected,
            "clicks": clicks,
            "pct_labels_selected": 100.0 * clicks / points_selected,
            "pct_labels_dataset": 100.0 * clicks / points_dataset,
            "stages": {
                s: {
                    "status": "COMPLETE" if e.get("completed") else "PENDING",
                    "wall_time_s": e.get("wall_time_s", 0.0),
                }
                for s, e in sorted(self.state.items())
            },
        }
        if have_gt and pseudo_pred:
            rep = tally.report()
            report["propagation_average"] = rep.average
            report["propagation_per_class"] = {
                names[c]: acc for c, acc in rep.per_class.items()
            }
            report["propagation_absent"] = [names[c] for c in rep.absent]
            report["propagation_miou"] = miou(
                np.concatenate(pseudo_pred),
                np.concatenate(pseudo_gt),
                self.manifest.num_classes,
                ignore=self.manifest.ignore_classes,
            )
        report["stage1_miou"] = self._eval_model(self.stage1_model_path)
        report["stage2_miou"] = self._eval_model(self.model_path)
        return report

    # -- driver ----------------------------------------------------------------

    def run(self) -> dict:
        self._run_stage("prune", [self.pruned_path], self.stage_prune)
        self._run_stage("select", [self.selection_path], self.stage_select)
        cluster_artifacts = [self.clustering_path(f) for f in self._selected()]
        self._run_stage("cluster", cluster_artifacts, self.stage_cluster)
        label_artifacts = [self.labels_path(f) for f in self._selected()]
        self._run_stage("annotate", label_artifacts, self.stage_annotate)
        self._run_stage(
            "train", [self.model_path, self.stage1_model_path], self.stage_train
        )
        self._run_stage("eval", [self.model_path], self.stage_eval)

        report = self.build_report()
        self.report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return report


def run_pipeline(cfg: PipelineConfig) -> dict:
    return PipelineRun(cfg).run()


# -- reusable stage helpers (also behind the standalone subcommands) ------------

def run_prune(
    manifest: DatasetManifest, tau: float, out_path: Path, threads: int = 1
) -> list[tuple[str, str]]:
    """Prune every sequence; write 'sequence_id frame_id' lines in sweep order."""
    prune_cfg = PruneConfig(tau=tau)
    kept: list[tuple[str, str]] = []
    for seq in manifest.sequences:
        def desc(mf):
            return frame_descriptor(
                load_manifest_frame(manifest, mf.frame_id)
            )

        descriptors = _map_frames(desc, seq.frames, threads)
        for idx in prune_sequence(descriptors, prune_cfg):
            kept.append((seq.sequence_id, seq.frames[idx].frame_id))
    out_path.write_text("".join(f"{s} {f}\n" for s, f in kept))
    return kept


def read_kept(path: Path) -> list[tuple[str, str]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            seq_id, frame_id = line.split()
            rows.append((seq_id, frame_id))
    return rows


def run_select(
    manifest: DatasetManifest,
    kept_ids: list[str],
    budget_frames: int | None,
    seed: int,
    out_path: Path,
    threads: int = 1,
) -> list[str]:
    """Score the kept frames and keep the most diverse ones."""
    def sign(fid: str):
        frame = load_manifest_frame(manifest, fid)
        return scene_signature(
            frame, manifest.num_classes, derive_seed(seed, f"signature:{fid}")
        )

    sigs = _map_frames(sign, kept_ids, threads)
    if len(sigs) == 1:
        scores = [DiversityScore(sigs[0].frame_id, 0.0)]
    else:
        scores = diversity_scores(sigs)
    budget = budget_frames if budget_frames is not None else len(scores)
    chosen = select_frames(scores, budget)
    by_id = {s.frame_id: s.score for s in scores}
    out_path.write_text("".join(f"{fid} {by_id[fid]:.17g}\n" for fid in chosen))
    return chosen


def read_selection(path: Path) -> list[tuple[str, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            fid, score = line.split()
            rows.append((fid, float(score)))
    return rows
