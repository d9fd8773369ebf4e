"""Command-line entry point: ``wholebody <command> ...``.

Exit status is 0 on success, 2 for bad input or failed validation and 3
for an internal invariant violation.  Outputs are written to a temporary
file and renamed into place, so a failed run leaves no partial output.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import diagnose, evaluation, pipeline, stats
from .anno import LAYOUT, AnnotationError, Dataset, read_dataset, write_dataset
from .evaluation import REPORT_PARTS, EvalConfig, EvaluationError, SigmaTable

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3


class UsageError(ValueError):
    """Bad flags, paths or configuration."""


# ---------------------------------------------------------------------------
# output helpers

def atomic_write(path: Optional[str], data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory; stdout when path is None."""
    if path is None or path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.3f}"
    return str(value)


def _json_value(value):
    if isinstance(value, float):
        return None if math.isnan(value) else round(value, 6)
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


class Table:
    def __init__(self, name: str, columns: Sequence[str]):
        self.name = name
        self.columns = list(columns)
        self.rows: List[List[Any]] = []

    def add(self, *row):
        if len(row) != len(self.columns):
            raise AssertionError(f"row width {len(row)} != {len(self.columns)}")
        self.rows.append(list(row))


def render(tables: Sequence[Table], fmt: str) -> bytes:
    """TSV: one header plus rows per table, tables separated by a blank line.

    JSONL: one object per row carrying its table name.
    """
    if fmt == "tsv":
        blocks = []
        for t in tables:
            lines = ["\t".join(t.columns)] + ["\t".join(_cell(v) for v in r) for r in t.rows]
            blocks.append("\n".join(lines) + "\n")
        text = "\n".join(blocks)
    elif fmt == "jsonl":
        lines = []
        for t in tables:
            for r in t.rows:
                obj = {"table": t.name}
                obj.update({c: _json_value(v) for c, v in zip(t.columns, r)})
                lines.append(json.dumps(obj, sort_keys=False, allow_nan=False))
        text = "".join(line + "\n" for line in lines)
    else:
        raise UsageError(f"unknown report format {fmt!r}")
    return text.encode("utf-8")


# ---------------------------------------------------------------------------
# input helpers

def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, [], ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _check_inputs(*paths, dirs: Iterable[str] = ()):
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise UsageError(f"input file not found: {p}")
    for p in dirs:
        if p is not None and not os.path.isdir(p):
            raise UsageError(f"directory not found: {p}")


def _check_outputs(inputs: Sequence[Optional[str]], *outputs: Optional[str]):
    real = [os.path.realpath(o) for o in outputs if o not in (None, "-")]
    if len(set(real)) != len(real):
        raise UsageError("output paths must be distinct")
    ins = {os.path.realpath(i) for i in inputs if i}
    for o in real:
        if o in ins:
            raise UsageError(f"output {o} would overwrite an input")
        if not os.path.isdir(os.path.dirname(o)):
            raise UsageError(f"output directory does not exist: {os.path.dirname(o)}")


def _parts(spec: Optional[str], allowed=REPORT_PARTS) -> List[str]:
    if not spec:
        return list(allowed)
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    for p in parts:
        if p not in evaluation.PART_SLICES:
            raise UsageError(f"unknown part {p!r}; choose from {', '.join(evaluation.PART_SLICES)}")
    return parts


def _sigmas(args, gt: Dataset) -> SigmaTable:
    if args.sigmas:
        return SigmaTable.load(args.sigmas)
    if gt.sigma_table is not None:
        return gt.sigma_table
    raise UsageError("missing sigma config: pass --sigmas FILE (see the 'sigmas' command)")


def _eval_config(args, sigmas: SigmaTable, part="wholebody") -> EvalConfig:
    return EvalConfig(part=part, max_detections=args.max_detections,
                      area_source=args.area_source, sigmas=sigmas)


# ---------------------------------------------------------------------------
# commands

def cmd_eval(args) -> int:
    _require(args, "gt", "dt")
    _check_inputs(args.gt, args.dt, args.sigmas)
    _check_outputs([args.gt, args.dt, args.sigmas], args.out)
    parts = _parts(args.parts)
    gt = read_dataset(args.gt)
    dt = read_dataset(args.dt)
    sigmas = _sigmas(args, gt)
    reports = evaluation.evaluate_parts(gt, dt.instances, parts, _eval_config(args, sigmas), jobs=args.jobs)
    table = Table("eval", ["part", "AP", "AR", "AP_medium", "AR_medium", "AP_large", "AR_large"])
    for part in parts:
        r = reports[part]
        table.add(part, r.ap, r.ar, r.ap_by_range["medium"], r.ar_by_range["medium"],
                  r.ap_by_range["large"], r.ar_by_range["large"])
    atomic_write(args.out, render([table], args.report_format))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    _require(args, "gt", "dt")
    _check_inputs(args.gt, args.dt, args.sigmas)
    _check_outputs([args.gt, args.dt, args.sigmas], args.out, args.verdicts)
    if not 0.0 < args.t_jitter < args.t_good <= 1.0:
        raise UsageError("need 0 < --t-jitter < --t-good <= 1")
    gt = read_dataset(args.gt)
    dt = read_dataset(args.dt)
    sigmas = _sigmas(args, gt)
    cfg = _eval_config(args, sigmas, args.part)
    report = evaluation.evaluate(gt, dt.instances, cfg, jobs=args.jobs)
    verdicts = diagnose.classify_keypoints(
        gt, dt.instances, sigmas, (args.t_good, args.t_jitter), part=args.part,
        match_oks=args.match_oks, area_source=args.area_source, jobs=args.jobs)

    pie = Table("breakdown", ["part", "keypoints", *diagnose.CATEGORIES])
    if verdicts:
        members = {p: set(evaluation.part_indices(p).tolist()) for p in diagnose.DIAGNOSE_PARTS}
        for part, fractions in diagnose.pie_breakdown(verdicts).items():
            n = sum(1 for v in verdicts if v.index in members[part])
            pie.add(part, n, *(fractions[c] for c in diagnose.CATEGORIES))
    gain = diagnose.correction_gain(report, verdicts)
    buckets = ["all"] + [b.name for b in diagnose.SIZE_BUCKETS]
    delta = Table("correction_gain", ["category", *buckets])
    delta.add("baseline", *(gain.baseline[b] for b in buckets))
    for cat in diagnose.ERROR_CATEGORIES + ("all",):
        delta.add(cat, *(gain.delta[cat][b] for b in buckets))

    if args.verdicts:
        dump = Table("verdict", ["image_id", "dt_id", "gt_id", "index", "part", "category", "ks"])
        for v in verdicts:
            dump.add(v.image_id, v.dt_id, v.gt_id, v.index, LAYOUT.part_of(v.index), v.category, v.ks)
        verdict_bytes = render([dump], "jsonl")
    output = render([pie, delta], args.report_format)
    if args.verdicts:
        atomic_write(args.verdicts, verdict_bytes)
    atomic_write(args.out, output)
    return EXIT_OK


STATS_SECTIONS = ("counts", "scale", "gestures", "blur")


def _face_crops(d: Dataset, images_dir: str):
    by_image = d.by_image()
    for info in d.images:
        faces = [i for i in by_image.get(info.id, ()) if i.face_box.valid and i.face_box.area > 0]
        if faces:
            yield info, faces


def _blur_scores(d: Dataset, images_dir: str, jobs: int) -> List[float]:
    def one(item):
        info, faces = item
        img = stats.load_image(os.path.join(images_dir, info.file_name))
        h, w = img.shape[:2]
        out = []
        for inst in faces:
            x0, y0, x1, y1 = inst.face_box.xyxy
            c0, r0 = max(0, int(math.floor(x0))), max(0, int(math.floor(y0)))
            c1, r1 = min(w, int(math.ceil(x1))), min(h, int(math.ceil(y1)))
            if c1 > c0 and r1 > r0:
                out.append(stats.blurriness(img[r0:r1, c0:c1]))
        return out

    items = list(_face_crops(d, images_dir))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(one, items))
    else:
        chunks = [one(i) for i in items]
    return [s for c in chunks for s in c]


def _hand_poses(d: Dataset) -> np.ndarray:
    poses = []
    for inst in d.instances:
        for name in ("left_hand", "right_hand"):
            kps = inst.part(name)
            if np.all(kps[:, 2] > 0):
                try:
                    poses.append(stats.normalize_hand_pose(kps))
                except stats.StatsError:
                    continue
    return np.asarray(poses).reshape(-1, 42)


def cmd_stats(args) -> int:
    _require(args, "annotations")
    sections = [s.strip() for s in (args.sections or "counts,scale").split(",") if s.strip()]
    for s in sections:
        if s not in STATS_SECTIONS:
            raise UsageError(f"unknown stats section {s!r}; choose from {', '.join(STATS_SECTIONS)}")
    if "blur" in sections:
        _require(args, "images_dir")
    _check_inputs(args.annotations, args.skeleton, dirs=[args.images_dir] if "blur" in sections else [])
    _check_outputs([args.annotations, args.skeleton], args.out)
    tree = stats.SkeletonTree.load(args.skeleton)
    d = read_dataset(args.annotations)
    tables = []
    if "counts" in sections:
        t = Table("counts", ["part", "boxes", "keypoints"])
        for row in stats.count_annotations(d).rows():
            t.add(*row)
        tables.append(t)
    if "scale" in sections:
        t = Table("scale", ["part", "bin_lo", "bin_hi", "count"])
        for part, hist in stats.scale_distribution(d, tree, args.bin_width).items():
            for lo, hi, n in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
                t.add(part, float(lo), float(hi), int(n))
        tables.append(t)
    if "gestures" in sections:
        clusters = stats.cluster_gestures(_hand_poses(d), k=args.clusters, seed=args.seed)
        t = Table("gestures", ["gesture", "hands"])
        labels = clusters.labels
        for name in stats.GESTURES:
            t.add(name, sum(1 for x in labels if x == name))
        tables.append(t)
    if "blur" in sections:
        scores = _blur_scores(d, args.images_dir, args.jobs)
        t = Table("blur", ["bucket", "faces"])
        buckets = [stats.blur_bucket(s) for s in scores]
        for name in stats.BLUR_LABELS:
            t.add(name, buckets.count(name))
        tables.append(t)
    atomic_write(args.out, render(tables, args.report_format))
    return EXIT_OK


def cmd_run(args) -> int:
    _require(args, "boxes", "annotations", "out")
    if args.predictor == "external":
        _require(args, "blobs")
    dirs = [p for p in (args.images_dir, args.blobs if args.predictor == "external" else None) if p]
    _check_inputs(args.boxes, args.annotations, dirs=dirs)
    _check_outputs([args.boxes, args.annotations], args.out)
    with open(args.boxes, "rb") as fh:
        detections = pipeline.parse_detections(fh.read())
    d = read_dataset(args.annotations)
    if args.predictor == "stub":
        predictor = pipeline.GroundTruthStubPredictor(d, box_noise=args.box_noise, seed=args.seed)
    else:
        predictor = pipeline.ExternalBlobPredictor(args.blobs)
    loader = pipeline.file_image_loader(d, args.images_dir) if args.images_dir else None
    results = pipeline.run_dataset(d, detections, predictor, image_loader=loader, jobs=args.jobs)
    out = pipeline.results_to_dataset(d, results)
    atomic_write(args.out, write_dataset(out, ground_truth=False))
    return EXIT_OK


def cmd_convert(args) -> int:
    _require(args, "input", "out")
    _check_inputs(args.input)
    _check_outputs([args.input], args.out)
    d = read_dataset(args.input)
    ground_truth = all(i.score is None for i in d.instances)
    atomic_write(args.out, write_dataset(d, args.foot_form, ground_truth=ground_truth))
    return EXIT_OK


def cmd_sigmas(args) -> int:
    _require(args, "annotators", "out")
    if len(args.annotators) < 2:
        raise UsageError("need at least two annotator files")
    _check_inputs(*args.annotators)
    _check_outputs(args.annotators, args.out)
    sets = [read_dataset(p) for p in args.annotators]
    ids = [sorted((str(i.image_id), str(i.id)) for i in s.instances) for s in sets]
    if any(x != ids[0] for x in ids[1:]):
        raise UsageError("annotator files must label the same instances (same image_id and id)")
    keyed = [{(str(i.image_id), str(i.id)): i for i in s.instances} for s in sets]
    keys = ids[0]
    if not keys:
        raise UsageError("annotator files contain no instances")
    ann = np.stack([np.stack([k[key].keypoints for k in keyed]) for key in keys])
    # scale of each keypoint follows the reference (first) annotator
    ref = [keyed[0][key] for key in keys]
    norms = np.sqrt(np.stack([evaluation.keypoint_areas(r, "wholebody", args.area_source) for r in ref]))
    sigma = evaluation.derive_sigmas(ann, norms, ddof=args.ddof)
    if not args.derive_body:
        sigma[LAYOUT["body"]] = evaluation.COCO_BODY_SIGMAS
    missing = np.flatnonzero(~np.isfinite(sigma))
    if len(missing):
        raise UsageError(f"no annotator agreement data for keypoints {missing.tolist()}")
    atomic_write(args.out, SigmaTable(sigma).to_text().encode("utf-8"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _common(p: argparse.ArgumentParser, report=True):
    p.add_argument("--config", help="JSON file of flag values; explicit flags win")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path (default: stdout for reports)")
    if report:
        p.add_argument("--report-format", choices=("tsv", "jsonl"), default="tsv")


def _eval_flags(p):
    p.add_argument("--gt", help="ground-truth annotation file")
    p.add_argument("--dt", help="prediction file")
    p.add_argument("--sigmas", help="per-keypoint sigma table (text, 133 values)")
    p.add_argument("--area-source", choices=("part", "person"), default="part",
                   help="scale for face/hand keypoints: their box area or the person area")
    p.add_argument("--max-detections", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wholebody", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="AP/AR per part", allow_abbrev=False)
    _common(p)
    _eval_flags(p)
    p.add_argument("--parts", help="comma-separated parts (default: body,foot,face,hand,wholebody)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="keypoint error taxonomy and correction gains", allow_abbrev=False)
    _common(p)
    _eval_flags(p)
    p.add_argument("--part", default="wholebody", choices=tuple(evaluation.PART_SLICES))
    p.add_argument("--t-good", type=float, default=diagnose.DEFAULT_THRESHOLDS[0])
    p.add_argument("--t-jitter", type=float, default=diagnose.DEFAULT_THRESHOLDS[1])
    p.add_argument("--match-oks", type=float, default=diagnose.MATCH_OKS)
    p.add_argument("--verdicts", help="also write every keypoint verdict here (JSONL)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("stats", help="dataset statistics", allow_abbrev=False)
    _common(p)
    p.add_argument("--annotations")
    p.add_argument("--images-dir", help="image folder, needed for the blur section")
    p.add_argument("--sections", help=f"comma-separated subset of {','.join(STATS_SECTIONS)} "
                                      "(default: counts,scale)")
    p.add_argument("--skeleton", help="edge list overriding the bundled skeleton tree")
    p.add_argument("--bin-width", type=float, default=10.0, help="scale histogram bin width in pixels")
    p.add_argument("--clusters", type=int, default=3)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("run", help="run the top-down pipeline over person boxes", allow_abbrev=False)
    _common(p, report=False)
    p.add_argument("--boxes", help="COCO detection-results JSON with person boxes")
    p.add_argument("--annotations", help="annotation file providing the image table "
                                         "(and, for the stub, the ground truth)")
    p.add_argument("--images-dir", help="image folder; black canvases are used when omitted")
    p.add_argument("--predictor", choices=("stub", "external"), default="stub")
    p.add_argument("--blobs", help="directory of serialized stage outputs (external predictor)")
    p.add_argument("--box-noise", type=float, default=0.0,
                   help="stub only: perturb decoded part boxes by this fraction of their size")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("convert", help="rewrite annotations with fused or separate foot keypoints",
                       allow_abbrev=False)
    _common(p, report=False)
    p.add_argument("--input")
    p.add_argument("--foot-form", choices=("separate", "fused"), default="separate")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("sigmas", help="derive per-keypoint sigmas from repeated annotations",
                       allow_abbrev=False)
    _common(p, report=False)
    p.add_argument("--annotators", nargs="+", help="one annotation file per annotator")
    p.add_argument("--area-source", choices=("part", "person"), default="part")
    p.add_argument("--ddof", type=int, default=1, help="delta degrees of freedom of the variance")
    p.add_argument("--derive-body", action="store_true",
                   help="derive body sigmas too instead of keeping the COCO values")
    p.set_defaults(func=cmd_sigmas)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            try:
                config = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config {args.config}: {exc}") from None
        if not isinstance(config, dict):
            raise UsageError("config must be a JSON object")
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - known - {"config"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        config.pop("config", None)
        sub.set_defaults(**config)
        args = parser.parse_args(argv)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return args


INPUT_ERRORS = (UsageError, AnnotationError, EvaluationError, pipeline.PipelineError,
                stats.StatsError, OSError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"wholebody: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        # argparse usage errors
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    except Exception as exc:  # noqa: BLE001
        print(f"wholebody: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
