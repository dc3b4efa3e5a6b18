"""Command-line entry point: ``painbench <command> [options]``.

Commands share one TOML configuration; ``--run-dir``, ``--arch``,
``--scenario``, ``--seed`` and ``--jobs`` override the file. Every command
exits 0 on success and 1 on a pipeline error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import RunConfig, load_config, with_overrides
from .dataset import Corpus, PainClass, corpus_summary, load_manifest, merge, sample_frames, uniform_indices, write_manifest
from .errors import ConfigError, EmptyExplanationSet, PainBenchError

log = logging.getLogger("painbench")

_VERSIONED = ("numpy", "scipy", "torch", "torchvision", "scikit-image", "pillow", "matplotlib")


# --- run directory bookkeeping ------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def environment_record() -> dict:
    versions = {}
    for dist in _VERSIONED:
        try:
            versions[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            versions[dist] = None
    return {
        "painbench": __version__,
        "python": sys.version,
        "platform": platform.platform(),
        "cpu_count": os.cpu_count(),
        "packages": versions,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }


def prepare_run_dir(config: RunConfig) -> Path:
    """Create the run directory and record the config copy and environment."""
    run_dir = config.resolve_run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(config.source_text)
    record = {**environment_record(), "config_digest": config.digest(), "effective_config": config.effective()}
    (run_dir / "environment.json").write_text(json.dumps(record, indent=1))
    return run_dir


def _update_fingerprints(run_dir: Path, entries: dict) -> None:
    path = run_dir / "fingerprints.json"
    current = json.loads(path.read_text()) if path.is_file() else {}
    current.update(entries)
    path.write_text(json.dumps(current, indent=1, sort_keys=True))


def _corpus_fingerprint(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for s in corpus:
        h.update(f"{s.sample_id}|{s.pain_class.value}\n".encode())
    return h.hexdigest()


# --- stages ------------------------------------------------------------------------


def ingest(config: RunConfig, run_dir: Optional[Path] = None) -> tuple[Corpus, Optional[Corpus]]:
    """Load, frame-sample and merge the manifests; write corpus files and summaries."""
    primary = merge(
        [sample_frames(load_manifest(p), config.frame_budget) for p in config.manifests], config.corpus_name
    )
    external = None
    if config.external_manifests:
        external = merge(
            [sample_frames(load_manifest(p), config.frame_budget) for p in config.external_manifests],
            config.external_name,
        )
    if run_dir is not None:
        out = run_dir / "corpus"
        write_manifest(primary, out / "manifest.csv")
        corpus_summary(primary).to_csv(out / "summary.csv")
        fps = {
            "config": config.digest(),
            "corpus": _corpus_fingerprint(primary),
            "manifests": {str(p): _sha256(p) for p in (*config.manifests, *config.external_manifests)},
        }
        if external is not None:
            write_manifest(external, out / "external_manifest.csv")
            corpus_summary(external).to_csv(out / "external_summary.csv")
            fps["external_corpus"] = _corpus_fingerprint(external)
        _update_fingerprints(run_dir, fps)
    return primary, external


class ImageStore:
    """Preprocessed images per architecture, built lazily through the on-disk cache."""

    def __init__(self, config: RunConfig, run_dir: Path, corpora: Sequence[Corpus]):
        from .preprocess import default_cache_dir

        self.config = config
        self.cache_dir = default_cache_dir(run_dir)
        self.corpora = [c for c in corpora if c is not None]
        self.preprocessor = config.preprocessor()
        self._images: dict[str, dict] = {}

    def __call__(self, arch: str) -> dict:
        from .preprocess import preprocess_corpus

        if arch not in self._images:
            images = {}
            for corpus in self.corpora:
                got = preprocess_corpus(corpus, arch, self.cache_dir, self.preprocessor, skip_failures=True)
                if len(got) < len(corpus):
                    log.warning("%s/%s: %d of %d images failed preprocessing", corpus.name, arch, len(corpus) - len(got), len(corpus))
                images.update(got)
            self._images[arch] = images
        return self._images[arch]


def make_plans(config: RunConfig, primary: Corpus, external: Optional[Corpus]):
    from .experiments import make_splits

    return [make_splits(primary, s, config.k, config.seed, external) for s in config.scenarios]


def write_plans(config: RunConfig, run_dir: Path, plans) -> list:
    from .experiments import plan_jobs, write_plan

    jobs = plan_jobs(plans, config.architectures)
    write_plan(jobs, run_dir / "plan.json")
    for plan in plans:
        path = run_dir / "splits" / f"{plan.scenario}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(plan.to_dict()))
    return jobs


def collect_reports(run_dir: Path):
    """Rebuild evaluation reports from the persisted per-fold predictions."""
    from .experiments import EvaluationReport, compute_metrics, read_predictions

    plan_path = run_dir / "plan.json"
    if not plan_path.is_file():
        raise ConfigError(f"no plan.json in {run_dir}; run `painbench run` first")
    jobs = json.loads(plan_path.read_text())["jobs"]
    groups: dict[tuple[str, str], list[int]] = {}
    for j in jobs:
        groups.setdefault((j["scenario"], j["architecture"]), []).append(j["fold"])
    reports = []
    for (scenario, arch), folds in groups.items():
        per_fold = []
        for f in sorted(folds):
            path = run_dir / scenario / arch / f"fold{f}" / "predictions.csv"
            if not path.is_file():
                raise ConfigError(f"missing predictions for {scenario}/{arch}/fold{f}")
            rows = read_predictions(path)
            per_fold.append(compute_metrics([r.label for r in rows], [r.predicted for r in rows]))
        reports.append(EvaluationReport(arch, scenario, per_fold))
    return reports


def agree(scoresheets: Path, out_dir: Path):
    from .agreement import stratified_agreement
    from .scales import consensus_labels, load_scoresheets, write_consensus_labels

    sheets = load_scoresheets(scoresheets)
    report = stratified_agreement(sheets)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "agreement.csv")
    report.to_json(out_dir / "agreement.json")
    write_consensus_labels(consensus_labels(sheets, "facs"), out_dir / "consensus_labels.csv", "facs")
    return report


def explain_run(config: RunConfig, run_dir: Path, store: ImageStore, primary: Corpus, external: Optional[Corpus]):
    """Global heatmaps per (architecture, class, dataset) from the fold-0 model of the explained scenario."""
    from .explain import explain_images, render_heatmaps, save_heatmap
    from .models.zoo import TrainedModelRecord

    scenario = config.explain_target
    heatmaps = []
    for arch in config.architectures:
        model_dir = run_dir / scenario / arch / "fold0"
        if not (model_dir / "record.json").is_file():
            raise ConfigError(f"no trained model at {model_dir}; run training first")
        record = TrainedModelRecord.load(model_dir)
        images = store(arch)
        for corpus in (primary, external):
            if corpus is None:
                continue
            for cls in (PainClass.PAIN, PainClass.NO_PAIN):
                pool = [images[s.sample_id] for s in corpus if s.sample_id in images and s.pain_class is cls]
                picks = [pool[i] for i in uniform_indices(len(pool), min(len(pool), config.explain_max_samples))]
                try:
                    hm = explain_images(record, picks, cls, corpus.name, config.lime)
                except EmptyExplanationSet as exc:
                    log.warning("%s", exc)
                    continue
                save_heatmap(hm, run_dir / "explain")
                heatmaps.append(hm)
                log.info("explained %s/%s/%s on %d images", arch, cls.value, corpus.name, hm.n_samples)
    if not heatmaps:
        raise EmptyExplanationSet("no heatmaps could be produced")
    render_heatmaps(heatmaps, run_dir / "explain" / "heatmaps.png")
    return heatmaps


# --- commands ----------------------------------------------------------------------


def _config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("this command needs --config")
    return with_overrides(load_config(args.config), args.run_dir, args.arch, args.scenario, args.seed, args.jobs)


def cmd_fixtures(args) -> int:
    from .fixtures import write_fixture_workspace

    paths = write_fixture_workspace(args.out, preset=args.preset, seed=args.seed or 0)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_ingest(args) -> int:
    config = _config(args)
    run_dir = prepare_run_dir(config)
    primary, external = ingest(config, run_dir)
    print(corpus_summary(primary).format_table())
    if external is not None:
        print()
        print(f"external corpus {external.name}")
        print(corpus_summary(external).format_table())
    print(f"\nrun dir: {run_dir}")
    return 0


def cmd_preprocess(args) -> int:
    config = _config(args)
    run_dir = prepare_run_dir(config)
    primary, external = ingest(config, run_dir)
    store = ImageStore(config, run_dir, [primary, external])
    total = len(primary) + (len(external) if external is not None else 0)
    for arch in config.architectures:
        print(f"{arch}: {len(store(arch))}/{total} images preprocessed")
    _update_fingerprints(run_dir, {"preprocessor": store.preprocessor.fingerprint()})
    return 0


def cmd_agree(args) -> int:
    config = None
    if args.config is not None:
        config = _config(args)
    sheets = Path(args.scoresheets) if args.scoresheets else (config.scoresheets if config else None)
    if sheets is None:
        raise ConfigError("no scoresheets given (use --scoresheets or data.scoresheets)")
    if args.run_dir is not None:
        out = Path(args.run_dir) / "agreement"
    elif config is not None:
        out = prepare_run_dir(config) / "agreement"
    else:
        out = Path("agreement")
    report = agree(sheets, out)
    print(report.format_table())
    print(f"\nwritten to {out}")
    return 0


def cmd_run(args) -> int:
    from .experiments import render_report, run_scenario

    config = _config(args)
    run_dir = prepare_run_dir(config)
    primary, external = ingest(config, run_dir)
    plans = make_plans(config, primary, external)
    jobs = write_plans(config, run_dir, plans)
    print(f"plan: {len(jobs)} training jobs -> {run_dir / 'plan.json'}")
    if args.plan_only:
        return 0

    started = time.time()
    store = ImageStore(config, run_dir, [primary, external])
    _update_fingerprints(run_dir, {"preprocessor": store.preprocessor.fingerprint()})
    train_config = config.train_config()
    for plan in plans:
        log.info("scenario %s", plan.scenario)
        run_scenario(
            plan,
            config.architectures,
            train_config,
            store,
            run_dir=run_dir,
            jobs=config.jobs,
            weights_directory=None if config.weights_dir is None else str(config.weights_dir),
            require_weights=config.require_pretrained_weights,
        )
    reports = collect_reports(run_dir)
    render_report(reports, run_dir / "reports")
    _print_reports(reports)
    if config.scoresheets is not None:
        print()
        print(agree(config.scoresheets, run_dir / "agreement").format_table())
    if config.explain:
        explain_run(config, run_dir, store, primary, external)
    print(f"\nfinished in {time.time() - started:.1f} s; run dir: {run_dir}")
    return 0


def cmd_explain(args) -> int:
    config = _config(args)
    run_dir = config.resolve_run_dir()
    primary, external = ingest(config, None)
    store = ImageStore(config, run_dir, [primary, external])
    heatmaps = explain_run(config, run_dir, store, primary, external)
    print(f"{len(heatmaps)} heatmaps -> {run_dir / 'explain'}")
    return 0


def cmd_report(args) -> int:
    from .experiments import render_report

    if args.run_dir is None and args.config is None:
        raise ConfigError("report needs --run-dir or --config")
    run_dir = Path(args.run_dir) if args.run_dir else _config(args).resolve_run_dir()
    reports = collect_reports(run_dir)
    paths = render_report(reports, run_dir / "reports")
    _print_reports(reports)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _print_reports(reports) -> None:
    print(f"{'scenario':<20}{'architecture':<14}{'accuracy':>10}{'macro F1':>10}")
    for r in reports:
        print(f"{r.scenario:<20}{r.architecture:<14}{r.averaged.accuracy:>10.4f}{r.averaged.macro_f1:>10.4f}")


COMMANDS = {
    "fixtures": cmd_fixtures,
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "agree": cmd_agree,
    "run": cmd_run,
    "explain": cmd_explain,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--run-dir", help="output directory (overrides the config)")
    common.add_argument("--arch", action="append", help="architecture name; repeatable")
    common.add_argument("--scenario", action="append", help="scenario name; repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel training workers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="painbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"painbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fixtures", parents=[common], help="write a synthetic workspace with a ready config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", choices=("small", "table2"), default="small")
    sub.add_parser("ingest", parents=[common], help="load manifests and print the corpus summary")
    sub.add_parser("preprocess", parents=[common], help="crop, clean and resize images into the cache")
    p = sub.add_parser("agree", parents=[common], help="inter-rater agreement from scoresheets")
    p.add_argument("--scoresheets", type=Path)
    p = sub.add_parser("run", parents=[common], help="train, evaluate, report and explain")
    p.add_argument("--plan-only", action="store_true", help="write plan.json and stop")
    sub.add_parser("explain", parents=[common], help="LIME heatmaps for trained models")
    sub.add_parser("report", parents=[common], help="rebuild tables and figures from predictions")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except PainBenchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
