"""Command-line entry point.

Subcommands cover the batch pipeline end to end::

    maple ingest        parse logs into the canonical corpus directories
    maple build-prompts build the category table and both pair files
    maple fit           fit the reference predictors on the pair files
    maple predict       emit ranked predictions for every test case
    maple eval          score predictions against the MFU/MRU baselines
    maple ablate        rerun eval for every context-source ablation row

Exit codes: 0 success, 2 configuration error, 3 missing or mismatched
artifact, 1 anything else. Artifacts embed the config hash that produced
them; commands refuse stale inputs unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from maple import corpus as corpus_mod
from maple import evaluation, pipeline, typeprompt
from maple.backend import ReferenceBackend
from maple.config import ConfigError, RunConfig, ablation_configs, parse_backend_spec
from maple.corpus import Dataset, LogFormat, LogParseError, parse_log
from maple.evaluation import make_report, render_report_table, write_reports
from maple.pipeline import StagePredictors
from maple.wire import ExternalClient

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3


class ArtifactError(Exception):
    """A required artifact is missing or was built under another config."""


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        "k": getattr(args, "k", None),
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "out": getattr(args, "out", None),
    }
    if getattr(args, "dataset", None):
        overrides["manifests"] = tuple(args.dataset)
        overrides["manifest_dir"] = "."
    if getattr(args, "backend", None):
        overrides["backend_stage2"] = args.backend
    config = config.with_overrides(**overrides)
    if getattr(args, "ablate", None):
        config = config.with_ablation(_parse_ablate(args.ablate))
    if not config.manifests:
        raise ConfigError("no dataset manifests configured (use --dataset or the config file)")
    return config


def _parse_ablate(spec: str) -> pipeline.AblationFlags:
    known = {
        "stage1": "use_stage1",
        "app_history": "use_app_history",
        "installed_apps": "use_installed_apps",
        "optional_context": "use_optional_context",
    }
    disabled = {}
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if token not in known:
            raise ConfigError(
                f"unknown ablation flag {token!r}; known: {sorted(known)}"
            )
        disabled[known[token]] = False
    try:
        return pipeline.AblationFlags(**{**{f: True for f in known.values()}, **disabled})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _check_hash(found: str, config: RunConfig, what: str, force: bool) -> None:
    expected = config.config_hash()
    if found != expected and not force:
        raise ArtifactError(
            f"{what} was built under config {found}, current is {expected}; "
            "rerun the upstream command or pass --force"
        )


def _dataset_ids(config: RunConfig) -> list[str]:
    ids = []
    for path in config.manifest_paths():
        try:
            manifest = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ArtifactError(f"dataset manifest not found: {path}") from exc
        ids.append(manifest["dataset_id"])
    return ids


def _read_datasets(config: RunConfig, force: bool) -> list[Dataset]:
    datasets = []
    for dataset_id in _dataset_ids(config):
        directory = Path(config.out) / "corpus" / dataset_id
        if not directory.exists():
            raise ArtifactError(f"canonical corpus missing: {directory}; run ingest first")
        dataset, found_hash = corpus_mod.read_corpus(directory)
        _check_hash(found_hash, config, f"corpus {dataset_id}", force)
        datasets.append(dataset)
    return datasets


# -- subcommands -------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _load_config(args)
    config_hash = config.config_hash()
    for path in config.manifest_paths():
        try:
            manifest = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ArtifactError(f"dataset manifest not found: {path}") from exc
        fmt = LogFormat.from_dict(manifest.get("format", {}))
        fmt.max_reject_ratio = config.max_reject_ratio
        vocab = corpus_mod.Vocab()
        records = []
        rejects = []
        for name in manifest["files"]:
            file_path = Path(path).parent / name
            if not file_path.exists():
                raise ArtifactError(f"log file not found: {file_path}")
            with file_path.open("rb") as fh:
                result = parse_log(fh, fmt, vocab)
            records.extend(result.records)
            rejects.extend(result.rejects)
        split = corpus_mod.ingest_records(
            records,
            manifest["dataset_id"],
            config.gap_seconds,
            config.max_session_records,
            config.min_user_records,
        )
        dataset = Dataset(split, vocab)
        directory = Path(config.out) / "corpus" / manifest["dataset_id"]
        corpus_mod.write_corpus(directory, dataset, config_hash)
        rejects_path = directory / "rejects.jsonl"
        with rejects_path.open("w", encoding="utf-8") as fh:
            fh.write(
                json.dumps({"kind": "rejects", "config_hash": config_hash}, sort_keys=True)
                + "\n"
            )
            for reject in rejects:
                fh.write(
                    json.dumps(
                        {"line": reject.line_no, "reason": reject.reason, "text": reject.line},
                        sort_keys=True,
                    )
                    + "\n"
                )
        print(
            f"ingested {manifest['dataset_id']}: {split.record_count} records, "
            f"{len(split.users)} users, {len(rejects)} rejected lines -> {directory}"
        )
    return EXIT_OK


def cmd_build_prompts(args: argparse.Namespace) -> int:
    config = _load_config(args)
    config_hash = config.config_hash()
    datasets = _read_datasets(config, args.force)
    table = typeprompt.build_type_table(datasets, config.n, config.type_k)
    prompts_dir = Path(config.out) / "prompts"
    typeprompt.write_type_table(prompts_dir / "type_table.jsonl", table, config_hash)
    print(f"type table: {len(table)} keys of length {config.n - 1}")

    stages = [1, 2] if args.stage is None else [args.stage]
    flags = config.flags
    if 1 in stages:
        pairs1 = []
        for dataset in datasets:
            pairs1.extend(pipeline.build_stage1_pairs(dataset, table, config.window, flags))
        pipeline.write_pair_file(prompts_dir / "stage1_pairs.tsv", pairs1, "stage1_pairs", config_hash)
        print(f"stage-1 pairs: {len(pairs1)}")
    if 2 in stages:
        pairs2 = []
        for dataset in datasets:
            pairs2.extend(pipeline.build_stage2_pairs(dataset, table, config.window, flags))
        pipeline.write_pair_file(prompts_dir / "stage2_pairs.tsv", pairs2, "stage2_pairs", config_hash)
        print(f"stage-2 pairs: {len(pairs2)}")
    return EXIT_OK


def _read_pairs(config: RunConfig, stage: int, force: bool) -> list[tuple[str, str]]:
    path = Path(config.out) / "prompts" / f"stage{stage}_pairs.tsv"
    if not path.exists():
        raise ArtifactError(f"pair file missing: {path}; run build-prompts first")
    meta, pairs = pipeline.read_pair_file(path)
    _check_hash(meta.get("config_hash", ""), config, f"stage-{stage} pairs", force)
    return pairs


def cmd_fit(args: argparse.Namespace) -> int:
    config = _load_config(args)
    config_hash = config.config_hash()
    models_dir = Path(config.out) / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    stages = [1, 2] if args.stage is None else [args.stage]
    for stage in stages:
        spec = config.backend_stage1 if stage == 1 else config.backend_stage2
        if parse_backend_spec(spec)[0] != "reference":
            print(f"stage {stage} uses an external backend; nothing to fit")
            continue
        pairs = _read_pairs(config, stage, args.force)
        model = ReferenceBackend.fit(
            pairs, stage=stage, seed=config.seed, weights=config.weights
        )
        path = models_dir / f"stage{stage}_reference.json"
        path.write_text(
            json.dumps({"config_hash": config_hash, "model": model.to_json()}, sort_keys=True)
            + "\n",
            encoding="utf-8",
        )
        print(f"fitted stage-{stage} reference model on {len(pairs)} pairs -> {path}")
    return EXIT_OK


def _load_reference(config: RunConfig, stage: int, force: bool) -> ReferenceBackend:
    path = Path(config.out) / "models" / f"stage{stage}_reference.json"
    if not path.exists():
        raise ArtifactError(f"model missing: {path}; run fit first")
    data = json.loads(path.read_text(encoding="utf-8"))
    _check_hash(data.get("config_hash", ""), config, f"stage-{stage} model", force)
    return ReferenceBackend.from_json(data["model"])


def _make_predictors(config: RunConfig, force: bool, clients: list) -> StagePredictors:
    table_path = Path(config.out) / "prompts" / "type_table.jsonl"
    if not table_path.exists():
        raise ArtifactError(f"type table missing: {table_path}; run build-prompts first")
    table, table_hash = typeprompt.read_type_table(table_path)
    _check_hash(table_hash, config, "type table", force)

    def build(stage: int, spec: str):
        kind, detail = parse_backend_spec(spec)
        if kind == "reference":
            return _load_reference(config, stage, force)
        if kind == "exec":
            client = ExternalClient.spawn(detail)
            clients.append(client)
            return client
        host, port = detail
        client = ExternalClient.connect(host, port)
        clients.append(client)
        return client

    stage1 = build(1, config.backend_stage1) if config.use_stage1 else None
    stage2 = build(2, config.backend_stage2)
    return StagePredictors(stage2=stage2, stage1=stage1, type_table=table)


def _run_dataset(config: RunConfig, dataset: Dataset, predictors: StagePredictors):
    return pipeline.run_predictions(
        dataset,
        predictors,
        config.flags,
        config.k,
        config.window,
        config.workers,
    )


def cmd_predict(args: argparse.Namespace) -> int:
    config = _load_config(args)
    config_hash = config.config_hash()
    datasets = _read_datasets(config, args.force)
    clients: list[ExternalClient] = []
    try:
        predictors = _make_predictors(config, args.force, clients)
        out_dir = Path(config.out) / "predictions"
        out_dir.mkdir(parents=True, exist_ok=True)
        for dataset in datasets:
            cases, predictions, elapsed = _run_dataset(config, dataset, predictors)
            path = out_dir / f"{dataset.dataset_id}.jsonl"
            with path.open("w", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {
                            "kind": "predictions",
                            "config_hash": config_hash,
                            "dataset_id": dataset.dataset_id,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                for case, prediction in zip(cases, predictions):
                    fh.write(
                        json.dumps(
                            {
                                "case": prediction.test_case_id,
                                "truth": case.truth_app_id,
                                "apps": list(prediction.app_ids),
                                "scores": list(prediction.scores),
                                "attempts": prediction.attempts_used,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
            print(
                f"{dataset.dataset_id}: {len(cases)} cases predicted "
                f"in {elapsed:.1f}s -> {path}"
            )
    finally:
        for client in clients:
            client.close()
    return EXIT_OK


def _evaluate_dataset(
    config: RunConfig,
    dataset: Dataset,
    predictors: StagePredictors,
    label: str,
) -> list[evaluation.EvalReport]:
    cases, predictions, elapsed = _run_dataset(config, dataset, predictors)
    truths = [case.truth_app_id for case in cases]
    descriptor = {**config.descriptor(), "dataset": dataset.dataset_id}
    reports = [
        make_report(label, [p.app_ids for p in predictions], truths, descriptor, elapsed)
    ]

    by_user: dict[str, list[int]] = {}
    for case in cases:
        by_user.setdefault(case.user_id, []).append(case.truth_app_id)
    mfu_preds: list[list[int]] = []
    mru_preds: list[list[int]] = []
    for user_id in sorted(by_user):
        split = dataset.corpus.users[user_id]
        train_apps = [r.app_id for r in split.train]
        stream = [r.app_id for r in split.all_records]
        first_test = len(split.train) + len(split.validation)
        positions = list(range(first_test, len(stream)))
        mfu_preds.extend(evaluation.baseline_mfu(train_apps, positions, config.k))
        mru_preds.extend(evaluation.baseline_mru(stream, positions, config.k))
    reports.append(make_report("mfu", mfu_preds, truths, descriptor))
    reports.append(make_report("mru", mru_preds, truths, descriptor))
    return reports


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    datasets = _read_datasets(config, args.force)
    clients: list[ExternalClient] = []
    try:
        predictors = _make_predictors(config, args.force, clients)
        for dataset in datasets:
            reports = _evaluate_dataset(config, dataset, predictors, "pipeline")
            jsonl_path, table_path = write_reports(
                Path(config.out) / "reports",
                f"eval_{dataset.dataset_id}",
                reports,
                config.config_hash(),
            )
            print(f"# {dataset.dataset_id}")
            print(render_report_table(reports), end="")
            timing = reports[0].elapsed_seconds
            print(f"({reports[0].case_count} cases, {timing:.1f}s) -> {jsonl_path}")
    finally:
        for client in clients:
            client.close()
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    base_config = _load_config(args)
    for stage_spec in (base_config.backend_stage1, base_config.backend_stage2):
        if parse_backend_spec(stage_spec)[0] != "reference":
            raise ConfigError(
                "ablate retrains per row and therefore requires reference backends"
            )
    datasets = _read_datasets(base_config, args.force)
    per_dataset: dict[str, list[evaluation.EvalReport]] = {
        d.dataset_id: [] for d in datasets
    }
    for row_name, config in ablation_configs(base_config).items():
        predictors = pipeline.fit_reference_predictors(
            datasets,
            config.n,
            config.type_k,
            config.window,
            config.flags,
            config.seed,
            config.weights,
        )
        for dataset in datasets:
            cases, predictions, elapsed = _run_dataset(config, dataset, predictors)
            truths = [case.truth_app_id for case in cases]
            descriptor = {**config.descriptor(), "dataset": dataset.dataset_id}
            per_dataset[dataset.dataset_id].append(
                make_report(row_name, [p.app_ids for p in predictions], truths, descriptor, elapsed)
            )
    for dataset_id, reports in per_dataset.items():
        jsonl_path, table_path = write_reports(
            Path(base_config.out) / "reports",
            f"ablation_{dataset_id}",
            reports,
            base_config.config_hash(),
        )
        print(f"# {dataset_id}")
        print(render_report_table(reports), end="")
        print(f"-> {jsonl_path}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maple",
        description="Two-stage next-app prediction pipeline and evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, stage: bool = False) -> None:
        p.add_argument("--config", help="JSON run-configuration file")
        p.add_argument(
            "--dataset",
            action="append",
            help="dataset manifest path (repeatable; overrides the config file)",
        )
        p.add_argument("--k", type=int, help="prediction list length")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--workers", type=int, help="parallel workers for prediction")
        p.add_argument("--out", help="artifact output directory")
        p.add_argument(
            "--backend",
            help="stage-2 backend: reference | exec:<command> | tcp:<host:port>",
        )
        p.add_argument(
            "--ablate",
            help="comma-separated context sources to disable: "
            "stage1,app_history,installed_apps,optional_context",
        )
        p.add_argument(
            "--force",
            action="store_true",
            help="accept artifacts whose config hash does not match",
        )
        if stage:
            p.add_argument("--stage", type=int, choices=(1, 2), help="limit to one stage")

    handlers = {
        "ingest": (cmd_ingest, False, "parse logs into canonical corpora"),
        "build-prompts": (cmd_build_prompts, True, "build the category table and pair files"),
        "fit": (cmd_fit, True, "fit reference predictors on the pair files"),
        "predict": (cmd_predict, False, "rank candidate apps for every test case"),
        "eval": (cmd_eval, False, "score the pipeline against MFU/MRU baselines"),
        "ablate": (cmd_ablate, False, "evaluate every context-source ablation row"),
    }
    for name, (handler, has_stage, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        common(p, stage=has_stage)
        p.set_defaults(handler=handler)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except LogParseError as exc:
        print(f"ingest failed: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
