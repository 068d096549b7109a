"""Command-line front end.

Each subcommand reads its inputs, writes its outputs under a run directory,
and drops a manifest.json there (command, config hash, inputs, counts,
timings). Gateway traffic is appended to replay.log.jsonl in the same
directory, so `replay` can re-execute any run offline and byte-identically.

Exit codes: 0 success, 1 user error (bad flags, files, config), 2 internal.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import click

from . import evaluation, export, records
from .config import ConfigError, RunConfig, config_from_dict, config_hash, load_config
from .core import JUDGED_PREF, OUTCOME_PM, TaskItem
from .curation import (
    PairingPolicy,
    build_correct_set,
    build_judged_pairs,
    build_outcome_pairs,
)
from .gateway import (
    ChatGateway,
    HttpBackend,
    ReplayBackend,
    ScriptedBackend,
)
from .rollout import generate_dataset
from .verification import OracleVerifier

log = logging.getLogger(__name__)

REPLAY_LOG_NAME = "replay.log.jsonl"
MANIFEST_NAME = "manifest.json"


class UserError(Exception):
    """Operator mistake: wrong flag, missing file, bad config."""


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UserError(f"missing required input: {what}")
    p = Path(path)
    if not p.is_file():
        raise UserError(f"{what} not found: {p}")
    return p


def _load_tasks(path: Path) -> dict[str, TaskItem]:
    try:
        tasks = records.load_tasks(path)
    except (ValueError, KeyError) as exc:
        raise UserError(f"task file {path} is not valid: {exc}") from exc
    if not tasks:
        raise UserError(f"task file {path} is empty")
    return {t.id: t for t in tasks}


def _load_candidate_file(path: Path):
    try:
        return records.load_candidates(path)
    except (ValueError, KeyError) as exc:
        raise UserError(f"candidate file {path} is not valid: {exc}") from exc


def _load_pair_file(path: Path):
    try:
        return records.load_pairs(path)
    except (ValueError, KeyError) as exc:
        raise UserError(f"pair file {path} is not valid: {exc}") from exc


def _make_gateway(
    cfg: RunConfig,
    out_dir: Path,
    *,
    mock: str | None,
    replay_log: Path | None = None,
    record: bool = True,
) -> ChatGateway:
    """Pick the backend: replay log > scripted mock > HTTP endpoint."""
    if replay_log is not None:
        backend = ReplayBackend.from_log(replay_log)
        record = False
    elif mock is not None:
        mock_path = _require_file(mock, "mock script")
        try:
            backend = ScriptedBackend.from_file(mock_path)
        except (ValueError, KeyError) as exc:
            raise UserError(f"mock script {mock_path} is not valid: {exc}") from exc
    elif cfg.endpoint.url:
        backend = HttpBackend(
            cfg.endpoint.url,
            model=cfg.endpoint.model,
            timeout_s=cfg.endpoint.timeout_s,
            api_key_env=cfg.endpoint.api_key_env,
        )
    else:
        raise UserError(
            "no completion source: set [endpoint].url in the config or pass --mock"
        )
    return ChatGateway(
        backend,
        retries=cfg.endpoint.retries,
        backoff_s=cfg.endpoint.backoff_s,
        max_in_flight=cfg.endpoint.max_in_flight,
        replay_log_path=(out_dir / REPLAY_LOG_NAME) if record else None,
    )


def _write_manifest(
    out_dir: Path,
    command: str,
    cfg: RunConfig,
    args: dict,
    counts: dict,
    started: float,
) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "args": args,
        "seeds": {"policy": cfg.policy.seed, "curation": cfg.curation.seed},
        "counts": counts,
        "timings": {"wall_s": round(time.monotonic() - started, 3)},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------------------
# command bodies, shared by the direct commands and `replay`


def _impl_generate(cfg: RunConfig, args: dict, out_dir: Path, gateway: ChatGateway) -> dict:
    tasks = _load_tasks(_require_file(args["tasks"], "task file"))
    result = generate_dataset(
        list(tasks.values()),
        gateway,
        cfg.policy,
        OracleVerifier(),
        reflection_source=cfg.reflection_source,
        workers=cfg.workers,
    )
    records.save_candidates(out_dir / "candidates.jsonl", result.candidates)
    records.save_records(out_dir / "aborts.jsonl", result.aborts, records.abort_to_dict)
    records.save_records(
        out_dir / "first_turns.jsonl",
        [result.first_turns[tid] for tid in sorted(result.first_turns)],
        records.trace_to_dict,
    )
    c = result.counts
    return {
        "tasks": c.n_tasks,
        "first_correct": c.n_first_correct,
        "first_aborted": c.n_first_aborted,
        "failed": c.n_failed,
        "reflected": c.n_reflected,
        "instructions_per_task": c.instructions_per_task,
        "samples_per_instruction": c.samples_per_instruction,
        "expected_draws": c.expected_draws,
        "candidates": c.n_candidates,
        "aborts": c.n_aborts,
        "selections": {k: list(v) for k, v in sorted(result.selections.items())},
        "gateway_calls": gateway.calls,
    }


def _impl_curate(
    cfg: RunConfig, args: dict, out_dir: Path, gateway: ChatGateway | None
) -> dict:
    candidates = _load_candidate_file(_require_file(args["pool"], "candidate pool"))
    policy = cfg.curation
    correct_set = build_correct_set(candidates)
    outcome_pairs = build_outcome_pairs(candidates, policy)
    records.save_candidates(out_dir / "d_plus.jsonl", correct_set)
    records.save_pairs(out_dir / "d_pm.jsonl", outcome_pairs)
    counts: dict = {
        "candidates": len(candidates),
        "d_plus": len(correct_set),
        "d_pm": len(outcome_pairs),
    }
    if gateway is not None and args.get("tasks"):
        tasks = _load_tasks(_require_file(args["tasks"], "task file"))
        judged, jstats = build_judged_pairs(
            correct_set, tasks, gateway, policy, model=cfg.eval.judge_model
        )
        records.save_pairs(out_dir / "d_pref.jsonl", judged)
        counts["d_pref"] = len(judged)
        counts["judge"] = {
            "groups": jstats.n_groups,
            "eligible_pairs": jstats.n_eligible_pairs,
            "judged": jstats.n_judged,
            "kept": jstats.n_kept,
            "ties": jstats.n_ties,
            "errors": jstats.n_errors,
        }
    else:
        records.save_pairs(out_dir / "d_pref.jsonl", [])
        counts["d_pref"] = 0
        counts["judge"] = "skipped: judged pairs need --tasks plus --mock or an endpoint"
        log.warning("writing empty d_pref.jsonl; %s", counts["judge"])
    return counts


def _impl_export(cfg: RunConfig, args: dict, out_dir: Path, _: None) -> dict:
    tasks = _load_tasks(_require_file(args["tasks"], "task file"))
    completion = args.get("completion", export.COMPLETION_REFLECTION)
    written: dict[str, int] = {}

    def emit(setting: str, recs) -> None:
        by_dataset: dict[str, list] = {}
        for rec in recs:
            by_dataset.setdefault(rec.meta["source_dataset"], []).append(rec)
        for dataset, rows in sorted(by_dataset.items()):
            path = out_dir / setting / f"{dataset}.jsonl"
            export.write_export(path, rows)
            written[f"{setting}/{dataset}.jsonl"] = len(rows)

    if args.get("d_plus"):
        correct_set = _load_candidate_file(_require_file(args["d_plus"], "d_plus file"))
        emit(export.SETTING_ONE_STAGE, export.export_one_stage_sft(correct_set, tasks))
        reflect_recs, correct_recs = export.export_two_stage_sft(correct_set, tasks)
        emit(export.SETTING_TWO_STAGE_REFLECT, reflect_recs)
        emit(export.SETTING_TWO_STAGE_CORRECT, correct_recs)
    if args.get("d_pm"):
        pairs = _load_pair_file(_require_file(args["d_pm"], "d_pm file"))
        emit(
            export.SETTING_DPO_OUTCOME,
            export.export_preference(pairs, tasks, kind=OUTCOME_PM, completion=completion),
        )
    if args.get("d_pref"):
        pairs = _load_pair_file(_require_file(args["d_pref"], "d_pref file"))
        emit(
            export.SETTING_DPO_JUDGED,
            export.export_preference(pairs, tasks, kind=JUDGED_PREF, completion=completion),
        )
    if not written:
        raise UserError("nothing to export: pass at least one of --d-plus/--d-pm/--d-pref")
    return {"files": written, "completion": completion}


def _impl_stats(cfg: RunConfig, args: dict, out_dir: Path, _: None) -> dict:
    candidates = _load_candidate_file(_require_file(args["pool"], "candidate pool"))
    tasks = _load_tasks(_require_file(args["tasks"], "task file"))
    stats = export.compute_stats(candidates, tasks)
    _write_json(out_dir / "stats.json", stats.to_dict())
    table = export.stats_table(stats)
    (out_dir / "stats.txt").write_text(table + "\n", encoding="utf-8")
    click.echo(table)
    return {
        "candidates": stats.total.n_candidates,
        "correct": stats.total.n_correct,
        "pct_correct": round(stats.total.pct_correct, 2),
        "categories": len(stats.per_category),
    }


def _impl_eval(cfg: RunConfig, args: dict, out_dir: Path, gateway: ChatGateway) -> dict:
    tasks = _load_tasks(_require_file(args["tasks"], "task file"))
    turns = args.get("turns") or cfg.eval.turns
    policy = cfg.policy
    if turns != policy.max_turns:
        policy = replace(policy, max_turns=turns)
    report = evaluation.evaluate(
        list(tasks.values()),
        gateway,
        policy,
        OracleVerifier(),
        reflection_mode=cfg.eval.reflection_mode,
        workers=cfg.workers,
    )
    _write_json(out_dir / "report.json", evaluation.report_to_dict(report))
    (out_dir / "curve.csv").write_text(evaluation.curve_csv(report), encoding="utf-8")
    click.echo(report.summary())
    return {
        "items": report.n_items,
        "turns": report.max_turns,
        "summary": report.summary(),
        "gateway_calls": gateway.calls,
    }


def _impl_tag_errors(
    cfg: RunConfig, args: dict, out_dir: Path, gateway: ChatGateway
) -> dict:
    candidates = _load_candidate_file(_require_file(args["pool"], "candidate pool"))
    tasks = _load_tasks(_require_file(args["tasks"], "task file"))
    items = []
    for c in candidates:
        task = tasks.get(c.task_id)
        if task is None:
            raise UserError(f"candidate references unknown task id {c.task_id!r}")
        items.append((task.question, c.first_scratchpad, c.reflection.text))
    tag_lists = evaluation.tag_errors(
        items, gateway, model=cfg.eval.judge_model, workers=cfg.workers
    )
    rows = [
        {
            "task_id": c.task_id,
            "instruction_id": c.reflection.instruction_id,
            "sample_index": c.reflection.sampling.sample_index,
            "codes": [t.code for t in tags],
            "labels": [t.label for t in tags],
        }
        for c, tags in zip(candidates, tag_lists)
    ]
    records.write_jsonl(out_dir / "error_tags.jsonl", rows)
    histogram = {
        "fine": evaluation.tag_histogram(tag_lists),
        "coarse": evaluation.tag_histogram(tag_lists, coarse=True),
    }
    _write_json(out_dir / "error_histogram.json", histogram)
    return {
        "tagged": len(rows),
        "histogram": histogram["fine"],
        "gateway_calls": gateway.calls,
    }


def _impl_correlate(cfg: RunConfig, args: dict, out_dir: Path, _: None) -> dict:
    candidates = _load_candidate_file(_require_file(args["pool"], "candidate pool"))
    if not candidates:
        raise UserError("candidate pool is empty; nothing to correlate")
    n_bins = args.get("bins") or cfg.eval.n_bins
    report = evaluation.reflection_thought_correlation(
        [c.reflection.text for c in candidates],
        [c.corrected_scratchpad for c in candidates],
        [c.outcome for c in candidates],
        n_bins=n_bins,
    )
    _write_json(out_dir / "correlation.json", report.to_dict())
    pearson = "undefined" if report.pearson is None else f"{report.pearson:.4f}"
    click.echo(f"pairs={report.n_pairs} pearson={pearson}")
    return {
        "pairs": report.n_pairs,
        "pearson": report.pearson,
        "bins": n_bins,
    }


_GATEWAY_COMMANDS = {"generate", "curate", "eval", "tag-errors"}
_IMPLS = {
    "generate": _impl_generate,
    "curate": _impl_curate,
    "export": _impl_export,
    "stats": _impl_stats,
    "eval": _impl_eval,
    "tag-errors": _impl_tag_errors,
    "correlate": _impl_correlate,
}


def _run(
    command: str,
    config_path: str | None,
    out: str,
    args: dict,
    *,
    mock: str | None = None,
    cfg: RunConfig | None = None,
    replay_log: Path | None = None,
) -> None:
    started = time.monotonic()
    if cfg is None:
        cfg = load_config(config_path)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    gateway = None
    if command in _GATEWAY_COMMANDS:
        needs_gateway = command != "curate" or bool(args.get("tasks"))
        if needs_gateway:
            try:
                gateway = _make_gateway(cfg, out_dir, mock=mock, replay_log=replay_log)
            except UserError:
                if command == "curate":
                    gateway = None  # curation minus judging still works offline
                else:
                    raise
    counts = _IMPLS[command](cfg, args, out_dir, gateway)
    _write_manifest(out_dir, command, cfg, {**args, "mock": mock}, counts, started)


@click.group()
@click.version_option(package_name="reflectkit")
def cli() -> None:
    """Self-reflection data pipeline: generate, curate, export, evaluate."""


_config_opt = click.option("--config", "config_path", type=str, default=None, help="TOML config file.")
_mock_opt = click.option("--mock", type=str, default=None, help="Scripted mock backend JSON file.")
_out_opt = click.option("--out", type=str, required=True, help="Run directory for outputs.")


@cli.command()
@_config_opt
@_mock_opt
@_out_opt
@click.option("--tasks", type=str, required=True, help="Task JSONL file.")
def generate(config_path: str | None, mock: str | None, out: str, tasks: str) -> None:
    """Collect reflection/retry candidates over a task file."""
    _run("generate", config_path, out, {"tasks": tasks}, mock=mock)


@cli.command()
@_config_opt
@_mock_opt
@_out_opt
@click.option("--pool", type=str, required=True, help="candidates.jsonl from generate.")
@click.option("--tasks", type=str, default=None, help="Task JSONL; required for judged pairs.")
def curate(
    config_path: str | None, mock: str | None, out: str, pool: str, tasks: str | None
) -> None:
    """Build the three curated sets from a candidate pool."""
    _run("curate", config_path, out, {"pool": pool, "tasks": tasks}, mock=mock)


@cli.command("export")
@_config_opt
@_out_opt
@click.option("--tasks", type=str, required=True, help="Task JSONL file.")
@click.option("--d-plus", "d_plus", type=str, default=None, help="Correct-only set (SFT settings).")
@click.option("--d-pm", "d_pm", type=str, default=None, help="Outcome pairs (preference setting 3).")
@click.option("--d-pref", "d_pref", type=str, default=None, help="Judged pairs (preference setting 4).")
@click.option(
    "--completion",
    type=click.Choice([export.COMPLETION_REFLECTION, export.COMPLETION_REFLECTION_AND_CORRECTION]),
    default=export.COMPLETION_REFLECTION,
    show_default=True,
    help="Preference completion contents.",
)
def export_cmd(
    config_path: str | None,
    out: str,
    tasks: str,
    d_plus: str | None,
    d_pm: str | None,
    d_pref: str | None,
    completion: str,
) -> None:
    """Write training-ready files for the four settings."""
    _run(
        "export",
        config_path,
        out,
        {
            "tasks": tasks,
            "d_plus": d_plus,
            "d_pm": d_pm,
            "d_pref": d_pref,
            "completion": completion,
        },
    )


@cli.command()
@_config_opt
@_out_opt
@click.option("--pool", type=str, required=True, help="candidates.jsonl from generate.")
@click.option("--tasks", type=str, required=True, help="Task JSONL file.")
def stats(config_path: str | None, out: str, pool: str, tasks: str) -> None:
    """Per-category counts, correct rates, and length averages."""
    _run("stats", config_path, out, {"pool": pool, "tasks": tasks})


@cli.command("eval")
@_config_opt
@_mock_opt
@_out_opt
@click.option("--tasks", type=str, required=True, help="Task JSONL file.")
@click.option("--turns", type=int, default=None, help="Retry turns (overrides config).")
def eval_cmd(
    config_path: str | None, mock: str | None, out: str, tasks: str, turns: int | None
) -> None:
    """Score the multi-turn retry loop; writes report.json and curve.csv."""
    if turns is not None and turns < 1:
        raise UserError("--turns must be >= 1")
    _run("eval", config_path, out, {"tasks": tasks, "turns": turns}, mock=mock)


@cli.command("tag-errors")
@_config_opt
@_mock_opt
@_out_opt
@click.option("--pool", type=str, required=True, help="candidates.jsonl from generate.")
@click.option("--tasks", type=str, required=True, help="Task JSONL file.")
def tag_errors_cmd(
    config_path: str | None, mock: str | None, out: str, pool: str, tasks: str
) -> None:
    """Label failed attempts against the error taxonomy."""
    _run("tag-errors", config_path, out, {"pool": pool, "tasks": tasks}, mock=mock)


@cli.command()
@_config_opt
@_out_opt
@click.option("--pool", type=str, required=True, help="candidates.jsonl from generate.")
@click.option("--bins", type=int, default=None, help="Similarity bins (overrides config).")
def correlate(config_path: str | None, out: str, pool: str, bins: int | None) -> None:
    """Correlate reflection/retry-thought similarity with retry correctness."""
    if bins is not None and bins < 1:
        raise UserError("--bins must be >= 1")
    _run("correlate", config_path, out, {"pool": pool, "bins": bins})


@cli.command()
@_out_opt
@click.option("--manifest", type=str, required=True, help="manifest.json of the run to replay.")
@click.option(
    "--log",
    "log_path",
    type=str,
    default=None,
    help=f"Replay log (default: {REPLAY_LOG_NAME} beside the manifest).",
)
def replay(out: str, manifest: str, log_path: str | None) -> None:
    """Re-execute a recorded run offline from its manifest and replay log."""
    manifest_path = _require_file(manifest, "manifest")
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise UserError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    command = data.get("command")
    if command not in _IMPLS:
        raise UserError(f"manifest names unknown command {command!r}")
    try:
        cfg = config_from_dict(data["config"])
    except (ConfigError, KeyError) as exc:
        raise UserError(f"manifest config is not usable: {exc}") from exc
    args = {k: v for k, v in data.get("args", {}).items() if k != "mock"}
    replay_log = None
    if command in _GATEWAY_COMMANDS:
        candidate = Path(log_path) if log_path else manifest_path.parent / REPLAY_LOG_NAME
        if not candidate.is_file():
            raise UserError(f"replay log not found: {candidate}")
        replay_log = candidate
    _run(command, None, out, args, cfg=cfg, replay_log=replay_log)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (UserError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort guard for exit code 2
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
