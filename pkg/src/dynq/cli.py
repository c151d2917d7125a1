"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, gradcheck, sample-stats.
Exit codes: 0 success, 1 internal failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import gradchecks
from .config import RunConfig, config_digest, load_run_config
from .corpus import DIALECTS, centroid_distances, generate_corpus, load_manifest
from .errors import ConfigError, DataError, ParameterError
from .metrics import (
    EfficiencyRecord,
    cer,
    corpus_bleu,
    expansion_report,
    length_correlation,
    wer,
    write_expansion_report,
)
from .sampler import SamplerConfig, category_probabilities, category_stats, frequency_report, sample_batch
from .shrink import write_shrink_stats
from .training import ADAPTER_KINDS, DYNAMIC, evaluate_checkpoint, train_run

USAGE_ERRORS = (ConfigError, ParameterError, DataError, FileNotFoundError)


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"training.seed={args.seed}")
    if getattr(args, "steps", None) is not None:
        overrides.append(f"training.steps={args.steps}")
    if getattr(args, "lam", None) is not None:
        overrides.append(f"training.lambda={args.lam}")
    if getattr(args, "tau", None) is not None:
        overrides.append(f"sampler.temperature={args.tau}")
    return load_run_config(args.config, overrides)


def _parse_dialects(raw: str | None) -> list[str] | None:
    if not raw:
        return None
    dialects = [d.strip() for d in raw.split(",") if d.strip()]
    for d in dialects:
        if d not in DIALECTS:
            raise ConfigError(f"unknown dialect '{d}' (expected one of {DIALECTS})")
    return dialects


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    records = generate_corpus(cfg.corpus, out)
    counts: dict[str, int] = {}
    for r in records:
        key = f"{r.split}/{r.dialect}/{r.task}"
        counts[key] = counts.get(key, 0) + 1
    print(f"wrote {len(records)} utterances to {out}")
    for key in sorted(counts):
        print(f"  {key}: {counts[key]}")
    matrix, dialects = centroid_distances(out, records)
    print("centroid distances:")
    print(f"  dialects: {dialects}")
    for i, d in enumerate(dialects):
        row = " ".join(f"{matrix[i, j]:8.4f}" for j in range(len(dialects)))
        print(f"  {d}: {row}")
    return 0


def _run_dir_for(args, cfg: RunConfig, adapter_kind: str, dialects) -> Path:
    if args.out:
        return Path(args.out)
    extra = {"adapter": adapter_kind, "dialects": dialects or list(DIALECTS)}
    digest = config_digest(cfg, extra)
    name = f"{adapter_kind}-{''.join(dialects or DIALECTS)}-{digest}"
    return Path(args.runs_root) / name


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dialects = _parse_dialects(args.dialects)
    adapter_kind = args.adapter
    run_dir = _run_dir_for(args, cfg, adapter_kind, dialects)
    final_ckpt = run_dir / "checkpoints" / "final.ckpt"
    if final_ckpt.exists():
        if args.reuse:
            print(f"reusing existing run at {run_dir}")
            return 0
        raise ConfigError(
            f"run dir {run_dir} already holds a finished run (use --reuse or --out)"
        )
    resolved = cfg.to_dict()
    resolved["run"] = {"adapter": adapter_kind, "dialects": dialects or list(DIALECTS)}
    result = train_run(
        args.data,
        run_dir,
        cfg.adapter,
        cfg.training,
        cfg.sampler,
        adapter_kind=adapter_kind,
        dialects=dialects,
        resolved_config=resolved,
    )
    print(f"run complete: {result.run_dir}")
    print(f"  log:        {result.log_path}")
    print(f"  checkpoint: {result.checkpoint_path}")
    return 0


def _metric_rows(rows: list[dict], task: str) -> dict:
    """Per-dialect and averaged metrics from prediction rows."""
    by_dialect: dict[str, list[dict]] = {}
    for r in rows:
        by_dialect.setdefault(r["dialect"], []).append(r)
    out: dict[str, dict] = {}
    for dialect in sorted(by_dialect):
        group = by_dialect[dialect]
        refs = [g["reference"] for g in group]
        hyps = [g["hypothesis"] for g in group]
        entry: dict = {"count": len(group)}
        if task == "asr":
            rates = [wer(r, h)[0] for r, h in zip(refs, hyps)]
            entry["wer"] = sum(rates) / len(rates)
            entry["cer"] = sum(cer(r, h) for r, h in zip(refs, hyps)) / len(refs)
        else:
            entry["bleu"] = corpus_bleu(refs, hyps)
        entry["exact_match"] = sum(r == h for r, h in zip(refs, hyps)) / len(refs)
        out[dialect] = entry
    metric_names = [k for k in next(iter(out.values())) if k != "count"]
    out["avg"] = {
        name: sum(out[d][name] for d in by_dialect) / len(by_dialect) for name in metric_names
    }
    out["avg"]["count"] = sum(len(v) for v in by_dialect.values())
    return out


def run_eval(run_dir, data_dir, task: str, split: str = "test", out_dir=None) -> dict:
    """Evaluate a finished run; returns the metrics table and writes artifacts."""
    run_dir = Path(run_dir)
    resolved_path = run_dir / "resolved_config.json"
    if not resolved_path.exists():
        raise ConfigError(f"run dir {run_dir} has no resolved_config.json")
    resolved = json.loads(resolved_path.read_text())
    run_info = resolved.pop("run", {})
    adapter_kind = run_info.get("adapter", DYNAMIC)
    from .config import run_config_from_dict

    cfg = run_config_from_dict(resolved)
    ckpt = run_dir / "checkpoints" / "final.ckpt"
    out_dir = Path(out_dir) if out_dir else run_dir / f"eval_{task}_{split}"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = evaluate_checkpoint(
        ckpt,
        data_dir,
        task,
        cfg.adapter,
        cfg.training,
        adapter_kind=adapter_kind,
        split=split,
        out_path=out_dir / "predictions.jsonl",
    )
    table = _metric_rows(rows, task)
    (out_dir / "metrics.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        names = sorted({k for v in table.values() for k in v})
        w.writerow(["dialect"] + names)
        for dialect in sorted(table):
            w.writerow([dialect] + [table[dialect].get(n, "") for n in names])
    shrink_rows = [
        {
            "utterance_id": r["uid"],
            "frames": r["frames"],
            "n_q": r["audio_tokens"],
            "transcript_len": r["text_tokens"],
        }
        for r in rows
    ]
    write_shrink_stats(shrink_rows, out_dir / "efficiency.csv")
    records = [EfficiencyRecord(r["uid"], r["audio_tokens"], r["text_tokens"]) for r in rows]
    report = expansion_report({adapter_kind: records})
    write_expansion_report(report, out_dir / "expansion.json", out_dir / "expansion.csv")
    return table


def cmd_eval(args) -> int:
    table = run_eval(args.run, args.data, args.task, split=args.split, out_dir=args.out)
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    workdir = Path(args.workdir)
    data_dir = workdir / "corpus"
    if not (data_dir / "manifest.jsonl").exists():
        generate_corpus(cfg.corpus, data_dir)
    sources: list[tuple[str, list[str] | None]] = [("all", None)] + [(d, [d]) for d in DIALECTS]
    summary: dict[str, dict] = {}
    efficiency: dict[str, list[EfficiencyRecord]] = {}
    for adapter_kind in ADAPTER_KINDS:
        for source_name, dialects in sources:
            run_name = f"{adapter_kind}-{source_name}"
            run_dir = workdir / "runs" / run_name
            final = run_dir / "checkpoints" / "final.ckpt"
            if not final.exists():
                resolved = cfg.to_dict()
                resolved["run"] = {
                    "adapter": adapter_kind,
                    "dialects": dialects or list(DIALECTS),
                }
                train_run(
                    data_dir,
                    run_dir,
                    cfg.adapter,
                    cfg.training,
                    cfg.sampler,
                    adapter_kind=adapter_kind,
                    dialects=dialects,
                    resolved_config=resolved,
                )
            table = run_eval(run_dir, data_dir, "asr")
            summary[run_name] = {
                "adapter": adapter_kind,
                "source": source_name,
                "asr": table,
            }
            if source_name == "all":
                pred_path = run_dir / "eval_asr_test" / "predictions.jsonl"
                rows = [json.loads(line) for line in pred_path.read_text().splitlines()]
                efficiency[adapter_kind] = [
                    EfficiencyRecord(r["uid"], r["audio_tokens"], r["text_tokens"]) for r in rows
                ]
            print(f"{run_name}: avg WER {table['avg']['wer']:.2f}")
    eff_report = expansion_report(efficiency)
    out = {"runs": summary, "efficiency": eff_report}
    out_path = workdir / "ablation_summary.json"
    out_path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    with open(workdir / "ablation_summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["run", "adapter", "source"] + [f"wer_{d}" for d in DIALECTS] + ["wer_avg"])
        for run_name in sorted(summary):
            entry = summary[run_name]
            table = entry["asr"]
            w.writerow(
                [run_name, entry["adapter"], entry["source"]]
                + [f"{table[d]['wer']:.4f}" if d in table else "" for d in DIALECTS]
                + [f"{table['avg']['wer']:.4f}"]
            )
    print(f"ablation summary: {out_path}")
    for system, entry in eff_report.items():
        print(
            f"  {system}: mean ratio {entry['mean_ratio']:.3f}, "
            f"length corr {entry['length_correlation']}"
        )
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradchecks.run_all()
    ok = True
    for name, report in reports.items():
        status = "pass" if report.max_rel_err <= gradchecks.TOLERANCE else "FAIL"
        ok &= status == "pass"
        print(f"{name}: max rel err {report.max_rel_err:.3e} [{status}]")
    return 0 if ok else 1


def cmd_sample_stats(args) -> int:
    cfg = _load_config(args)
    if args.data:
        records = [r for r in load_manifest(args.data) if r.split == "train"]
    else:
        # synthesize placeholder records straight from the configured counts
        from types import SimpleNamespace

        records = []
        for dialect, per_task in sorted(cfg.corpus.train_counts.items()):
            for task, n in sorted(per_task.items()):
                records.extend(
                    SimpleNamespace(uid=f"{dialect}-{task}-{i:05d}", dialect=dialect, task=task)
                    for i in range(n)
                )
    stats = category_stats(records)
    tau = cfg.sampler.temperature
    probs = category_probabilities(stats, tau)
    rng = np.random.default_rng(cfg.sampler.seed)
    batch_cfg = SamplerConfig(temperature=tau, seed=cfg.sampler.seed, batch=min(args.draws, 1000))
    schedule = []
    by_uid = {r.uid: r for r in records}
    while len(schedule) < args.draws:
        batch_cfg.batch = min(1000, args.draws - len(schedule))
        ids, rng = sample_batch(records, probs, batch_cfg, rng)
        schedule.extend(ids)
    from .sampler import CategoryKey

    cats = [CategoryKey(by_uid[u].dialect, by_uid[u].task) for u in schedule]
    report = frequency_report(cats, probs)
    payload = json.loads(report.to_json())
    payload["temperature"] = tau
    payload["reference_distributions"] = {
        "tau_1": {str(k): v for k, v in sorted(category_probabilities(stats, 1.0).items())},
        "tau_3": {str(k): v for k, v in sorted(category_probabilities(stats, 3.0).items())},
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p, with_train_flags=False):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override")
        if with_train_flags:
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--lambda", dest="lam", type=float, default=None)
            p.add_argument("--tau", type=float, default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    add_config_args(p)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one system")
    add_config_args(p, with_train_flags=True)
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--adapter", choices=ADAPTER_KINDS, default=DYNAMIC)
    p.add_argument("--dialects", default=None, help="comma-separated training dialects")
    p.add_argument("--out", default=None, help="explicit run directory")
    p.add_argument("--runs-root", default="runs", help="root for content-addressed run dirs")
    p.add_argument("--reuse", action="store_true", help="skip if the run already finished")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--task", choices=("asr", "st"), required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the adapter/source ablation grid")
    add_config_args(p, with_train_flags=True)
    p.add_argument("--workdir", required=True, help="directory for corpus + runs + summary")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sample-stats", help="temperature sampling frequency report")
    add_config_args(p)
    p.add_argument("--data", default=None, help="corpus directory (optional)")
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
