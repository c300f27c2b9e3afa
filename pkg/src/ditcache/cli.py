"""Command-line harness: run, compare, replay, metrics, dump.

Every path is deterministic under a fixed config: reports embed the full
configuration and seeds, contain no timestamps, and repeated invocations
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .archive import archive_read, archive_write
from .config import ExperimentConfig, build_config, parse_config_file
from .engine import cached_sample
from .errors import (
    ArchiveFormatError,
    ArchiveMismatchError,
    CacheIntegrityError,
    ConfigError,
    DivergenceError,
    ScheduleError,
    TraceFormatError,
)
from .metrics import RunReport, fidelity, recall_vs_oracle
from .model import init_model, init_noise, make_schedule
from .replay import replay_selection
from .speculation import speculative_prerun, table_from_archive

DEFAULT_CR_GRID = (0.55, 0.92, 0.99)
COMPARE_COLUMNS = ("policy", "cached_ratio", "spec_steps", "speedup", "mean_recall",
                   "psnr_vs_dense", "top25_share", "never_selected_frac")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def render_report(report: RunReport, cfg: ExperimentConfig) -> str:
    out = io.StringIO()
    w = out.write
    w("# ditcache run report\n")
    w(f"code_version = {__version__}\n\n")
    w("[config]\n")
    for key, value in cfg.as_dict().items():
        w(f"{key} = {_fmt(value) if value is not None else ''}\n")
    w("\n[flops]\n")
    ledger = report.ledger
    w(f"compute_macs = {ledger.compute_macs}\n")
    w(f"speculation_macs = {ledger.speculation_macs}\n")
    w(f"total_macs = {ledger.total_macs}\n")
    w(f"dense_equivalent_macs = {report.dense_equivalent_macs}\n")
    w(f"speedup_estimate = {_fmt(report.speedup)}\n")
    for name, value in ledger.category_totals().items():
        w(f"category.{name} = {value}\n")
    w(f"arith_intensity_kn = {_fmt(report.intensity_kn)}\n")
    w(f"arith_intensity_full = {_fmt(report.intensity_full)}\n")
    w("\n[selection]\n")
    w(f"top25_share = {_fmt(report.skew.top25_share)}\n")
    w(f"never_selected_frac = {_fmt(report.skew.never_selected_frac)}\n")
    if report.mean_recall is not None:
        w(f"mean_recall = {_fmt(report.mean_recall)}\n")
    if report.fidelity_mse is not None:
        w(f"fidelity_mse = {_fmt(report.fidelity_mse)}\n")
        w(f"fidelity_psnr = {_fmt(report.fidelity_psnr)}\n")
    if cfg.report_per_step:
        w("\n[per_step]\n")
        w("step timestep n_computed macs\n")
        for k, (t, c1, macs) in enumerate(zip(report.per_step_timesteps,
                                              report.per_step_c1,
                                              ledger.per_step_totals())):
            w(f"{k} {_fmt(float(t))} {c1} {macs}\n")
    if cfg.report_histogram:
        w("\n[selection_histogram]\n")
        w("times_computed n_tokens\n")
        for count, n_tok in enumerate(report.skew.histogram):
            w(f"{count} {n_tok}\n")
    return out.getvalue()


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, newline="\n")


def _error_stub(path: str | None, code: int, exc: Exception) -> None:
    if path is None:
        return
    stub = (f"# ditcache run report\ncode_version = {__version__}\n"
            f"error_code = {code}\nerror_kind = {type(exc).__name__}\n"
            f"error_message = {exc}\n")
    Path(path).write_text(stub, newline="\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _config_from_args(args) -> ExperimentConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for key in ("policy", "cr", "steps", "spec_steps", "seed", "noise_seed",
                "policy_seed", "period", "c2_mass", "out", "trace_out"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "no_starvation", False):
        overrides["starvation"] = False
    return build_config(file_values, overrides)


def _execute_run(cfg: ExperimentConfig):
    """Build model + noise, run the configured policy, return run objects."""
    model = init_model(cfg.to_model_config())
    noise = init_noise(model.config, cfg.noise_seed)
    schedule = make_schedule(cfg.steps)
    policy = cfg.to_policy()
    table = None
    if policy.needs_spec_table:
        table = speculative_prerun(model, noise, cfg.spec_steps)
    seeds = {"seed": cfg.seed, "noise_seed": cfg.noise_seed, "policy_seed": cfg.policy_seed}
    final, arch, report = cached_sample(model, noise, schedule, policy,
                                        spec_table=table, seeds=seeds)
    return final, arch, report


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    try:
        _final, arch, report = _execute_run(cfg)
    except (DivergenceError, CacheIntegrityError, TraceFormatError) as exc:
        _error_stub(cfg.out, _exit_code(exc), exc)
        raise
    _write_text(cfg.out, render_report(report, cfg))
    if cfg.trace_out:
        archive_write(arch, cfg.trace_out)
    return 0


def cmd_compare(args) -> int:
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not names:
        raise ConfigError("no policies given")
    cr_grid = [args.cr] if args.cr is not None else list(DEFAULT_CR_GRID)

    base = _config_from_args(args)
    dense_cfg = build_config(base.as_dict(), {"policy": "none", "cr": 0.0,
                                              "out": None, "trace_out": None})
    final_dense, dense_arch, dense_report = _execute_run(dense_cfg)

    rows = []
    for cr in cr_grid:
        for name in names:
            if name == "none":
                report, arch, final = dense_report, dense_arch, final_dense
                row_cr = 0.0
            else:
                cfg = build_config(base.as_dict(), {"policy": name, "cr": cr,
                                                    "out": None, "trace_out": None})
                final, arch, report = _execute_run(cfg)
                row_cr = cr
            recall = recall_vs_oracle(arch, dense_arch, row_cr)
            mse, psnr = fidelity(final_dense, final)
            rows.append({
                "policy": name,
                "cached_ratio": _fmt(float(row_cr)),
                "spec_steps": base.spec_steps if name == "specdiff" else 0,
                "speedup": _fmt(report.speedup),
                "mean_recall": _fmt(float(recall.mean()) if recall.size else 1.0),
                "psnr_vs_dense": _fmt(psnr),
                "top25_share": _fmt(report.skew.top25_share),
                "never_selected_frac": _fmt(report.skew.never_selected_frac),
            })
    _write_csv(args.csv, COMPARE_COLUMNS, rows)
    return 0


def cmd_replay(args) -> int:
    arch = archive_read(args.archive)
    overrides = {"policy": args.policy, "cr": args.cr}
    for key in ("c2_mass", "policy_seed", "spec_steps"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.no_starvation:
        overrides["starvation"] = False
    overrides["steps"] = arch.n_steps
    overrides["n_tokens"] = arch.n_tokens
    overrides["n_layers"] = arch.n_layers
    overrides["d_model"] = arch.d_model
    # heads only matter for live runs; keep divisibility for validation
    overrides["n_heads"] = 1
    cfg = build_config({}, overrides)
    policy = cfg.to_policy()
    table = table_from_archive(archive_read(args.spec_trace)) if args.spec_trace else None
    oracle = archive_read(args.oracle) if args.oracle else None
    result = replay_selection(arch, policy, spec_table=table, oracle_archive=oracle)

    lines = ["# ditcache replay report",
             f"code_version = {__version__}",
             f"policy = {args.policy}",
             f"cached_ratio = {_fmt(float(args.cr))}",
             f"mean_recall = {_fmt(float(result.per_step_recall.mean()) if result.per_step_recall.size else 1.0)}",
             f"bitmap_match_fraction = {_fmt(result.bitmap_match_fraction)}",
             f"top25_share = {_fmt(result.skew.top25_share)}",
             f"never_selected_frac = {_fmt(result.skew.never_selected_frac)}",
             ""]
    _write_text(args.out, "\n".join(lines))
    if args.csv:
        rows = [{"step": k + 1, "recall": _fmt(float(r)),
                 "n_computed": result.per_step_c1[k + 1]}
                for k, r in enumerate(result.per_step_recall)]
        _write_csv(args.csv, ("step", "recall", "n_computed"), rows)
    return 0


def cmd_metrics(args) -> int:
    ref = archive_read(args.reference)
    cand = archive_read(args.candidate)
    if (ref.n_tokens, ref.d_model) != (cand.n_tokens, cand.d_model):
        raise ArchiveMismatchError("archives disagree on latent dimensions")
    mse, psnr = fidelity(ref.final_latent, cand.final_latent)
    sys.stdout.write(f"mse = {_fmt(mse)}\npsnr = {_fmt(psnr)}\n")
    return 0


def cmd_dump(args) -> int:
    arch = archive_read(args.archive)
    columns = ["step", "timestep", "token", "computed", "received_sum"]
    columns += [f"received_l{i}" for i in range(arch.n_layers)]
    columns += ["output_norm"]
    rows = []
    for k, rec in enumerate(arch.records):
        mask = np.zeros(arch.n_tokens, dtype=bool)
        mask[rec.query_ids] = True
        norms = np.linalg.norm(rec.outputs.astype(np.float64), axis=1)
        totals = rec.received_per_token()
        for token in range(arch.n_tokens):
            row = {
                "step": k,
                "timestep": _fmt(float(rec.timestep)),
                "token": token,
                "computed": int(mask[token]),
                "received_sum": _fmt(float(totals[token])),
                "output_norm": _fmt(float(norms[token])),
            }
            for li in range(arch.n_layers):
                row[f"received_l{li}"] = _fmt(float(rec.received[li, token]))
            rows.append(row)
    _write_csv(args.csv, tuple(columns), rows)
    return 0


def _write_csv(path: str | None, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser, with_policy: bool = True) -> None:
    if with_policy:
        p.add_argument("--policy", type=str, default=None,
                       help="none|interval_reuse|historical_only|random|taylor_extrapolate|specdiff")
    p.add_argument("--cr", type=float, default=None, help="cached ratio in [0, 1)")
    p.add_argument("--steps", type=int, default=None, help="sampler steps (default 28)")
    p.add_argument("--spec-steps", dest="spec_steps", type=int, default=None,
                   help="lookahead steps for specdiff (default 2)")
    p.add_argument("--seed", type=int, default=None, help="model weight seed")
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=None)
    p.add_argument("--policy-seed", dest="policy_seed", type=int, default=None)
    p.add_argument("--period", type=int, default=None, help="interval_reuse period")
    p.add_argument("--c2-mass", dest="c2_mass", type=float, default=None)
    p.add_argument("--no-starvation", dest="no_starvation", action="store_true")
    p.add_argument("--config", type=str, default=None, help="flat key=value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditcache",
                                     description="Toy diffusion-transformer feature-caching lab")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one policy and emit a report")
    _add_run_flags(p)
    p.add_argument("--out", type=str, default=None, help="report path (default stdout)")
    p.add_argument("--trace-out", dest="trace_out", type=str, default=None,
                   help="write the trace archive here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several policies, emit a CSV table")
    _add_run_flags(p, with_policy=False)
    p.add_argument("--policies", type=str, default="none,random,historical_only,specdiff")
    p.add_argument("--csv", type=str, default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("replay", help="selection-only evaluation over an archive")
    p.add_argument("archive", type=str)
    p.add_argument("--policy", type=str, required=True)
    p.add_argument("--cr", type=float, required=True)
    p.add_argument("--spec-steps", dest="spec_steps", type=int, default=None)
    p.add_argument("--policy-seed", dest="policy_seed", type=int, default=None)
    p.add_argument("--c2-mass", dest="c2_mass", type=float, default=None)
    p.add_argument("--no-starvation", dest="no_starvation", action="store_true")
    p.add_argument("--spec-trace", dest="spec_trace", type=str, default=None,
                   help="lookahead-run archive for specdiff replay")
    p.add_argument("--oracle", type=str, default=None,
                   help="dense archive for cross-archive recall")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--csv", type=str, default=None, help="per-step recall CSV")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("metrics", help="fidelity between two archives' final latents")
    p.add_argument("reference", type=str)
    p.add_argument("candidate", type=str)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("dump", help="archive to CSV")
    p.add_argument("archive", type=str)
    p.add_argument("--csv", type=str, default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_dump)
    return parser


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (ArchiveFormatError, TraceFormatError, ArchiveMismatchError,
                        ScheduleError)):
        return 3
    if isinstance(exc, DivergenceError):
        return 4
    if isinstance(exc, CacheIntegrityError):
        return 5
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArchiveFormatError, TraceFormatError, ArchiveMismatchError,
            ScheduleError, DivergenceError, CacheIntegrityError, FileNotFoundError) as exc:
        code = 3 if isinstance(exc, FileNotFoundError) else _exit_code(exc)
        sys.stderr.write(f"error: code={code} kind={type(exc).__name__}: {exc}\n")
        return code


if __name__ == "__main__":
    raise SystemExit(main())
