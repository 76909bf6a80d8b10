"""``visreflect`` command line.

Exit codes: 0 success, 2 usage/config/input error, 3 transport abort,
4 degenerate input (e.g. no positive attention). JSON goes to stdout,
diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import forge as forge_mod
from .config import LLM_KEY_ENV, VLM_KEY_ENV, AppConfig, ConfigError, load_config
from .errors import DEGENERATE_ERRORS, GenerationError, MissingDistribution, ReflectError
from .gateway import HttpChatClient, ScriptedClient, script_from_json
from .metrics import Bootstrap, curve_summary, decay_curve, export_curve_csv
from .rewards import score_rollout
from .synth import DecayProfile, FleetSpec, LengthDistribution, generate_fleet
from .trace import read_trace, write_trace

EXIT_OK, EXIT_USAGE, EXIT_TRANSPORT, EXIT_DEGENERATE = 0, 2, 3, 4
FIXED_CLOCK = "1970-01-01T00:00:00+00:00"

log = logging.getLogger("visreflect")


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc) -> None:
    print(json.dumps(doc, separators=(",", ":")))


def _config(args) -> AppConfig:
    return load_config(getattr(args, "config", None))


# --- forge -------------------------------------------------------------------


def _mock_clients(path: str, tasks: list[forge_mod.ForgeTask]):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, list):
        if len(doc) != len(tasks):
            raise UsageError(f"mock transcript has {len(doc)} entries for {len(tasks)} tasks")
        by_id = {t.id: entry for t, entry in zip(tasks, doc)}
    elif isinstance(doc, dict):
        by_id = doc
    else:
        raise UsageError("mock transcript must be a list or an object keyed by task id")

    def pick(task: forge_mod.ForgeTask) -> forge_mod.Clients:
        entry = by_id.get(task.id)
        if entry is None:
            raise UsageError(f"mock transcript has no script for task {task.id}")
        return forge_mod.Clients(
            llm=ScriptedClient(script_from_json(entry.get("llm", [])), model="mock-llm"),
            vlm=ScriptedClient(script_from_json(entry.get("vlm", [])), model="mock-vlm"),
        )

    missing = [t.id for t in tasks if t.id not in by_id]
    if missing:
        raise UsageError(f"mock transcript has no script for task(s): {', '.join(missing)}")
    return pick


def _http_clients(cfg: AppConfig) -> forge_mod.Clients:
    for env in (LLM_KEY_ENV, VLM_KEY_ENV):
        if not os.environ.get(env, "").strip():
            raise UsageError(f"missing credential: set {env} (or pass --mock-transcript)")

    def make(ep, env):
        return HttpChatClient.from_env(
            ep.base_url,
            ep.model,
            env,
            image_encoding=ep.image_encoding,
            timeout=ep.timeout,
            max_attempts=ep.max_attempts,
            max_concurrency=ep.max_concurrency,
        )

    return forge_mod.Clients(llm=make(cfg.llm, LLM_KEY_ENV), vlm=make(cfg.vlm, VLM_KEY_ENV))


def cmd_forge(args) -> int:
    cfg = _config(args)
    overrides = {
        "output_path": args.out,
        "concurrency": args.concurrency,
        "max_rounds": args.max_rounds,
        "require_connector": args.require_connector or None,
    }
    try:
        fc = dataclasses.replace(cfg.forge, **{k: v for k, v in overrides.items() if v is not None})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with open(args.tasks, encoding="utf-8") as fh:
        try:
            tasks = forge_mod.read_tasks(fh)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.mock_transcript:
        clients = _mock_clients(args.mock_transcript, tasks)
        clock = lambda: FIXED_CLOCK  # noqa: E731
    else:
        clients = _http_clients(cfg)
        clock = forge_mod.utc_now
    try:
        report = forge_mod.forge_batch(tasks, clients, fc, clock=clock)
    except forge_mod.ForgeIOError as exc:
        _err(f"forge: {exc}")
        return EXIT_USAGE
    _emit(report.to_dict())
    return EXIT_TRANSPORT if report.tally.get("transport") else EXIT_OK


# --- score -------------------------------------------------------------------


def score_json(trace_path: str, response: str, answer: str, lambda_v: float, lambda_f: float, cap=None) -> str:
    with open(trace_path, "rb") as fh:
        trace = read_trace(fh)
    return score_rollout(response, answer, trace, lambda_v, lambda_f, cap=cap).to_json()


def cmd_score(args) -> int:
    cfg = _config(args)
    lambda_v = cfg.reward.lambda_v if args.lambda_v is None else args.lambda_v
    lambda_f = cfg.reward.lambda_f if args.lambda_f is None else args.lambda_f
    response = Path(args.response).read_text(encoding="utf-8")
    print(score_json(args.trace, response, args.answer, lambda_v, lambda_f, cfg.reward.cap))
    return EXIT_OK


# --- analyze -----------------------------------------------------------------


def parse_layers(spec: str):
    spec = spec.strip()
    if spec in ("", "all"):
        return None
    if spec == "last":
        return "last"
    layers: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            layers.extend(range(lo, hi + 1))
        else:
            layers.append(int(part))
    return layers


def cmd_analyze(args) -> int:
    cfg = _config(args).analyze
    files = sorted(Path(args.traces).glob("*.json"))
    traces = []
    for path in files:
        try:
            traces.append(read_trace(path.read_bytes()))
        except ReflectError as exc:
            _err(f"skipping {path}: {exc}")
    if not traces:
        raise UsageError(f"no valid traces in {args.traces}")
    resamples = cfg.bootstrap_resamples if args.bootstrap is None else args.bootstrap
    ci = Bootstrap(resamples, args.level or cfg.ci_level) if resamples > 0 else None
    try:
        curve = decay_curve(
            traces,
            metric=args.metric,
            layers=parse_layers(args.layers),
            bucket_size=args.bucket or cfg.bucket_size,
            ci=ci,
            rng=cfg.seed if args.seed is None else args.seed,
        )
    except MissingDistribution as exc:
        raise UsageError(f"MissingDistribution: {exc}") from None
    data = export_curve_csv(curve)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(data)
    summary = curve_summary(curve)
    summary["traces"] = len(traces)
    _emit(summary)
    return EXIT_OK


# --- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        spikes = tuple(int(x) for x in args.spikes.split(",") if x.strip()) if args.spikes else ()
        if args.decay_to is not None:
            profile = DecayProfile.exponential_to(
                args.initial,
                args.decay_at,
                args.decay_to,
                kind=args.profile,
                spike_positions=spikes,
                spike_height=args.spike_height,
            )
        else:
            profile = DecayProfile(args.profile, args.initial, args.rate, spikes, args.spike_height)
        lengths = LengthDistribution(args.len_min or args.len, args.len_max or args.len_min or args.len)
        fleet = generate_fleet(
            profile,
            args.count,
            lengths,
            seed=args.seed,
            spec=FleetSpec(args.layers, args.visual_tokens, args.noise, not args.no_dist),
        )
    except (GenerationError, ValueError) as exc:
        raise UsageError(f"invalid profile: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, trace in enumerate(fleet):
        (out / f"trace-{i:05d}.json").write_bytes(write_trace(trace))
    _emit({"written": len(fleet), "out": str(out)})
    return EXIT_OK


# --- validate / serve ----------------------------------------------------------


def cmd_validate(args) -> int:
    bad = 0
    for p in args.paths:
        try:
            trace = read_trace(Path(p).read_bytes())
            _emit({"path": p, "valid": True, "sample_id": trace.sample_id, "steps": len(trace.steps)})
        except (ReflectError, OSError) as exc:
            bad += 1
            _emit({"path": p, "valid": False, "error": type(exc).__name__, "detail": str(exc)})
            _err(f"{p}: {exc}")
    return EXIT_USAGE if bad else EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve

    cfg = _config(args)
    port = args.port or cfg.service.port
    if not 1 <= port <= 65535:
        raise UsageError("--port must be in [1, 65535]")
    serve(args.host or cfg.service.host, port, cfg.reward)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visreflect", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forge", help="forge reasoning samples from a tasks JSONL file")
    f.add_argument("--tasks", required=True)
    f.add_argument("--out")
    f.add_argument("--config")
    f.add_argument("--mock-transcript", help="JSON scripts replacing the LLM/VLM endpoints")
    f.add_argument("--concurrency", type=int)
    f.add_argument("--max-rounds", type=int)
    f.add_argument("--require-connector", action="store_true")
    f.set_defaults(func=cmd_forge)

    s = sub.add_parser("score", help="score one rollout")
    s.add_argument("--trace", required=True)
    s.add_argument("--response", required=True, help="file holding the response text")
    s.add_argument("--answer", required=True)
    s.add_argument("--lambda-v", type=float)
    s.add_argument("--lambda-f", type=float)
    s.add_argument("--config")
    s.set_defaults(func=cmd_score)

    a = sub.add_parser("analyze", help="decay curve of a metric over a directory of traces")
    a.add_argument("--traces", required=True)
    a.add_argument("--metric", choices=("attn", "vdm"), default="attn")
    a.add_argument("--layers", default="all", help="all | last | comma list of layer ids or ranges")
    a.add_argument("--bucket", type=int)
    a.add_argument("--bootstrap", type=int, help="resamples; 0 disables the band")
    a.add_argument("--level", type=float)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.add_argument("--config")
    a.set_defaults(func=cmd_analyze)

    y = sub.add_parser("synth", help="write a synthetic trace fleet")
    y.add_argument("--profile", choices=("constant", "exponential", "reflective"), default="exponential")
    y.add_argument("--initial", type=float, default=0.4)
    y.add_argument("--rate", type=float, default=0.0)
    y.add_argument("--decay-to", type=float, help="fraction of initial reached at --decay-at")
    y.add_argument("--decay-at", type=int, default=300)
    y.add_argument("--spikes", help="comma list of spike positions (reflective)")
    y.add_argument("--spike-height", type=float, default=0.0)
    y.add_argument("--len", type=int, default=300)
    y.add_argument("--len-min", type=int)
    y.add_argument("--len-max", type=int)
    y.add_argument("--layers", type=int, default=2)
    y.add_argument("--visual-tokens", type=int, default=8)
    y.add_argument("--noise", type=float, default=0.0)
    y.add_argument("--no-dist", action="store_true")
    y.add_argument("--count", type=int, required=True)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)

    v = sub.add_parser("validate", help="validate trace files")
    v.add_argument("paths", nargs="+")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("serve", help="run the reward HTTP service")
    r.add_argument("--port", type=int)
    r.add_argument("--host")
    r.add_argument("--config")
    r.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except DEGENERATE_ERRORS as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_DEGENERATE
    except (UsageError, ConfigError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except ReflectError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
