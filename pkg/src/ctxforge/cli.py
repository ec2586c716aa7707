"""``forge``: command-line front end.

Subcommands: ``retrieve`` (fused or rule-driven demonstration selection),
``filter`` (metadata score filtering), ``eval`` (curve/stability/align/
transfer/human reports), ``capm`` (demo / gradcheck / diagnose), and
``validate`` (episode/embedding/metadata lint).

Conventions: stdout carries only data (JSON lines); human-readable tables and
progress go to stderr.  A JSON config file (``--config``) supplies defaults
that explicit flags override; the seed falls back to the ``FORGE_SEED``
environment variable.  Exit codes: 0 success, 2 usage, 3 data/validation,
4 numeric guard.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import Any, Sequence

import numpy as np

from . import __version__, capm, fusion, intent, metrics
from .errors import NumericGuardError, UsageError, ValidationError
from .records import (
    Demonstration,
    Episode,
    TAXONOMY_ORDER,
    _iter_jsonl,
    load_embeddings,
    load_episodes,
    load_metadata,
)

DEFAULT_K = 4
DEFAULT_TOP_N = 50
DEFAULT_CAPM = {
    "d_b": 12,
    "d_p": 8,
    "K": 2,
    "r": 2,
    "heads": 2,
    "eta": 0.1,
    "tau_min": 0.05,
    "tau_max": 2.0,
    "b2_init": 4.0,
}


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _emit_lines(lines: Sequence[str], out: str | None) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _jsonl(obj: dict[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False)


def _format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt(row: Sequence[str]) -> str:
        return "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)


def _load_config(args: argparse.Namespace) -> dict[str, Any]:
    path = getattr(args, "config", None)
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: config parse error: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return cfg


def _resolve(flag_value: Any, config: dict[str, Any], key: str, default: Any) -> Any:
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _resolve_seed(args: argparse.Namespace, config: dict[str, Any]) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in config:
        seed = config["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ValidationError(f"config seed must be an integer, got {seed!r}")
        return seed
    env = os.environ.get("FORGE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"FORGE_SEED must be an integer, got {env!r}") from None
    return 0


# ---------------------------------------------------------------------------
# retrieve


def _stub_demo(item_id: str) -> Demonstration:
    return Demonstration(id=item_id, image_ref=item_id, instruction="")


def _read_query_ids(path: str) -> list[str]:
    ids: list[str] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) or not obj["id"]:
            raise ValidationError(f"{path}: line {lineno}: expected an object with a non-empty 'id'")
        if obj["id"] in seen:
            raise ValidationError(f"{path}: line {lineno}: duplicate query id {obj['id']!r}")
        seen.add(obj["id"])
        ids.append(obj["id"])
    return ids


def cmd_retrieve(args: argparse.Namespace) -> int:
    config = _load_config(args)
    k = _resolve(args.k, config, "k", DEFAULT_K)
    taxonomy = _resolve(args.taxonomy, config, "taxonomy", None)
    subtask = _resolve(args.subtask, config, "subtask", None)

    if args.mode == "fusion":
        if not args.embeddings or not args.queries:
            raise UsageError("retrieve --mode fusion requires --embeddings and --queries")
        lam = float(_resolve(args.lam, config, "lambda", fusion.DEFAULT_LAMBDA))
        beta = float(_resolve(args.beta, config, "beta", fusion.DEFAULT_BETA))
        top_n = int(_resolve(args.top_n, config, "top_n", DEFAULT_TOP_N))
        cfg = fusion.FusionConfig(lam=lam, top_n=top_n)
        store = load_embeddings(args.embeddings, normalize=True)
        query_ids = _read_query_ids(args.queries)
        scores_by_scene: dict[str, dict[str, float]] = {}
        if args.s_field:
            if not args.metadata:
                raise UsageError("--s-field requires --metadata")
            scores_by_scene = {m.scene_id: m.scores for m in load_metadata(args.metadata)}
        taxonomy = taxonomy or "Perception"
        subtask = subtask or "Visual Grounding"
        episodes: list[Episode] = []
        for qid in query_ids:
            ranked = fusion.rank_top_n(qid, store, cfg)
            ids = [cid for cid, _ in ranked]
            if args.s_field:
                scores = []
                for cid in ids:
                    bucket = scores_by_scene.get(cid)
                    if bucket is None or args.s_field not in bucket:
                        raise ValidationError(
                            f"candidate {cid!r}: no metadata score {args.s_field!r}"
                        )
                    scores.append(bucket[args.s_field])
            else:
                scores = [s for _, s in ranked]
            selected: list[str] = []
            if ids and k > 0:
                if k > len(ids):
                    _log(f"retrieve: {qid}: clamping k={k} to pool size {len(ids)}")
                phi = np.array([store.require(cid, "visual").values for cid in ids])
                pool = fusion.CandidatePool(
                    ids=tuple(ids), phi=phi, scores=np.asarray(scores), beta=beta
                )
                factor = fusion.build_dpp_factor(pool)
                chosen = fusion.greedy_dpp_select(factor, min(k, len(ids)))
                selected = [ids[i] for i in chosen]
            episodes.append(
                Episode(
                    episode_id=qid,
                    taxonomy=taxonomy,
                    subtask=subtask,
                    shots=tuple(_stub_demo(cid) for cid in selected),
                    query=Demonstration(id=qid, image_ref=qid, instruction=""),
                )
            )
    else:  # intent
        if not args.metadata:
            raise UsageError("retrieve --mode intent requires --metadata")
        if args.rule is None and not args.rule_file:
            raise UsageError("retrieve --mode intent requires --rule or --rule-file")
        rule_text = args.rule
        if rule_text is None:
            with open(args.rule_file, "r", encoding="utf-8") as fh:
                rule_text = fh.read().strip()
        rule = intent.parse_rule(rule_text)
        corpus = load_metadata(args.metadata)
        matched = intent.retrieve_by_rule(rule, corpus)
        selected = matched[: max(k, 0)]
        episode_id = args.episode_id or "intent-0"
        taxonomy = taxonomy or "Conception"
        subtask = subtask or "Fast Concept Mapping"
        episodes = [
            Episode(
                episode_id=episode_id,
                taxonomy=taxonomy,
                subtask=subtask,
                shots=tuple(_stub_demo(sid) for sid in selected),
                query=Demonstration(
                    id=f"{episode_id}::query", instruction=intent.pretty_print(rule)
                ),
            )
        ]
        _log(f"retrieve: rule matched {len(matched)} scene(s), kept {len(selected)}")

    _emit_lines([_jsonl(ep.to_json()) for ep in episodes], args.out)
    _log(f"retrieve: wrote {len(episodes)} episode(s)")
    return 0


# ---------------------------------------------------------------------------
# filter


def cmd_filter(args: argparse.Namespace) -> int:
    config = _load_config(args)
    lo = _resolve(args.min, config, "min", None)
    hi = _resolve(args.max, config, "max", None)
    records = load_metadata(args.metadata)
    kept = []
    missing = 0
    out_of_range = 0
    for rec in records:
        score = rec.scores.get(args.score_field)
        if score is None:
            missing += 1
            continue
        if (lo is not None and score < lo) or (hi is not None and score > hi):
            out_of_range += 1
            continue
        kept.append(rec)
    if missing:
        _log(f"filter: warning: {missing} record(s) lack score {args.score_field!r}")
    _emit_lines([_jsonl(rec.to_json()) for rec in kept], args.out)
    _log(
        f"filter: kept={len(kept)} dropped={missing + out_of_range} "
        f"(missing_field={missing}, out_of_range={out_of_range})"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def _taxonomy_rank(taxonomy: str) -> int:
    return TAXONOMY_ORDER.index(taxonomy)


def cmd_eval(args: argparse.Namespace) -> int:
    _load_config(args)  # reserved for future knobs; validates the file if given
    if args.report == "curves":
        rows = [r for r in metrics.load_results(args.results) if r.perturbation is None]
        rows.sort(key=lambda r: (_taxonomy_rank(r.taxonomy), r.task, r.model, r.modality))
        out_lines = []
        table = []
        for row in rows:
            summary = metrics.summarize(row.curve)
            out_lines.append(
                _jsonl(
                    {
                        "model": row.model,
                        "task": row.task,
                        "taxonomy": row.taxonomy,
                        "modality": row.modality,
                        "zero_shot": summary.zero_shot,
                        "peak": summary.peak,
                        "efficiency": summary.efficiency,
                    }
                )
            )
            table.append(
                [
                    row.model,
                    row.task,
                    row.taxonomy,
                    row.modality,
                    f"{summary.zero_shot:.3f}",
                    f"{summary.peak:.3f}",
                    f"{summary.efficiency:.3f}",
                ]
            )
        _emit_lines(out_lines, args.out)
        _log(_format_table(["Model", "Task", "Taxonomy", "Mod", "Z-S", "Peak", "Eff"], table))
        return 0

    if args.report == "stability":
        rows = metrics.load_results(args.results)
        clean: dict[tuple[str, str, str], metrics.ResultRow] = {}
        for row in rows:
            if row.perturbation is None:
                key = (row.model, row.task, row.modality)
                if key in clean:
                    raise ValidationError(f"stability: duplicate clean curve for {key}")
                clean[key] = row
        out_lines = []
        table = []
        for row in rows:
            if row.perturbation is None:
                continue
            key = (row.model, row.task, row.modality)
            if key not in clean:
                raise ValidationError(f"stability: no clean curve for {key}")
            base = clean[key].curve
            base_sub = base
            if base.shots != row.curve.shots:
                # perturbation grids may start later (k >= 1); align on the subset
                values = tuple(base.value_at(s) for s in row.curve.shots)
                base_sub = type(base)(shots=row.curve.shots, values=values)
            deviation = metrics.stability_score(base_sub, row.curve)
            report = metrics.StabilityReport(
                perturbation=row.perturbation, deviation_percent=deviation
            )
            out_lines.append(
                _jsonl(
                    {
                        "model": row.model,
                        "task": row.task,
                        "modality": row.modality,
                        "perturbation": report.perturbation,
                        "deviation_percent": report.deviation_percent,
                    }
                )
            )
            table.append(
                [row.model, row.task, row.modality, row.perturbation, f"{deviation:.3f}"]
            )
        _emit_lines(out_lines, args.out)
        _log(_format_table(["Model", "Task", "Mod", "Perturbation", "Dev%"], table))
        return 0

    if args.report == "align":
        groups: dict[str, tuple[list[float], list[float]]] = {}
        for lineno, obj in _iter_jsonl(args.results):
            if not isinstance(obj, dict):
                raise ValidationError(f"{args.results}: line {lineno}: expected an object")
            task = obj.get("task", "all")
            try:
                x = float(obj[args.x_field])
                y = float(obj[args.y_field])
            except (KeyError, TypeError, ValueError):
                raise ValidationError(
                    f"{args.results}: line {lineno}: needs numeric "
                    f"{args.x_field!r} and {args.y_field!r}"
                ) from None
            groups.setdefault(task, ([], []))[0].append(x)
            groups[task][1].append(y)
        out_lines = []
        table = []
        for task in sorted(groups):
            xs, ys = groups[task]
            r = metrics.pearson(xs, ys)
            rho = metrics.spearman(xs, ys)
            out_lines.append(
                _jsonl({"task": task, "n": len(xs), "pearson": r, "spearman": rho})
            )
            table.append([task, str(len(xs)), f"{r:.4f}", f"{rho:.4f}"])
        _emit_lines(out_lines, args.out)
        _log(_format_table(["Task", "N", "Pearson", "Spearman"], table))
        return 0

    if args.report == "transfer":
        if not args.base or not args.variant:
            raise UsageError("eval transfer requires --base and --variant")
        base_rows = metrics.load_results(args.base)
        var_rows = metrics.load_results(args.variant)
        base_map = {(r.model, r.task, r.modality): r for r in base_rows}
        var_map = {(r.model, r.task, r.modality): r for r in var_rows}
        if set(base_map) != set(var_map):
            missing = set(base_map) ^ set(var_map)
            raise ValidationError(f"transfer: unmatched curves for {sorted(missing)}")
        per_tax: dict[str, list[tuple[Any, Any]]] = {}
        for key in sorted(base_map):
            row = base_map[key]
            per_tax.setdefault(row.taxonomy, []).append((row.curve, var_map[key].curve))
        out_lines = []
        table = []
        deltas = []
        for taxonomy in TAXONOMY_ORDER:
            if taxonomy not in per_tax:
                continue
            pairs = per_tax[taxonomy]
            delta = metrics.relative_change([b for b, _ in pairs], [v for _, v in pairs])
            deltas.append(delta)
            out_lines.append(_jsonl({"taxonomy": taxonomy, "relative_change_percent": delta}))
            table.append([taxonomy, f"{delta:+.3f}"])
        average = float(np.mean(deltas))
        out_lines.append(_jsonl({"taxonomy": "Average", "relative_change_percent": average}))
        table.append(["Average", f"{average:+.3f}"])
        _emit_lines(out_lines, args.out)
        _log(_format_table(["Taxonomy", "RelChange%"], table))
        return 0

    # human study outcomes
    by_metric: dict[str, list[str]] = {}
    pooled: list[str] = []
    for lineno, obj in _iter_jsonl(args.results):
        if not isinstance(obj, dict) or "outcome" not in obj:
            raise ValidationError(f"{args.results}: line {lineno}: expected an 'outcome' field")
        metric = obj.get("metric", "all")
        by_metric.setdefault(metric, []).append(obj["outcome"])
        pooled.append(obj["outcome"])
    if not pooled:
        raise ValidationError(f"{args.results}: no outcomes")
    out_lines = []
    table = []
    for metric in sorted(by_metric):
        win, tie, lose = metrics.win_tie_lose(by_metric[metric])
        out_lines.append(_jsonl({"metric": metric, "win": win, "tie": tie, "lose": lose}))
        table.append([metric, f"{win:.1f}", f"{tie:.1f}", f"{lose:.1f}"])
    win, tie, lose = metrics.win_tie_lose(pooled)
    out_lines.append(_jsonl({"metric": "Overall", "win": win, "tie": tie, "lose": lose}))
    table.append(["Overall", f"{win:.1f}", f"{tie:.1f}", f"{lose:.1f}"])
    _emit_lines(out_lines, args.out)
    _log(_format_table(["Metric", "Win%", "Tie%", "Lose%"], table))
    return 0


# ---------------------------------------------------------------------------
# capm


def _capm_hyper(args: argparse.Namespace, config: dict[str, Any]) -> capm.CapmHyper:
    sub = config.get("capm", {})
    if not isinstance(sub, dict):
        raise ValidationError("config 'capm' section must be an object")
    def pick(flag: Any, key: str) -> Any:
        if flag is not None:
            return flag
        if key in sub:
            return sub[key]
        return DEFAULT_CAPM[key]
    return capm.CapmHyper(
        d_b=pick(args.d_b, "d_b"),
        d_p=pick(args.d_p, "d_p"),
        K=pick(args.K, "K"),
        r=pick(args.r, "r"),
        eta=pick(args.eta, "eta"),
        tau_min=pick(args.tau_min, "tau_min"),
        tau_max=pick(args.tau_max, "tau_max"),
        b2_init=pick(args.b2_init, "b2_init"),
        heads=pick(args.heads, "heads"),
    )


def _capm_inputs(
    args: argparse.Namespace,
    hyper: capm.CapmHyper,
    rng: np.random.Generator,
    shots: int,
) -> tuple[list[tuple[np.ndarray, list[str]]], np.ndarray, np.ndarray]:
    t_len = args.t_len
    l_len = args.l_len
    if t_len < 1:
        raise UsageError("--t-len must be >= 1")
    if l_len < 2:
        raise UsageError("--l-len must be >= 2 (one token per segment)")
    h = rng.standard_normal((t_len, hyper.d_b))
    y = rng.standard_normal((t_len, hyper.d_b))
    demos = []
    n_user = max(1, l_len // 2)
    segments = ["user"] * n_user + ["assistant"] * (l_len - n_user)
    for _ in range(shots):
        demos.append((rng.standard_normal((l_len, hyper.d_b)), list(segments)))
    return demos, h, y


def cmd_capm(args: argparse.Namespace) -> int:
    config = _load_config(args)
    hyper = _capm_hyper(args, config)
    seed = _resolve_seed(args, config)
    # independent streams so loading parameters from a file does not shift
    # the input draws, and extra demos do not shift h/y
    param_seed, input_seed = np.random.SeedSequence(seed).spawn(2)
    param_rng = np.random.default_rng(param_seed)
    rng = np.random.default_rng(input_seed)
    shots = args.shots if args.shots is not None else 2
    if shots < 0:
        raise UsageError("--shots must be >= 0")

    if args.action == "demo":
        if args.params:
            params, hyper = capm.load_params(args.params)
        else:
            params = capm.init_params(hyper, param_rng)
        demos, h, y = _capm_inputs(args, hyper, rng, shots)
        y_prime, trace = capm.capm_forward(demos, h, y, params, hyper)
        if args.save_params:
            capm.save_params(params, hyper, args.save_params)
            _log(f"capm demo: saved parameters to {args.save_params}")
        digest = hashlib.sha256(np.ascontiguousarray(y_prime).tobytes()).hexdigest()
        states = trace.stage_states()
        report = {
            "seed": seed,
            "shots": shots,
            "tau": trace.tau,
            "gate_mean": float(trace.m.mean()),
            "stage_mean_norms": {
                stage: float(np.linalg.norm(states[stage], axis=1).mean())
                for stage in capm.STAGE_ORDER
            },
            "output_sha256": digest,
        }
        _emit_lines([_jsonl(report)], args.out)
        _log(f"capm demo: shots={shots} tau={trace.tau} sha256={digest[:16]}...")
        return 0

    if args.action == "gradcheck":
        params = capm.random_params(hyper, param_rng)
        demos, h, y = _capm_inputs(args, hyper, rng, max(shots, 1))
        grad_out = rng.standard_normal(y.shape)
        report = capm.gradient_check(
            params, hyper, demos, h, y, grad_out, step=args.step, tolerance=args.tolerance
        )
        worst = sorted(report.per_tensor.items(), key=lambda kv: -kv[1])[:8]
        _log(_format_table(["Tensor", "RelErr"], [[n, f"{e:.3e}"] for n, e in worst]))
        verdict = "PASS" if report.passed else "FAIL"
        _emit_lines(
            [
                _jsonl(
                    {
                        "verdict": verdict,
                        "max_rel_err": report.max_rel_err,
                        "tolerance": report.tolerance,
                        "tensors": len(report.per_tensor),
                    }
                )
            ],
            args.out,
        )
        if not report.passed:
            raise NumericGuardError(
                f"gradcheck FAIL: max_rel_err={report.max_rel_err:.3e} "
                f"exceeds {report.tolerance:.0e}"
            )
        return 0

    # diagnose
    if shots < 1:
        raise UsageError("capm diagnose requires --shots >= 1")
    params = capm.random_params(hyper, param_rng)
    demos, h, y = _capm_inputs(args, hyper, rng, shots)
    _, trace_zero = capm.capm_forward([], h, y, params, hyper)
    _, trace_k = capm.capm_forward(demos, h, y, params, hyper)
    stats = capm.forward_diagnostics(trace_zero, trace_k)
    out_lines = []
    table = []
    for stage in capm.STAGE_ORDER:
        st = stats[stage]
        out_lines.append(
            _jsonl(
                {
                    "stage": stage,
                    "mean_norm": st.mean_norm,
                    "representation_shift": st.representation_shift,
                }
            )
        )
        table.append([stage, f"{st.mean_norm:.4f}", f"{st.representation_shift:.4f}"])
    _emit_lines(out_lines, args.out)
    _log(_format_table(["Stage", "MeanNorm", "Shift"], table))
    return 0


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args: argparse.Namespace) -> int:
    if not (args.episodes or args.embeddings or args.metadata):
        raise UsageError("validate requires at least one of --episodes/--embeddings/--metadata")
    lines = []
    if args.episodes:
        episodes = load_episodes(args.episodes, max_shots=args.max_shots)
        lines.append(
            _jsonl({"file": args.episodes, "kind": "episodes", "records": len(episodes), "status": "ok"})
        )
    if args.embeddings:
        store = load_embeddings(args.embeddings)
        lines.append(
            _jsonl({"file": args.embeddings, "kind": "embeddings", "records": len(store), "status": "ok"})
        )
    if args.metadata:
        records = load_metadata(args.metadata)
        lines.append(
            _jsonl({"file": args.metadata, "kind": "metadata", "records": len(records), "status": "ok"})
        )
    _emit_lines(lines, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forge",
        description="Demonstration retrieval, filtering, evaluation, and context modulation.",
    )
    parser.add_argument("--version", action="version", version=f"forge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; explicit flags win")
    common.add_argument("--out", help="write data output to this file instead of stdout")

    p = sub.add_parser("retrieve", parents=[common], help="select demonstrations")
    p.add_argument("--mode", choices=("fusion", "intent"), required=True)
    p.add_argument("--embeddings", help="embedding store (JSONL or binary container)")
    p.add_argument("--queries", help="JSONL of {'id': ...} query rows")
    p.add_argument("--metadata", help="scene metadata JSONL")
    p.add_argument("--rule", help="intent rule text")
    p.add_argument("--rule-file", help="file holding the intent rule")
    p.add_argument("--k", type=int, help="number of shots to select (default 4)")
    p.add_argument("--top-n", type=int, dest="top_n", help="fused-score prefilter size")
    p.add_argument("--lambda", type=float, dest="lam", help="visual-vs-text weight in [0, 1]")
    p.add_argument("--beta", type=float, help="quality sharpness (> 0)")
    p.add_argument("--s-field", dest="s_field", help="metadata score field supplying relevance")
    p.add_argument("--taxonomy", help="taxonomy label for emitted episodes")
    p.add_argument("--subtask", help="subtask label for emitted episodes")
    p.add_argument("--episode-id", dest="episode_id", help="episode id for intent mode")
    p.add_argument("--seed", type=int, help="unused entropy anchor; kept for reproducibility")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("filter", parents=[common], help="filter metadata by a score field")
    p.add_argument("--metadata", required=True)
    p.add_argument("--score-field", dest="score_field", required=True)
    p.add_argument("--min", type=float, help="inclusive lower bound")
    p.add_argument("--max", type=float, help="inclusive upper bound")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", parents=[common], help="metric reports over result curves")
    p.add_argument("report", choices=("curves", "stability", "align", "transfer", "human"))
    p.add_argument("--results", help="results JSONL")
    p.add_argument("--base", help="baseline results JSONL (transfer)")
    p.add_argument("--variant", help="variant results JSONL (transfer)")
    p.add_argument("--x-field", dest="x_field", default="primary")
    p.add_argument("--y-field", dest="y_field", default="auxiliary")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("capm", parents=[common], help="context-modulation demos and checks")
    p.add_argument("action", choices=("demo", "gradcheck", "diagnose"))
    p.add_argument("--seed", type=int)
    p.add_argument("--shots", type=int, help="demo count (default 2)")
    p.add_argument("--d-b", type=int, dest="d_b")
    p.add_argument("--d-p", type=int, dest="d_p")
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--r", type=int, dest="r")
    p.add_argument("--heads", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--tau-min", type=float, dest="tau_min")
    p.add_argument("--tau-max", type=float, dest="tau_max")
    p.add_argument("--b2-init", type=float, dest="b2_init")
    p.add_argument("--t-len", type=int, dest="t_len", default=5, help="backbone tokens")
    p.add_argument("--l-len", type=int, dest="l_len", default=6, help="tokens per demo")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4, help="gradcheck tolerance")
    p.add_argument("--params", help="load parameters from this file (demo)")
    p.add_argument("--save-params", dest="save_params", help="save parameters (demo)")
    p.set_defaults(func=cmd_capm)

    p = sub.add_parser("validate", parents=[common], help="lint data files")
    p.add_argument("--episodes")
    p.add_argument("--embeddings")
    p.add_argument("--metadata")
    p.add_argument("--max-shots", type=int, dest="max_shots", default=8)
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help/--version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"forge: usage error: {exc}")
        return 2
    except NumericGuardError as exc:
        _log(f"forge: numeric guard: {exc}")
        return 4
    except ValidationError as exc:
        _log(f"forge: {exc}")
        return 3
    except OSError as exc:
        _log(f"forge: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
