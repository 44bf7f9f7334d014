"""Command-line pipeline: gen, cov, schedule, convert, eval, kv-report, ablate.

Every command is a deterministic batch process: identical inputs and flags
produce byte-identical artifacts. Reports carry no timestamps and all
tensor paths are stored relative to their manifest. Exit codes: 0 success,
2 validation error, 3 numerical failure, 4 I/O error.
"""

import argparse
import shutil
import sys
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import attention, calibration, ctf, factorizer, linalg, manifest, metrics, scheduler
from .errors import NumericalError, ValidationError
from .rng import make_generator

DEFAULT_ALPHA = 0.01
DEFAULT_MIN_RANK = 64
WEIGHT_SCALE_LOW, WEIGHT_SCALE_HIGH = 0.75, 1.25


def _fmt2(value: float) -> str:
    """Two-decimal string with half-up rounding (exact .5 ties round away
    from zero, matching the published memory table)."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), ROUND_HALF_UP))


def _cov_name(layer: int) -> str:
    return f"layer{layer:03d}_cov.ctf"


def _whitener_for_layer(m: manifest.ModelManifest, cov_dir, layer: int,
                        params: calibration.ShrinkageParams, weighting: str):
    c = ctf.read_ctf(Path(cov_dir) / _cov_name(layer))
    entry = m.layer(layer)
    if c.shape != (entry.d_model, entry.d_model):
        raise ValidationError(
            f"covariance for layer {layer} has shape {c.shape}, "
            f"expected ({entry.d_model}, {entry.d_model})"
        )
    return calibration.whitening_operator(c, params, weighting), c


def _resolved_lambda(c: np.ndarray, params: calibration.ShrinkageParams,
                     weighting: str) -> float:
    if weighting == calibration.WEIGHTING_SQRT:
        base = linalg.sqrt_psd(c)
    else:
        base = (c + c.T) / 2.0
    return calibration.resolve_lambda(base, params)


def _parse_lambda(text: str):
    if text == "auto":
        return "auto"
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"--lambda must be a positive number or 'auto', got {text!r}")
    if not value > 0:
        raise ValidationError("--lambda must be positive")
    return value


def _parse_widths(text: str) -> list[int]:
    try:
        widths = [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise ValidationError(f"widths must be comma-separated integers, got {text!r}")
    if not widths or any(w < 0 for w in widths):
        raise ValidationError("widths must be non-negative integers")
    return widths


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> None:
    if args.n_heads * args.head_dim != args.d_model:
        raise ValidationError("--n-heads * --head-dim must equal --d-model")
    if args.n_groups < 1 or args.n_groups > args.n_heads or args.n_heads % args.n_groups:
        raise ValidationError("--n-groups must divide --n-heads and lie in [1, n_heads]")
    if args.layers < 1 or args.seq_len < 1 or args.batches < 1:
        raise ValidationError("--layers, --seq-len and --batches must be positive")

    out = Path(args.out)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    (out / "batches").mkdir(parents=True, exist_ok=True)
    rng = make_generator(args.seed)
    d, width = args.d_model, args.n_heads * args.head_dim
    grouped = args.n_groups * args.head_dim

    # Fixed draw order: one pass for all weights and per-dimension scales,
    # then one pass for all batches. Changing --batches never reshuffles the
    # weights of an otherwise identical model.
    entries = []
    scales = []
    for layer in range(args.layers):
        w_q = rng.standard_normal((d, width)) / np.sqrt(d)
        w_k_g = rng.standard_normal((d, grouped)) / np.sqrt(d)
        w_v_g = rng.standard_normal((d, grouped)) / np.sqrt(d)
        scales.append(rng.uniform(WEIGHT_SCALE_LOW, WEIGHT_SCALE_HIGH, d))
        paths = {
            "w_q": f"weights/layer{layer:03d}_w_q.ctf",
            "w_k_g": f"weights/layer{layer:03d}_w_k_g.ctf",
            "w_v_g": f"weights/layer{layer:03d}_w_v_g.ctf",
        }
        ctf.write_ctf(out / paths["w_q"], w_q)
        ctf.write_ctf(out / paths["w_k_g"], w_k_g)
        ctf.write_ctf(out / paths["w_v_g"], w_v_g)
        entries.append(
            manifest.LayerEntry(
                layer=layer,
                d_model=d,
                n_heads=args.n_heads,
                head_dim=args.head_dim,
                n_groups=args.n_groups,
                **paths,
            )
        )

    batches: dict[int, tuple[str, ...]] = {}
    for layer in range(args.layers):
        layer_paths = []
        for b in range(args.batches):
            x = rng.standard_normal((args.seq_len, d)) * scales[layer]
            rel = f"batches/layer{layer:03d}_batch{b:03d}.ctf"
            ctf.write_ctf(out / rel, x)
            layer_paths.append(rel)
        batches[layer] = tuple(layer_paths)

    model = manifest.ModelManifest(
        model_kind=manifest.MODEL_KIND_GQA,
        weighting=calibration.WEIGHTING_SQRT,
        alpha=DEFAULT_ALPHA,
        lam="auto",
        seq_len=args.seq_len,
        layers=tuple(entries),
        calibration=batches,
        seed=args.seed,
    )
    manifest.save_manifest(model, out / "model.json")
    print(f"generated {args.layers} layers (d_model={d}, heads={args.n_heads}, "
          f"groups={args.n_groups}) with {args.batches} calibration batches each")
    print(f"manifest: {out / 'model.json'}")


# ---------------------------------------------------------------- cov

def cmd_cov(args) -> None:
    m = manifest.load_manifest(args.manifest)
    base = Path(args.manifest).parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for layer in range(len(m.layers)):
        entry = m.layer(layer)
        acc = calibration.CovarianceAccumulator(entry.d_model)
        for batch in manifest.load_batches(m, base, layer, args.batches_dir):
            acc = calibration.accumulate(acc, batch)
        cov = calibration.finalize(acc)
        ctf.write_ctf(out / _cov_name(layer), cov)
        print(f"layer {layer}: {acc.batch_count} batches -> {out / _cov_name(layer)}")


# ---------------------------------------------------------------- schedule

def _default_min_rank(table: scheduler.SpectrumTable, budget_k: int, budget_v: int) -> int:
    layers_k = table.layers(scheduler.KIND_K)
    layers_v = table.layers(scheduler.KIND_V)
    full_min = min(
        min(table.full_rank(l, scheduler.KIND_K) for l in layers_k),
        min(table.full_rank(l, scheduler.KIND_V) for l in layers_v),
    )
    feasible = (
        DEFAULT_MIN_RANK <= full_min
        and budget_k >= len(layers_k) * DEFAULT_MIN_RANK
        and budget_v >= len(layers_v) * DEFAULT_MIN_RANK
    )
    return DEFAULT_MIN_RANK if feasible else 1


def cmd_schedule(args) -> None:
    m = manifest.load_manifest(args.manifest)
    base = Path(args.manifest).parent
    params = calibration.ShrinkageParams(m.alpha, m.lam)

    table = scheduler.SpectrumTable()
    parity_total = 0
    for layer in range(len(m.layers)):
        entry = m.layer(layer)
        op, _ = _whitener_for_layer(m, args.cov_dir, layer, params, m.weighting)
        gqa = manifest.load_gqa_layer(m, base, layer)
        w_k = factorizer.replicate_groups(gqa.w_k_g, gqa.n_heads, gqa.n_groups, gqa.head_dim)
        w_v = factorizer.replicate_groups(gqa.w_v_g, gqa.n_heads, gqa.n_groups, gqa.head_dim)
        table.add(layer, scheduler.KIND_K, scheduler.whitened_spectrum(op, w_k))
        table.add(layer, scheduler.KIND_V, scheduler.whitened_spectrum(op, w_v))
        parity_total += factorizer.kv_parity_rank(entry.n_groups, entry.head_dim)

    if args.parity:
        budget_k = budget_v = parity_total
    else:
        budget_k, budget_v = args.budget_k, args.budget_v

    if args.mode == "uniform":
        if args.rank is None:
            raise ValidationError("--mode uniform requires --rank")
        k_ranks = scheduler.uniform_profile(table, scheduler.KIND_K, args.rank)
        v_ranks = scheduler.uniform_profile(table, scheduler.KIND_V, args.rank)
        budget_k = sum(k_ranks.values())
        budget_v = sum(v_ranks.values())
        min_rank = min(min(k_ranks.values()), min(v_ranks.values()))
    else:
        if budget_k is None or budget_v is None:
            raise ValidationError(
                "--mode adjusted requires --budget-k and --budget-v (or --parity)"
            )
        min_rank = args.min_rank
        if min_rank is None:
            min_rank = _default_min_rank(table, budget_k, budget_v)
        k_ranks = scheduler.waterfill(table, scheduler.KIND_K, budget_k, min_rank)
        v_ranks = scheduler.waterfill(table, scheduler.KIND_V, budget_v, min_rank)

    profile = scheduler.build_profile(table, k_ranks, v_ranks, budget_k, budget_v, min_rank)
    manifest.save_profile(profile, args.out, mode=args.mode)
    print(f"mode={args.mode} budgets K={budget_k} V={budget_v} min_rank={min_rank}")
    for layer in table.layers(scheduler.KIND_K):
        print(f"layer {layer}: K={k_ranks[layer]} V={v_ranks[layer]}")
    print(f"profile: {args.out}")


# ---------------------------------------------------------------- convert

def cmd_convert(args) -> None:
    m = manifest.load_manifest(args.manifest)
    base = Path(args.manifest).parent
    profile, _ = manifest.load_profile(args.profile)
    weighting = args.weighting if args.weighting else m.weighting
    alpha = args.alpha if args.alpha is not None else m.alpha
    lam = _parse_lambda(args.lam) if args.lam is not None else m.lam
    params = calibration.ShrinkageParams(alpha, lam)

    out = Path(args.out)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    (out / "factors").mkdir(parents=True, exist_ok=True)

    entries = []
    report_layers = []
    for layer in range(len(m.layers)):
        entry = m.layer(layer)
        op, cov = _whitener_for_layer(m, args.cov_dir, layer, params, weighting)
        gqa = manifest.load_gqa_layer(m, base, layer)
        r_k = profile.rank(layer, scheduler.KIND_K)
        r_v = profile.rank(layer, scheduler.KIND_V)
        factors, report_k, report_v = factorizer.convert_layer(gqa, op, r_k, r_v)

        w_q_rel = f"weights/layer{layer:03d}_w_q.ctf"
        shutil.copyfile(base / entry.w_q, out / w_q_rel)
        paths = {
            "w_a_k": f"factors/layer{layer:03d}_w_a_k.ctf",
            "w_b_k": f"factors/layer{layer:03d}_w_b_k.ctf",
            "w_a_v": f"factors/layer{layer:03d}_w_a_v.ctf",
            "w_b_v": f"factors/layer{layer:03d}_w_b_v.ctf",
        }
        for name, rel in paths.items():
            ctf.write_ctf(out / rel, getattr(factors, name))
        entries.append(
            manifest.LayerEntry(
                layer=layer,
                d_model=entry.d_model,
                n_heads=entry.n_heads,
                head_dim=entry.head_dim,
                n_groups=entry.n_groups,
                w_q=w_q_rel,
                r_k=r_k,
                r_v=r_v,
                **paths,
            )
        )
        report_layers.append(
            {
                "layer": layer,
                "lambda_resolved": _resolved_lambda(cov, params, weighting),
                "k": _report_dict(report_k),
                "v": _report_dict(report_v),
            }
        )
        print(
            f"layer {layer}: r_k={r_k} r_v={r_v} "
            f"whitened_residual_sq K={report_k.whitened_residual_sq:.3e} "
            f"V={report_v.whitened_residual_sq:.3e}"
        )

    converted = manifest.ModelManifest(
        model_kind=manifest.MODEL_KIND_MLA,
        weighting=weighting,
        alpha=alpha,
        lam=lam,
        seq_len=m.seq_len,
        layers=tuple(entries),
        seed=m.seed,
    )
    manifest.save_manifest(converted, out / "converted.json")
    manifest.write_json(
        out / "conversion_report.json",
        {
            "format": "kvlatent-conversion-report",
            "version": 1,
            "weighting": weighting,
            "alpha": alpha,
            "lambda": lam,
            "layers": report_layers,
        },
    )
    print(f"converted manifest: {out / 'converted.json'}")


def _report_dict(report: factorizer.FactorizationReport) -> dict:
    return {
        "rank_used": report.rank_used,
        "weight_residual_sq": report.weight_residual_sq,
        "whitened_residual_sq": report.whitened_residual_sq,
    }


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> None:
    source = manifest.load_manifest(args.source)
    converted = manifest.load_manifest(args.converted)
    if source.model_kind != manifest.MODEL_KIND_GQA:
        raise ValidationError("--source must be a grouped-attention manifest")
    if converted.model_kind != manifest.MODEL_KIND_MLA:
        raise ValidationError("--converted must be a converted manifest")
    if len(source.layers) != len(converted.layers):
        raise ValidationError("source and converted manifests have different layer counts")
    src_base = Path(args.source).parent
    conv_base = Path(args.converted).parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.rope_dim:
        (out / "rope").mkdir(exist_ok=True)

    rng = make_generator(args.seed)
    t = source.seq_len
    params = metrics.LossParams(tau=args.tau, beta=args.beta)
    layer_reports = []
    rope_entries = []
    gqa_bytes = 0
    mla_bytes = 0
    max_drift = 0.0
    # Per-layer draw order: probe input, targets, then rope adapters (q, k).
    for layer in range(len(source.layers)):
        entry = source.layer(layer)
        d = entry.d_model
        x = rng.standard_normal((t, d))
        targets = rng.integers(0, d, size=t)
        gqa = manifest.load_gqa_layer(source, src_base, layer)
        factors, w_q_conv, _ = manifest.load_mla_bundle(converted, conv_base, layer)
        config = attention.AttentionConfig(
            d_model=d,
            n_heads=entry.n_heads,
            head_dim=entry.head_dim,
            n_groups=entry.n_groups,
            seq_len=t,
        )
        trace_g = attention.gqa_forward(gqa, x)
        trace_m = attention.mla_forward(factors, w_q_conv, config, x)
        drift = attention.logit_drift(trace_g, trace_m)
        max_drift = max(max_drift, drift.max_abs)
        output_drift = float(np.max(np.abs(trace_g.output - trace_m.output)))

        batches = manifest.load_batches(source, src_base, layer, args.batches_dir)
        w_k = factorizer.replicate_groups(gqa.w_k_g, gqa.n_heads, gqa.n_groups, gqa.head_dim)
        w_v = factorizer.replicate_groups(gqa.w_v_g, gqa.n_heads, gqa.n_groups, gqa.head_dim)
        act_k = factorizer.activation_residual(batches, w_k, factors.w_a_k @ factors.w_b_k)
        act_v = factorizer.activation_residual(batches, w_v, factors.w_a_v @ factors.w_b_v)

        teacher = metrics.LogitSequence(trace_g.output, targets)
        student = metrics.LogitSequence(trace_m.output, targets)
        ce_teacher = metrics.cross_entropy(teacher, params.tau)
        ce_student = metrics.cross_entropy(student, params.tau)
        kd = metrics.kd_loss(teacher, student, params.tau)
        total = metrics.total_loss(ce_student, kd, params)

        report = {
            "layer": layer,
            "activation_residual_k": act_k,
            "activation_residual_v": act_v,
            "logit_drift_max": drift.max_abs,
            "logit_drift_frob": drift.frob,
            "output_drift_max": output_drift,
            "cache_width_gqa": trace_g.cache_width,
            "cache_width_mla": trace_m.cache_width,
            "losses": {
                "ce_teacher": ce_teacher,
                "ce_student": ce_student,
                "kd": kd,
                "total": total,
            },
        }

        if args.rope_dim:
            d_r = args.rope_dim
            adapters = attention.RopeAdapters(
                w_r_q=rng.standard_normal((d, entry.n_heads * d_r)) / np.sqrt(d),
                w_r_k=rng.standard_normal((d, d_r)) / np.sqrt(d),
            )
            rope_config = attention.AttentionConfig(
                d_model=d,
                n_heads=entry.n_heads,
                head_dim=entry.head_dim,
                n_groups=entry.n_groups,
                seq_len=t,
                rope_dim=d_r,
            )
            trace_r = attention.mla_forward_rope(factors, w_q_conv, adapters, rope_config, x)
            rel_q = f"rope/layer{layer:03d}_w_r_q.ctf"
            rel_k = f"rope/layer{layer:03d}_w_r_k.ctf"
            ctf.write_ctf(out / rel_q, adapters.w_r_q)
            ctf.write_ctf(out / rel_k, adapters.w_r_k)
            report["cache_width_mla_rope"] = trace_r.cache_width
            report["rope_scale_denominator"] = trace_r.scale_denominator
            rope_entries.append((layer, rel_q, rel_k))

        layer_reports.append(report)
        gqa_bytes += attention.kv_cache_bytes(
            1, t, 1, trace_g.cache_width, args.bytes_per_elem
        ).total_bytes
        width_m = trace_m.cache_width + (args.rope_dim if args.rope_dim else 0)
        mla_bytes += attention.kv_cache_bytes(
            1, t, 1, width_m, args.bytes_per_elem
        ).total_bytes

    totals = {
        "gqa_bytes": gqa_bytes,
        "gqa_mb": gqa_bytes / 1e6,
        "mla_bytes": mla_bytes,
        "mla_mb": mla_bytes / 1e6,
        "bytes_per_elem": args.bytes_per_elem,
    }
    if gqa_bytes:
        totals["reduction_pct"] = _fmt2((1.0 - mla_bytes / gqa_bytes) * 100.0)

    doc = {
        "format": "kvlatent-eval-report",
        "version": 1,
        "seed": args.seed,
        "seq_len": t,
        "tau": params.tau,
        "beta": params.beta,
        "rope_dim": args.rope_dim,
        "max_logit_drift": max_drift,
        "layers": layer_reports,
        "totals": totals,
    }
    manifest.write_json(out / "eval_report.json", doc)

    if args.rope_dim:
        # Self-contained rope-augmented manifest next to the adapters.
        entries = []
        for layer, rel_q, rel_k in rope_entries:
            conv_entry = converted.layer(layer)
            for name in ("w_q", "w_a_k", "w_b_k", "w_a_v", "w_b_v"):
                rel = getattr(conv_entry, name)
                dest = out / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(conv_base / rel, dest)
            entries.append(
                manifest.LayerEntry(
                    layer=layer,
                    d_model=conv_entry.d_model,
                    n_heads=conv_entry.n_heads,
                    head_dim=conv_entry.head_dim,
                    n_groups=conv_entry.n_groups,
                    w_q=conv_entry.w_q,
                    r_k=conv_entry.r_k,
                    r_v=conv_entry.r_v,
                    w_a_k=conv_entry.w_a_k,
                    w_b_k=conv_entry.w_b_k,
                    w_a_v=conv_entry.w_a_v,
                    w_b_v=conv_entry.w_b_v,
                    rope_dim=args.rope_dim,
                    w_r_q=rel_q,
                    w_r_k=rel_k,
                )
            )
        rope_manifest = manifest.ModelManifest(
            model_kind=manifest.MODEL_KIND_MLA,
            weighting=converted.weighting,
            alpha=converted.alpha,
            lam=converted.lam,
            seq_len=converted.seq_len,
            layers=tuple(entries),
            seed=converted.seed,
        )
        manifest.save_manifest(rope_manifest, out / "converted_with_rope.json")

    print(f"max logit drift (content path): {max_drift:.3e}")
    print(
        f"cache per token: gqa={layer_reports[0]['cache_width_gqa']} "
        f"mla={layer_reports[0]['cache_width_mla']}"
        + (f" (+rope {args.rope_dim})" if args.rope_dim else "")
    )
    print(f"report: {out / 'eval_report.json'}")


# ---------------------------------------------------------------- kv-report

def cmd_kv_report(args) -> None:
    widths = _parse_widths(args.widths)
    footprint = attention.kv_cache_bytes(
        args.layers, args.seq_len, args.batch, sum(widths), args.bytes_per_elem
    )
    rows = [("cached", "+".join(str(w) for w in widths), footprint)]
    reduction = None
    if args.baseline_widths:
        baseline = _parse_widths(args.baseline_widths)
        base_fp = attention.kv_cache_bytes(
            args.layers, args.seq_len, args.batch, sum(baseline), args.bytes_per_elem
        )
        rows.append(("baseline", "+".join(str(w) for w in baseline), base_fp))
        if base_fp.total_bytes:
            reduction = (1.0 - footprint.total_bytes / base_fp.total_bytes) * 100.0

    print(
        f"layers={args.layers} seq_len={args.seq_len} batch={args.batch} "
        f"bytes_per_elem={args.bytes_per_elem}"
    )
    for label, widths_text, fp in rows:
        print(f"{label:>8}: widths {widths_text:>12}  {fp.total_bytes:>14} bytes  "
              f"{_fmt2(fp.megabytes)} MB")
    if reduction is not None:
        print(f"reduction vs baseline: {_fmt2(reduction)}%")

    if args.out:
        doc = {
            "format": "kvlatent-kv-report",
            "version": 1,
            "layers": args.layers,
            "seq_len": args.seq_len,
            "batch": args.batch,
            "bytes_per_elem": args.bytes_per_elem,
            "widths": widths,
            "total_bytes": footprint.total_bytes,
            "megabytes": _fmt2(footprint.megabytes),
        }
        if args.baseline_widths:
            doc["baseline_widths"] = _parse_widths(args.baseline_widths)
            doc["baseline_bytes"] = rows[1][2].total_bytes
        if reduction is not None:
            doc["reduction_pct"] = _fmt2(reduction)
        manifest.write_json(args.out, doc)


# ---------------------------------------------------------------- ablate

def cmd_ablate(args) -> None:
    m = manifest.load_manifest(args.manifest)
    base = Path(args.manifest).parent
    if args.kind not in scheduler.KINDS:
        raise ValidationError(f"--kind must be one of {scheduler.KINDS}")
    gqa = manifest.load_gqa_layer(m, base, args.layer)
    w = gqa.w_k_g if args.kind == scheduler.KIND_K else gqa.w_v_g
    sigma = linalg.svd(w).singular_values
    ablated_w = factorizer.ablate_singular_value(w, args.index)
    weight_residual = linalg.frobenius_norm_sq(w - ablated_w)

    ablated_layer = factorizer.GqaLayer(
        d_model=gqa.d_model,
        n_heads=gqa.n_heads,
        head_dim=gqa.head_dim,
        n_groups=gqa.n_groups,
        w_q=gqa.w_q,
        w_k_g=ablated_w if args.kind == scheduler.KIND_K else gqa.w_k_g,
        w_v_g=ablated_w if args.kind == scheduler.KIND_V else gqa.w_v_g,
    )
    t = args.seq_len if args.seq_len else m.seq_len
    x = make_generator(args.seed).standard_normal((t, gqa.d_model))
    drift = attention.logit_drift(
        attention.gqa_forward(gqa, x), attention.gqa_forward(ablated_layer, x)
    )

    print(f"layer {args.layer} {args.kind}: sigma_{args.index} = {sigma[args.index - 1]:.6e}")
    print(f"weight_residual_sq = {weight_residual:.6e}")
    print(f"logit drift: max={drift.max_abs:.6e} frob={drift.frob:.6e}")
    if args.out:
        manifest.write_json(
            args.out,
            {
                "format": "kvlatent-ablation-report",
                "version": 1,
                "layer": args.layer,
                "kind": args.kind,
                "index": args.index,
                "seed": args.seed,
                "seq_len": t,
                "singular_value": float(sigma[args.index - 1]),
                "weight_residual_sq": weight_residual,
                "logit_drift_max": drift.max_abs,
                "logit_drift_frob": drift.frob,
            },
        )


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvlatent",
        description="Covariance-aware conversion of grouped-attention layers to latent KV form.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic model and calibration set")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=4)
    p.add_argument("--n-groups", type=int, default=2)
    p.add_argument("--seq-len", type=int, default=8,
                   help="tokens per calibration batch and per simulated forward")
    p.add_argument("--batches", type=int, default=4)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("cov", help="accumulate per-layer activation covariance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--batches-dir", default=None,
                   help="resolve batch paths here instead of the manifest directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cov)

    p = sub.add_parser("schedule", help="allocate rank budgets over whitened spectra")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cov-dir", required=True)
    p.add_argument("--mode", choices=["adjusted", "uniform"], default="adjusted")
    p.add_argument("--budget-k", type=int, default=None)
    p.add_argument("--budget-v", type=int, default=None)
    p.add_argument("--parity", action="store_true",
                   help="set both budgets to the total grouped KV width "
                        "(overrides --budget-k/--budget-v)")
    p.add_argument("--min-rank", type=int, default=None,
                   help="starting rank per layer; defaults to 64 when budgets "
                        "and full ranks permit, else 1")
    p.add_argument("--rank", type=int, default=None, help="per-layer rank for --mode uniform")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("convert", help="factorize grouped projections into latent factors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cov-dir", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--lambda", dest="lam", default=None, metavar="LAM",
                   help="ridge scale, a positive number or 'auto'")
    p.add_argument("--weighting", choices=list(calibration.WEIGHTINGS), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="compare a converted model against its source")
    p.add_argument("--source", required=True)
    p.add_argument("--converted", required=True)
    p.add_argument("--batches-dir", default=None)
    p.add_argument("--rope-dim", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--bytes-per-elem", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kv-report", help="theoretical KV-cache footprint table")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--widths", required=True,
                   help="comma-separated cached widths per token, e.g. 448,512")
    p.add_argument("--baseline-widths", default=None)
    p.add_argument("--bytes-per-elem", type=int, default=2)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_kv_report)

    p = sub.add_parser("ablate", help="zero one singular value and measure the damage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--kind", required=True, choices=list(scheduler.KINDS))
    p.add_argument("--index", type=int, required=True,
                   help="1-based position in the descending spectrum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
