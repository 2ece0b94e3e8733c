"""Command-line entry point: ``saematch <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical/domain error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as saem_io
from .assignment import Permutation, WeightSet
from .errors import FormatError, MalformedHeaderError, SaeMatchError
from .matching import (
    MatchOptions,
    agreement,
    compose_all,
    exact_span,
    group_mse,
    match_chain,
    match_layers,
)
from .metrics import delta_cross_entropy, explained_variance, matching_score
from .pruning import encode_decode_previous, encode_permute_decode, layer_drop, quantile_decode
from .sae_model import ActivationBatch, encode, fold_params
from .synth import SynthSpec, gen_chain, gen_norm_growth_pair, gen_planted_pair, gen_stream

WEIGHT_CHOICES = {"dec": WeightSet.DECODER_ONLY, "enc": WeightSet.ENCODER_ONLY,
                  "enc-dec-bias": WeightSet.ENCODER_DECODER_BIAS}


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _options(args) -> MatchOptions:
    return MatchOptions(folded=not args.unfolded, weight_set=WEIGHT_CHOICES[args.weights],
                        threads=args.threads)


def _load_sae_dir(directory) -> list:
    saes = []
    for path in sorted(Path(directory).glob("*.saem")):
        blob = path.read_bytes()
        tensors_meta = saem_io.decode_container(blob)[1]
        if tensors_meta.get("kind") == "sae":
            saes.append(saem_io.sae_from_bytes(blob))
    if len(saes) < 2:
        raise FormatError(f"{directory}: need at least two SAE files, found {len(saes)}")
    return sorted(saes, key=lambda s: s.layer_id)


# -- commands -----------------------------------------------------------------------------

def cmd_synth(args) -> None:
    spec = SynthSpec(d=args.d, F=args.f, seed=args.seed, noise_sigma=args.noise,
                     theta_log_range=(args.theta_lo, args.theta_hi), scale_growth=args.scale_growth,
                     chain_len=args.chain_len if args.mode == "chain" else 2,
                     family_size=args.family_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "pair":
        gen = gen_planted_pair if spec.scale_growth == 1 else gen_norm_growth_pair
        a, b, truth = gen(spec)
        saes, truths = [a, b], [truth]
    else:
        saes, truths = gen_chain(spec)
    for sae in saes:
        saem_io.write_sae(sae, out / f"sae_{sae.layer_id}.saem")
    for t in truths:
        saem_io.write_permutation(t, out / f"truth_{t.from_layer}_{t.to_layer}.json")
    if args.tokens and args.mode == "pair":
        x_t, x_t1 = gen_stream(saes[0], saes[1], truths[0], args.tokens, args.seed)
        saem_io.write_activations(x_t, out / "hidden_0.h.saem")
        saem_io.write_activations(x_t1, out / "hidden_1.h.saem")
        for sae, x in ((saes[0], x_t), (saes[1], x_t1)):
            feats = ActivationBatch(encode(sae, x.data), "feature", sae.layer_id)
            saem_io.write_activations(feats, out / f"features_{sae.layer_id}.f.saem")
    (out / "synth.json").write_text(json.dumps(spec.metadata(), indent=2, sort_keys=True) + "\n")


def cmd_fold(args) -> None:
    sae = saem_io.read_sae(args.sae)
    saem_io.write_sae(fold_params(sae), args.out)


def cmd_match(args) -> None:
    a, b = saem_io.read_sae(args.sae_a), saem_io.read_sae(args.sae_b)
    result = match_layers(a, b, _options(args))
    saem_io.write_permutation(result, args.out)
    summary = {"from_layer": result.from_layer, "to_layer": result.to_layer,
               "total_cost": result.total_cost, "folded": result.folded,
               "weight_set": result.weight_set.value,
               "config_fingerprint": result.config_fingerprint}
    if args.truth:
        truth = saem_io.read_permutation(args.truth).permutation
        summary["accuracy"] = agreement(result.permutation, truth)
    if args.report:
        saem_io.write_report_csv([summary], args.report)
    _emit(summary, None)


def cmd_compose(args) -> None:
    perms = [saem_io.read_permutation(p).permutation for p in args.perms]
    saem_io.write_permutation(compose_all(perms), args.out)


def cmd_chain_match(args) -> None:
    saes = _load_sae_dir(args.saes)
    opts = _options(args)
    chain = match_chain(saes, opts, workers=args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in chain.results:
        saem_io.write_permutation(r, out / f"perm_{r.from_layer}_{r.to_layer}.json")
    truths = {}
    for path in Path(args.saes).glob("truth_*.json"):
        rec = saem_io.read_permutation(path)
        truths[(rec.permutation.from_layer, rec.permutation.to_layer)] = rec.permutation
    rows = []
    first = saes[0].layer_id
    for k in range(1, len(saes)):
        composed = chain.span(0, k)
        exact = exact_span(saes, 0, k, opts)
        last = saes[k].layer_id
        saem_io.write_permutation(composed, out / f"composed_{first}_{last}.json")
        saem_io.write_permutation(exact, out / f"exact_{first}_{last}.json")
        row = {"distance": k, "from_layer": first, "to_layer": last,
               "agreement": agreement(composed, exact)}
        if (first, last) in truths:
            row["composed_vs_truth"] = agreement(composed, truths[(first, last)])
            row["exact_vs_truth"] = agreement(exact, truths[(first, last)])
        rows.append(row)
    saem_io.write_report_csv(rows, out / "agreement.csv")
    if args.out:
        saem_io.write_report_csv(rows, args.out)


def _maybe_skip(batch: ActivationBatch, skip: bool) -> ActivationBatch:
    return batch.drop_first_token() if skip else batch


def cmd_score(args) -> None:
    fa = _maybe_skip(saem_io.read_activations(args.features_a), args.skip_first_token)
    fb = _maybe_skip(saem_io.read_activations(args.features_b), args.skip_first_token)
    p = saem_io.read_permutation(args.perm).permutation
    res = matching_score(fa, fb, p, symmetric=args.symmetric)
    _emit({"score": res.score, "n_valid_pairs": res.n_valid_pairs, "n_excluded": res.n_excluded,
           "symmetric": args.symmetric}, args.out)


def cmd_prune_sim(args) -> None:
    sae_t, sae_t1 = saem_io.read_sae(args.sae_t), saem_io.read_sae(args.sae_t1)
    rec = saem_io.read_permutation(args.perm)
    x_t = _maybe_skip(saem_io.read_activations(args.hidden_t), args.skip_first_token)
    ref = _maybe_skip(saem_io.read_activations(args.hidden_t1_ref), args.skip_first_token)
    p = rec.permutation
    to_layer = sae_t1.layer_id
    estimates = [
        ("encode-permute-decode", None, encode_permute_decode(sae_t, sae_t1, p, x_t)),
        ("identity-permutation", None, encode_permute_decode(
            sae_t, sae_t1, Permutation.identity(len(p), p.from_layer, p.to_layer), x_t)),
        ("encode-decode-previous", None, encode_decode_previous(sae_t, x_t, to_layer)),
        ("layer-drop", None, layer_drop(x_t, to_layer)),
    ]
    if args.quantile:
        result = saem_io.match_result_from_record(rec)
        for q in args.quantile:
            estimates.append(("quantile", q, quantile_decode(sae_t, sae_t1, result, q, x_t, bias=args.bias)))
    rows = []
    for method, q, est in estimates:
        ev = explained_variance(ActivationBatch(est.data, "hidden", to_layer), ref)
        rows.append({"method": method, "quantile": q, "ev": ev.ev, "residual_ratio": ev.residual_ratio})
    saem_io.write_report_csv(rows, args.out, columns=["method", "quantile", "ev", "residual_ratio"])


def _read_targets(path) -> np.ndarray:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: not valid JSON: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("targets")
    if not isinstance(doc, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in doc):
        raise MalformedHeaderError(f"{path}: expected a JSON list of integer targets")
    return np.asarray(doc, dtype=np.int64)


def cmd_delta_ce(args) -> None:
    orig = saem_io.read_activations(args.logits_orig)
    mod = saem_io.read_activations(args.logits_mod)
    targets = _read_targets(args.targets)
    if args.skip_first_token:
        orig, mod, targets = orig.drop_first_token(), mod.drop_first_token(), targets[1:]
    _emit({"delta_ce": delta_cross_entropy(mod, orig, targets), "n_tokens": int(targets.size)}, args.out)


def _report_mse_by_layer(args) -> None:
    saes = _load_sae_dir(args.in_dir)
    ws = WEIGHT_CHOICES[args.weights]
    rows = []
    for a, b in zip(saes, saes[1:]):
        conditions = {
            "vanilla": None,
            "matched": match_layers(a, b, MatchOptions(False, ws, threads=args.threads)).permutation,
            "folded+matched": match_layers(a, b, MatchOptions(True, ws, threads=args.threads)).permutation,
        }
        for name, p in conditions.items():
            row = {"from_layer": a.layer_id, "to_layer": b.layer_id, "condition": name}
            row.update(group_mse(a, b, p))
            rows.append(row)
    saem_io.write_report_csv(rows, args.out)


def _run_dirs(root: Path) -> list[Path]:
    if list(root.glob("exact_*.json")):
        return [root]
    runs = sorted(p for p in root.iterdir() if p.is_dir() and list(p.glob("exact_*.json")))
    if not runs:
        raise FormatError(f"{root}: no chain-match output found")
    return runs


def _report_agreement(args) -> None:
    per_distance: dict[int, list[float]] = {}
    for run in _run_dirs(Path(args.in_dir)):
        exact = {}
        for path in run.glob("exact_*.json"):
            p = saem_io.read_permutation(path).permutation
            exact[p.to_layer] = p
        composed = {}
        for path in run.glob("composed_*.json"):
            p = saem_io.read_permutation(path).permutation
            composed[p.to_layer] = p
        for k, to_layer in enumerate(sorted(exact), start=1):
            if to_layer in composed:
                per_distance.setdefault(k, []).append(agreement(composed[to_layer], exact[to_layer]))
    rows = [{"distance": k, "n_runs": len(v), "mean_agreement": float(np.mean(v))}
            for k, v in sorted(per_distance.items())]
    saem_io.write_report_csv(rows, args.out)


def cmd_report(args) -> None:
    if args.kind == "mse-by-layer":
        _report_mse_by_layer(args)
    else:
        _report_agreement(args)


# -- parser ---------------------------------------------------------------------------------

def _add_match_flags(p) -> None:
    p.add_argument("--unfolded", action="store_true", help="match raw (unfolded) weights")
    p.add_argument("--weights", choices=sorted(WEIGHT_CHOICES), default="enc-dec-bias")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saematch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic SAEs with planted permutations")
    p.add_argument("mode", choices=["pair", "chain"])
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--f", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--scale-growth", type=float, default=1.0)
    p.add_argument("--chain-len", type=int, default=2)
    p.add_argument("--family-size", type=int, default=1)
    p.add_argument("--theta-lo", type=float, default=0.5)
    p.add_argument("--theta-hi", type=float, default=4.0)
    p.add_argument("--tokens", type=int, default=0, help="also write a token stream of this length (pair only)")
    p.add_argument("--out-dir", "--output", dest="out_dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fold", help="fold JumpReLU thresholds into the weights")
    p.add_argument("--sae", required=True)
    p.add_argument("--out", "--output", dest="out", required=True)
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("match", help="match features of two SAEs")
    p.add_argument("--sae-a", required=True)
    p.add_argument("--sae-b", required=True)
    _add_match_flags(p)
    p.add_argument("--truth", help="planted permutation to score against")
    p.add_argument("--report", help="also write the summary as CSV")
    p.add_argument("--out", "--output", dest="out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("compose", help="compose consecutive permutations")
    p.add_argument("--perms", nargs="+", required=True)
    p.add_argument("--out", "--output", dest="out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("chain-match", help="match a stack of SAEs and compare composed vs exact maps")
    p.add_argument("--saes", required=True, help="directory of SAEM files")
    _add_match_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out", "--output", dest="out", help="extra copy of the agreement CSV")
    p.set_defaults(func=cmd_chain_match)

    p = sub.add_parser("score", help="matching score of two feature batches")
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--perm", required=True)
    p.add_argument("--symmetric", action="store_true", help="Jaccard co-activation instead of conditional")
    p.add_argument("--skip-first-token", action="store_true")
    p.add_argument("--out", "--output", dest="out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune-sim", help="explained variance of encode-permute-decode and baselines")
    p.add_argument("--sae-t", required=True)
    p.add_argument("--sae-t1", required=True)
    p.add_argument("--perm", required=True)
    p.add_argument("--hidden-t", required=True)
    p.add_argument("--hidden-t1-ref", required=True)
    p.add_argument("--quantile", type=float, nargs="*", default=[])
    p.add_argument("--bias", choices=["target", "source"], default="target")
    p.add_argument("--skip-first-token", action="store_true")
    p.add_argument("--out", "--output", dest="out", required=True)
    p.set_defaults(func=cmd_prune_sim)

    p = sub.add_parser("delta-ce", help="cross-entropy difference between two sets of logits")
    p.add_argument("--logits-orig", required=True)
    p.add_argument("--logits-mod", required=True)
    p.add_argument("--targets", required=True, help="JSON list of target token ids")
    p.add_argument("--skip-first-token", action="store_true")
    p.add_argument("--out", "--output", dest="out")
    p.set_defaults(func=cmd_delta_ce)

    p = sub.add_parser("report", help="figure data as CSV")
    p.add_argument("kind", choices=["mse-by-layer", "agreement-by-distance"])
    p.add_argument("--in-dir", required=True)
    p.add_argument("--weights", choices=sorted(WEIGHT_CHOICES), default="enc-dec-bias")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", "--output", dest="out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SaeMatchError as exc:
        print(f"saematch {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"saematch {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
