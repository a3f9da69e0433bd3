"""Command-line entry point.

Subcommands: train-toy, attack, campaign, transfer, remote-probe.

Settings merge as flags > config file (--config JSON) > environment >
built-in defaults, and every effective value is echoed in a `#`-prefixed
header so runs are reproducible from their own output. Exit codes: 0 success,
1 attack/campaign produced no success, 2 usage error, 3 remote transport or
protocol error.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from .attack import SUCCESS_RULES, AttackConfig, bmi_fgsm
from .data import blob_dataset, load_dataset, pattern_dataset, save_dataset_tf32
from .de import DEParams, FitnessSpec
from .errors import (CampaignAborted, ContractViolation, CorruptModel,
                     ProtocolError, RemoteUnavailable, TrainingFailed)
from .harness import Campaign, load_successful_samples, run_campaign, transfer_eval
from .models import (LocalClassifier, QueryBudget, UNLIMITED, classify,
                     load_model, save_model, top_label, train_toy)
from .remote import RemoteClassifier, RemoteEndpoint, fetch_scores
from .tensors import RngStream, load_png, load_tf32, save_png, save_tf32

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_REMOTE = 0, 1, 2, 3

ENV_TOKEN = "SIGNHUNT_REMOTE_TOKEN"
ENV_WORKERS = "SIGNHUNT_WORKERS"


class UsageError(Exception):
    """Bad flag/config values; reported with exit code 2."""


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read {what} {path}: {e}") from e


def merge_config(args, keys, defaults, env_map=(), required=()):
    """flags > --config file > environment > defaults; unknown file keys are
    usage errors so typos cannot silently fall back to defaults."""
    eff = dict(defaults)
    for key, env_name, conv in env_map:
        raw = os.environ.get(env_name)
        if raw:
            try:
                eff[key] = conv(raw)
            except ValueError as e:
                raise UsageError(f"bad {env_name}: {e}") from e
    if getattr(args, "config", None):
        file_cfg = _load_json(args.config, "config file")
        unknown = sorted(set(file_cfg) - set(keys))
        if unknown:
            raise UsageError(f"--config: unknown keys {unknown}")
        eff.update(file_cfg)
    for key in keys:
        v = getattr(args, key, None)
        if v is not None:
            eff[key] = v
    missing = [k for k in required if eff.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required settings: {flags}")
    return eff


def echo_config(name, eff):
    print(f"# {name} effective config")
    for k in sorted(eff):
        print(f"#   {k} = {json.dumps(eff[k], sort_keys=True)}")


def _positive(eff, key, kind=float, strict=True):
    v = eff[key]
    if (strict and v <= 0) or (not strict and v < 0):
        bound = "> 0" if strict else ">= 0"
        raise UsageError(f"--{key.replace('_', '-')} must be {bound}, got {v}")
    return kind(v)


def load_image(path):
    path = Path(path)
    if path.suffix == ".png":
        return load_png(path)
    if path.suffix in (".tf32", ".json"):
        return load_tf32(path)
    raise UsageError(f"unsupported image format {path.suffix!r} (want .png or .tf32)")


def _parse_shape(text):
    try:
        dims = tuple(int(d) for d in str(text).lower().replace("x", ",").split(","))
    except ValueError as e:
        raise UsageError(f"bad shape {text!r}: {e}") from e
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise UsageError(f"shape must be CxHxW positive, got {text!r}")
    return dims


def _parse_list(value, conv, what):
    if isinstance(value, (list, tuple)):
        return tuple(conv(v) for v in value)
    try:
        return tuple(conv(v) for v in str(value).split(",") if v != "")
    except ValueError as e:
        raise UsageError(f"bad {what} {value!r}: {e}") from e


def make_dataset(eff):
    """Either a directory (PNG+labels.csv or TF32+index.json) or a synthetic
    recipe (patterns/blobs)."""
    if eff.get("data"):
        return load_dataset(eff["data"])
    kind = eff.get("synthetic") or "patterns"
    rng = RngStream(int(eff.get("data_seed", 0)))
    classes = int(eff.get("classes", 3))
    per_class = int(eff.get("per_class", 40))
    if kind == "patterns":
        return pattern_dataset(classes, _parse_shape(eff.get("shape", "1,8,8")),
                               per_class, noise=float(eff.get("noise", 0.08)), rng=rng)
    if kind == "blobs":
        shape = _parse_shape(eff.get("shape", "1,1,8"))
        return blob_dataset(classes, shape[1] * shape[2], per_class,
                            spread=float(eff.get("noise", 0.08)), rng=rng)
    raise UsageError(f"unknown synthetic dataset kind {kind!r}")


# --- subcommands ---------------------------------------------------------------

TRAIN_KEYS = ("out", "data", "synthetic", "classes", "shape", "per_class",
              "noise", "data_seed", "hidden", "epochs", "lr", "seed", "save_data")

TRAIN_DEFAULTS = {"synthetic": None, "data": None, "classes": 3, "shape": "1,8,8",
                  "per_class": 40, "noise": 0.08, "data_seed": 0, "hidden": "32",
                  "epochs": 120, "lr": 0.1, "seed": 0, "save_data": None, "out": None}


def cmd_train_toy(args):
    eff = merge_config(args, TRAIN_KEYS, TRAIN_DEFAULTS, required=("out",))
    echo_config("train-toy", eff)
    dataset = make_dataset(eff)
    hidden = _parse_list(eff["hidden"], int, "hidden sizes")
    result = train_toy(dataset, hidden=hidden, epochs=int(eff["epochs"]),
                       lr=float(eff["lr"]), rng=RngStream(int(eff["seed"])))
    save_model(result.model, eff["out"])
    if eff["save_data"]:
        save_dataset_tf32(dataset, eff["save_data"])
    print(f"trained {len(dataset)} items, {len(hidden)} hidden layer(s); "
          f"train accuracy {result.accuracy:.4f}; model -> {eff['out']}")
    return EXIT_OK


ATTACK_KEYS = ("model", "remote_url", "image", "label", "target", "eps", "T",
               "G", "N", "DR", "CR", "KR", "seed", "budget", "success_rule",
               "early_return", "double_step", "force_jrand", "top_k", "timeout",
               "token", "out")

ATTACK_DEFAULTS = {"model": None, "remote_url": None, "image": None, "label": None,
                   "target": None, "eps": None, "T": None, "G": None, "N": None,
                   "DR": 1.0, "CR": 0.9, "KR": 0.2, "seed": 0, "budget": None,
                   "success_rule": "top1", "early_return": True, "double_step": True,
                   "force_jrand": False, "top_k": 5, "timeout": 10.0,
                   "token": None, "out": None}


def build_attack_config(eff, spec):
    eps = _positive(eff, "eps")
    t = int(_positive(eff, "T", int))
    n = int(eff["N"])
    g = int(eff["G"])
    if n < 4:
        raise UsageError(f"--N must be >= 4, got {n}")
    if g < 0:
        raise UsageError(f"--G must be >= 0, got {g}")
    if not 0.0 <= float(eff["KR"]) <= 1.0:
        raise UsageError(f"--KR must be in [0, 1], got {eff['KR']}")
    if not 0.0 <= float(eff["CR"]) <= 1.0:
        raise UsageError(f"--CR must be in [0, 1], got {eff['CR']}")
    if eff["success_rule"] not in SUCCESS_RULES:
        raise UsageError(f"--success-rule must be one of {SUCCESS_RULES}")
    de = DEParams(size=n, generations=g, scale_factor=float(eff["DR"]),
                  cross_prob=float(eff["CR"]), force_jrand=bool(eff["force_jrand"]))
    return AttackConfig(epsilon=eps, iterations=t, de=de, spec=spec,
                        keep_rate=float(eff["KR"]), success_rule=eff["success_rule"],
                        early_return=bool(eff["early_return"]),
                        double_step=bool(eff["double_step"]))


def _write_attack_outputs(eff, cfg, result, extra=None):
    out = Path(eff["out"])
    save_png(result.image, out)
    save_tf32(result.image, out.with_suffix(".tf32"))
    payload = {"config": cfg.to_dict(), "result": result.to_dict(),
               "artifacts": {"png": str(out), "tf32": str(out.with_suffix('.tf32'))}}
    if extra:
        payload.update(extra)
    result_path = out.parent / "result.json"
    with open(result_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result_path


def cmd_attack(args):
    eff = merge_config(
        args, ATTACK_KEYS, ATTACK_DEFAULTS,
        env_map=(("token", ENV_TOKEN, str),),
        required=("image", "eps", "T", "G", "N", "out"))
    if not eff["model"] and not eff["remote_url"]:
        raise UsageError("need --model or --remote-url")
    if eff["model"] and eff["remote_url"]:
        raise UsageError("--model and --remote-url are mutually exclusive")
    echo_config("attack", {k: v for k, v in eff.items() if k != "token"})
    image = load_image(eff["image"])
    rng = RngStream(int(eff["seed"]))

    if eff["remote_url"]:
        return _attack_remote(eff, image, rng)

    if eff["label"] is None:
        raise UsageError("missing required settings: --label")
    label = int(eff["label"])
    model = load_model(eff["model"])
    if eff["target"] is not None:
        spec = FitnessSpec("targeted", label, int(eff["target"]))
    else:
        spec = FitnessSpec("untargeted", label)
    cfg = build_attack_config(eff, spec)
    budget = QueryBudget(int(eff["budget"]) if eff["budget"] is not None else UNLIMITED)

    clean = classify(model, image, QueryBudget(UNLIMITED))
    if top_label(clean) != label:
        print(f"warning: model predicts {top_label(clean)} on the clean image, "
              f"not {label}", file=sys.stderr)

    result = bmi_fgsm(image, cfg, LocalClassifier(model, budget), rng)
    result_path = _write_attack_outputs(eff, cfg, result)
    print(f"success={result.success} final_label={result.final_label} "
          f"queries={result.queries} linf={result.linf:.6f} "
          f"iterations={result.iterations_run} -> {eff['out']}, {result_path}")
    return EXIT_OK if result.success else EXIT_FAIL


def _attack_remote(eff, image, rng):
    endpoint = RemoteEndpoint(eff["remote_url"], top_k=int(eff["top_k"]),
                              timeout=float(eff["timeout"]), token=eff["token"])
    budget = QueryBudget(int(eff["budget"]) if eff["budget"] is not None else 5000)
    classifier = RemoteClassifier(endpoint, budget)
    try:
        clean = classifier.classify(image)
    except (RemoteUnavailable, ProtocolError) as e:
        print(f"remote error: {e}", file=sys.stderr)
        return EXIT_REMOTE
    y = top_label(clean)
    name = classifier.vocab.name(y)
    # scores are opaque and sparse: track the clean top-1 label's score
    spec = FitnessSpec("score_only", y)
    cfg = build_attack_config(eff, spec)
    try:
        result = bmi_fgsm(image, cfg, classifier, rng)
    except (RemoteUnavailable, ProtocolError) as e:
        print(f"remote error: {e}", file=sys.stderr)
        return EXIT_REMOTE
    final = (classifier.vocab.name(result.final_label)
             if 0 <= result.final_label < len(classifier.vocab) else "?")
    result_path = _write_attack_outputs(
        eff, cfg, result, extra={"remote": {"clean_label": name, "final_label": final}})
    print(f"success={result.success} clean_label={name!r} final_label={final!r} "
          f"queries={result.queries} linf={result.linf:.6f} -> {eff['out']}, {result_path}")
    return EXIT_OK if result.success else EXIT_FAIL


CAMPAIGN_KEYS = ("model", "data", "synthetic", "classes", "shape", "per_class",
                 "noise", "data_seed", "eps", "T", "G", "N", "DR", "CR", "KR",
                 "mode", "success_rule", "early_return", "double_step",
                 "force_jrand", "arms", "seeds", "budget", "out", "workers",
                 "skip_misclassified", "save_artifacts")

CAMPAIGN_DEFAULTS = {"model": None, "data": None, "synthetic": None, "classes": 3,
                     "shape": "1,8,8", "per_class": 40, "noise": 0.08, "data_seed": 0,
                     "eps": None, "T": None, "G": None, "N": None, "DR": 1.0,
                     "CR": 0.9, "KR": 0.2, "mode": "untargeted",
                     "success_rule": "top1", "early_return": True,
                     "double_step": True, "force_jrand": False, "arms": "full",
                     "seeds": "0", "budget": None, "out": None, "workers": 0,
                     "skip_misclassified": True, "save_artifacts": True}


def cmd_campaign(args):
    eff = merge_config(args, CAMPAIGN_KEYS, CAMPAIGN_DEFAULTS,
                       env_map=(("workers", ENV_WORKERS, int),),
                       required=("model", "eps", "T", "G", "N", "out"))
    echo_config("campaign", eff)
    if eff["mode"] not in ("untargeted", "targeted"):
        raise UsageError(f"--mode must be untargeted or targeted, got {eff['mode']!r}")
    template_spec = (FitnessSpec("targeted", 0, 1) if eff["mode"] == "targeted"
                     else FitnessSpec("untargeted", 0))
    cfg = build_attack_config(eff, template_spec)
    model = load_model(eff["model"])
    dataset = make_dataset(eff)
    arms = _parse_list(eff["arms"], str, "arms")
    seeds = _parse_list(eff["seeds"], int, "seeds")
    budget = int(eff["budget"]) if eff["budget"] is not None else UNLIMITED
    try:
        campaign = Campaign(dataset=dataset, model=model, config=cfg, arms=arms,
                            seeds=seeds, budget=budget, out_dir=eff["out"],
                            workers=int(eff["workers"]),
                            skip_misclassified=bool(eff["skip_misclassified"]),
                            save_artifacts=bool(eff["save_artifacts"]))
        report = run_campaign(campaign)
    except CampaignAborted as e:
        print(f"campaign aborted: {e}", file=sys.stderr)
        return EXIT_FAIL
    attempted = successes = 0
    for arm, s in sorted(report["arms"].items()):
        rate = "n/a" if s["success_rate"] is None else f"{100 * s['success_rate']:.1f}%"
        print(f"{arm}: {s['successes']}/{s['attempted']} ({rate}), "
              f"{s['skipped']} skipped, {s['errors']} errors")
        attempted += s["attempted"]
        successes += s["successes"]
    print(f"report -> {Path(eff['out']) / 'report.json'}")
    return EXIT_FAIL if attempted and not successes else EXIT_OK


def cmd_transfer(args):
    if not args.model:
        raise UsageError("need at least one --model NAME=SMF_DIR")
    models = {}
    for entry in args.model:
        name, sep, path = entry.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--model wants NAME=SMF_DIR, got {entry!r}")
        models[name] = load_model(path)
    samples = load_successful_samples(args.samples, arm=args.arm)
    echo_config("transfer", {"samples": args.samples, "arm": args.arm,
                             "models": sorted(models), "count": len(samples)})
    matrix = transfer_eval(samples, models)
    for name in sorted(models):
        rate = matrix["targets"][name]
        shown = "skipped" if rate is None else f"{100 * rate:.1f}%"
        print(f"{name}: {shown} of {matrix['denominator']} samples transfer")
    for w in matrix["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(matrix, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"matrix -> {args.out}")
    return EXIT_OK


def cmd_remote_probe(args):
    token = args.token or os.environ.get(ENV_TOKEN)
    endpoint = RemoteEndpoint(args.url, top_k=args.top_k, timeout=args.timeout,
                              token=token)
    image = load_image(args.image)
    echo_config("remote-probe", {"url": args.url, "top_k": args.top_k,
                                 "timeout": args.timeout, "image": args.image})
    try:
        pairs = fetch_scores(endpoint, image, QueryBudget(1))
    except (RemoteUnavailable, ProtocolError) as e:
        print(f"remote error: {e}", file=sys.stderr)
        return EXIT_REMOTE
    for name, score in pairs:
        print(f"{name}\t{score:.6f}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="signhunt",
                                description="Black-box adversarial sample toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    tp = sub.add_parser("train-toy", help="train a small test-subject model")
    tp.add_argument("--config")
    tp.add_argument("--out")
    tp.add_argument("--data")
    tp.add_argument("--synthetic", choices=("patterns", "blobs"))
    tp.add_argument("--classes", type=int)
    tp.add_argument("--shape")
    tp.add_argument("--per-class", dest="per_class", type=int)
    tp.add_argument("--noise", type=float)
    tp.add_argument("--data-seed", dest="data_seed", type=int)
    tp.add_argument("--hidden")
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--save-data", dest="save_data")
    tp.set_defaults(func=cmd_train_toy)

    ap = sub.add_parser("attack", help="attack one image")
    ap.add_argument("--config")
    ap.add_argument("--model")
    ap.add_argument("--remote-url", dest="remote_url")
    ap.add_argument("--image")
    ap.add_argument("--label", type=int)
    ap.add_argument("--target", type=int)
    ap.add_argument("--eps", type=float)
    ap.add_argument("--T", dest="T", type=int)
    ap.add_argument("--G", dest="G", type=int)
    ap.add_argument("--N", dest="N", type=int)
    ap.add_argument("--DR", dest="DR", type=float)
    ap.add_argument("--CR", dest="CR", type=float)
    ap.add_argument("--KR", dest="KR", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--budget", type=int)
    ap.add_argument("--success-rule", dest="success_rule", choices=SUCCESS_RULES)
    ap.add_argument("--no-early-return", dest="early_return", action="store_false",
                    default=None)
    ap.add_argument("--no-double-step", dest="double_step", action="store_false",
                    default=None)
    ap.add_argument("--force-jrand", dest="force_jrand", action="store_true",
                    default=None)
    ap.add_argument("--top-k", dest="top_k", type=int)
    ap.add_argument("--timeout", type=float)
    ap.add_argument("--token")
    ap.add_argument("--out")
    ap.set_defaults(func=cmd_attack)

    cp = sub.add_parser("campaign", help="batch evaluation over a dataset")
    cp.add_argument("--config")
    cp.add_argument("--model")
    cp.add_argument("--data")
    cp.add_argument("--eps", type=float)
    cp.add_argument("--T", dest="T", type=int)
    cp.add_argument("--G", dest="G", type=int)
    cp.add_argument("--N", dest="N", type=int)
    cp.add_argument("--KR", dest="KR", type=float)
    cp.add_argument("--mode", choices=("untargeted", "targeted"))
    cp.add_argument("--success-rule", dest="success_rule", choices=SUCCESS_RULES)
    cp.add_argument("--arms")
    cp.add_argument("--seeds")
    cp.add_argument("--budget", type=int)
    cp.add_argument("--out")
    cp.add_argument("--workers", type=int)
    cp.set_defaults(func=cmd_campaign)

    xp = sub.add_parser("transfer", help="replay adversarial samples on other models")
    xp.add_argument("--samples", required=True,
                    help="campaign output directory holding items/")
    xp.add_argument("--arm", default="full")
    xp.add_argument("--model", action="append",
                    help="NAME=SMF_DIR, repeatable")
    xp.add_argument("--out")
    xp.set_defaults(func=cmd_transfer)

    rp = sub.add_parser("remote-probe", help="one classify round-trip")
    rp.add_argument("--url", required=True)
    rp.add_argument("--image", required=True)
    rp.add_argument("--top-k", dest="top_k", type=int, default=5)
    rp.add_argument("--timeout", type=float, default=10.0)
    rp.add_argument("--token")
    rp.set_defaults(func=cmd_remote_probe)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolation, CorruptModel, TrainingFailed) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (RemoteUnavailable, ProtocolError) as e:
        print(f"remote error: {e}", file=sys.stderr)
        return EXIT_REMOTE


if __name__ == "__main__":
    raise SystemExit(main())
