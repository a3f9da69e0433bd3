"""Campaign runner: batch attacks over a dataset, strategy-arm comparisons,
transferability, and report emission.

A campaign is deterministic per (config, seeds): each item derives its own
random stream from the campaign seed and item id, items run independently in
a thread pool, and the report is assembled single-threaded after a barrier —
pool size never changes results (only timing fields).
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace

from .attack import (AttackConfig, AttackResult, MIFGSMConfig, bmi_fgsm,
                     is_adversarial, mi_fgsm_reference, random_sign_attack)
from .de import FitnessSpec
from .errors import BudgetExceeded, CampaignAborted, ContractViolation
from .models import (LocalClassifier, Model, QueryBudget, UNLIMITED, classify,
                     top_label)
from .tensors import ImageTensor, RngStream, derive_seed, save_png, save_tf32

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

ARMS = ("full", "no-double-step", "no-candidate-reuse", "random-baseline",
        "mi-fgsm-reference")

# timing/timestamp keys, excluded when comparing reports for determinism
TIMING_KEYS = frozenset({"wall_time", "mean_wall_time", "generated_at",
                         "total_wall_time"})


@dataclass(frozen=True)
class Campaign:
    """One evaluation protocol: same dataset, bound, and per-item budget for
    every arm; `config` is the full-strategy template whose label fields are
    filled per item."""

    dataset: object
    model: Model
    config: AttackConfig
    arms: tuple = ("full",)
    seeds: tuple = (0,)
    budget: int = UNLIMITED
    out_dir: object = None
    workers: int = 0  # 0 -> cpu count
    skip_misclassified: bool = True
    save_artifacts: bool = True

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for arm in self.arms:
            if arm not in ARMS:
                raise ContractViolation(f"unknown arm {arm!r}; known: {ARMS}")
        if not self.seeds:
            raise ContractViolation("campaign needs at least one seed")
        if self.budget < 1:
            raise ContractViolation(f"budget must be >= 1, got {self.budget}")


def arm_config(base: AttackConfig, arm: str, spec: FitnessSpec) -> AttackConfig:
    cfg = replace(base, spec=spec)
    if arm == "no-double-step":
        return replace(cfg, double_step=False)
    if arm == "no-candidate-reuse":
        return replace(cfg, keep_rate=0.0)
    return cfg


def arm_config_diffs(base: AttackConfig, arms) -> dict:
    """What each arm changes relative to the full strategy (audit trail)."""
    spec = base.spec
    full = arm_config(base, "full", spec).to_dict()
    diffs = {}
    for arm in arms:
        if arm == "random-baseline":
            diffs[arm] = {"driver": "random-sign probing at distance epsilon"}
        elif arm == "mi-fgsm-reference":
            diffs[arm] = {"driver": "white-box momentum baseline (finite differences)"}
        else:
            cfg = arm_config(base, arm, spec).to_dict()
            diffs[arm] = {k: cfg[k] for k in cfg if cfg[k] != full[k]}
    return diffs


@dataclass
class ItemRecord:
    arm: str
    seed: int
    item_id: str
    label: int
    target: int = None
    skipped: bool = False
    error: str = None
    success: bool = False
    final_label: int = -1
    linf: float = None
    queries: int = 0
    iterations_run: int = 0
    first_valid: int = None
    early_stop: bool = False
    budget_exhausted: bool = False
    wall_time: float = 0.0
    trace: list = field(default_factory=list)  # rows from confidence_trace

    def key(self):
        return (self.arm, self.seed, self.item_id)

    def to_dict(self, with_trace=False):
        d = {
            "arm": self.arm, "seed": self.seed, "item_id": self.item_id,
            "label": self.label, "target": self.target, "skipped": self.skipped,
            "error": self.error, "success": self.success,
            "final_label": self.final_label, "linf": self.linf,
            "queries": self.queries, "iterations_run": self.iterations_run,
            "first_valid": self.first_valid, "early_stop": self.early_stop,
            "budget_exhausted": self.budget_exhausted,
            "wall_time": self.wall_time,
        }
        if with_trace:
            d["trace"] = self.trace
        return d


def confidence_trace(result: AttackResult) -> list:
    """(iteration, tracked-label confidence, best temporary fitness) rows —
    one per completed outer iteration."""
    return [(r.t, r.true_conf, r.best_fitness) for r in result.trace]


def write_trace_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "true_conf", "best_fitness"])
        w.writerows(rows)
    return path


def first_valid_iteration(result: AttackResult):
    for rec in result.trace:
        if rec.adversarial:
            return rec.t
    return None


def _pick_target(label, n_classes, mode):
    if mode != "targeted":
        return None
    return (label + 1) % n_classes


def run_item(campaign: Campaign, arm: str, seed: int, index: int) -> ItemRecord:
    item = campaign.dataset.item(index)
    item_id = campaign.dataset.ids[index]
    label = int(campaign.dataset.labels[index])
    n = campaign.model.n_classes
    mode = campaign.config.spec.mode
    target = _pick_target(label, n, mode)
    rec = ItemRecord(arm=arm, seed=seed, item_id=item_id, label=label,
                     target=target)

    # setup-phase check, not charged to the attack budget
    clean = classify(campaign.model, item, QueryBudget(UNLIMITED))
    if campaign.skip_misclassified and top_label(clean) != label:
        rec.skipped = True
        return rec

    spec = FitnessSpec(mode, label, target)
    cfg = arm_config(campaign.config, arm, spec)
    budget = QueryBudget(campaign.budget)
    rng = RngStream(derive_seed(seed, item_id))

    if arm == "mi-fgsm-reference":
        mi = MIFGSMConfig(cfg.epsilon, cfg.iterations)
        result = mi_fgsm_reference(item, mi, campaign.model, spec, budget=budget)
    elif arm == "random-baseline":
        clf = LocalClassifier(campaign.model, budget)
        result = random_sign_attack(item, cfg.epsilon, campaign.budget, spec,
                                    clf, rng, rule=cfg.success_rule)
    else:
        clf = LocalClassifier(campaign.model, budget)
        result = bmi_fgsm(item, cfg, clf, rng, workers=1)

    rec.success = result.success
    rec.final_label = result.final_label
    rec.linf = result.linf
    rec.queries = result.queries
    rec.iterations_run = result.iterations_run
    rec.first_valid = first_valid_iteration(result)
    rec.early_stop = result.early_stop
    rec.budget_exhausted = result.budget_exhausted
    rec.wall_time = result.wall_time
    rec.trace = confidence_trace(result)

    if campaign.out_dir is not None and campaign.save_artifacts:
        item_dir = Path(campaign.out_dir) / "items" / f"{arm}--s{seed}--{item_id}"
        save_png(result.image, item_dir / "adv.png")
        save_tf32(result.image, item_dir / "adv.tf32")
        write_trace_csv(rec.trace, item_dir / "trace.csv")
        with open(item_dir / "result.json", "w") as fh:
            json.dump({"record": rec.to_dict(), "config": cfg.to_dict()},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    return rec


def _mean(values):
    values = [v for v in values if v is not None]
    return (sum(values) / len(values)) if values else None


def summarize(records) -> dict:
    """Per-arm aggregates recomputable from the per-item records alone."""
    arms = {}
    for rec in records:
        arms.setdefault(rec.arm, []).append(rec)
    out = {}
    for arm, recs in sorted(arms.items()):
        skipped = [r for r in recs if r.skipped]
        attempted = [r for r in recs if not r.skipped]
        succ = [r for r in attempted if r.success]
        hist = {}
        for r in succ:
            if r.first_valid is not None:
                hist[str(r.first_valid)] = hist.get(str(r.first_valid), 0) + 1
        out[arm] = {
            "attempted": len(attempted),
            "skipped": len(skipped),
            "errors": sum(1 for r in attempted if r.error),
            "successes": len(succ),
            "success_rate": (len(succ) / len(attempted)) if attempted else None,
            "mean_linf_success": _mean([r.linf for r in succ]),
            "mean_queries": _mean([r.queries for r in attempted]),
            "mean_wall_time": _mean([r.wall_time for r in attempted]),
            "first_valid_hist": dict(sorted(hist.items(), key=lambda kv: int(kv[0]))),
        }
    return out


def strip_timing(obj):
    """Report copy without timing/timestamp fields, for comparisons."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def run_campaign(campaign: Campaign) -> dict:
    """Attack every (arm, seed, item) combination and aggregate.

    Unexpected per-item failures are recorded, not fatal; more than 50% of
    runs failing aborts the whole campaign. The report is written atomically
    after all items finish.
    """
    t0 = time.perf_counter()
    size = len(campaign.dataset.labels)
    jobs = [(arm, seed, i) for arm in campaign.arms
            for seed in campaign.seeds for i in range(size)]

    def _job(args):
        arm, seed, i = args
        try:
            return run_item(campaign, arm, seed, i)
        except BudgetExceeded as e:  # defensive: attacks normally absorb this
            rec = ItemRecord(arm=arm, seed=seed,
                             item_id=campaign.dataset.ids[i],
                             label=int(campaign.dataset.labels[i]))
            rec.error = f"budget exceeded: {e}"
            return rec
        except Exception as e:  # noqa: BLE001 — item isolation by contract
            rec = ItemRecord(arm=arm, seed=seed,
                             item_id=campaign.dataset.ids[i],
                             label=int(campaign.dataset.labels[i]))
            rec.error = f"{type(e).__name__}: {e}"
            return rec

    workers = campaign.workers or os.cpu_count() or 1
    if workers == 1 or len(jobs) <= 1:
        records = [_job(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_job, jobs))
    records.sort(key=lambda r: r.key())

    failures = sum(1 for r in records if r.error)
    if jobs and failures * 2 > len(jobs):
        raise CampaignAborted(f"{failures}/{len(jobs)} items failed")

    report = {
        "campaign": {
            "arms": list(campaign.arms),
            "seeds": list(campaign.seeds),
            "budget": campaign.budget,
            "items": size,
            "mode": campaign.config.spec.mode,
            "skip_misclassified": campaign.skip_misclassified,
            "config": campaign.config.to_dict(),
            "arm_config_diffs": arm_config_diffs(campaign.config, campaign.arms),
        },
        "arms": summarize(records),
        "items": [r.to_dict() for r in records],
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "total_wall_time": time.perf_counter() - t0,
    }
    if campaign.out_dir is not None:
        write_report(report, campaign.out_dir)
    return report


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "report.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_dir / "report.json")

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "attempted", "skipped", "errors", "successes",
                    "success_rate", "mean_linf_success", "mean_queries"])
        for arm, s in sorted(report["arms"].items()):
            w.writerow([arm, s["attempted"], s["skipped"], s["errors"],
                        s["successes"],
                        "" if s["success_rate"] is None else f"{s['success_rate']:.4f}",
                        "" if s["mean_linf_success"] is None else f"{s['mean_linf_success']:.6f}",
                        "" if s["mean_queries"] is None else f"{s['mean_queries']:.1f}"])
    return out_dir / "report.json"


@dataclass(frozen=True)
class TransferSample:
    """An adversarial sample carrying the spec it was crafted under."""

    image: ImageTensor
    spec: FitnessSpec
    rule: str = "top1"


def transfer_eval(samples, models: dict) -> dict:
    """Fraction of the given (already successful) samples that are also
    adversarial on each target model. Shape-incompatible models are skipped
    with a warning entry."""
    out = {"denominator": len(samples), "targets": {}, "warnings": []}
    for name, model in models.items():
        if samples and samples[0].image.shape != model.input_shape:
            out["targets"][name] = None
            out["warnings"].append(
                f"{name}: input shape {model.input_shape} incompatible with "
                f"samples {samples[0].image.shape}; skipped")
            continue
        hits = 0
        for s in samples:
            pred = classify(model, s.image, QueryBudget(UNLIMITED))
            if is_adversarial(pred, s.spec, s.rule):
                hits += 1
        out["targets"][name] = (hits / len(samples)) if samples else None
    return out


def load_successful_samples(out_dir, arm="full"):
    """Rebuild TransferSamples for an arm's successful items from the
    per-item artifacts written by run_campaign."""
    from .tensors import load_tf32
    items_dir = Path(out_dir) / "items"
    if not items_dir.is_dir():
        raise ContractViolation(f"no item artifacts under {out_dir}")
    samples = []
    for item_dir in sorted(items_dir.iterdir()):
        result_path = item_dir / "result.json"
        if not item_dir.name.startswith(f"{arm}--s") or not result_path.exists():
            continue
        payload = json.loads(result_path.read_text())
        rec, cfg = payload["record"], payload["config"]
        if not rec["success"]:
            continue
        spec = FitnessSpec(cfg["mode"], rec["label"], rec["target"])
        samples.append(TransferSample(load_tf32(item_dir / "adv.tf32"), spec,
                                      cfg["success_rule"]))
    return samples
