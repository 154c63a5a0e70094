"""View-selection strategies, IoU evaluation, and report artifacts.

For each test sample we reconstruct once per candidate view (11 volumes) and
score them against ground truth; every strategy then reduces to picking one
candidate id from the cached scores, which makes oracle dominance exact by
construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import render
from .errors import ConfigError, NoAvailableViewError, NvsError
from .loss import bce
from .model import ModelConfig
from .shapes import load_samples
from .viewsphere import ViewSphere, farthest_view, load_sphere, masked_argmax
from .voxel import DEFAULT_THRESHOLD, binarize, binary_iou


@dataclass(frozen=True)
class EvalConfig:
    manifest: str = ""
    checkpoint: str = ""
    strategies: tuple = ("learned_best", "random:0", "farthest", "oracle")
    v_t: float = DEFAULT_THRESHOLD
    base_view_id: int = 8
    sweep_bases: bool = False
    mask_drop: float = 0.4
    sphere_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        if not self.strategies:
            raise ConfigError("at least one strategy is required")


def parse_strategy(spec: str):
    """'learned_best' | 'learned_kth:K' | 'random:SEED' | 'farthest'
    | 'oracle' | 'masked:SEED'."""
    name, _, arg = spec.partition(":")
    if name == "learned_best":
        return ("learned_kth", 1)
    if name == "learned_kth":
        k = int(arg)
        if k < 1:
            raise ConfigError(f"learned_kth needs k >= 1, got {k}")
        return ("learned_kth", k)
    if name == "random":
        return ("random", int(arg) if arg else 0)
    if name == "masked":
        return ("masked", int(arg) if arg else 0)
    if name in ("farthest", "oracle"):
        return (name, None)
    raise ConfigError(f"unknown strategy {spec!r}")


def kth_best(probs: np.ndarray, k: int) -> int:
    """Index of the k-th largest probability; stable on ties (lowest id)."""
    if k < 1 or k > probs.size:
        raise ConfigError(f"k={k} out of range for {probs.size} views")
    order = np.argsort(-probs, kind="stable")
    return int(order[k - 1])


def select_view(strategy, probs, base, sphere: ViewSphere,
                candidate_ious=None, rng=None, avail=None) -> int:
    """Pick a next-view id for one sample.

    strategy is a parsed (kind, arg) pair. The oracle needs the per-candidate
    IoUs computed against ground truth; masked needs an availability vector.
    """
    kind, arg = strategy
    k = len(sphere)
    if kind == "learned_kth":
        return kth_best(np.asarray(probs), arg)
    if kind == "random":
        if rng is None:
            raise ConfigError("random strategy needs an rng")
        return int(rng.integers(0, k))
    if kind == "farthest":
        return farthest_view(base, sphere).id
    if kind == "oracle":
        if candidate_ious is None:
            raise NvsError("oracle strategy needs ground-truth IoUs")
        return int(np.argmax(candidate_ious))
    if kind == "masked":
        if avail is None:
            raise ConfigError("masked strategy needs an availability vector")
        return masked_argmax(probs, avail)
    raise ConfigError(f"unknown strategy kind {kind!r}")


@dataclass
class SampleScores:
    sample_id: str
    class_name: str
    probs: np.ndarray       # [K] selection distribution for the base view
    ious: np.ndarray        # [K] IoU of the (base, candidate i) reconstruction
    base_id: int
    eval_loss: float        # BCE of the learned-best reconstruction


def score_sample(sample, params, cfg: ModelConfig, sphere, base_id: int,
                 v_t: float) -> SampleScores:
    """Reconstruct every (base, candidate) pair and score against truth."""
    views = render.render_all(sample.truth, sphere, cfg.image_size)
    imgs = mdl.images_to_tensor(views, dtype=cfg.np_dtype)
    p, vols = mdl.candidate_volumes(imgs, base_id, params, cfg)
    probs = np.asarray(p.data, dtype=np.float64)
    truth_bin = sample.truth
    ious = np.empty(len(sphere))
    for i in range(len(sphere)):
        pred = mdl.volume_to_grid(vols[i])
        ious[i] = binary_iou(binarize(pred, v_t), truth_bin)
    best = kth_best(probs, 1)
    eval_loss = float(bce(vols[best], sample.truth).data)
    return SampleScores(sample.sample_id, sample.class_name, probs, ious,
                        base_id, eval_loss)


def _availability(rng, k: int, drop: float) -> np.ndarray:
    while True:
        avail = rng.uniform(size=k) >= drop
        if avail.any():
            return avail


@dataclass
class EvalReport:
    config_digest: dict
    rows: list            # [{class, strategy, mean_iou, n}]
    overall: list         # one row per strategy
    histograms: dict      # class -> [K counts] of learned-best selections
    selections: dict = field(default_factory=dict)  # strategy -> {id: view}
    mean_eval_loss: float = 0.0


def evaluate(params, model_cfg: ModelConfig, cfg: EvalConfig) -> EvalReport:
    sphere = load_sphere(cfg.sphere_path)
    if len(sphere) != model_cfg.num_views:
        raise ConfigError("sphere size does not match model view count")
    samples = load_samples(cfg.manifest, split="test")
    if not samples:
        raise ConfigError("manifest has no test samples")
    strategies = [(spec, parse_strategy(spec)) for spec in cfg.strategies]
    k = len(sphere)
    # evaluation is forward-only: drop gradient tracking on the parameters
    params = {name: mdl.Tensor(p.data) for name, p in params.items()}

    base_ids = ([v.id for v in sphere] if cfg.sweep_bases
                else [cfg.base_view_id])
    scored = []
    for sample in samples:
        for base_id in base_ids:
            scored.append(score_sample(sample, params, model_cfg, sphere,
                                       base_id, cfg.v_t))

    per_strategy: dict[str, dict[str, list]] = {}
    selections: dict[str, dict[str, int]] = {}
    histograms: dict[str, list] = {}
    for spec, parsed in strategies:
        per_class: dict[str, list] = {}
        sel: dict[str, int] = {}
        for si, sc in enumerate(scored):
            rng = avail = None
            if parsed[0] == "random":
                rng = np.random.default_rng(
                    np.random.SeedSequence([parsed[1], si]))
            if parsed[0] == "masked":
                avail = _availability(np.random.default_rng(
                    np.random.SeedSequence([parsed[1], si, 0x6D61])),
                    k, cfg.mask_drop)
            base = sphere.by_id(sc.base_id)
            choice = select_view(parsed, sc.probs, base, sphere,
                                 candidate_ious=sc.ious, rng=rng, avail=avail)
            per_class.setdefault(sc.class_name, []).append(sc.ious[choice])
            sel[f"{sc.sample_id}@{sc.base_id}"] = choice
            if spec == "learned_best":
                hist = histograms.setdefault(sc.class_name, [0] * k)
                hist[choice] += 1
        per_strategy[spec] = per_class
        selections[spec] = sel

    rows = []
    overall = []
    for spec, _ in strategies:
        per_class = per_strategy[spec]
        all_vals = []
        for cls in sorted(per_class):
            vals = per_class[cls]
            rows.append({"class": cls, "strategy": spec,
                         "mean_iou": float(np.mean(vals)), "n": len(vals)})
            all_vals.extend(vals)
        overall.append({"class": "overall", "strategy": spec,
                        "mean_iou": float(np.mean(all_vals)),
                        "n": len(all_vals)})

    digest = {"model": model_cfg.digest(),
              "v_t": cfg.v_t, "base_view_id": cfg.base_view_id,
              "sweep_bases": cfg.sweep_bases, "mask_drop": cfg.mask_drop,
              "strategies": list(cfg.strategies)}
    return EvalReport(config_digest=digest, rows=rows, overall=overall,
                      histograms=histograms, selections=selections,
                      mean_eval_loss=float(np.mean(
                          [sc.eval_loss for sc in scored])))


def next_view_histogram(report: EvalReport) -> dict:
    """Per-class counts over view ids of the learned-best selections."""
    present = set(report.config_digest.get("strategies", []))
    if "learned_best" not in present or not any(
            s in present for s in ("learned_kth:2",)):
        raise ConfigError(
            "histogram needs learned_best and learned_kth:2 strategies")
    return report.histograms


def report_to_json(report: EvalReport) -> str:
    payload = {"config_digest": report.config_digest, "rows": report.rows,
               "overall": report.overall, "histograms": report.histograms,
               "selections": report.selections,
               "mean_eval_loss": report.mean_eval_loss}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> EvalReport:
    try:
        payload = json.loads(text)
        return EvalReport(config_digest=payload["config_digest"],
                          rows=payload["rows"], overall=payload["overall"],
                          histograms=payload["histograms"],
                          selections=payload.get("selections", {}),
                          mean_eval_loss=payload.get("mean_eval_loss", 0.0))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad report JSON: {exc}") from exc


def report_table(report: EvalReport) -> str:
    """Aligned text table: one row per class, one column per strategy."""
    strategies = list(dict.fromkeys(r["strategy"] for r in report.rows))
    classes = sorted({r["class"] for r in report.rows})
    cells = {(r["class"], r["strategy"]): r["mean_iou"] for r in report.rows}
    for r in report.overall:
        cells[("overall", r["strategy"])] = r["mean_iou"]
    width = max([len("class")] + [len(c) for c in classes + ["overall"]])
    cols = [max(len(s), 6) for s in strategies]
    lines = [" ".join(["class".ljust(width)]
                      + [s.rjust(w) for s, w in zip(strategies, cols)])]
    for cls in classes + ["overall"]:
        row = [cls.ljust(width)]
        for s, w in zip(strategies, cols):
            v = cells.get((cls, s))
            row.append(("-" if v is None else f"{v:.4f}").rjust(w))
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def spearman_rank_iou(report: EvalReport, max_k: int) -> float:
    """Spearman correlation between k and mean IoU of learned_kth(k)."""
    from scipy.stats import spearmanr
    ks, means = [], []
    for k in range(1, max_k + 1):
        spec = "learned_best" if k == 1 else f"learned_kth:{k}"
        match = [r for r in report.overall if r["strategy"] in
                 (spec, f"learned_kth:{k}")]
        if not match:
            raise ConfigError(f"report lacks strategy learned_kth:{k}")
        ks.append(k)
        means.append(match[0]["mean_iou"])
    rho, _ = spearmanr(ks, means)
    return float(rho)
