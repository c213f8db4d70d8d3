"""Experiment orchestration: data, pretraining, supervision, the finetuning
runs, transfer over the (alpha, lambda2) grid, evaluation and studies.

Every artifact lives under one output directory and is listed in
``manifest.ini`` with the digest of its file and the digest of the inputs
that produced it.  A rerun with ``resume`` reuses any artifact whose input
key and file digest both still match, so a completed pipeline reruns without
training.  Result files carry no timestamps; timings stay in the manifest.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .arithmetic import (TransferConfig, cosine_similarity, explainability_vector,
                         task_vector, transfer)
from .config import ExperimentConfig
from .data import Dataset, attach_explanations, gen_domain, gen_mixture
from .evaluation import (METRICS, REPORT_COLUMNS, InfidelityConfig, MetricsReport,
                         UndefinedMetricError, evaluate, iou_at_k, mean_interval,
                         normalized_report, pearson, report_row, write_csv)
from .model import HeadMatrix, ParameterVector, forward, init_parameters, make_head, predict_class
from .seeding import derive_seed, digest
from .shapley import ShapConfig, exact_shapley, kernel_shap, make_baseline
from .storage import (load_checkpoint, load_dataset, read_sidecar, save_checkpoint, save_dataset,
                      save_task_vector, write_sidecar)
from .training import TrainConfig, finetune, pretrain

log = logging.getLogger(__name__)

TOOL = "xferlab-pipeline/1"
SELECTION_RULE = "min normalized e_rmse subject to normalized accuracy >= {min_acc}"


class MissingArtifactError(FileNotFoundError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# artifact store -------------------------------------------------------------------

def file_digest(path: Path) -> str:
    return digest(Path(path).read_bytes())


class Workspace:
    """Output directory plus its manifest of artifacts."""

    def __init__(self, out, resume: bool = True):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.ini"
        self.resume = resume
        self.entries: dict[str, dict[str, str]] = {}
        self.timing: dict[str, str] = {}
        self.extra: dict[str, dict[str, str]] = {}
        self.built: list[str] = []
        self.reused: list[str] = []
        # entries are kept either way so a fresh stage does not forget other stages' artifacts
        if self.manifest_path.exists():
            m = read_sidecar(self.manifest_path)
            for sec, items in m.items():
                if sec.startswith("artifact:"):
                    self.entries[sec[len("artifact:"):]] = dict(items)
                elif sec not in ("tool", "timing"):
                    self.extra[sec] = dict(items)

    def path(self, rel: str) -> Path:
        return self.out / rel

    def lookup(self, name: str, key: str) -> Path | None:
        e = self.entries.get(name)
        if not self.resume or e is None or e.get("key") != key:
            return None
        p = self.path(e["path"])
        if not p.exists() or file_digest(p) != e.get("digest"):
            log.warning("artifact %s failed verification, rebuilding", name)
            return None
        return p

    def record(self, name: str, rel: str, key: str, **extra: str) -> None:
        self.entries[name] = {"path": rel, "key": key, "digest": file_digest(self.path(rel)),
                              **{k: str(v) for k, v in extra.items()}}

    def require(self, name: str) -> Path:
        e = self.entries.get(name)
        if e is None:
            raise MissingArtifactError(f"artifact {name!r} missing: run the pipeline first")
        p = self.path(e["path"])
        if not p.exists() or file_digest(p) != e.get("digest"):
            raise MissingArtifactError(f"artifact {name!r} at {p} is missing or modified")
        return p

    def save(self, extra: dict[str, dict[str, str]] | None = None) -> None:
        sections: dict[str, dict[str, str]] = {"tool": {"version": TOOL}}
        sections["timing"] = dict(self.timing)
        for name in sorted(self.entries):
            sections[f"artifact:{name}"] = self.entries[name]
        self.extra.update(extra or {})
        for k in sorted(self.extra):
            sections[k] = self.extra[k]
        write_sidecar(self.manifest_path, sections)


def _key(*parts) -> str:
    return digest("\x1f".join(str(p) for p in parts).encode("utf-8"))


class Stage:
    def __init__(self, ws: Workspace, name: str):
        self.ws, self.name = ws, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        prev = float(self.ws.timing.get(self.name, "0") or 0)
        self.ws.timing[self.name] = f"{prev + time.perf_counter() - self.t0:.3f}"
        if ev is not None and not isinstance(ev, StageError):
            self.ws.save()
            raise StageError(self.name, ev) from ev
        return False


# cached builders --------------------------------------------------------------------

def _cached_dataset(ws: Workspace, name: str, key: str, make: Callable[[], Dataset]) -> Dataset:
    p = ws.lookup(name, key)
    if p is not None:
        ws.reused.append(name)
        return load_dataset(p)
    ds = make()
    rel = f"data/{name}.sevd"
    save_dataset(ws.path(rel), ds)
    ws.record(name, rel, key)
    ws.built.append(name)
    return ds


def _cached_model(ws: Workspace, name: str, key: str, head: HeadMatrix,
                  make: Callable[[], "object"]) -> ParameterVector:
    p = ws.lookup(name, key)
    if p is not None:
        ws.reused.append(name)
        return load_checkpoint(p)[0]
    art = make()
    rel = f"models/{name}.sevx"
    save_checkpoint(ws.path(rel), art.theta, head)
    snap = art.snapshot()
    snap["losses"] = ",".join(repr(float(x)) for x in art.losses)
    write_sidecar(ws.path(f"models/{name}.ini"), {"artifact": {"name": name}, "train": snap})
    ws.record(name, rel, key, fingerprint=art.fingerprint, role=art.role)
    ws.built.append(name)
    return art.theta


def _pmap(workers: int):
    if workers <= 1:
        return map, None
    pool = ThreadPoolExecutor(max_workers=workers)
    return pool.map, pool


# the shared stages ---------------------------------------------------------------------

@dataclass
class Context:
    cfg: ExperimentConfig
    ws: Workspace
    base: ParameterVector | None = None
    data: dict = field(default_factory=dict)
    ft: dict = field(default_factory=dict)
    star: dict = field(default_factory=dict)
    explained_train: dict = field(default_factory=dict)
    explained_test: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)

    def head(self, domain: str) -> HeadMatrix:
        return make_head(self.cfg.domains[domain].spec.class_names, self.cfg.model.embed_dim)

    def train_config(self, alpha: float, *ids) -> TrainConfig:
        f = self.cfg.finetune
        return TrainConfig(alpha=alpha, learning_rate=f.learning_rate, epochs=f.epochs,
                           batch_size=f.batch_size, weight_decay=f.weight_decay,
                           grad_clip_norm=f.grad_clip_norm,
                           seed=derive_seed(self.cfg.seed, "train", *ids) % 2 ** 31)


def stage_data(ctx: Context, domain: str) -> tuple[Dataset, Dataset]:
    if domain in ctx.data:
        return ctx.data[domain]
    e = ctx.cfg.domains[domain]
    with Stage(ctx.ws, "gen-data"):
        key = _key("domain", repr(e.spec), e.n_train, e.n_test)
        parts = {}

        def make(split):
            def inner():
                if "pair" not in parts:
                    parts["pair"] = gen_domain(e.spec, e.n_train, e.n_test)
                return parts["pair"][0 if split == "train" else 1]
            return inner
        tr = _cached_dataset(ctx.ws, f"{domain}-train", key, make("train"))
        te = _cached_dataset(ctx.ws, f"{domain}-test", key, make("test"))
    ctx.data[domain] = (tr, te)
    return tr, te


def stage_mixture(ctx: Context) -> Dataset:
    p = ctx.cfg.pretrain
    specs = ctx.cfg.pretrain_specs()
    with Stage(ctx.ws, "gen-data"):
        key = _key("mixture", *[repr(s) for s in specs], p.n_per_domain)
        return _cached_dataset(ctx.ws, "pretrain-mixture", key,
                               lambda: gen_mixture(specs, p.n_per_domain))


def stage_gen_data(ctx: Context) -> dict[str, int]:
    """Every dataset file the config names, without any training; returns split sizes."""
    sizes = {"pretrain-mixture": len(stage_mixture(ctx))}
    for name in sorted(ctx.cfg.domains):
        tr, te = stage_data(ctx, name)
        sizes[f"{name}-train"], sizes[f"{name}-test"] = len(tr), len(te)
    ctx.ws.extra["samples"] = {k: str(v) for k, v in sizes.items()}
    return sizes


def stage_pretrain(ctx: Context) -> ParameterVector:
    if ctx.base is not None:
        return ctx.base
    cfg, p = ctx.cfg, ctx.cfg.pretrain
    mixture = stage_mixture(ctx)
    head = make_head(mixture.class_names, cfg.model.embed_dim)
    tc = TrainConfig(alpha=1.0, learning_rate=p.learning_rate, epochs=p.epochs,
                     batch_size=p.batch_size, weight_decay=p.weight_decay,
                     seed=derive_seed(cfg.seed, "train", "base") % 2 ** 31)
    with Stage(ctx.ws, "pretrain"):
        key = _key("base", repr(cfg.model), repr(tc), ctx.ws.entries["pretrain-mixture"]["digest"])
        ctx.base = _cached_model(ctx.ws, "base", key, head,
                                 lambda: pretrain(cfg.model, mixture, head, tc,
                                                  init_parameters(cfg.model)))
    return ctx.base


def _model_key(ctx: Context, name: str) -> str:
    return ctx.ws.entries[name]["digest"]


def stage_ft(ctx: Context, domain: str) -> ParameterVector:
    if domain in ctx.ft:
        return ctx.ft[domain]
    base = stage_pretrain(ctx)
    tr, _ = stage_data(ctx, domain)
    head = ctx.head(domain)
    tc = ctx.train_config(1.0, domain, "ft")
    with Stage(ctx.ws, "finetune"):
        key = _key("ft", repr(tc), _model_key(ctx, "base"), ctx.ws.entries[f"{domain}-train"]["digest"])
        ctx.ft[domain] = _cached_model(
            ctx.ws, f"{domain}-ft", key, head,
            lambda: finetune(base, tr, head, tc, ctx.cfg.model, role="ft",
                             base_fingerprint=base.content_fingerprint))
    return ctx.ft[domain]


def _explainer(ctx: Context, theta: ParameterVector, head: HeadMatrix, baseline: np.ndarray,
               method: str, P: int):
    model_cfg = ctx.cfg.model
    if method == "exact":
        return lambda px, lab, seed: exact_shapley(theta, head, px, lab, baseline, model_cfg)
    return lambda px, lab, seed: kernel_shap(theta, head, px, lab, baseline, model_cfg,
                                             ShapConfig(P=P, baseline=ctx.cfg.explain.baseline,
                                                        seed=seed))


def baseline_for(ctx: Context, domain: str) -> np.ndarray:
    if domain not in ctx.baselines:
        tr, _ = stage_data(ctx, domain)
        ctx.baselines[domain] = make_baseline(tr.pixels(), ctx.cfg.explain.baseline, ctx.cfg.model)
    return ctx.baselines[domain]


def _explain(ctx: Context, domain: str, split: str, count: int, method: str) -> Dataset:
    theta = stage_ft(ctx, domain)
    tr, te = stage_data(ctx, domain)
    ds = tr if split == "train" else te
    count = min(count, len(ds))
    head = ctx.head(domain)
    baseline = baseline_for(ctx, domain)
    P = ctx.cfg.explain.P
    seed = derive_seed(ctx.cfg.seed, "explain", domain, split) % 2 ** 31
    name = f"{domain}-{split}-explained"
    key = _key("explain", method, P, ctx.cfg.explain.baseline, count, seed,
               _model_key(ctx, f"{domain}-ft"), ctx.ws.entries[f"{domain}-{split}"]["digest"])
    prov = {"explainer": "exact_shapley" if method == "exact" else "kernel_shap",
            "model": f"{domain}-ft", "model_fingerprint": theta.content_fingerprint,
            "baseline": ctx.cfg.explain.baseline, "P": str(P) if method == "kernel" else "all"}

    def make():
        pmap, pool = _pmap(ctx.cfg.workers)
        try:
            return attach_explanations(ds, _explainer(ctx, theta, head, baseline, method, P),
                                       prov, fraction=count / len(ds), seed=seed,
                                       parallel_map=pmap)
        finally:
            if pool is not None:
                pool.shutdown()
    with Stage(ctx.ws, "explain"):
        return _cached_dataset(ctx.ws, name, key, make)


def stage_source_supervision(ctx: Context, domain: str) -> Dataset:
    if domain not in ctx.explained_train:
        ex = ctx.cfg.explain
        ctx.explained_train[domain] = _explain(ctx, domain, "train", ex.source_count,
                                               ex.source_method)
    return ctx.explained_train[domain]


def stage_target_eval_set(ctx: Context, domain: str) -> Dataset:
    """Test split explained by the target's own classifier, kept to the explained rows."""
    if domain not in ctx.explained_test:
        ds = _explain(ctx, domain, "test", ctx.cfg.explain.target_count, "kernel")
        keep = [im for im in ds.images if im.id in ds.phi]
        ctx.explained_test[domain] = replace(ds, images=keep)
    return ctx.explained_test[domain]


def stage_star(ctx: Context, domain: str, alpha: float) -> ParameterVector:
    if (domain, alpha) in ctx.star:
        return ctx.star[domain, alpha]
    base = stage_pretrain(ctx)
    sup = stage_source_supervision(ctx, domain)
    head = ctx.head(domain)
    tc = ctx.train_config(alpha, domain, "ft*", repr(alpha))
    name = f"{domain}-ftstar-a{alpha!r}"
    with Stage(ctx.ws, "finetune"):
        key = _key("ft*", repr(tc), _model_key(ctx, "base"),
                   ctx.ws.entries[f"{domain}-train-explained"]["digest"])
        ctx.star[domain, alpha] = _cached_model(
            ctx.ws, name, key, head,
            lambda: finetune(base, sup, head, tc, ctx.cfg.model, role="ft*",
                             base_fingerprint=base.content_fingerprint))
    return ctx.star[domain, alpha]


# evaluation helpers ------------------------------------------------------------------

@dataclass
class GridOutcome:
    alpha: float
    lambda2: float
    report: MetricsReport
    fingerprint: str
    correct: np.ndarray
    sq_err: np.ndarray
    iou10: np.ndarray


def _infidelity_config(ctx: Context) -> InfidelityConfig:
    e = ctx.cfg.eval
    return InfidelityConfig(e.infidelity_draws, e.drop_prob,
                            derive_seed(ctx.cfg.seed, "infidelity") % 2 ** 31)


def _per_sample(theta: ParameterVector, head: HeadMatrix, ds: Dataset, ctx: Context):
    out = forward(theta, head, ds.pixels(), ctx.cfg.model)
    y = ds.labels()
    phi, _ = ds.phi_matrix()
    picked = out.attributions[np.arange(len(y)), :, y]
    k = min(10, ctx.cfg.model.num_patches)
    return ((predict_class(out.logits) == y).astype(np.float64),
            np.sum((picked - phi) ** 2, axis=1),
            np.array([iou_at_k(picked[i], phi[i], k) for i in range(len(y))]))


def evaluate_model(ctx: Context, theta: ParameterVector, domain: str, model_id: str) -> MetricsReport:
    ds = stage_target_eval_set(ctx, domain)
    return evaluate(theta, ctx.head(domain), ds, ctx.cfg.model, baseline_for(ctx, domain),
                    _infidelity_config(ctx), model_id=model_id)


def normalize(report: MetricsReport, ref: MetricsReport) -> MetricsReport:
    """Ratios against ``ref``; a metric whose reference is zero becomes NaN."""
    usable = [m for m in METRICS if getattr(ref, m) != 0]
    if "accuracy" not in usable or "e_rmse" not in usable:
        raise UndefinedMetricError("reference accuracy or E-RMSE is zero")
    zeroed = {m: (getattr(ref, m) if m in usable else 1.0) for m in METRICS}
    safe = replace(ref, **zeroed)
    out = normalized_report(report, safe)
    for m in METRICS:
        if m not in usable:
            setattr(out, m, float("nan"))
    return out


def select_point(outcomes: Sequence[GridOutcome], ref: MetricsReport, min_acc: float) -> GridOutcome:
    best = None
    for o in outcomes:
        acc = o.report.accuracy / ref.accuracy
        er = o.report.e_rmse / ref.e_rmse
        if acc >= min_acc and (best is None or er < best[0]):
            best = (er, o)
    if best is None:
        raise UndefinedMetricError(f"no grid point keeps normalized accuracy >= {min_acc}")
    return best[1]


# pipeline ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    source: str
    target: str
    reference: MetricsReport
    outcomes: list[GridOutcome]
    selected: GridOutcome
    oracle: dict[float, MetricsReport]
    cos_ft: float
    cos_star: dict[float, float]
    out: Path

    def normalized(self, o: GridOutcome) -> MetricsReport:
        return normalize(o.report, self.reference)


def run_pipeline(cfg: ExperimentConfig, out, resume: bool = True, oracle: bool = False,
                 ctx: Context | None = None, pair_dir: str | None = None) -> PipelineResult:
    ws = ctx.ws if ctx is not None else Workspace(out, resume)
    ctx = ctx or Context(cfg, ws)
    S, T = cfg.source, cfg.target
    t = cfg.transfer
    rdir = pair_dir or "results"
    base = stage_pretrain(ctx)
    ft_S, ft_T = stage_ft(ctx, S), stage_ft(ctx, T)
    stars = {a: stage_star(ctx, S, a) for a in t.alpha_grid}
    oracle_stars = {a: stage_star(ctx, T, a) for a in t.alpha_grid} if oracle else {}
    eval_set = stage_target_eval_set(ctx, T)
    head_T = ctx.head(T)

    with Stage(ws, "transfer"):
        tau_T = task_vector(ft_T, base, ft_id=f"{T}-ft", base_id="base")
        tau_S = task_vector(ft_S, base, ft_id=f"{S}-ft", base_id="base")
        taus = {a: explainability_vector(stars[a], ft_S, star_id=f"{S}-ft*-{a!r}", ft_id=f"{S}-ft")
                for a in t.alpha_grid}
        for name, tau in [(f"tau-{T}-ft", tau_T)] + [(f"tau-{S}-star-a{a!r}", v)
                                                       for a, v in taus.items()]:
            rel = f"vectors/{name}.sevx"
            if ws.lookup(name, _key(tau.provenance, tau.layout_fingerprint)) is None:
                save_task_vector(ws.path(rel), tau)
                write_sidecar(ws.path(f"vectors/{name}.ini"),
                              {"provenance": {"base_id": tau.base_id,
                                              "finetuned_id": tau.finetuned_id,
                                              "delta": tau.delta,
                                              "layout_fingerprint": tau.layout_fingerprint}})
                ws.record(name, rel, _key(tau.provenance, tau.layout_fingerprint))

    with Stage(ws, "evaluate"):
        reference = evaluate_model(ctx, ft_T, T, f"{T}-ft")
        outcomes = []
        for a in t.alpha_grid:
            for l2 in t.lambda2_grid:
                theta = transfer(base, tau_T, taus[a], TransferConfig(t.lambda1, l2))
                rep = evaluate_model(ctx, theta, T, f"{S}->{T} a={a!r} l2={l2!r}")
                c, se, iou = _per_sample(theta, head_T, eval_set, ctx)
                outcomes.append(GridOutcome(a, l2, rep, theta.content_fingerprint, c, se, iou))
        selected = select_point(outcomes, reference, t.min_accuracy)
        oracle_reports = {a: evaluate_model(ctx, th, T, f"{T}-ft* a={a!r}")
                          for a, th in oracle_stars.items()}

    sel_theta = transfer(base, tau_T, taus[selected.alpha],
                         TransferConfig(t.lambda1, selected.lambda2))
    rel = f"{rdir}/transferred-selected.sevx"
    save_checkpoint(ws.path(rel), sel_theta, head_T)
    ws.record(f"{S}-{T}-transferred-selected", rel,
              _key(S, T, selected.alpha, selected.lambda2), fingerprint=selected.fingerprint)

    cos_ft = cosine_similarity(tau_S, tau_T)
    cos_star = {}
    for a, th in oracle_stars.items():
        tau_TS = explainability_vector(th, ft_T, star_id=f"{T}-ft*-{a!r}", ft_id=f"{T}-ft")
        cos_star[a] = cosine_similarity(taus[a], tau_TS)

    result = PipelineResult(S, T, reference, outcomes, selected, oracle_reports, cos_ft,
                            cos_star, ws.out)
    _write_results(ctx, result, rdir)
    grid = {f"alpha {o.alpha!r} lambda2 {o.lambda2!r}": o.fingerprint for o in outcomes}
    ws.save({f"grid:{S}-{T}": grid,
             f"selection:{S}-{T}": {"rule": SELECTION_RULE.format(min_acc=t.min_accuracy),
                                    "alpha": repr(selected.alpha),
                                    "lambda2": repr(selected.lambda2)}})
    return result


def _write_results(ctx: Context, res: PipelineResult, rdir: str) -> None:
    ws = ctx.ws
    raw_rows = [report_row(res.reference, role="ft", alpha="", lambda2="")]
    norm_rows = [report_row(normalize(res.reference, res.reference), role="ft", alpha="", lambda2="")]
    for o in res.outcomes:
        raw_rows.append(report_row(o.report, role="transferred", alpha=o.alpha, lambda2=o.lambda2))
        norm_rows.append(report_row(res.normalized(o), role="transferred", alpha=o.alpha,
                                    lambda2=o.lambda2))
    for a, rep in res.oracle.items():
        raw_rows.append(report_row(rep, role="oracle-ft*", alpha=a, lambda2=""))
        norm_rows.append(report_row(normalize(rep, res.reference), role="oracle-ft*", alpha=a,
                                    lambda2=""))
    cols = ("role", "alpha", "lambda2") + REPORT_COLUMNS
    (ws.path(rdir)).mkdir(parents=True, exist_ok=True)
    ws.path(f"{rdir}/metrics.csv").write_text(write_csv(raw_rows, cols))
    ws.path(f"{rdir}/normalized.csv").write_text(write_csv(norm_rows, cols))
    ws.path(f"{rdir}/sweep.tsv").write_text(sweep_table(res))
    sel = res.normalized(res.selected)
    write_sidecar(ws.path(f"{rdir}/selected.ini"), {
        "selection": {"rule": SELECTION_RULE.format(min_acc=ctx.cfg.transfer.min_accuracy),
                      "source": res.source, "target": res.target,
                      "alpha": repr(res.selected.alpha), "lambda2": repr(res.selected.lambda2)},
        "normalized": {m: repr(getattr(sel, m)) for m in METRICS},
        "raw": {m: repr(getattr(res.selected.report, m)) for m in METRICS},
        "reference": {m: repr(getattr(res.reference, m)) for m in METRICS},
    })


SWEEP_COLUMNS = ("alpha", "lambda2", "accuracy", "accuracy_lo", "accuracy_hi",
                 "e_rmse", "e_rmse_lo", "e_rmse_hi", "iou_at_10", "iou_at_10_lo", "iou_at_10_hi")


def sweep_table(res: PipelineResult) -> str:
    """Normalized accuracy, E-RMSE and IoU@10 per grid point with 95% intervals over samples."""
    ref = res.reference
    rows = []
    for o in res.outcomes:
        acc = [v / ref.accuracy for v in mean_interval(o.correct)]
        se = mean_interval(o.sq_err)
        er = [math.sqrt(max(v, 0.0)) / ref.e_rmse for v in se]
        iou = ([v / ref.iou_at_10 for v in mean_interval(o.iou10)] if ref.iou_at_10 > 0
               else [float("nan")] * 3)
        rows.append(dict(zip(SWEEP_COLUMNS, (o.alpha, o.lambda2, *acc, *er, *iou))))
    return write_csv(rows, SWEEP_COLUMNS, sep="\t")


def run_sweep(cfg: ExperimentConfig, out) -> str:
    """Rebuild the sweep table from pipeline artifacts without training."""
    ws = Workspace(out, resume=True)
    for name in ("base", f"{cfg.source}-ft", f"{cfg.target}-ft", f"{cfg.target}-test-explained"):
        ws.require(name)
    for a in cfg.transfer.alpha_grid:
        ws.require(f"{cfg.source}-ftstar-a{a!r}")
    before = len(ws.built)
    res = run_pipeline(cfg, out, resume=True, ctx=Context(cfg, ws))
    if len(ws.built) != before:
        raise MissingArtifactError("sweep needed to train models: run the pipeline first")
    return sweep_table(res)


# studies ----------------------------------------------------------------------------

PAIR_COLUMNS = ("source", "target", "related", "degenerate", "low_accuracy", "alpha", "lambda2",
                "accuracy", "e_rmse", "iou_at_1", "iou_at_10", "infidelity", "cos_ft", "cos_star",
                "best_alpha", "best_lambda2", "best_accuracy", "best_e_rmse")


@dataclass
class PairStudy:
    rows: list[dict]
    correlations: dict[str, object]
    related_mean: float
    unrelated_mean: float
    failures: dict[str, str]
    alpha: float
    lambda2: float


def similarity_study(rows: Sequence[dict]) -> dict[str, object]:
    """Pearson correlations over the non-degenerate pair rows."""
    use = [r for r in rows if not r["degenerate"]]
    cf = [r["cos_ft"] for r in use]
    cs = [r["cos_star"] for r in use]
    er = [r["e_rmse"] for r in use]
    out = {}
    for name, (x, y) in {"cos_ft~cos_star": (cf, cs), "cos_star~e_rmse": (cs, er),
                         "cos_ft~e_rmse": (cf, er)}.items():
        try:
            out[name] = pearson(x, y)
        except (ValueError, UndefinedMetricError) as exc:
            log.warning("correlation %s undefined: %s", name, exc)
            out[name] = None
    return out


def run_pair_study(cfg: ExperimentConfig, out, resume: bool = True,
                   include_self: bool = True) -> PairStudy:
    """Every ordered pair of domains, evaluated at one grid point.

    The point is the one the pipeline selects for the config's own
    (source, target) pair; each row also carries that pair's own best point.
    """
    names = sorted(cfg.domains)
    if len(names) < 3:
        raise ValueError("pair study needs at least 3 domains")
    ws = Workspace(out, resume)
    ctx = Context(cfg, ws)
    anchor = run_pipeline(cfg, out, ctx=ctx, oracle=True, pair_dir=f"pairs/{cfg.source}-{cfg.target}")
    a_star, l_star = anchor.selected.alpha, anchor.selected.lambda2
    rows, failures = [], {}
    pairs = list(itertools.permutations(names, 2))
    if include_self:
        pairs += [(n, n) for n in names]
    pairs.sort()
    for s, t in pairs:
        pair_cfg = cfg.with_pair(s, t)
        ctx.cfg = pair_cfg
        try:
            res = run_pipeline(pair_cfg, out, ctx=ctx, oracle=True, pair_dir=f"pairs/{s}-{t}")
        except StageError as exc:
            log.error("pair %s->%s failed: %s", s, t, exc)
            failures[f"{s}-{t}"] = str(exc)
            continue
        fixed = next(o for o in res.outcomes if o.alpha == a_star and o.lambda2 == l_star)
        n = res.normalized(fixed)
        best = res.normalized(res.selected)
        rows.append({"source": s, "target": t,
                     "related": cfg.domains[s].spec.family == cfg.domains[t].spec.family,
                     "degenerate": s == t, "low_accuracy": n.accuracy < 0.5,
                     "alpha": a_star, "lambda2": l_star,
                     **{m: getattr(n, m) for m in METRICS},
                     "cos_ft": res.cos_ft, "cos_star": res.cos_star[a_star],
                     "best_alpha": res.selected.alpha, "best_lambda2": res.selected.lambda2,
                     "best_accuracy": best.accuracy, "best_e_rmse": best.e_rmse})
    ctx.cfg = cfg
    corr = similarity_study(rows)
    rel = [r["e_rmse"] for r in rows if r["related"] and not r["degenerate"]]
    unrel = [r["e_rmse"] for r in rows if not r["related"]]
    study = PairStudy(rows, corr, float(np.mean(rel)) if rel else float("nan"),
                      float(np.mean(unrel)) if unrel else float("nan"), failures, a_star, l_star)
    _write_study(ws, study)
    return study


def _write_study(ws: Workspace, study: PairStudy) -> None:
    ws.path("study").mkdir(parents=True, exist_ok=True)
    ws.path("study/pairs.csv").write_text(write_csv(study.rows, PAIR_COLUMNS))
    crow = []
    for name, r in study.correlations.items():
        crow.append({"pair": name, "r": r.r if r else float("nan"),
                     "p": r.p if r else float("nan"), "n": r.n if r else 0})
    ws.path("study/correlations.csv").write_text(write_csv(crow, ("pair", "r", "p", "n")))
    write_sidecar(ws.path("study/summary.ini"), {
        "grid_point": {"alpha": repr(study.alpha), "lambda2": repr(study.lambda2)},
        "relatedness": {"related_mean_e_rmse": repr(study.related_mean),
                        "unrelated_mean_e_rmse": repr(study.unrelated_mean)},
        "failures": study.failures or {"none": "0"},
    })
    ws.save()


@dataclass
class BudgetComparison:
    rows: list[tuple[int, float, float, float, int]]
    model_iou: float
    crossover: int | None


def run_compare_shap(cfg: ExperimentConfig, out, resume: bool = True) -> BudgetComparison:
    """Kernel SHAP IoU@10 against the budget, next to the transferred model's single pass."""
    from .shapley import budget_curve
    ws = Workspace(out, resume)
    ctx = Context(cfg, ws)
    S, T = cfg.source, cfg.target
    theta, _ = load_checkpoint(ws.require(f"{S}-{T}-transferred-selected"))
    ft_T = stage_ft(ctx, T)
    ds = stage_target_eval_set(ctx, T)
    ds = replace(ds, images=ds.images[:cfg.compare.images])
    head = ctx.head(T)
    baseline = baseline_for(ctx, T)
    phi, _ = ds.phi_matrix()
    y = ds.labels()
    k = min(10, cfg.model.num_patches)
    out_m = forward(theta, head, ds.pixels(), cfg.model)
    model_iou = float(np.mean([iou_at_k(out_m.attributions[i, :, y[i]], phi[i], k)
                               for i in range(len(y))]))

    def estimate(P, i):
        im = ds.images[i]
        seed = derive_seed(cfg.seed, "compare", P, im.id) % 2 ** 31
        return kernel_shap(ft_T, head, im.pixels, im.label, baseline, cfg.model,
                           ShapConfig(P=P, baseline=cfg.explain.baseline, seed=seed))

    import warnings
    with Stage(ws, "compare-shap"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rows = budget_curve(estimate, list(phi), cfg.compare.budgets,
                            lambda a, b: iou_at_k(a, b, k))
    crossover = next((P for P, m, *_ in rows if m >= model_iou), None)
    table = [{"P": P, "kernel_iou_at_10": m, "lo": lo, "hi": hi, "n": n, "model_iou_at_10": model_iou}
             for P, m, lo, hi, n in rows]
    ws.path("results").mkdir(parents=True, exist_ok=True)
    ws.path("results/compare_shap.csv").write_text(
        write_csv(table, ("P", "kernel_iou_at_10", "lo", "hi", "n", "model_iou_at_10")))
    write_sidecar(ws.path("results/compare_shap.ini"),
                  {"crossover": {"budget": str(crossover) if crossover is not None else "none",
                                 "model_iou_at_10": repr(model_iou)}})
    ws.save()
    return BudgetComparison(rows, model_iou, crossover)


def inversions(means: Sequence[float]) -> int:
    return int(sum(1 for a, b in zip(means, means[1:]) if b < a))
