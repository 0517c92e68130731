"""Reproducible experiment pipelines.

Each pipeline takes a resolved :class:`ExperimentSpec`, trains the models it
needs (optionally on a bounded process pool), runs the identifiability
analyses and writes CSV tables plus a JSON report into an output directory.
Every CSV gets a ``.json`` sidecar holding the full resolved spec, and the
JSON report embeds it too.

Experiments
-----------
simulation
    teacher/student radial classification; CCA between students over training
    plus the diversity check and all three recovery routes at convergence.
contrastive_sweep_data, contrastive_sweep_width
    top/bottom patch contrast; converged CCA of f and g over 5 model pairs per
    axis value.
layerwise
    next-token MLPs; SVCCA per hidden layer averaged over all model pairs.
nplm_fig1
    two 2-D log-bilinear language models aligned by a least-squares map.
"""

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import svgplot
from .analysis import (
    InsufficientTargetsError,
    cca,
    context_recover,
    diversity_check_f,
    fit_linear_map,
    mean_pairwise_svcca,
    theorem1_recover,
    write_json_report,
)
from .data import (
    AugmentConfig,
    LabeledDataset,
    PatchGeometry,
    load_cifar10,
    markov_corpus,
    patch_pairs,
    radial_gaussian,
    synthetic_images,
    teacher_relabel,
    teacher_sample,
    temper_teacher,
    write_table,
)
from .linalg import LinAlgFailure, random_invertible
from .model import (
    EmbeddingTable,
    LogBilinearArch,
    MlpArch,
    apply_linear_transform,
    encode_f,
    encode_g,
    init_model,
)
from .train import TrainConfig, build_candidates, train

EXPERIMENTS = (
    "simulation",
    "contrastive_sweep_data",
    "contrastive_sweep_width",
    "layerwise",
    "nplm_fig1",
)

_SWEEP_PARAMS = {
    "images": "synthetic",  # or a path to a CIFAR-10 binary batch file
    "n_train": 8000,
    "n_eval": 2000,
    "fractions": [0.125, 0.25, 0.5, 1.0],
    "widths": [32, 128, 512],
    "width": 128,
    "depth": 2,
    "repr_dim": 8,
    "activation": "relu",
    "patch_height": 8,
    "patch_width": 14,
    "augment": True,
    "identical_seeds": False,
}
_SWEEP_TRAIN = {
    "task": "contrastive", "learning_rate": 3e-4, "max_iters": 1500, "batch_size": 128,
    "eval_interval": 100, "early_stop_patience": 5, "keep_checkpoints": False,
}

DEFAULT_PARAMS = {
    "simulation": {
        "n": 50000,
        "n_classes": 18,
        "sigma": 3.0,
        "noise_dims": 20,
        "hidden": [64, 64],
        "repr_dim": 2,
        "activation": "tanh",
        "label_mode": "sample",  # or "argmax"
        "logit_scale": 8.0,
        "teacher_learning_rate": 1e-3,
        "teacher_iters": 5000,
        "teacher_batch_size": 256,
        "n_eval": 5000,
        "identical_seeds": False,
    },
    "contrastive_sweep_data": dict(_SWEEP_PARAMS),
    "contrastive_sweep_width": dict(_SWEEP_PARAMS),
    "layerwise": {
        "vocab": 64,
        "context": 1,
        "rank": 16,
        "temperature": 0.5,
        "corpus_length": 100000,
        "hidden": [64, 64, 64],
        "repr_dim": 16,
        "activation": "relu",
        "ks": [4, 8, 16],
        "n_eval": 3000,
        "identical_seeds": False,
    },
    "nplm_fig1": {
        "vocab": 32,
        "context": 2,
        "rank": 2,
        "temperature": 0.5,
        "corpus_length": 50000,
        "repr_dim": 2,
        "n_eval": 2000,
        "identical_seeds": False,
    },
}

DEFAULT_TRAIN = {
    "simulation": {"task": "supervised", "learning_rate": 3e-4, "max_iters": 20000,
                   "batch_size": 256, "eval_interval": 500, "early_stop_patience": 10},
    "contrastive_sweep_data": dict(_SWEEP_TRAIN),
    "contrastive_sweep_width": dict(_SWEEP_TRAIN),
    "layerwise": {"task": "next_token", "learning_rate": 1e-3, "max_iters": 10000,
                  "batch_size": 128, "eval_interval": 250, "early_stop_patience": 5,
                  "keep_checkpoints": False},
    "nplm_fig1": {"task": "next_token", "learning_rate": 1e-2, "max_iters": 10000,
                  "batch_size": 128, "eval_interval": 250, "early_stop_patience": 5,
                  "keep_checkpoints": False},
}

DEFAULT_REPLICATES = {
    "simulation": 2,
    "contrastive_sweep_data": 5,  # model pairs per axis value
    "contrastive_sweep_width": 5,
    "layerwise": 4,
    "nplm_fig1": 2,
}

# Reference-scale settings this package shrinks to run in minutes on a CPU.
DESK_SCALE = {
    "simulation": [
        {"quantity": "student iterations", "reference": 50000, "used": "train.max_iters"},
    ],
    "contrastive_sweep_data": [
        {"quantity": "batch size", "reference": 256, "used": "train.batch_size"},
        {"quantity": "hidden width", "reference": 256, "used": "params.width"},
        {"quantity": "output dimension", "reference": 64, "used": "params.repr_dim"},
        {"quantity": "training images", "reference": 50000, "used": "params.n_train"},
    ],
    "contrastive_sweep_width": [
        {"quantity": "batch size", "reference": 256, "used": "train.batch_size"},
        {"quantity": "width ceiling", "reference": 8192, "used": "params.widths"},
        {"quantity": "output dimension", "reference": 64, "used": "params.repr_dim"},
        {"quantity": "training images", "reference": 50000, "used": "params.n_train"},
    ],
    "layerwise": [
        {"quantity": "SVCCA k list", "reference": [16, 64, 256, 768], "used": "params.ks"},
        {"quantity": "model", "reference": "pretrained 12-layer transformer",
         "used": "params.hidden"},
    ],
    "nplm_fig1": [
        {"quantity": "corpus", "reference": "one-billion-word benchmark",
         "used": "params.corpus_length"},
    ],
}

TASK_OF = {"simulation": "supervised", "contrastive_sweep_data": "contrastive",
           "contrastive_sweep_width": "contrastive", "layerwise": "next_token",
           "nplm_fig1": "next_token"}

_TOP_LEVEL = {"experiment", "seed", "replicates", "train", "params", "svg"}


class InvalidSpecError(ValueError):
    """The experiment spec is malformed or inconsistent."""


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    seed: int = 0
    replicates: int = 2
    train: dict = field(default_factory=dict)  # full TrainConfig fields
    params: dict = field(default_factory=dict)
    svg: bool = False

    @property
    def train_config(self):
        return TrainConfig.from_dict(self.train)

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "replicates": self.replicates,
            "train": dict(self.train),
            "params": dict(self.params),
            "svg": self.svg,
            "desk_scale": DESK_SCALE[self.experiment],
        }


def _check_type(name, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and len(value) > 0
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise InvalidSpecError(f"params.{name}: expected {type(default).__name__}, got {value!r}")
    return value


def resolve_spec(raw, seed=None):
    """Validate a spec mapping and expand every default.

    `seed` (if given) overrides the spec's own seed.
    """
    if not isinstance(raw, dict):
        raise InvalidSpecError("spec must be a JSON object")
    unknown = set(raw) - _TOP_LEVEL
    if unknown:
        raise InvalidSpecError(f"unknown spec fields: {sorted(unknown)}")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise InvalidSpecError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")

    params = dict(DEFAULT_PARAMS[exp])
    user_params = raw.get("params", {})
    if not isinstance(user_params, dict):
        raise InvalidSpecError("params must be an object")
    for k, v in user_params.items():
        if k not in params:
            raise InvalidSpecError(f"unknown params field for {exp}: {k!r}")
        params[k] = _check_type(k, params[k], v)

    train_fields = dict(DEFAULT_TRAIN[exp])
    user_train = raw.get("train", {})
    if not isinstance(user_train, dict):
        raise InvalidSpecError("train must be an object")
    train_fields.update(user_train)
    if train_fields.get("task") != TASK_OF[exp]:
        raise InvalidSpecError(f"{exp} trains with task {TASK_OF[exp]!r}")
    try:
        config = TrainConfig.from_dict(train_fields)
    except (TypeError, ValueError) as exc:
        raise InvalidSpecError(f"train: {exc}") from exc

    replicates = raw.get("replicates", DEFAULT_REPLICATES[exp])
    if not isinstance(replicates, int) or isinstance(replicates, bool) or replicates < 2:
        raise InvalidSpecError("replicates must be an integer >= 2")
    seed = raw.get("seed", 0) if seed is None else seed
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise InvalidSpecError("seed must be an unsigned 64-bit integer")
    svg = raw.get("svg", False)
    if not isinstance(svg, bool):
        raise InvalidSpecError("svg must be true or false")

    spec = ExperimentSpec(exp, seed, replicates, config.to_dict(), params, svg)
    _validate_params(spec)
    return spec


def _validate_params(spec):
    p, exp = spec.params, spec.experiment
    if exp == "simulation":
        if p["label_mode"] not in ("sample", "argmax"):
            raise InvalidSpecError("params.label_mode must be 'sample' or 'argmax'")
        if p["n_classes"] < 2 or p["n"] < p["n_classes"] or p["n_eval"] <= p["repr_dim"]:
            raise InvalidSpecError("need n_classes >= 2, n >= n_classes and n_eval > repr_dim")
    elif exp.startswith("contrastive"):
        if not all(0 < f <= 1 for f in p["fractions"]):
            raise InvalidSpecError("params.fractions must lie in (0, 1]")
        if min(p["widths"]) < 1 or p["width"] < 1 or p["depth"] < 1:
            raise InvalidSpecError("widths and depth must be positive")
        if p["n_eval"] <= p["repr_dim"]:
            raise InvalidSpecError("params.n_eval must exceed repr_dim")
    elif exp == "layerwise":
        bound = min(min(p["hidden"]), p["repr_dim"])
        if not all(isinstance(k, int) and 1 <= k <= bound for k in p["ks"]):
            raise InvalidSpecError(f"params.ks must be integers in [1, {bound}]")
        if p["n_eval"] <= max(p["hidden"] + [p["repr_dim"]]):
            raise InvalidSpecError("params.n_eval must exceed every layer width")
    if p.get("activation", "relu") not in ("relu", "tanh"):
        raise InvalidSpecError("params.activation must be 'relu' or 'tanh'")


def load_spec(path, seed=None):
    """Read and resolve a JSON spec file."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidSpecError(f"cannot read spec {path}: {exc}") from exc
    return resolve_spec(raw, seed)


def derive_seed(seed, *path):
    """Independent integer seed for a labelled sub-stream of `seed`."""
    words = np.random.SeedSequence(seed, spawn_key=path).generate_state(2, np.uint32)
    return int(words[0]) << 32 | int(words[1])


# ---------------------------------------------------------------------------
# Execution helpers
# ---------------------------------------------------------------------------


def _train_job(job):
    f, g, init_seed, dataset, config = job
    return train(init_model(f, g, init_seed), dataset, config)


def run_pool(fn, jobs, workers=1):
    """Map `fn` over `jobs` in order, on up to `workers` processes."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _member_seed(spec, *path):
    return derive_seed(spec.seed, *path)


def _pairs(n):
    return list(itertools.combinations(range(n), 2))


def _mean_cca(reprs):
    return float(np.mean([cca(reprs[i], reprs[j]).mean_rho for i, j in _pairs(len(reprs))]))


def _write(out, name, header, rows, spec):
    write_table(out / name, header, rows, {"spec": spec.to_dict(), "columns": header})


def _std_err(values):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def _spearman(x, y):
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    rho = spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else float("nan")


def _try(fn):
    """Run an analysis step; failures become part of the report, not crashes."""
    try:
        return fn().to_dict()
    except (LinAlgFailure, ValueError) as exc:
        return {"error": type(exc).__name__, "message": str(exc)}


# ---------------------------------------------------------------------------
# Simulation study
# ---------------------------------------------------------------------------


def run_simulation(spec, out, jobs=1):
    """Teacher/student radial classification with identifiability analyses.

    Writes ``simulation_trajectory.csv`` (mean pairwise student CCA at every
    common checkpoint), ``simulation_summary.csv`` and
    ``simulation_report.json``. Returns the report dict.
    """
    p, out = spec.params, Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = radial_gaussian(p["n"], p["n_classes"], p["sigma"], p["noise_dims"],
                           seed=_member_seed(spec, 1))
    f = MlpArch((2 + p["noise_dims"], *p["hidden"], p["repr_dim"]), p["activation"])
    g = EmbeddingTable(p["n_classes"], p["repr_dim"])
    config = spec.train_config

    teacher_config = TrainConfig(
        learning_rate=p["teacher_learning_rate"], max_iters=p["teacher_iters"],
        batch_size=p["teacher_batch_size"], eval_interval=config.eval_interval,
        early_stop_patience=config.early_stop_patience, seed=_member_seed(spec, 2),
        keep_checkpoints=False,
    )
    teacher, _ = _train_job((f, g, _member_seed(spec, 2), base, teacher_config))
    if p["label_mode"] == "argmax":
        labels = teacher_relabel(teacher, base.inputs)
    else:
        teacher = temper_teacher(teacher, base.inputs, p["logit_scale"])
        labels = teacher_sample(teacher, base.inputs, seed=_member_seed(spec, 3))
    dataset = LabeledDataset(base.inputs, labels, p["n_classes"], p["noise_dims"])

    member = [0 if p["identical_seeds"] else r for r in range(spec.replicates)]
    runs = run_pool(_train_job, [
        (f, g, _member_seed(spec, 10, m), dataset,
         TrainConfig.from_dict({**spec.train, "seed": _member_seed(spec, 10, m)}))
        for m in member
    ], jobs)
    students = [m for m, _ in runs]
    traces = [t for _, t in runs]

    eval_set = radial_gaussian(p["n_eval"], p["n_classes"], p["sigma"], p["noise_dims"],
                               seed=_member_seed(spec, 4))
    X = eval_set.inputs
    common = sorted(set.intersection(*(set(t.checkpoints) for t in traces)))
    rows = []
    for it in common:
        reprs = [encode_f(t.checkpoints[it], X) for t in traces]
        losses = [t.val_loss[t.iterations.index(it)] for t in traces]
        rows.append([it, _mean_cca(reprs), float(np.mean(losses))])
    _write(out, "simulation_trajectory.csv", ["iteration", "mean_cca", "mean_val_loss"], rows, spec)

    final_reprs = [encode_f(m, X) for m in students]
    final_cca = _mean_cca(final_reprs)
    batch = build_candidates("supervised", (X, teacher_relabel(teacher, X)), p["n_classes"])
    report = {
        "spec": spec.to_dict(),
        "final_mean_cca": final_cca,
        "final_iterations": [t.best_iteration for t in traces],
        "stopped_early": [t.stopped_early for t in traces],
        "teacher_student_cca": [cca(encode_f(teacher, X), r).mean_rho for r in final_reprs],
        "label_agreement_with_prelabels": float(np.mean(labels == base.labels)),
    }
    try:
        div = diversity_check_f(students[0], batch, seed=_member_seed(spec, 5))
        report["diversity"] = div.to_dict()
        report["diversity_verdict"] = "satisfied" if div.satisfied else "not_satisfied"
    except InsufficientTargetsError as exc:
        report["diversity"] = {"error": type(exc).__name__, "message": str(exc)}
        report["diversity_verdict"] = "insufficient_targets"

    if report["diversity_verdict"] == "insufficient_targets":
        skipped = {"skipped": "diversity condition violated: K < M + 1"}
        report.update(theorem1=skipped, context=skipped)
    else:
        report["theorem1"] = _try(lambda: theorem1_recover(
            students[1], students[0], batch, eval_inputs=X, seed=_member_seed(spec, 6)))
        report["context"] = _try(lambda: context_recover(
            students[1], students[0], batch, seed=_member_seed(spec, 7), tol=None))
    report["linear_fit"] = _try(lambda: fit_linear_map(final_reprs[0], final_reprs[1]))

    summary = [
        ["final_mean_cca", final_cca],
        ["last_checkpoint_mean_cca", rows[-1][1] if rows else float("nan")],
        ["diversity_verdict", report["diversity_verdict"]],
        ["theorem1_residual", report["theorem1"].get("residual", float("nan"))],
        ["context_residual", report["context"].get("residual", float("nan"))],
        ["linear_fit_residual", report["linear_fit"].get("residual", float("nan"))],
    ]
    _write(out, "simulation_summary.csv", ["metric", "value"], summary, spec)
    write_json_report(out / "simulation_report.json", report)
    if spec.svg and rows:
        svgplot.line_plot(out / "simulation_trajectory.svg", [r[0] for r in rows],
                          {"mean CCA": [r[1] for r in rows]},
                          "Student CCA over training", "iteration", "mean CCA")
    return report


# ---------------------------------------------------------------------------
# Contrastive sweeps
# ---------------------------------------------------------------------------


def _patch_data(spec):
    p = spec.params
    geometry = PatchGeometry(p["patch_height"], p["patch_width"])
    augment = AugmentConfig(enabled=p["augment"])
    if p["images"] == "synthetic":
        train_images = synthetic_images(p["n_train"], seed=_member_seed(spec, 1))
        eval_images = synthetic_images(p["n_eval"], seed=_member_seed(spec, 2))
    else:
        images, _ = load_cifar10(p["images"])
        if len(images) < p["n_train"] + p["n_eval"]:
            raise ValueError(
                f"{p['images']} holds {len(images)} images; need {p['n_train'] + p['n_eval']}"
            )
        train_images = images[:p["n_train"]]
        eval_images = images[p["n_train"]:p["n_train"] + p["n_eval"]]
    train_pairs = patch_pairs(train_images, geometry, augment, seed=_member_seed(spec, 3))
    eval_pairs = patch_pairs(eval_images, geometry, augment, seed=_member_seed(spec, 4))
    return train_pairs, eval_pairs


def run_contrastive_sweep(spec, out, jobs=1):
    """Converged CCA of f and g over 5 model pairs per axis value.

    The axis is ``data_size`` (fractions of the training pairs) for
    ``contrastive_sweep_data`` and ``width`` (hidden units) for
    ``contrastive_sweep_width``. Writes ``<experiment>_pairs.csv`` and
    ``<experiment>_summary.csv`` (mean, standard error and median per point)
    and ``<experiment>_report.json`` with Spearman correlations of the
    per-point medians against the axis.
    """
    p, out, exp = spec.params, Path(out), spec.experiment
    out.mkdir(parents=True, exist_ok=True)
    axis = "data_size" if exp == "contrastive_sweep_data" else "width"
    train_pairs, eval_pairs = _patch_data(spec)
    d = train_pairs.top.shape[1]

    if axis == "data_size":
        values = [max(2, int(round(fr * len(train_pairs)))) for fr in p["fractions"]]
    else:
        values = list(p["widths"])
    pairs = spec.replicates
    jobs_list, keys = [], []
    for v in values:
        width = p["width"] if axis == "data_size" else v
        data = train_pairs.subset(np.arange(v)) if axis == "data_size" else train_pairs
        arch = MlpArch((d, *[width] * p["depth"], p["repr_dim"]), p["activation"])
        for pair in range(pairs):
            for side in range(2):
                member = 0 if p["identical_seeds"] else 2 * pair + side
                s = _member_seed(spec, 10, member)
                cfg = TrainConfig.from_dict({**spec.train, "seed": s})
                jobs_list.append((arch, arch, s, data, cfg))
                keys.append((v, pair, side))
    runs = run_pool(_train_job, jobs_list, jobs)
    models = {k: m for k, (m, _) in zip(keys, runs)}

    pair_rows, summary_rows = [], []
    medians_f, medians_g = [], []
    for v in values:
        rf, rg = [], []
        for pair in range(pairs):
            a, b = models[(v, pair, 0)], models[(v, pair, 1)]
            rf.append(cca(encode_f(a, eval_pairs.top), encode_f(b, eval_pairs.top)).mean_rho)
            rg.append(cca(encode_g(a, eval_pairs.bottom), encode_g(b, eval_pairs.bottom)).mean_rho)
            pair_rows.append([v, pair, rf[-1], rg[-1]])
        medians_f.append(float(np.median(rf)))
        medians_g.append(float(np.median(rg)))
        summary_rows.append([v, pairs, float(np.mean(rf)), _std_err(rf), medians_f[-1],
                             float(np.mean(rg)), _std_err(rg), medians_g[-1]])

    _write(out, f"{exp}_pairs.csv", [axis, "pair", "cca_f", "cca_g"], pair_rows, spec)
    _write(out, f"{exp}_summary.csv",
           [axis, "pairs", "mean_f", "se_f", "median_f", "mean_g", "se_g", "median_g"],
           summary_rows, spec)
    report = {
        "spec": spec.to_dict(),
        "axis": axis,
        "values": values,
        "median_f": medians_f,
        "median_g": medians_g,
        "spearman_f": _spearman(values, medians_f),
        "spearman_g": _spearman(values, medians_g),
    }
    write_json_report(out / f"{exp}_report.json", report)
    if spec.svg:
        svgplot.line_plot(out / f"{exp}.svg", values,
                          {"f (median)": medians_f, "g (median)": medians_g},
                          f"Converged CCA vs {axis}", axis, "mean CCA")
    return report


# ---------------------------------------------------------------------------
# Layerwise comparison
# ---------------------------------------------------------------------------


def run_layerwise(spec, out, jobs=1):
    """SVCCA per layer of independently trained next-token MLPs.

    Writes ``layerwise.csv`` with one row per (layer, k): the mean ρ over all
    model pairs and its standard error, and ``layerwise_report.json`` with
    whether the output layer beats every hidden layer at each k.
    """
    p, out = spec.params, Path(out)
    out.mkdir(parents=True, exist_ok=True)
    corpus_seed = _member_seed(spec, 1)
    corpus = markov_corpus(p["vocab"], p["corpus_length"], p["temperature"], corpus_seed,
                           p["context"], p["rank"])
    held_out = markov_corpus(p["vocab"], p["n_eval"] + p["context"], p["temperature"],
                             corpus_seed, p["context"], p["rank"], rollout_seed=1)
    contexts, _ = held_out.examples()
    f = MlpArch((p["context"] * p["vocab"], *p["hidden"], p["repr_dim"]), p["activation"],
                token_vocab=p["vocab"])
    g = EmbeddingTable(p["vocab"], p["repr_dim"])
    member = [0 if p["identical_seeds"] else r for r in range(spec.replicates)]
    runs = run_pool(_train_job, [
        (f, g, _member_seed(spec, 10, m), corpus,
         TrainConfig.from_dict({**spec.train, "seed": _member_seed(spec, 10, m)}))
        for m in member
    ], jobs)
    captured = [encode_f(m, contexts, capture_layers=True)[1] for m, _ in runs]
    names = [f"hidden{i + 1}" for i in range(len(p["hidden"]))] + ["output"]

    rows, table = [], {}
    for li, name in enumerate(names):
        for k in p["ks"]:
            mean, vals = mean_pairwise_svcca([c[li] for c in captured], k)
            rows.append([name, k, mean, _std_err(vals), len(vals)])
            table[(name, k)] = mean
    _write(out, "layerwise.csv", ["layer", "k", "mean_rho", "se", "pairs"], rows, spec)
    ordering = {
        str(k): all(table[("output", k)] > table[(n, k)] for n in names[:-1]) for k in p["ks"]
    }
    report = {
        "spec": spec.to_dict(),
        "layers": names,
        "mean_rho": {f"{n}@{k}": v for (n, k), v in table.items()},
        "output_layer_highest": ordering,
        "pairs": len(_pairs(spec.replicates)),
        "final_val_loss": [min(t.val_loss) for _, t in runs],
    }
    write_json_report(out / "layerwise_report.json", report)
    if spec.svg:
        svgplot.line_plot(out / "layerwise.svg", list(range(1, len(names) + 1)),
                          {f"k={k}": [table[(n, k)] for n in names] for k in p["ks"]},
                          "Mean SVCCA by layer", "layer (last = output)", "mean rho")
    return report


# ---------------------------------------------------------------------------
# Log-bilinear alignment
# ---------------------------------------------------------------------------


def _alignment(X, Y):
    fit = fit_linear_map(X, Y)
    yn = np.linalg.norm(Y)
    pre = float(np.linalg.norm(X - Y) / yn) if yn > 0 else 0.0
    ratio = fit.residual / pre if pre > 0 else 0.0
    return fit, pre, ratio


def run_nplm_fig1(spec, out, jobs=1):
    """Two 2-D log-bilinear language models and the linear map between them.

    Writes ``nplm_fig1_embeddings.csv`` (per token: the target vectors of
    both models and the first model's vectors mapped onto the second),
    ``nplm_fig1_summary.csv`` (pre/post alignment discrepancies) and
    ``nplm_fig1_report.json``.

    Raises
    ------
    InsufficientTargetsError
        If the vocabulary offers fewer than M + 1 targets.
    """
    p, out = spec.params, Path(out)
    M = p["repr_dim"]
    if p["vocab"] < M + 1:
        raise InsufficientTargetsError(
            f"vocabulary of {p['vocab']} gives fewer than M + 1 = {M + 1} targets"
        )
    out.mkdir(parents=True, exist_ok=True)
    corpus_seed = _member_seed(spec, 1)
    corpus = markov_corpus(p["vocab"], p["corpus_length"], p["temperature"], corpus_seed,
                           p["context"], p["rank"])
    held_out = markov_corpus(p["vocab"], p["n_eval"] + p["context"], p["temperature"],
                             corpus_seed, p["context"], p["rank"], rollout_seed=1)
    contexts, _ = held_out.examples()
    f = LogBilinearArch(p["vocab"], p["context"], M)
    g = EmbeddingTable(p["vocab"], M)
    member = [0 if p["identical_seeds"] else r for r in range(spec.replicates)]
    runs = run_pool(_train_job, [
        (f, g, _member_seed(spec, 10, m), corpus,
         TrainConfig.from_dict({**spec.train, "seed": _member_seed(spec, 10, m)}))
        for m in member
    ], jobs)
    models = [m for m, _ in runs]
    tokens = np.arange(p["vocab"])
    G = [encode_g(m, tokens) for m in models]
    F = [encode_f(m, contexts) for m in models]

    summary, pairs_report = [], []
    for j in range(1, len(models)):
        entry = {"pair": [0, j]}
        for side, R in (("g", G), ("f", F)):
            fit, pre, ratio = _alignment(R[0], R[j])
            summary.append([f"0-{j}", side, pre, fit.residual, ratio])
            entry[side] = {"map": fit.map.tolist(), "pre_alignment": pre,
                           "post_alignment": fit.residual, "ratio": ratio}
        pairs_report.append(entry)
    fit = fit_linear_map(G[0], G[1])
    aligned = G[0] @ fit.map.T
    rows = [[t, *G[0][t], *G[1][t], *aligned[t]] for t in tokens]
    header = ["token"] + [f"{tag}_{i}" for tag in ("model_a", "model_b", "aligned") for i in range(M)]
    _write(out, "nplm_fig1_embeddings.csv", header, rows, spec)
    _write(out, "nplm_fig1_summary.csv",
           ["pair", "side", "pre_alignment", "post_alignment", "ratio"], summary, spec)
    report = {
        "spec": spec.to_dict(),
        "pairs": pairs_report,
        "ratio": pairs_report[0]["g"]["ratio"],
        "final_val_loss": [min(t.val_loss) for _, t in runs],
    }
    write_json_report(out / "nplm_fig1_report.json", report)
    if spec.svg and M == 2:
        svgplot.scatter_plot(out / "nplm_fig1.svg",
                             {"model A": G[0], "model B": G[1], "A aligned to B": aligned},
                             "Target embeddings before and after alignment", "dim 0", "dim 1")
    return report


# ---------------------------------------------------------------------------
# Exact-recovery oracle
# ---------------------------------------------------------------------------


def _rel_error(est, true):
    return float(np.linalg.norm(est - true) / np.linalg.norm(true))


def recovery_self_check(seed=0, M=3, n_labels=8, n=200):
    """Exact-recovery oracle on a random model and a known transform.

    Builds ``model' = apply_linear_transform(model*, A0, A0^{-T})`` and checks
    that both recovery routes and the least-squares fit return ``A0`` (and
    ``A0^{-T}`` for g). Returns a dict of errors and pass flags.
    """
    rng = np.random.default_rng(seed)
    star = init_model(MlpArch((5, 16, M), "tanh"), EmbeddingTable(n_labels, M),
                      derive_seed(seed, 1))
    A0 = random_invertible(rng, M)
    B0 = np.linalg.inv(A0).T
    prime = apply_linear_transform(star, A0, B0)
    X = rng.standard_normal((n, 5))
    batch = build_candidates("supervised", (X, rng.integers(0, n_labels, n)), n_labels)
    t1 = theorem1_recover(prime, star, batch)
    ctx = context_recover(prime, star, batch)
    fit = fit_linear_map(encode_f(star, X), encode_f(prime, X))
    result = {
        "theorem1_error": _rel_error(t1.map, A0),
        "theorem1_residual": t1.residual,
        "context_error": _rel_error(ctx.map, B0),
        "fit_vs_theorem1": _rel_error(fit.map, t1.map),
    }
    result["passed"] = (result["theorem1_error"] < 1e-6 and result["context_error"] < 1e-6
                        and result["fit_vs_theorem1"] < 1e-5)
    return result


RUNNERS = {
    "simulation": run_simulation,
    "contrastive_sweep_data": run_contrastive_sweep,
    "contrastive_sweep_width": run_contrastive_sweep,
    "layerwise": run_layerwise,
    "nplm_fig1": run_nplm_fig1,
}


def run_experiment(spec, out, jobs=1):
    """Dispatch on ``spec.experiment``; returns the report dict."""
    return RUNNERS[spec.experiment](spec, out, jobs)
