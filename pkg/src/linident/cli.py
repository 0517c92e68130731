"""Command-line entry point: ``linident <verb> [options]``.

Exit codes: 0 success, 1 experiment failure, 2 invalid spec or usage.
"""

import functools
import json
import sys
from pathlib import Path

import click

from . import analysis, data
from .experiments import (
    InvalidSpecError,
    derive_seed,
    recovery_self_check,
    resolve_spec,
    run_experiment,
)
from .model import (
    EmbeddingTable,
    arch_from_dict,
    encode_f,
    encode_g,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .train import TrainConfig, build_candidates, train

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2
GENERATORS = ("radial_gaussian", "markov_corpus", "patch_pairs")


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InvalidSpecError as exc:
            click.echo(f"invalid spec: {exc}", err=True)
            sys.exit(EXIT_INVALID)
        except (click.exceptions.Exit, click.ClickException):
            raise
        except Exception as exc:  # any pipeline failure maps to exit code 1
            click.echo(f"experiment failed: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_FAILURE)
    return wrapper


def _common(spec_required=False):
    def decorate(fn):
        fn = click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
                          help="Worker processes for independent training runs.")(fn)
        fn = click.option("--out", type=click.Path(file_okay=False), default="out",
                          show_default=True, help="Output directory.")(fn)
        fn = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None,
                          help="Master seed (overrides the spec).")(fn)
        fn = click.option("--spec", "spec_path", type=click.Path(dir_okay=False),
                          required=spec_required, help="JSON spec file.")(fn)
        return fn
    return decorate


def _read_json(path):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidSpecError(f"cannot read spec {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidSpecError("spec must be a JSON object")
    return raw


def _emit(report, keys):
    for k in keys:
        if k in report:
            click.echo(f"{k}: {report[k]}")


@click.group()
def main():
    """Train canonical-form models and measure linear identifiability."""


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _generate(generator, params, seed):
    p = dict(params)
    try:
        if generator == "radial_gaussian":
            return data.radial_gaussian(seed=seed, **p)
        if generator == "markov_corpus":
            return data.markov_corpus(seed=seed, **p)
        images = p.pop("images", "synthetic")
        n = p.pop("n", 1000)
        geometry = data.PatchGeometry(p.pop("patch_height", 8), p.pop("patch_width", 14))
        augment = data.AugmentConfig(enabled=p.pop("augment", True))
        if p:
            raise InvalidSpecError(f"unknown patch_pairs params: {sorted(p)}")
        if images == "synthetic":
            imgs = data.synthetic_images(n, seed=derive_seed(seed, 1))
        else:
            imgs = data.load_cifar10(images)[0][:n]
        return data.patch_pairs(imgs, geometry, augment, seed=derive_seed(seed, 2))
    except TypeError as exc:
        raise InvalidSpecError(f"bad {generator} params: {exc}") from exc


@main.command("gen-data")
@_common(spec_required=True)
@_handle_errors
def gen_data(spec_path, seed, out, jobs):
    """Generate a dataset; writes <generator>.csv and its .json sidecar.

    Spec: {"generator": "radial_gaussian" | "markov_corpus" | "patch_pairs",
    "params": {...}, "seed": int}.
    """
    raw = _read_json(spec_path)
    generator = raw.get("generator")
    if generator not in GENERATORS:
        raise InvalidSpecError(f"generator must be one of {GENERATORS}")
    params = raw.get("params", {})
    seed = raw.get("seed", 0) if seed is None else seed
    dataset = _generate(generator, params, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{generator}.csv"
    data.export_dataset(path, dataset, generator, params, seed)
    click.echo(f"wrote {path} ({len(dataset)} examples)")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_data(ref, seed):
    if isinstance(ref, str):
        return data.read_dataset(ref)[0]
    if isinstance(ref, dict) and ref.get("generator") in GENERATORS:
        return _generate(ref["generator"], ref.get("params", {}), ref.get("seed", seed))
    raise InvalidSpecError("data must be a dataset CSV path or a generator object")


@main.command("train")
@_common(spec_required=True)
@_handle_errors
def train_cmd(spec_path, seed, out, jobs):
    """Train one model; writes model.ckpt, trace.csv and requested checkpoints.

    Spec: {"data": path | generator object, "model": {"f": arch, "g": arch},
    "config": TrainConfig fields, "checkpoint_iters": [int, ...]}.
    """
    raw = _read_json(spec_path)
    unknown = set(raw) - {"data", "model", "config", "checkpoint_iters"}
    if unknown:
        raise InvalidSpecError(f"unknown train spec fields: {sorted(unknown)}")
    try:
        config = TrainConfig.from_dict(raw.get("config", {}))
        if seed is not None:
            config = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
        f = arch_from_dict(raw["model"]["f"])
        g = arch_from_dict(raw["model"]["g"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidSpecError(f"bad model or config: {exc}") from exc
    dataset = _load_data(raw.get("data"), config.seed)
    wanted = raw.get("checkpoint_iters")
    model, trace = train(init_model(f, g, config.seed), dataset, config, checkpoint_iters=wanted)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", model, config.seed, trace.best_iteration,
                    {"config": config.to_dict()})
    trace.write_csv(out / "trace.csv")
    if wanted:
        for it, snapshot in trace.checkpoints.items():
            save_checkpoint(out / f"ckpt_{it}.ckpt", snapshot, config.seed, it)
    click.echo(f"best iteration {trace.best_iteration}, "
               f"val loss {min(trace.val_loss):.6f}; wrote {out / 'model.ckpt'}")


# ---------------------------------------------------------------------------
# dump-repr / analyze
# ---------------------------------------------------------------------------


def _sides(dataset):
    """(f inputs, g targets, task) for an exported dataset."""
    if isinstance(dataset, data.LabeledDataset):
        return dataset.inputs, dataset.labels, "supervised"
    if isinstance(dataset, data.TokenCorpus):
        contexts, nxt = dataset.examples()
        return contexts, nxt, "next_token"
    return dataset.top, dataset.bottom, "contrastive"


@main.command("dump-repr")
@_common()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Dataset CSV written by gen-data.")
@click.option("--side", type=click.Choice(["f", "g"]), default="f", show_default=True)
@click.option("--layer", default="output", show_default=True,
              help="Hidden layer index (1-based) or 'output' (f side only).")
@click.option("--limit", type=click.IntRange(min=1), default=None, help="First N examples only.")
@_handle_errors
def dump_repr(spec_path, seed, out, jobs, checkpoint, data_path, side, layer, limit):
    """Encode a dataset with a checkpoint and write a ReprDump file."""
    model, header = load_checkpoint(checkpoint)
    dataset, _ = data.read_dataset(data_path)
    xs, ys, task = _sides(dataset)
    if limit is not None:
        xs, ys = xs[:limit], ys[:limit]
    if side == "g":
        reps = encode_g(model, ys)
    elif layer == "output":
        reps = encode_f(model, xs)
    else:
        _, layers = encode_f(model, xs, capture_layers=True)
        try:
            reps = layers[int(layer) - 1]
        except (ValueError, IndexError) as exc:
            raise click.BadParameter(f"no layer {layer!r} (model has {len(layers)})") from exc
    meta = {"seed": header.get("seed"), "task": task, "layer": layer if side == "f" else "g",
            "iteration": header.get("iteration"), "model_id": Path(checkpoint).name,
            "side": side}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"repr_{Path(checkpoint).stem}_{side}_{meta['layer']}.csv"
    analysis.ReprDump(reps, meta).save(path)
    click.echo(f"wrote {path} ({reps.shape[0]} x {reps.shape[1]})")


@main.command("analyze")
@_common()
@click.argument("repr_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("repr_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--k", "ks", type=click.IntRange(min=1), multiple=True,
              help="SVCCA truncation; repeatable.")
@_handle_errors
def analyze(spec_path, seed, out, jobs, repr_a, repr_b, ks):
    """CCA, SVCCA and a least-squares linear map between two ReprDump files."""
    a, b = analysis.ReprDump.load(repr_a), analysis.ReprDump.load(repr_b)
    report = {"a": a.meta, "b": b.meta, "cca": analysis.cca(a, b).to_dict(), "svcca": {}}
    rows = [["cca", a.data.shape[1], report["cca"]["mean_rho"]]]
    for k in ks:
        r = analysis.svcca(a, b, k)
        report["svcca"][str(k)] = r.to_dict()
        rows.append(["svcca", k, r.mean_rho])
    try:
        report["linear_fit"] = analysis.fit_linear_map(a, b).to_dict()
        rows.append(["linear_fit_residual", a.data.shape[1], report["linear_fit"]["residual"]])
    except analysis.RankDeficiencyError as exc:
        report["linear_fit"] = {"error": str(exc)}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_json_report(out / "analysis.json", report)
    data.write_table(out / "analysis.csv", ["measure", "k", "value"], rows)
    click.echo(f"mean rho {report['cca']['mean_rho']:.6f}; wrote {out / 'analysis.json'}")


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _verify_pair(path_a, path_b, data_path, seed, limit=512):
    prime, _ = load_checkpoint(path_a)
    star, _ = load_checkpoint(path_b)
    dataset, _ = data.read_dataset(data_path)
    xs, ys, task = _sides(dataset)
    xs, ys = xs[:limit], ys[:limit]
    if isinstance(star.g, EmbeddingTable):
        batch = build_candidates("supervised", (xs, ys), star.g.n_labels)
    else:
        batch = build_candidates("contrastive", (xs, ys))
    report = {}
    try:
        report["diversity"] = analysis.diversity_check_f(star, batch, seed=seed).to_dict()
    except analysis.InsufficientTargetsError as exc:
        report["diversity"] = {"error": str(exc), "satisfied": False}
        return report
    report["theorem1"] = analysis.theorem1_recover(prime, star, batch, seed=seed).to_dict()
    report["context"] = analysis.context_recover(prime, star, batch, seed=seed, tol=None).to_dict()
    report["linear_fit"] = analysis.fit_linear_map(encode_f(star, xs), encode_f(prime, xs)).to_dict()
    return report


@main.command("verify")
@_common()
@click.option("--checkpoint-a", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--checkpoint-b", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), default=None)
@_handle_errors
def verify(spec_path, seed, out, jobs, checkpoint_a, checkpoint_b, data_path):
    """Run the recovery oracles.

    With two checkpoints and a dataset: diversity check, g-difference
    recovery, context-side recovery and a least-squares fit from B to A.
    Without: the exact-recovery self-check on a random model and a known
    transform (exit 1 if it misses its tolerances).
    """
    seed = 0 if seed is None else seed
    paired = checkpoint_a or checkpoint_b or data_path
    if paired and not (checkpoint_a and checkpoint_b and data_path):
        raise click.UsageError("--checkpoint-a, --checkpoint-b and --data go together")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if paired:
        report = _verify_pair(checkpoint_a, checkpoint_b, data_path, seed)
        analysis.write_json_report(out / "verify.json", report)
        if not report["diversity"].get("satisfied"):
            click.echo("diversity condition not satisfied", err=True)
            sys.exit(EXIT_FAILURE)
        click.echo(f"theorem-1 residual {report['theorem1']['residual']:.3g}, "
                   f"linear fit residual {report['linear_fit']['residual']:.3g}")
        return
    result = recovery_self_check(seed)
    analysis.write_json_report(out / "verify.json", result)
    for k, v in result.items():
        click.echo(f"{k}: {v}")
    if not result["passed"]:
        sys.exit(EXIT_FAILURE)


# ---------------------------------------------------------------------------
# Experiment verbs
# ---------------------------------------------------------------------------


def _spec_for(spec_path, seed, default_experiment, svg):
    raw = _read_json(spec_path) if spec_path else {"experiment": default_experiment}
    raw.setdefault("experiment", default_experiment)
    if svg:
        raw["svg"] = True
    return resolve_spec(raw, seed)


@main.command("sweep")
@_common()
@click.option("--axis", type=click.Choice(["data_size", "width"]), default=None,
              help="Sweep axis; taken from the spec when omitted.")
@click.option("--svg", is_flag=True, help="Also render SVG plots.")
@_handle_errors
def sweep(spec_path, seed, out, jobs, axis, svg):
    """Contrastive sweep over data size or hidden width."""
    tag = {"data_size": "contrastive_sweep_data", "width": "contrastive_sweep_width"}
    default = tag[axis] if axis else None
    spec = _spec_for(spec_path, seed, default, svg)
    if not spec.experiment.startswith("contrastive_sweep"):
        raise InvalidSpecError("sweep needs a contrastive_sweep_data/width spec or --axis")
    if axis and spec.experiment != tag[axis]:
        raise InvalidSpecError(f"--axis {axis} conflicts with spec experiment {spec.experiment}")
    report = run_experiment(spec, out, jobs)
    _emit(report, ["axis", "values", "median_f", "median_g", "spearman_f", "spearman_g"])


@main.command("layerwise")
@_common()
@click.option("--svg", is_flag=True, help="Also render SVG plots.")
@_handle_errors
def layerwise(spec_path, seed, out, jobs, svg):
    """Per-layer SVCCA across independently trained next-token models."""
    spec = _spec_for(spec_path, seed, "layerwise", svg)
    if spec.experiment != "layerwise":
        raise InvalidSpecError("layerwise needs a layerwise spec")
    report = run_experiment(spec, out, jobs)
    _emit(report, ["mean_rho", "output_layer_highest"])


@main.command("report")
@_common(spec_required=True)
@click.option("--svg", is_flag=True, help="Also render SVG plots.")
@_handle_errors
def report_cmd(spec_path, seed, out, jobs, svg):
    """Run any experiment spec end to end and write its report files."""
    spec = _spec_for(spec_path, seed, None, svg)
    report = run_experiment(spec, out, jobs)
    _emit(report, ["final_mean_cca", "diversity_verdict", "spearman_f", "spearman_g",
                   "output_layer_highest", "ratio"])
    click.echo(f"wrote {spec.experiment} reports to {out}")


if __name__ == "__main__":
    main()
