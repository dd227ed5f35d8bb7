"""
Командная строка: gen-data, train, evaluate, diagnose, sweep-depth, verify-theory.

    python -m sml_ctr.cli train --config run.json --data train.tsv --out-dir runs/a \\
        --seed 1 --model.tower_widths=[64,64]

Коды выхода: 0 — успех, 2 — ошибка конфигурации, 3 — ошибка данных,
4 — коллапс обучения, 5 — провал проверки теории, 1 — прочие ошибки.
"""
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np

from . import diagnostics, landscape
from .config import RunConfig, settings
from .data import DatasetSchema, EncodedBatch, SyntheticSpec, split_811, synthesize, write_records
from .dataset_cache import dataset_cache
from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    SmlError,
    TheoryCheckFailure,
    TrainingCollapse,
    UndefinedMetricError,
)
from .logging_config import setup_logging
from .metrics import auc
from .network import ModelConfig, SkipLogitModel, SkipVariant
from .numerics import ActivationKind, RngState, sample_gaussian
from .report_writer import JsonLinesWriter, write_csv, write_json
from .training import (
    CollapsePolicy,
    EpochMetrics,
    TrainConfig,
    TrainState,
    evaluate,
    fit,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_COLLAPSE = 4
EXIT_THEORY = 5

_EXIT_CODES = (
    (ConfigError, EXIT_CONFIG),
    (DataError, EXIT_DATA),
    (TrainingCollapse, EXIT_COLLAPSE),
    (TheoryCheckFailure, EXIT_THEORY),
)

CHECKPOINT_NAME = "checkpoint.npz"
HISTORY_NAME = "history.jsonl"

_OVERRIDES = {"ignore_unknown_options": True, "allow_extra_args": True}


def exit_code_for(error: SmlError) -> int:
    for cls, code in _EXIT_CODES:
        if isinstance(error, cls):
            return code
    return EXIT_ERROR


# =====================================================================
# 1. СБОРКА КОНФИГУРАЦИИ
# =====================================================================

def _resolve(config_path: Optional[str], overrides: Sequence[str], seed: Optional[int],
             fallback_seed: Optional[int] = None) -> Tuple[RunConfig, int]:
    run = RunConfig.load(config_path, overrides)
    if seed is not None:
        run.seed = seed
    if run.seed is None:
        run.seed = fallback_seed
    if run.seed is None:
        raise ConfigError("seed: required, pass --seed N")
    return run, run.seed


def _schema(run: RunConfig, data_path: Optional[str]) -> DatasetSchema:
    """Схема из сайдкара <data>.truth.json важнее секции data конфига."""
    if data_path:
        sidecar = Path(f"{data_path}.truth.json")
        if sidecar.exists():
            payload = json.loads(sidecar.read_text(encoding="utf-8"))
            return DatasetSchema(**payload["schema"])
    d = run.data
    try:
        return DatasetSchema(
            continuous_count=d.continuous_count,
            categorical_count=d.categorical_count,
            hash_buckets=d.hash_buckets,
            missing_token=d.missing_token,
            skip_bad_records=d.skip_bad_records,
        )
    except ContractViolation as e:
        raise ConfigError(f"data: {e}") from e


def _model_config(run: RunConfig, schema: Optional[DatasetSchema], seed: int,
                  continuous_count: Optional[int] = None) -> ModelConfig:
    m = run.model
    try:
        return ModelConfig(
            embedding_dim=m.embedding_dim,
            vocab_sizes=schema.buckets if schema else [],
            continuous_count=schema.continuous_count if schema else int(continuous_count or 0),
            tower_widths=m.tower_widths,
            hidden_act=m.hidden_act,
            skip=m.skip,
            include_input_skip=m.include_input_skip,
            tower_head=m.tower_head,
            alpha=m.alpha,
            meta_per_element=m.meta_per_element,
            seed=seed,
        )
    except (ContractViolation, ValueError) as e:
        raise ConfigError(f"model: {e}") from e


def _train_config(run: RunConfig, seed: int) -> TrainConfig:
    t = run.train
    try:
        return TrainConfig(
            batch_size=t.batch_size,
            epochs=t.epochs,
            lr=t.lr,
            beta1=t.beta1,
            beta2=t.beta2,
            eps=t.eps,
            seed=seed,
            eval_batch_size=t.eval_batch_size,
            collapse=CollapsePolicy(auc_floor=t.auc_floor, min_epochs=t.collapse_min_epochs),
        )
    except ContractViolation as e:
        raise ConfigError(f"train: {e}") from e


def _load_splits(data_path: str, schema: DatasetSchema, run: RunConfig, seed: int) -> Tuple[EncodedBatch, EncodedBatch, EncodedBatch]:
    batch = dataset_cache.load_or_encode(data_path, schema, run.data.max_records)
    try:
        return split_811(batch, seed)
    except ContractViolation as e:
        raise DataError(f"{data_path}: {e}") from e


def _parse_ints(text: Optional[str], name: str) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from e


def _header(run: RunConfig, command: str) -> Dict[str, Any]:
    return {"command": command, "seed": run.seed, "config": run.to_dict()}


# =====================================================================
# 2. КОМАНДЫ
# =====================================================================

@click.group()
@click.option("--log-level", default=None, help="DEBUG / INFO / WARNING (default: SML_LOG_LEVEL)")
def cli(log_level: Optional[str]) -> None:
    """Skip Meta Logit: CTR-модель, диагностика и проверка теории."""
    setup_logging(log_level)


@cli.command("gen-data")
@click.argument("spec_file", type=click.Path(dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
def gen_data(spec_file: str, out_path: str) -> None:
    """Синтетический датасет (TSV в формате Criteo) + сайдкар с истиной."""
    try:
        payload = json.loads(Path(spec_file).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"spec file not found: {spec_file}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"spec file is not valid JSON: {e}") from e
    spec = SyntheticSpec.from_dict(payload)

    dataset = synthesize(spec)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = write_records(out, dataset.records)

    try:
        oracle_auc: Optional[float] = auc(dataset.bayes_scores, dataset.labels)
    except UndefinedMetricError:
        oracle_auc = None
    write_json(f"{out}.truth.json", {
        "spec": spec.to_dict(),
        "schema": spec.schema().to_dict(),
        "rows": rows,
        "ctr": float(np.mean(dataset.labels)),
        "oracle_auc": oracle_auc,
        "pairs": [list(p) for p in dataset.pairs],
        "bayes_scores": dataset.bayes_scores,
    })
    logger.info("Wrote %d records to %s (oracle AUC %s)", rows, out, oracle_auc)


@cli.command("train", context_settings=_OVERRIDES)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--resume", is_flag=True, help="продолжить с <out-dir>/checkpoint.npz")
@click.pass_context
def train(ctx: click.Context, config_path: Optional[str], data_path: str, out_dir: str,
          seed: Optional[int], resume: bool) -> None:
    """Обучение: чекпоинт + история по эпохам (JSON lines)."""
    run, seed = _resolve(config_path, ctx.args, seed)
    schema = _schema(run, data_path)
    train_set, valid_set, _ = _load_splits(data_path, schema, run, seed)
    cfg = _train_config(run, seed)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT_NAME
    extra = {"run": _header(run, "train"), "schema": schema.to_dict()}

    if resume:
        if not ckpt_path.exists():
            raise DataError(f"nothing to resume: {ckpt_path} not found")
        state, _, _ = load_checkpoint(ckpt_path)
        logger.info("Resuming from epoch %d, step %d", state.epoch, state.step)
    else:
        model = SkipLogitModel.initialize(_model_config(run, schema, seed))
        state = TrainState.fresh(model, cfg)
        write_json(out / "config.json", _header(run, "train"))

    with JsonLinesWriter(out / HISTORY_NAME, append=resume) as history:
        if not resume:
            history.write({"header": _header(run, "train")})

        written = [0]

        def on_epoch(metrics: EpochMetrics, st: TrainState) -> None:
            history.write(metrics.to_dict())
            written[0] += 1
            save_checkpoint(ckpt_path, st, cfg, {**extra, "collapsed": False})

        if not resume:
            save_checkpoint(ckpt_path, state, cfg, {**extra, "collapsed": False})
        result = fit(state.model, train_set, valid_set, cfg, state=state, on_epoch=on_epoch)

        if result.collapsed:
            for metrics in result.history[written[0]:]:
                history.write({**metrics.to_dict(), "collapsed": True})
            save_checkpoint(ckpt_path, result.last_good, cfg, {**extra, "collapsed": True})

    best = result.best_epoch
    write_json(out / "metrics.json", {
        **_header(run, "train"),
        "epochs": result.state.epoch,
        "steps": result.state.step,
        "best_epoch": best.to_dict() if best else None,
        "final": result.history[-1].to_dict() if result.history else None,
        "collapsed": result.collapsed,
        "collapse_step": result.collapse_step,
        "collapse_reason": result.collapse_reason,
    })
    if result.collapsed:
        raise TrainingCollapse(f"training collapsed ({result.collapse_reason}); last good checkpoint kept",
                               step=result.collapse_step or 0)


@cli.command("evaluate", context_settings=_OVERRIDES)
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--split", type=click.Choice(["train", "valid", "test", "all"]), default="test")
@click.pass_context
def evaluate_cmd(ctx: click.Context, checkpoint: str, data_path: str, out_path: str,
                 config_path: Optional[str], seed: Optional[int], split: str) -> None:
    """AUC и logloss чекпоинта на части датасета (по умолчанию test)."""
    state, _, meta = load_checkpoint(checkpoint)
    # сплит по умолчанию тот же, что при обучении
    trained_seed = meta.get("run", {}).get("seed")
    run, seed = _resolve(config_path, ctx.args, seed, fallback_seed=trained_seed)
    if trained_seed is not None and seed != trained_seed:
        logger.warning("Split seed %d differs from training seed %d: splits may overlap", seed, trained_seed)
    schema = DatasetSchema(**meta["schema"]) if "schema" in meta else _schema(run, data_path)
    parts = dict(zip(("train", "valid", "test"), _load_splits(data_path, schema, run, seed)))
    batch = EncodedBatch.concat(list(parts.values())) if split == "all" else parts[split]

    result = evaluate(state.model, batch, run.train.eval_batch_size)
    write_json(out_path, {
        **_header(run, "evaluate"),
        "checkpoint": Path(checkpoint).name,
        "split": split,
        "rows": len(batch),
        "auc": result["auc"],
        "logloss": result["logloss"],
    })
    logger.info("%s: auc=%s logloss=%s", split, result["auc"], result["logloss"])


@cli.command("diagnose", context_settings=_OVERRIDES)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--at-init", is_flag=True, help="свежая модель из конфига вместо чекпоинта")
@click.option("--data", "data_path", type=click.Path(dir_okay=False), default=None,
              help="без данных — гауссовы входы ширины diagnostics.width")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def diagnose(ctx: click.Context, out_dir: str, checkpoint: Optional[str], at_init: bool,
             data_path: Optional[str], config_path: Optional[str], seed: Optional[int]) -> None:
    """Профили дисперсии, мёртвых нейронов и косинусной близости по слоям."""
    run, seed = _resolve(config_path, ctx.args, seed)
    if at_init == (checkpoint is not None):
        raise ConfigError("diagnose: pass exactly one of --checkpoint or --at-init")
    opts = run.diagnostics

    schema: Optional[DatasetSchema] = None
    if checkpoint:
        state, _, meta = load_checkpoint(checkpoint)
        model = state.model
        if "schema" in meta:
            schema = DatasetSchema(**meta["schema"])
        mode = "trained"
    else:
        schema = _schema(run, data_path) if data_path else None
        model = SkipLogitModel.initialize(_model_config(run, schema, seed, continuous_count=opts.width))
        mode = "init"

    if data_path:
        if schema is None:
            schema = _schema(run, data_path)
        _, _, test = _load_splits(data_path, schema, run, seed)
        batch: Any = test.take(slice(0, opts.samples))
    else:
        if model.config.vocab_sizes:
            raise ConfigError("diagnose: --data is required for a model with categorical inputs")
        batch = sample_gaussian(RngState(seed).derive(7), opts.samples, cols=model.config.input_width)

    depth = model.config.depth
    layers = opts.layers if opts.layers is not None else list(range(depth + 1))
    bad = [l for l in layers if not 0 <= l <= depth]
    if bad:
        raise ConfigError(f"diagnostics.layers: layer {bad[0]} out of range 0..{depth}")

    report = diagnostics.DiagnosticsReport(config=_header(run, "diagnose"), mode=mode)
    report.variance = [r for r in diagnostics.layer_variance_profile(model, batch) if r.layer in layers]
    if model.config.hidden_act in (ActivationKind.RELU, ActivationKind.LEAKY_RELU):
        report.dead_neurons = [
            r for r in diagnostics.dead_neuron_histogram(model, batch, opts.bins) if r.layer in layers
        ]
    else:
        logger.warning("Skipping dead-neuron histogram for %s activations", model.config.hidden_act.value)
    report.cosine = diagnostics.cosine_profile(model, batch, layers)
    if isinstance(batch, EncodedBatch):
        metrics = evaluate(model, batch, run.train.eval_batch_size)
        report.metrics = {"auc": metrics["auc"], "logloss": metrics["logloss"]}

    out = Path(out_dir)
    write_json(out / "report.json", report.to_dict())
    for name, (header, rows) in report.csv_tables().items():
        write_csv(out / f"{name}.csv", header, rows, config=report.config)
    logger.info("Diagnostics (%s mode) written to %s", mode, out)


@cli.command("sweep-depth", context_settings=_OVERRIDES)
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--depths", default=None, help="например 4,8,16 (по умолчанию diagnostics.depths)")
@click.option("--variants", default=None, help="например dnn,meta_tanh")
@click.option("--seeds", "seeds_text", default=None, help="seed-ы моделей, например 0,1,2")
@click.option("--jobs", type=int, default=None, help="процессы (по умолчанию SML_JOBS)")
@click.pass_context
def sweep_depth(ctx: click.Context, data_path: str, out_dir: str, config_path: Optional[str],
                seed: Optional[int], depths: Optional[str], variants: Optional[str],
                seeds_text: Optional[str], jobs: Optional[int]) -> None:
    """Обучение DNN и SML на каждой глубине; строка на (глубина, вариант, seed)."""
    run, seed = _resolve(config_path, ctx.args, seed)
    opts = run.diagnostics
    depth_list = _parse_ints(depths, "--depths")
    depth_list = opts.depths if depth_list is None else depth_list
    variant_list = [v for v in variants.split(",") if v] if variants else opts.variants
    seed_list = _parse_ints(seeds_text, "--seeds") or opts.seeds

    schema = _schema(run, data_path)
    train_set, valid_set, _ = _load_splits(data_path, schema, run, seed)
    base = _model_config(run, schema, seed)
    for v in variant_list:
        try:
            SkipVariant.from_name(v)
        except ContractViolation as e:
            raise ConfigError(f"--variants: {e}") from e

    rows = diagnostics.depth_sweep(
        depth_list, base, train_set, valid_set, _train_config(run, seed),
        variants=variant_list, seeds=seed_list, width=opts.width,
        jobs=settings.jobs if jobs is None else jobs,
    )
    report = diagnostics.DiagnosticsReport(config=_header(run, "sweep-depth"), mode="trained", depth_table=rows)
    out = Path(out_dir)
    write_json(out / "sweep.json", report.to_dict())
    header, table = report.csv_tables().get("sweep", (
        ["depth", "variant", "seed", "auc", "logloss", "collapsed", "collapse_step"], []
    ))
    write_csv(out / "sweep.csv", header, table, config=report.config)


@cli.command("verify-theory")
@click.option("--seed", type=int, required=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--tolerance", type=float, default=1e-8, show_default=True,
              help="допуск на slack границы градиента, относительно 1 + |grad|^2")
@click.option("--instances", type=int, default=1000, show_default=True,
              help="экземпляров в кампании границы градиента")
@click.option("--quick", is_flag=True, help="уменьшенные выборки для дымового прогона")
@click.option("--jobs", type=int, default=None)
def verify_theory(seed: int, out_path: str, tolerance: float, instances: int, quick: bool,
                  jobs: Optional[int]) -> None:
    """Рандомизированная проверка законов дисперсии и свойств ландшафта."""
    jobs = settings.jobs if jobs is None else jobs
    checks = run_theory_checks(seed, tolerance, instances, quick, jobs)
    failed = [c.name for c in checks if not c.passed]
    write_json(out_path, {
        "command": "verify-theory",
        "seed": seed,
        "options": {"tolerance": tolerance, "instances": instances, "quick": quick},
        "checks": [c.to_dict() for c in checks],
        "passed": not failed,
    })
    for c in checks:
        log = logger.info if c.passed else logger.warning
        log("check %-28s %s", c.name, "PASS" if c.passed else "FAIL")
    if failed:
        raise TheoryCheckFailure(f"failed checks: {', '.join(failed)}", seed)


def run_theory_checks(seed: int, tolerance: float = 1e-8, instances: int = 1000,
                      quick: bool = False, jobs: int = 1) -> List[landscape.CheckResult]:
    root = RngState(seed)
    checks: List[landscape.CheckResult] = []

    n_relu = 20_000 if quick else 10_000_000
    relu_rows = []
    for i, delta in enumerate((0.1, 0.5, 1.0, 2.0, 5.0)):
        r = diagnostics.relu_variance_mc(delta, n_relu, root.derive(100, i))
        close = abs(r.estimate - r.exact) <= max(0.005 * r.exact, 4 * r.standard_error)
        relu_rows.append({**asdict(r), "close_to_exact": close})
    checks.append(landscape.CheckResult(
        "relu_variance",
        all(r["within_bound"] and r["close_to_exact"] for r in relu_rows),
        {"rows": relu_rows},
    ))

    tanh = diagnostics.tanh_variance_check(root.derive(101), n=10_000 if quick else 100_000)
    checks.append(landscape.CheckResult("tanh_variance", tanh["passed"], tanh))
    taylor = diagnostics.taylor_check()
    checks.append(landscape.CheckResult("taylor_tanh", taylor["passed"], taylor))

    samples = 5_000 if quick else 100_000
    law_depths = [2, 4] if quick else [2, 4, 8, 16]
    for j, (kind, depths) in enumerate((
        ("resnet_doubling", [8]),
        ("skiplogit_linear", law_depths),
        ("mtn_bound", law_depths),
    )):
        law = diagnostics.variance_law_check(
            kind, depths, root.derive(102, j),
            width=256 if quick else 128,
            samples=min(samples, 10_000) if kind == "resnet_doubling" else samples,
            seeds=20,
        )
        checks.append(landscape.CheckResult(kind, law.passed, law.to_dict()))

    checks.append(landscape.claim1_campaign(
        seed, instances=5 if quick else 50, samples=20_000 if quick else 1_000_000, jobs=jobs,
    ))
    checks.append(landscape.gradient_campaign(seed, instances=10 if quick else 100))
    checks.append(landscape.theorem1_campaign(seed, instances=min(instances, 50) if quick else instances,
                                              tolerance=tolerance))
    checks.append(landscape.descent_campaign(seed, instances=3 if quick else 20))
    checks.append(landscape.lemma1_monotonicity(seed))
    return checks


# =====================================================================
# 3. ТОЧКА ВХОДА
# =====================================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="sml-ctr", standalone_mode=False)
    except click.exceptions.Abort:
        return EXIT_ERROR
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except SmlError as e:
        logger.error("%s", e)
        return exit_code_for(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
