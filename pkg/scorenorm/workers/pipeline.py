# scorenorm/workers/pipeline.py
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from scorenorm.config import settings
from scorenorm.core import classical
from scorenorm.core.lgsm import normalize_batch, normalize_trial, target_posterior
from scorenorm.core.trainer import EMTrainer
from scorenorm.errors import ScoreDataError, ScoreNormError
from scorenorm.models.schemas import (
    CorpusSpec,
    Hypothesis,
    LabeledScores,
    LabelMatrix,
    LgsmParams,
    Method,
    Prior,
    RunConfig,
    ScoreMatrix,
    Subcommand,
    TrainingInfo,
    TrialContext,
)
from scorenorm.models.storage import Cohort, ScoreRecord, TrialRecord, storage
from scorenorm.services.metrics import evaluate, probit
from scorenorm.services.synthetic import sample_corpus, sample_eval_set

logger = logging.getLogger(__name__)

# second entropy word keeps the eval-set streams apart from the corpus streams
EVAL_STREAM = 1


class PipelineExecutor:
    """Runs one CLI subcommand end to end over the on-disk formats."""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or settings.MAX_WORKERS
        logger.info(f"PipelineExecutor initialized (workers={self.max_workers})")

    def execute(self, config: RunConfig) -> Dict[str, Any]:
        logger.info(f"Executing {config.subcommand.value}")

        try:
            if config.subcommand == Subcommand.SIMULATE:
                return self._execute_simulate(config)
            elif config.subcommand == Subcommand.TRAIN:
                return self._execute_train(config)
            elif config.subcommand == Subcommand.NORMALIZE:
                return self._execute_normalize(config)
            elif config.subcommand == Subcommand.EVAL:
                return self._execute_eval(config)
            elif config.subcommand == Subcommand.INSPECT_MODEL:
                return self._execute_inspect_model(config)
            else:
                raise ValueError(f"Unknown subcommand: {config.subcommand}")
        except Exception as e:
            logger.error(f"{config.subcommand.value} failed: {e}", exc_info=not isinstance(e, ScoreNormError))
            raise

    # ============== simulate ==============

    def _execute_simulate(self, config: RunConfig) -> Dict[str, Any]:
        if config.params_path is not None:
            params = storage.read_params(config.params_path)
        else:
            params = storage.params_from_mapping(config.params)
        spec = CorpusSpec(
            n_matrices=config.n_matrices,
            rows=config.rows,
            cols=config.cols,
            layout=config.layout,
            block_size=config.block_size,
            seed=config.seed,
        )
        out = Path(config.out or "simulated")

        corpus = sample_corpus(params, spec, self.max_workers)
        names = [f"matrix_{k:03d}.tsv" for k in range(len(corpus))]
        for name, (scores, labels) in zip(names, corpus):
            storage.write_matrix(out / name, scores, labels)

        extra: Dict[str, Any] = {
            "seed": spec.seed,
            "rows": spec.rows,
            "cols": spec.cols,
            "layout": spec.layout.value,
            "block_size": spec.block_size,
        }
        if config.eval_trials is not None:
            extra["eval"] = self._simulate_eval_set(config, params, out)

        storage.write_manifest(out / "manifest.json", names, params, extra)
        logger.info(f"Wrote {len(names)} matrices and manifest to {out}")
        return {"out": str(out), "matrices": len(names), "eval": extra.get("eval")}

    def _simulate_eval_set(self, config: RunConfig, params: LgsmParams, out: Path) -> Dict[str, str]:
        n_target, n_nontarget = config.eval_trials
        n_enroll, n_test = config.cohort_size
        eval_set = sample_eval_set(
            params, n_enroll, n_test, n_target, n_nontarget,
            seed=np.random.SeedSequence([config.seed, EVAL_STREAM]),
        )
        # trial k uses row k of both the enrollment and the test cohort files
        storage.write_cohort(out / "eval", eval_set.s_inter, eval_set.s_e, eval_set.s_t)
        trials = [
            TrialRecord(f"trial_{k:05d}", float(eval_set.s_trial[k]), k, k, eval_set.labels[k])
            for k in range(eval_set.n_trials)
        ]
        storage.write_trials(out / "eval" / "trials.tsv", trials)
        return {"cohort": "eval/cohort.json", "trials": "eval/trials.tsv"}

    # ============== train ==============

    def _load_matrices(self, inputs: List[str]) -> List[Tuple[ScoreMatrix, LabelMatrix]]:
        paths: List[str] = []
        for path in inputs:
            if storage.is_manifest(path):
                paths.extend(storage.read_manifest(path)["matrices"])
            else:
                paths.append(path)
        if not paths:
            raise ScoreDataError("no score matrices to train on")
        return [storage.read_matrix(p) for p in paths]

    def _execute_train(self, config: RunConfig) -> Dict[str, Any]:
        matrices = self._load_matrices(config.inputs)
        trainer = EMTrainer(
            config.dim,
            tol=config.tol,
            max_iters=config.max_iters,
            seed=config.seed,
            max_workers=self.max_workers,
        )
        params, trace = trainer.fit(matrices)
        info = TrainingInfo(
            seed=config.seed,
            iterations=trace.iterations,
            final_objective=trace.objective[-1],
            converged=trace.converged,
            n_matrices=len(matrices),
        )

        out = Path(config.out or "model.json")
        storage.write_model(out, params, info)
        trace_path = out.with_name(f"{out.stem}.trace.json")
        trace_path.write_text(trace.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info(f"Model written to {out}, trace to {trace_path}")

        return {
            "model": str(out),
            "trace": str(trace_path),
            "converged": trace.converged,
            "iterations": trace.iterations,
            "final_objective": trace.objective[-1],
            "table": [
                {"class": "non", "sigma2": params.var_non, "nu": params.nu_non,
                 "total": params.var_non + params.nu_non},
                {"class": "tar", "sigma2": params.var_tar, "nu": params.nu_tar,
                 "total": params.var_tar + params.nu_tar},
            ],
        }

    # ============== normalize ==============

    @staticmethod
    def _trial_scores(cohort: Cohort, trial: TrialRecord) -> Tuple[np.ndarray, np.ndarray]:
        if not 0 <= trial.enroll_row < len(cohort.enroll):
            raise ScoreDataError(f"enroll_row {trial.enroll_row} outside the {len(cohort.enroll)} enrollment rows")
        if not 0 <= trial.test_row < len(cohort.test):
            raise ScoreDataError(f"test_row {trial.test_row} outside the {len(cohort.test)} test rows")
        return cohort.enroll[trial.enroll_row], cohort.test[trial.test_row]

    @staticmethod
    def _classical_score(method: Method, cohort: Cohort, trial: TrialRecord,
                         s_e: np.ndarray, s_t: np.ndarray) -> float:
        if method == Method.RAW:
            return trial.s_trial
        if method == Method.TNORM:
            return classical.tnorm(trial.s_trial, s_t)
        if method == Method.ZNORM:
            return classical.znorm(trial.s_trial, s_e)
        if method == Method.SNORM:
            return classical.snorm(trial.s_trial, s_e, s_t)
        if method == Method.ZTNORM:
            return classical.ztnorm(TrialContext(s_trial=trial.s_trial, s_e=s_e, s_t=s_t, s_inter=cohort.s_inter))
        raise ValueError(f"not a classical method: {method}")

    def _lgsm_scores(self, params: LgsmParams, cohort: Cohort, valid: List[Tuple[int, TrialRecord, np.ndarray, np.ndarray]],
                     scores: Dict[int, float], errors: Dict[int, ScoreNormError]) -> None:
        labels = cohort.grid_labels()
        batch = [(t.s_trial, s_e, s_t) for _, t, s_e, s_t in valid]
        try:
            llrs = normalize_batch(params, (cohort.s_inter, labels), batch)
            for (k, *_), llr in zip(valid, llrs):
                scores[k] = float(llr)
            return
        except ScoreNormError as e:
            logger.warning(f"Batch scoring failed ({e}), scoring trials one by one")

        for k, t, s_e, s_t in valid:
            ctx = TrialContext(s_trial=t.s_trial, s_e=s_e, s_t=s_t, s_inter=cohort.s_inter, cohort_labels=labels)
            try:
                scores[k] = normalize_trial(params, ctx)
            except ScoreNormError as e:
                errors[k] = e

    def _execute_normalize(self, config: RunConfig) -> Dict[str, Any]:
        cohort = storage.read_cohort(config.cohort_path)
        trials = storage.read_trials(config.trials_path)
        prior = Prior(pi=config.prior)

        scores: Dict[int, float] = {}
        errors: Dict[int, ScoreNormError] = {}
        valid = []
        for k, trial in enumerate(trials):
            try:
                s_e, s_t = self._trial_scores(cohort, trial)
            except ScoreNormError as e:
                errors[k] = e
                continue
            valid.append((k, trial, s_e, s_t))

        if config.method == Method.LGSM:
            params, _ = storage.read_model(config.model_path)
            if valid:
                self._lgsm_scores(params, cohort, valid, scores, errors)
        else:
            for k, trial, s_e, s_t in valid:
                try:
                    scores[k] = self._classical_score(config.method, cohort, trial, s_e, s_t)
                except ScoreNormError as e:
                    errors[k] = e

        records = []
        for k, trial in enumerate(trials):
            if k in errors:
                logger.warning(f"Trial {trial.trial_id}: {errors[k].detail}")
                records.append(ScoreRecord(trial.trial_id, float("nan"), trial.label, error=errors[k].detail))
                continue
            posterior = target_posterior(scores[k], prior) if config.posterior else None
            records.append(ScoreRecord(trial.trial_id, scores[k], trial.label, posterior=posterior))

        out = Path(config.out or "scores.tsv")
        storage.write_scores(out, config.method.value, records)
        logger.info(f"Normalized {len(scores)}/{len(trials)} trials with {config.method.value}, written to {out}")

        if trials and not scores:
            raise next(iter(errors.values()))
        return {"out": str(out), "method": config.method.value, "trials": len(trials), "failed": len(errors)}

    # ============== eval ==============

    @staticmethod
    def _split_input(spec: str) -> Tuple[Optional[str], str]:
        if "=" in spec and not Path(spec).exists():
            name, path = spec.split("=", 1)
            return name, path
        return None, spec

    @staticmethod
    def _finite_or_none(values: np.ndarray) -> List[Optional[float]]:
        return [float(v) if np.isfinite(v) else None for v in values]

    def _execute_eval(self, config: RunConfig) -> Dict[str, Any]:
        out = Path(config.out or "report.json")
        methods: Dict[str, Any] = {}
        comparison = []

        for spec in config.inputs:
            name, path = self._split_input(spec)
            method, records = storage.read_scores(path)
            name = name or method
            if name in methods:
                raise ScoreDataError(f"method name {name!r} given twice; use NAME=PATH to disambiguate")

            usable = [r for r in records if np.isfinite(r.score) and r.label != Hypothesis.UNOBSERVED]
            skipped = len(records) - len(usable)
            if skipped:
                logger.warning(f"{name}: skipping {skipped} trials without a finite score or label")
            labeled = LabeledScores(
                target_scores=[r.score for r in usable if r.label == Hypothesis.TARGET],
                nontarget_scores=[r.score for r in usable if r.label == Hypothesis.NONTARGET],
            )
            report = evaluate(labeled, config.prior)
            pfa, pmiss = np.array(report.det).T
            probit_pfa, probit_pmiss = probit(pfa), probit(pmiss)
            storage.write_det(out.with_name(f"det_{name}.tsv"), pfa, pmiss, probit_pfa, probit_pmiss)
            det = {
                "pfa": pfa.tolist(),
                "pmiss": pmiss.tolist(),
                # infinite probits (pfa or pmiss of 0 or 1) become null
                "probit_pfa": self._finite_or_none(probit_pfa),
                "probit_pmiss": self._finite_or_none(probit_pmiss),
            }

            summary = report.model_dump(exclude={"det"})
            methods[name] = {**summary, "skipped": skipped, "det": det}
            comparison.append({
                "method": name,
                **{key: summary[key] for key in ("eer", "cllr", "min_cllr", "act_dcf", "min_dcf")},
            })
            logger.info(f"{name}: EER={report.eer:.4f} Cllr={report.cllr:.4f} minCllr={report.min_cllr:.4f}")

        storage.write_report(out, {"prior": config.prior, "methods": methods, "comparison": comparison})
        logger.info(f"Report written to {out}")
        return {"report": str(out), "comparison": comparison}

    # ============== inspect-model ==============

    def _execute_inspect_model(self, config: RunConfig) -> Dict[str, Any]:
        models = {}
        for path in config.inputs:
            params, info = storage.read_model(path)
            models[path] = {
                "params": params.model_dump(mode="json"),
                "nu_tar": params.nu_tar,
                "nu_non": params.nu_non,
                "cross_gram": params.cross_gram,
                "n_parameters": params.n_parameters,
                "training": info.model_dump(mode="json") if info else None,
            }
        return {"models": models}


pipeline_executor = PipelineExecutor()
