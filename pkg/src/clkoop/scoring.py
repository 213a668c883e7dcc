"""Trajectory prediction scoring and cross-validation.

Models are scored on multi-step pure rollouts against the recorded raw
plant states: the coefficient of determination (per state, averaged)
and the RMS error normalized by each state's true peak amplitude
(averaged across states). A rollout that produces non-finite values
marks its episode as diverged; diverged episodes score negative
infinity so that unstable plants are reported as such instead of
crashing the evaluation.
"""

from __future__ import annotations

import csv
import dataclasses
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import _accel
from .cl_koopman import (ClosedLoopKoopman, ControllerModel,
                         build_uf_from_plant, solve_cl_edmd)
from .edmd import GHCache, KoopmanPlant, compute_gh, solve_edmd
from .lifting import (Episode, LiftingConfig, assemble_snapshots,
                      delay_embed, lift_trajectory, retract)


def r2_score(truth, prediction) -> float:
    """Coefficient of determination, averaged across states.

    ``1 - SS_res / SS_tot`` per state; 1 for perfect predictions, 0 for
    predicting the mean, arbitrarily negative for worse. Returns
    negative infinity when the prediction contains non-finite values.
    """
    truth = np.asarray(truth, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    if truth.ndim == 1:
        truth = truth.reshape(-1, 1)
    if prediction.ndim == 1:
        prediction = prediction.reshape(-1, 1)
    if truth.shape != prediction.shape:
        raise ValueError(
            f"shape mismatch: truth {truth.shape}, prediction "
            f"{prediction.shape}")
    if truth.shape[0] < 2:
        raise ValueError("need at least two samples")
    ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0):
        raise ValueError(
            "truth is constant in at least one state; score undefined")
    if not np.all(np.isfinite(prediction)):
        return float("-inf")
    with np.errstate(over="ignore"):
        ss_res = np.sum((truth - prediction) ** 2, axis=0)
    return float(np.mean(1.0 - ss_res / ss_tot))


def nrmse(truth, prediction) -> float:
    """RMS error normalized by the true peak amplitude, state-averaged.

    Dimensionless fraction (multiply by 100 for percent). Returns
    positive infinity for non-finite predictions.
    """
    truth = np.asarray(truth, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    if truth.ndim == 1:
        truth = truth.reshape(-1, 1)
    if prediction.ndim == 1:
        prediction = prediction.reshape(-1, 1)
    if truth.shape != prediction.shape:
        raise ValueError(
            f"shape mismatch: truth {truth.shape}, prediction "
            f"{prediction.shape}")
    peak = np.max(np.abs(truth), axis=0)
    if np.any(peak == 0):
        raise ValueError("true peak amplitude is zero in at least one state")
    if not np.all(np.isfinite(prediction)):
        return float("inf")
    with np.errstate(over="ignore"):
        rmse = np.sqrt(np.mean((truth - prediction) ** 2, axis=0))
    return float(np.mean(rmse / peak))


@dataclasses.dataclass(frozen=True)
class EpisodeScore:
    index: int
    r2: float
    nrmse: float
    diverged: bool


@dataclasses.dataclass(frozen=True)
class ScoreReport:
    """Aggregate prediction scores over a set of episodes.

    When any episode diverged, the means report the infinity sentinels
    and the standard deviations are NaN.
    """

    r2_mean: float
    r2_std: float
    nrmse_mean: float
    nrmse_std: float
    per_episode: List[EpisodeScore]

    @property
    def any_diverged(self) -> bool:
        return any(s.diverged for s in self.per_episode)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["episode", "r2", "nrmse", "diverged"])
            for s in self.per_episode:
                writer.writerow([s.index, repr(s.r2), repr(s.nrmse),
                                 int(s.diverged)])

    @staticmethod
    def from_csv(path) -> "ScoreReport":
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            if header != ["episode", "r2", "nrmse", "diverged"]:
                raise ValueError(f"unexpected score CSV header: {header}")
            scores = [EpisodeScore(int(row[0]), float(row[1]), float(row[2]),
                                   bool(int(row[3])))
                      for row in reader]
        return _aggregate(scores)

    def to_dict(self) -> dict:
        def enc(x):
            return x if np.isfinite(x) else repr(x)

        return {
            "r2_mean": enc(self.r2_mean),
            "r2_std": enc(self.r2_std),
            "nrmse_mean": enc(self.nrmse_mean),
            "nrmse_std": enc(self.nrmse_std),
            "n_episodes": len(self.per_episode),
            "n_diverged": sum(s.diverged for s in self.per_episode),
        }


def _aggregate(scores: List[EpisodeScore]) -> ScoreReport:
    r2s = np.array([s.r2 for s in scores])
    nrmses = np.array([s.nrmse for s in scores])
    with np.errstate(invalid="ignore", over="ignore"):
        return ScoreReport(
            r2_mean=float(np.mean(r2s)),
            r2_std=float(np.std(r2s)),
            nrmse_mean=float(np.mean(nrmses)),
            nrmse_std=float(np.std(nrmses)),
            per_episode=scores,
        )


def _initial_lifted_state(config: LiftingConfig, episode: Episode) -> np.ndarray:
    d = config.n_delays
    window = lift_trajectory(config, episode.plant_states[:d + 1])
    return delay_embed(config, window)[0]


def _episode_inputs(config: LiftingConfig, episode: Episode) -> np.ndarray:
    d = config.n_delays
    refs, ffwd = episode.references, episode.feedforward
    if config.delay_inputs:
        refs = delay_embed(config, refs)
        ffwd = delay_embed(config, ffwd)
    else:
        refs, ffwd = refs[d:], ffwd[d:]
    return np.hstack([refs, ffwd])[:-1]


def _rollout_plan(model, config: LiftingConfig, episode: Episode):
    """Rollout matrices, initial state, inputs, and retraction slice."""
    d = config.n_delays
    theta0 = _initial_lifted_state(config, episode)
    if isinstance(model, ClosedLoopKoopman):
        if episode.controller_states is None:
            raise ValueError(
                f"episode {episode.index} has no controller states; the "
                f"closed-loop rollout needs them")
        x0 = np.concatenate([episode.controller_states[d], theta0])
        inputs = _episode_inputs(config, episode)
        n_c = model.n_controller_states
        return model.A_f, model.B_f, x0, inputs, slice(n_c, n_c + config.state_dim)
    if isinstance(model, KoopmanPlant):
        inputs = episode.plant_input[d:-1]
        return model.A_p, model.B_p, theta0, inputs, slice(0, config.state_dim)
    raise TypeError(f"cannot roll out model of type {type(model)}")


def score_model(model, episodes: Sequence[Episode],
                config: LiftingConfig) -> ScoreReport:
    """Score multi-step rollouts of a model against recorded states.

    ``model`` is a :class:`ClosedLoopKoopman` (driven by reference and
    feedforward), a :class:`KoopmanPlant` (driven by the recorded plant
    input), or a callable ``episode -> (start_index, predicted_states)``
    for custom predictors. Predictions start after the delay window and
    are compared with the recorded raw plant states.
    """
    if callable(model) and not isinstance(model, (ClosedLoopKoopman,
                                                  KoopmanPlant)):
        scores = []
        for ep in episodes:
            start, pred = model(ep)
            scores.append(_score_episode(ep, start, np.asarray(pred, float)))
        return _aggregate(scores)

    plans = [_rollout_plan(model, config, ep) for ep in episodes]
    groups: Dict[Tuple[int, int], List[int]] = {}
    for i, (_, _, x0, inputs, _) in enumerate(plans):
        groups.setdefault((len(x0), inputs.shape[0]), []).append(i)
    scores: List[EpisodeScore] = [None] * len(episodes)  # type: ignore
    d = config.n_delays
    for key, idxs in groups.items():
        A, B = plans[idxs[0]][0], plans[idxs[0]][1]
        x0 = np.stack([plans[i][2] for i in idxs], axis=1)
        inputs = np.stack([plans[i][3] for i in idxs], axis=2)
        with np.errstate(over="ignore", invalid="ignore"):
            states = _accel.linear_rollout_batch(A, B, x0, inputs)
        for col, i in enumerate(idxs):
            pred = states[:, plans[i][4], col]
            scores[i] = _score_episode(episodes[i], d, pred)
    return _aggregate(scores)


DIVERGENCE_FACTOR = 1e6


def _score_episode(episode: Episode, start: int,
                   prediction: np.ndarray) -> EpisodeScore:
    truth = episode.plant_states[start:]
    if truth.shape[0] != prediction.shape[0]:
        raise ValueError(
            f"prediction length {prediction.shape[0]} does not match "
            f"remaining episode length {truth.shape[0]}")
    # A rollout has diverged when it goes non-finite or explodes far past
    # the scale of the data; scoring it would only overflow.
    bound = DIVERGENCE_FACTOR * max(1.0, float(np.max(np.abs(truth))))
    diverged = not np.all(np.isfinite(prediction)) \
        or float(np.max(np.abs(prediction))) > bound
    if diverged:
        return EpisodeScore(index=episode.index, r2=float("-inf"),
                            nrmse=float("inf"), diverged=True)
    r2 = r2_score(truth, prediction)
    err = nrmse(truth, prediction)
    if not np.isfinite(r2):
        diverged = True
        r2 = float("-inf")
        err = float("inf")
    return EpisodeScore(index=episode.index, r2=r2, nrmse=err,
                        diverged=diverged)


def contiguous_folds(n_episodes: int, folds: int) -> List[np.ndarray]:
    """Split episode indices into contiguous, nearly equal groups."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if n_episodes < folds:
        raise ValueError(
            f"cannot split {n_episodes} episodes into {folds} folds")
    return [np.asarray(g) for g in np.array_split(np.arange(n_episodes),
                                                  folds)]


def plant_snapshot_cache(config: LiftingConfig,
                         episodes: Sequence[Episode]) -> GHCache:
    """Moment cache for plant-only regression on the recorded input."""
    d = config.n_delays
    thetas, psis = [], []
    for ep in episodes:
        lifted = delay_embed(config, lift_trajectory(config, ep.plant_states))
        psi = np.hstack([lifted, ep.plant_input[d:]])
        thetas.append(lifted[1:].T)
        psis.append(psi[:-1].T)
    return compute_gh(np.hstack(thetas), np.hstack(psis))


def cross_validate(episodes: Sequence[Episode], config: LiftingConfig,
                   controller: ControllerModel, folds: int, alphas,
                   method: str,
                   score_targets=("closed_loop", "plant")) -> Dict[str, np.ndarray]:
    """K-fold cross-validation of one identification method over alphas.

    Episodes are partitioned contiguously by index. For every fold the
    data moments are computed once and reused across the whole
    regularization grid; each fitted model is scored on the held-out
    episodes. Returns, per requested target, the per-alpha mean score
    over folds.

    ``method`` is ``"edmd"`` (plant regression on the recorded input) or
    ``"cl_edmd"`` (structure-constrained closed-loop regression). Both
    are scored on the structured closed loop built from the identified
    plant and the known controller, so the two methods' closed-loop
    scores compare like for like.
    """
    if method not in ("edmd", "cl_edmd"):
        raise ValueError(f"unknown method {method!r}")
    alphas = np.asarray(alphas, dtype=float)
    fold_indices = contiguous_folds(len(episodes), folds)
    C_p = retract(config.p_lifted, config.state_dim)
    sums = {t: np.zeros(len(alphas)) for t in score_targets}
    for fold in fold_indices:
        held = set(fold.tolist())
        held_out = [episodes[i] for i in fold]
        train = [ep for i, ep in enumerate(episodes) if i not in held]
        if method == "cl_edmd":
            cache = compute_gh(assemble_snapshots(config, train))
        else:
            cache = plant_snapshot_cache(config, train)
        for j, alpha in enumerate(alphas):
            if method == "cl_edmd":
                _, plant = solve_cl_edmd(cache, controller, C_p, alpha)
            else:
                plant = KoopmanPlant(solve_edmd(cache, alpha), C_p)
            clk = build_uf_from_plant(plant, controller)
            for target in score_targets:
                model = clk if target == "closed_loop" else plant
                report = score_model(model, held_out, config)
                sums[target][j] += report.r2_mean
    return {t: sums[t] / len(fold_indices) for t in score_targets}
