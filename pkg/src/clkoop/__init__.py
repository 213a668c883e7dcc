"""Koopman models of feedback-controlled plants from closed-loop data.

Subpackages cover discrete LTI algebra (``lti_core``), lifting and
snapshot assembly (``lifting``), open-loop estimation (``edmd``), the
structure-constrained closed-loop estimator (``cl_koopman``), rollout
scoring and cross-validation (``scoring``), the rotary-pendulum
surrogate (``furuta_sim``), the experiment harness (``experiment``), and
its command line (``cli``). Hot loops run on a compiled extension when
available; ``clkoop._accel.BACKEND_NAME`` names the active backend.
"""

from ._accel import BACKEND_NAME
from .cl_koopman import (ClosedLoopKoopman, ControllerModel, SdpData,
                         attach_controller_states, build_sdp_data,
                         build_uf_from_plant, evaluate_cl_cost,
                         extract_plant_lstsq, reconstruct_controller_state,
                         rewrap, solve_cl_edmd, verify_stationarity)
from .edmd import GHCache, KoopmanPlant, compute_gh, predict_lifted, solve_edmd
from .furuta_sim import (DatasetConfig, FurutaParams, SignalSpec,
                         build_pd_controller, furuta_step, generate_dataset,
                         generate_signal, run_closed_loop_episode)
from .lifting import (Episode, LiftingConfig, SnapshotMatrices,
                      assemble_snapshots, delay_embed, lift_state, retract)
from .lti_core import (Spectrum, StateSpace, WellPosedness,
                       feedback_interconnect, is_well_posed,
                       series_interconnect, simulate, spectrum,
                       zoh_discretize)
from .scoring import ScoreReport, cross_validate, nrmse, r2_score, score_model

__all__ = [
    "BACKEND_NAME",
    "ClosedLoopKoopman",
    "ControllerModel",
    "DatasetConfig",
    "Episode",
    "FurutaParams",
    "GHCache",
    "KoopmanPlant",
    "LiftingConfig",
    "ScoreReport",
    "SdpData",
    "SignalSpec",
    "SnapshotMatrices",
    "Spectrum",
    "StateSpace",
    "WellPosedness",
    "assemble_snapshots",
    "attach_controller_states",
    "build_pd_controller",
    "build_sdp_data",
    "build_uf_from_plant",
    "compute_gh",
    "cross_validate",
    "delay_embed",
    "evaluate_cl_cost",
    "extract_plant_lstsq",
    "feedback_interconnect",
    "furuta_step",
    "generate_dataset",
    "generate_signal",
    "is_well_posed",
    "lift_state",
    "nrmse",
    "predict_lifted",
    "r2_score",
    "reconstruct_controller_state",
    "retract",
    "rewrap",
    "run_closed_loop_episode",
    "score_model",
    "series_interconnect",
    "simulate",
    "solve_cl_edmd",
    "solve_edmd",
    "spectrum",
    "verify_stationarity",
    "zoh_discretize",
]
