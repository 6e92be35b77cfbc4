"""Discrete-time multi-type branching epidemic models.

Mean-field and stochastic engines share one state layout; on top of them sit
contact tracing, Kalman filtering, Monte Carlo fitting, mobility-driven
contact rates and a multi-cohort routing model.
"""
__version__ = "0.1.0"

from .core import (PHASES, DeathImmunCounters, DiseaseParams, PhaseDurationDist, RateSchedule,
                   baseline_params, death_immun_update, failure_rates, new_state,
                   phase_totals, pmf_from_rates, state_dim, state_index)
from .meanfield import (ShockFit, TransitionMatrix, ar_coefficients, ar_predict,
                        build_transition_matrix, estimate_growth_rate, fit_shock,
                        simulate_meanfield, simulate_meanfield_schedule, spectral_radius)
from .branching import (OffspringCovariance, StochasticTrajectory, make_rng,
                        offspring_covariance, simulate_batch, simulate_stochastic,
                        step_stochastic)
from .tracing import (ExtendedType, PhasePath, TracingConfig, critical_tracing_probability,
                      enumerate_paths, expected_infections, expected_total_infected,
                      sample_child_type, tracing_progeny_matrix, tracing_sweep)
from .kalman import FilterState, MeasurementModel, filter_series, kalman_step, process_noise
from .fitting import (FitGrid, FitParams, FitResult, LossEstimate, PhaseSchedule,
                      grid_search_fit, loss_l1, loss_l1_log, prediction_error)
from .mobility import MobilityRateSpec, OutflowSeries, contact_rate_series, normalize_flow
from .routing import (Cohort, CohortSystem, epidemic_stage, infection_rate_matrix,
                      maxent_routing, routing_stage, simulate_cohorts, transit_contacts)

__all__ = [name for name in dir() if not name.startswith("_")]
