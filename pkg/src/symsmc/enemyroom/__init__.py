"""Grid-world pursuit benchmark: simulator, filtering model, training."""

from .world import (ACTIONS, DEFAULT_THETA, DIRS8, Trajectory, WorldConfig,
                    agent_path, agent_transition, calibrate_theta, chebyshev,
                    death_rate, enemy_move, generate_dataset,
                    greedy_chase_move, load_dataset, save_dataset)
from .model import (DEAD, THETA_NAME, EnemyRoomModel, PredictResult,
                    exact_death_probability, init_particles, new_model,
                    predict_death, uniform_prior, with_grid)
from .fastfilter import (FilterResult, build_tables, filter_trajectories,
                         loo_coefficients, surrogate_gradients)
from .training import (EpochRow, EvalReport, TrainHyper, evaluate, theta_hat,
                       train, write_history_csv, write_metrics_csv)

__all__ = [
    "ACTIONS", "DEFAULT_THETA", "DIRS8", "Trajectory", "WorldConfig",
    "agent_path", "agent_transition", "calibrate_theta", "chebyshev",
    "death_rate", "enemy_move", "generate_dataset", "greedy_chase_move",
    "load_dataset", "save_dataset",
    "DEAD", "THETA_NAME", "EnemyRoomModel", "PredictResult",
    "exact_death_probability", "init_particles", "new_model",
    "predict_death", "uniform_prior", "with_grid",
    "FilterResult", "build_tables", "filter_trajectories",
    "loo_coefficients", "surrogate_gradients",
    "EpochRow", "EvalReport", "TrainHyper", "evaluate", "theta_hat",
    "train", "write_history_csv", "write_metrics_csv",
]
