"""Multi-agent multitask grid world with independent learners.

A seeded simulator where agents relay resources across three areas, two
learning algorithms (dueling double Q-learning with prioritized replay,
and advantage actor-critic with entropy exploration), and a harness that
measures how populations divide the two tasks between their members.
"""

from .a2c import A2cConfig, A2cLearner
from .dqn import DqnConfig, DqnLearner, PrioritizedBuffer
from .env import (
    Action,
    ConfigError,
    EnvConfig,
    GridEnv,
    Observation,
    Orientation,
    StepResult,
    resource_value,
)
from .harness import (
    ConvergenceTracker,
    ExperimentConfig,
    derive_rng,
    load_config,
    run_episode,
    run_experiment,
    run_single,
    track_convergence,
)
from .metrics import analyze, jain_fairness, population_specialization, specialization
from .nets import (
    NetworkSpec,
    NetworkState,
    backward,
    forward,
    gradient_check,
    load_checkpoint,
    optimize_step,
    save_checkpoint,
)

__version__ = "0.1.0"
