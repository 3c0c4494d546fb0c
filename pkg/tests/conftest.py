import pytest

from ledgerloop.config import RunConfig, config_from_dict
from ledgerloop.ledger import Ledger
from ledgerloop.runtime import Runtime
from ledgerloop.rng import derive_seed


BASE_CONFIG = {
    "master_seed": 42,
    "environment_profile": "test",
    "model": {
        "baseline_dim": 3,
        "treatment_dim": 3,
        "noise_variance": 1.0,
        "prior_mean": [0.0] * 6,
        "prior_precision_scale": 1.0,
        "clip_min": 0.1,
        "clip_max": 0.9,
        "version_id": "v1.0.0",
    },
    "schedule": {
        "decision_times": ["09:00", "18:00"],
        "update_time": "23:00",
        "trial_days": 3,
    },
    "imputation": {"horizon": 3},
    "environment": {
        "effect_mean": [0.5, 0.0, 0.0],
        "baseline_mean": [0.2, 0.0, 0.0],
        "effect_sd": 0.0,
        "baseline_sd": 0.0,
        "outcome_noise_sd": 0.5,
        "engagement_persistence": 0.5,
        "action_engagement_boost": 0.2,
        "engagement_noise_sd": 0.05,
        "miss_prob": 0.0,
        "delay_geometric_p": 1.0,
        "n_participants": 2,
        "n_days": 3,
    },
}


def deep_merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def make_run_config(**overrides) -> RunConfig:
    return config_from_dict(deep_merge(BASE_CONFIG, overrides))


@pytest.fixture
def run_config() -> RunConfig:
    return make_run_config()


def make_runtime(config: RunConfig, participants=("p0", "p1"), path=None) -> Runtime:
    ledger = Ledger(
        stream_id="test-stream",
        environment_profile=config.environment_profile,
        path=path,
    )
    runtime = Runtime(
        ledger=ledger,
        model_config=config.model,
        schedule=config.schedule,
        features=config.features,
        imputation=config.imputation,
        injection=config.injection,
        deployment_seed=derive_seed(config.master_seed, "deployment"),
        participants=list(participants),
    )
    return runtime


def start_runtime(runtime: Runtime) -> None:
    runtime.start(
        header_config={"model": {}, "schedule": {"decision_times": ["09:00", "18:00"], "trial_days": 3, "trial_start_ts": 0}, "participants": runtime.participants},
        config_digest="0" * 64,
        fingerprint="f" * 64,
        backend_ts=0,
    )
