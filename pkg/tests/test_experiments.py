import pytest

from wavepacket_lab.errors import ConfigError
from wavepacket_lab.experiments import ExperimentConfig, ExperimentName, GridSpec, RunContext, ScaleSpec, SymbolSpec, \
    get_experiment, list_experiments, _isometry_sample


def _problems(config: ExperimentConfig) -> set[str]:
    with pytest.raises(ConfigError) as info:
        config.validate()
    return set(info.value.fields)


def _run(config: ExperimentConfig):
    experiment = get_experiment(config.experiment)
    ctx = RunContext(config=config)
    return experiment.aggregate(ctx, [cell() for cell in experiment.cells(ctx)])


@pytest.mark.parametrize("name", [e.value for e in ExperimentName])
def test_defaults_validate(name):
    ExperimentConfig(experiment=name).validate()


@pytest.mark.parametrize("config, expected", [
    (ExperimentConfig(experiment="nope"), {"experiment"}),
    (ExperimentConfig(experiment="flow", scale=ScaleSpec(R=0.5)), {"scale.R"}),
    (ExperimentConfig(experiment="decompose", scale=ScaleSpec(R=64.0, r=128.0)), {"scale.r"}),
    (ExperimentConfig(experiment="bilinear", scale=ScaleSpec(nu_list=[1.0, 0.5])), {"scale.nu_list"}),
    (ExperimentConfig(experiment="flow", scale=ScaleSpec(delta=0.2)), {"scale.delta"}),
    (ExperimentConfig(experiment="flow", symbol=SymbolSpec(kind="wave")), {"symbol.kind"}),
    (ExperimentConfig(experiment="decompose", symbol=SymbolSpec(kind="halfwave")), {"symbol.kind"}),
    (ExperimentConfig(experiment="flow", symbol=SymbolSpec(metric="file")), {"symbol.metric_path"}),
    (ExperimentConfig(experiment="flow", symbol=SymbolSpec(eps=1.5)), {"symbol.eps"}),
    (ExperimentConfig(experiment="flow", symbol=SymbolSpec(dim=3)), {"symbol.dim"}),
    (ExperimentConfig(experiment="decompose", symbol=SymbolSpec(dim=2)), {"symbol.dim"}),
    (ExperimentConfig(experiment="budget", symbol=SymbolSpec(s_values=["2", "1/2"])), {"symbol.s_values[0]"}),
    (ExperimentConfig(experiment="budget", symbol=SymbolSpec(q="2")), {"symbol.q"}),
    (ExperimentConfig(experiment="flow", grid=GridSpec(steps=8)), {"grid.steps"}),
    (ExperimentConfig(experiment="flow", seed=-1), {"seed"}),
])
def test_validation_names_the_field(config, expected):
    assert _problems(config) == expected


def test_validation_collects_every_problem():
    config = ExperimentConfig(experiment="flow", scale=ScaleSpec(R=0.5), grid=GridSpec(steps=8, samples=0))
    assert _problems(config) == {"scale.R", "grid.steps", "grid.samples"}


def test_budget_accepts_any_dimension():
    ExperimentConfig(experiment="budget", symbol=SymbolSpec(dim=5, q="3")).validate()


def test_catalog_order():
    assert [entry.name for entry in list_experiments()] == [
        "isometry", "flow", "localization", "decompose", "dispersive", "bilinear", "conservation", "tubes", "budget",
    ]
    assert all("experiment" in entry.required for entry in list_experiments())


def test_budget_experiment():
    result = _run(ExperimentConfig(experiment="budget"))
    assert result.passed
    assert set(result.summary["budgets"]) == {"0", "1/2", "1"}
    assert result.summary["budgets"]["1"]["sigma"] == pytest.approx(0.5)
    assert result.summary["budgets"]["0"]["kappa0"] is None
    assert len(result.tables["budget"]) == 3


def test_budget_experiment_single_exponent():
    result = _run(ExperimentConfig(experiment="budget", symbol=SymbolSpec(s_values=["1/2"], dim=3, q="10/3")))
    assert result.summary["sigma"] == pytest.approx(4 / 7)
    assert result.summary["kappa0"] == pytest.approx(0.1)


def test_isometry_sample():
    sample = _isometry_sample(1, 16.0, 0, 0)
    assert sample["deviation"] < 1e-10
    assert sample["reconstruction_error"] < 1e-8


@pytest.mark.slow
@pytest.mark.parametrize("name", [e.value for e in ExperimentName])
def test_default_run_passes(name):
    assert _run(ExperimentConfig(experiment=name)).passed
