class WavepacketLabError(Exception):
    pass


class ParameterError(WavepacketLabError, ValueError):
    pass


class ConstructionError(ParameterError):
    pass


class ResolutionError(WavepacketLabError):
    pass


class UnsupportedRepresentationError(WavepacketLabError):
    pass


class FlowEscapeError(WavepacketLabError):
    def __init__(self, exit_time: float, message: str | None = None):
        self.exit_time: float = exit_time
        super().__init__(message if message is not None else f"Trajectory left the flow-out region at t = {exit_time:.6g}")


class StabilityError(WavepacketLabError):
    def __init__(self, step: float, suggested_step: float):
        self.step: float = step
        self.suggested_step: float = suggested_step
        super().__init__(f"Step {step:.6g} violates the stability bound, use a step <= {suggested_step:.6g}")


class TimeRangeError(WavepacketLabError):
    pass


class FitError(WavepacketLabError):
    pass


class ConfigError(WavepacketLabError):
    def __init__(self, fields: dict[str, str]):
        self.fields: dict[str, str] = fields
        details = "; ".join(f"{k}: {v}" for k, v in sorted(fields.items()))
        super().__init__(f"Invalid experiment config ({details})")


class ExperimentError(WavepacketLabError):
    def __init__(self, experiment: str, cause: Exception):
        self.experiment: str = experiment
        super().__init__(f"Experiment '{experiment}' failed: {cause}")


class TruncationWarning(UserWarning):
    def __init__(self, message: str, tail_mass: float):
        super().__init__(message)
        self.tail_mass: float = tail_mass


class ScaleClampWarning(UserWarning):
    pass
