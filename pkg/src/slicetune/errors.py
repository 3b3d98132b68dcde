"""Exception hierarchy shared by every stage of the pipeline."""


class SliceTuneError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SliceTuneError, ValueError):
    """A configuration value violates one of its invariants."""


class ActionError(SliceTuneError, ValueError):
    """An action is not an integer inside the allowed PRB range."""


class ParseError(SliceTuneError, ValueError):
    """Text does not follow the expected output grammar."""


class ReplayError(SliceTuneError):
    """A counterfactual replay window is not covered by the trace."""


class TransportError(SliceTuneError):
    """A remote call failed at the transport level (retryable)."""


class EndpointError(SliceTuneError):
    """A remote endpoint answered with a non-2xx status."""

    def __init__(self, status: int, body: str):
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class CapabilityError(SliceTuneError):
    """The policy backend does not support the requested operation."""


class FormatError(SliceTuneError):
    """A persisted file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class ReflectionError(SliceTuneError):
    """The reflector failed to label a trajectory."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class OneSidedDatasetError(SliceTuneError):
    """A preference dataset holds only positive or only negative examples."""

    def __init__(self, n_pos: int, n_neg: int, report=None):
        super().__init__(
            f"KTO needs both positive and negative examples (got {n_pos} positive, {n_neg} negative)"
        )
        self.n_pos = n_pos
        self.n_neg = n_neg
        self.report = report


class TrajectoryAborted(SliceTuneError):
    """The actor became unreachable mid-trajectory; ``trajectory`` holds the steps done so far."""

    def __init__(self, trajectory, cause: Exception):
        super().__init__(f"trajectory aborted after {len(trajectory.entries)} steps: {cause}")
        self.trajectory = trajectory
        self.cause = cause
