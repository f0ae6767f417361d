"""Pipeline error types with stage attribution and process exit codes."""

EXIT_OK = 0
EXIT_AUDIT_FAILURE = 2
EXIT_SPEC_ERROR = 3
EXIT_NUMERIC_GUARD = 4


class PipelineError(Exception):
    """Base error; carries the pipeline stage that raised it."""

    exit_code: int = EXIT_NUMERIC_GUARD

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def with_stage(self, stage: str) -> "PipelineError":
        """Attach a stage name unless one is already recorded."""
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class SpecError(PipelineError):
    """Malformed input: spec files, expressions, windows, gluing data."""

    exit_code = EXIT_SPEC_ERROR


class ExprSyntaxError(SpecError):
    """Expression text could not be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExprSyntaxError):
    pass


class VariableIndexError(ExprSyntaxError):
    pass


class NumericGuardError(PipelineError):
    """A numerical guard tripped: domain errors, SPD failures, degenerate geometry."""

    exit_code = EXIT_NUMERIC_GUARD


class ExprDomainError(NumericGuardError):
    """Evaluation left the domain of an operation (log of non-positive, 1/0, ...)."""

    def __init__(self, message: str, node: str):
        super().__init__(f"{message}: {node}")
        self.node = node


class NonDifferentiableError(ExprDomainError):
    """A derivative was evaluated where the original node is not differentiable."""


class SPDError(NumericGuardError):
    """A metric matrix failed positive definiteness."""


class ShootingError(NumericGuardError):
    """Geodesic integration failed (metric blow-up or no chart)."""
