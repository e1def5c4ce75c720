"""Exception types raised by the fastab modules."""


class FastabError(Exception):
    """Base class for all fastab-specific failures."""


class BlowUpError(FastabError):
    """A simulated path left the finite-magnitude guard.

    Unstable simulations must fail loudly instead of silently producing
    NaN/inf states; the error carries the first offending time.
    """

    def __init__(self, time: float, limit: float):
        self.time = float(time)
        self.limit = float(limit)
        super().__init__(f"path blow-up at t={time:g} (|X| exceeded {limit:g})")


class NonGaussianPushForwardError(FastabError):
    """Moment push-forward requested for a model that does not preserve Gaussians."""


class RiccatiStepError(FastabError):
    """Covariance lost positive semidefiniteness beyond the clamp tolerance."""

    def __init__(self, step: int, min_eig: float):
        self.step = int(step)
        self.min_eig = float(min_eig)
        super().__init__(
            f"Riccati step failure at step {step}: eigenvalue {min_eig:.3e} below clamp tolerance"
        )


class UndetectablePairError(FastabError):
    """(F, H) fails the Hautus detectability test."""

    def __init__(self, eigenvalue: complex):
        self.eigenvalue = eigenvalue
        super().__init__(f"undetectable/unstabilizable pair: (F, H) undetectable at eigenvalue {eigenvalue}")


class UnstabilizablePairError(FastabError):
    """(F, sigma) fails the Hautus stabilizability test."""

    def __init__(self, eigenvalue: complex):
        self.eigenvalue = eigenvalue
        super().__init__(
            f"undetectable/unstabilizable pair: (F, sigma) unstabilizable at eigenvalue {eigenvalue}"
        )


class AreConvergenceError(FastabError):
    """Riccati flow plus Newton refinement failed to meet the residual tolerance."""


class WeightCollapseError(FastabError):
    """Every particle weight underflowed to zero (degenerate likelihood)."""

    def __init__(self, step: int | None = None):
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"weight collapse{where}: all particle weights underflowed to zero")


class ConfigError(FastabError):
    """Configuration validation failed; carries every violation, not just the first."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid config:\n  - " + "\n  - ".join(self.violations))
