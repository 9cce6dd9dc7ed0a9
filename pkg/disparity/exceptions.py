class DisparityError(ValueError):
    """Base class for analysis-set and benchmark failures."""


class CensusError(DisparityError):
    """Population table is malformed or does not cover the stops."""


class NoEligibleStatesError(DisparityError):
    """No state carries the fields an analysis needs."""

    def __init__(self, analysis, dropped):
        self.analysis = analysis
        self.dropped = dict(dropped)
        super().__init__(f"{analysis}: no state carries the required fields (dropped {sorted(self.dropped)})")
