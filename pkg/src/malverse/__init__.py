"""Logic-bomb defusing over a toy binary IR: symbolic path discovery, API-based
triage, and stateful patch synthesis validated by a concrete interpreter."""

__version__ = "0.1.0"
