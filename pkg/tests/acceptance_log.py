"""Shared record of acceptance results, printed by the conftest terminal summary."""

LINES: list = []


def record(criterion: str, passed, detail: str) -> None:
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    LINES.append((criterion, status, detail))
