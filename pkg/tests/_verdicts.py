"""Criterion verdicts collected during the acceptance run and printed at the end."""

VERDICTS = []


def verdict(num, title, ok, detail):
    VERDICTS.append((str(num), title, bool(ok), detail))
    assert ok, f"criterion {num} ({title}) failed: {detail}"
