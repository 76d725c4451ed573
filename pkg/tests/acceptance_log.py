"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES = []


def record(number, title, passed, detail=""):
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    LINES.append(line)
    print(line)
    return passed
