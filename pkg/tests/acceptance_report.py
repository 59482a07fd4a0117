# criterion number -> (passed, title, detail), filled by tests/test_acceptance.py
RESULTS: dict[int, tuple[bool, str, str]] = {}
