"""Entry point: one ExecutionRequest on stdin, one Verdict line on stdout.

A malformed request is a candidate-category problem and yields a `crash`
verdict with exit code 0; only infrastructure failures (the runner itself
breaking) exit non-zero, so callers can tell the two apart.
"""

import argparse
import sys

from .core import RequestError, Verdict, execute, parse_request


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sandbox-runner",
        description="Run one candidate program plus its tests; print a JSON verdict.",
    )
    parser.add_argument(
        "--no-network",
        action="store_true",
        help="install a best-effort guard that blocks socket creation",
    )
    args = parser.parse_args(argv)

    raw = sys.stdin.read()
    try:
        request = parse_request(raw)
    except RequestError as exc:
        print(Verdict("crash", 0.0, str(exc)).to_json())
        return 0
    try:
        verdict = execute(request, no_network=args.no_network)
    except OSError as exc:
        print(f"sandbox-runner: infrastructure failure: {exc}", file=sys.stderr)
        return 1
    print(verdict.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
