"""One process per execution: build the script, run it under limits, report."""

from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass

_STDERR_EXCERPT = 500

# Prepended to the candidate script when network access is disallowed.  A
# best-effort guard, not OS-level isolation: it removes the obvious route
# (socket creation) before any candidate code runs.
_NO_NETWORK_PRELUDE = """\
import socket as _socket


def _blocked(*args, **kwargs):
    raise OSError("network access disabled")


_socket.socket = _blocked
_socket.create_connection = _blocked
"""


@dataclass
class Verdict:
    status: str  # pass | fail | timeout | crash
    wall_time: float
    stderr_excerpt: str

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class RequestError(ValueError):
    """The request line is not a well-formed ExecutionRequest."""


def parse_request(line: str) -> dict:
    try:
        request = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RequestError(f"request is not valid JSON: {exc}") from exc
    if not isinstance(request, dict):
        raise RequestError("request must be a JSON object")
    for field in ("program_text", "test_text"):
        if not isinstance(request.get(field), str):
            raise RequestError(f"missing or non-string field: {field}")
    timeout = request.get("timeout_seconds", 10.0)
    if not isinstance(timeout, (int, float)) or timeout <= 0:
        raise RequestError("timeout_seconds must be a positive number")
    memory = request.get("memory_limit_mb", 512)
    if not isinstance(memory, (int, float)) or memory <= 0:
        raise RequestError("memory_limit_mb must be a positive number")
    return {
        "program_text": request["program_text"],
        "test_text": request["test_text"],
        "timeout_seconds": float(timeout),
        "memory_limit_mb": int(memory),
    }


def _limiter(memory_limit_mb: int, timeout_seconds: float):
    """Pre-exec hook: own session (so the whole tree can be killed) plus
    best-effort address-space and CPU caps where the platform has them."""

    def apply() -> None:
        os.setsid()
        try:
            import resource

            limit = memory_limit_mb * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
            cpu = max(1, int(timeout_seconds) + 2)
            resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu + 1))
        except (ImportError, ValueError, OSError):
            pass

    return apply


def execute(request: dict, no_network: bool = False) -> Verdict:
    """Run program + tests in a fresh subprocess inside a throwaway temp dir."""
    prelude = _NO_NETWORK_PRELUDE if no_network else ""
    script = f"{prelude}{request['program_text']}\n\n{request['test_text']}\n"
    timeout = request["timeout_seconds"]
    with tempfile.TemporaryDirectory(prefix="sandbox-") as workdir:
        script_path = os.path.join(workdir, "candidate.py")
        with open(script_path, "w", encoding="utf-8") as fh:
            fh.write(script)
        start = time.monotonic()
        proc = subprocess.Popen(
            [sys.executable, "-I", script_path],
            cwd=workdir,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.PIPE,
            text=True,
            preexec_fn=_limiter(request["memory_limit_mb"], timeout),
        )
        try:
            _, stderr = proc.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
            wall = time.monotonic() - start
            return Verdict("timeout", wall, f"killed after {timeout}s wall clock")
        wall = time.monotonic() - start
        status = "pass" if proc.returncode == 0 else "fail"
        return Verdict(status, wall, (stderr or "")[-_STDERR_EXCERPT:])
