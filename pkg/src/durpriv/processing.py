"""Run an untrusted per-chunk processor in isolation and collect its rows into a table."""

from __future__ import annotations

import json
import math
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

from .chunking import Chunk, ChunkSpec
from .query import ColumnDef, ProcessStmt
from .relational import Table

BUNDLED_PROCESSORS = Path(__file__).parent / "processors"
ENGINE_COLUMNS = ("chunk", "region")
FILE_SIZE_LIMIT = 64 * 1024 * 1024
LINE_BYTES = 64 * 1024


class ProcessorMissing(FileNotFoundError):
    pass


@dataclass(frozen=True)
class TableMeta:
    """Trusted facts about how a table was produced; everything the sensitivity rules may rely on."""

    camera_id: str
    chunk_spec: ChunkSpec
    max_rows: int
    chunk_times: tuple[float, ...]
    n_regions: int = 1
    boundary: str | None = None


@dataclass
class IntermediateTable(Table):
    name: str = ""
    schema: tuple[ColumnDef, ...] = ()
    meta: TableMeta | None = None
    failures: dict = field(default_factory=dict)


def default_row(schema: Sequence[ColumnDef]) -> tuple:
    return tuple(c.default if c.dtype == "STRING" else float(c.default) for c in schema)


def coerce_row(raw_line: str, schema: Sequence[ColumnDef]) -> tuple:
    """Map tab-separated cells onto the schema; bad or missing cells fall back to column defaults."""
    cells = raw_line.rstrip("\r\n").split("\t") if raw_line.strip("\r\n") else []
    out = []
    for i, col in enumerate(schema):
        if i >= len(cells):
            out.append(col.default if col.dtype == "STRING" else float(col.default))
        elif col.dtype == "STRING":
            out.append(cells[i])
        else:
            try:
                value = float(cells[i])
            except ValueError:
                value = float(col.default)
            out.append(value if math.isfinite(value) else float(col.default))
    return tuple(out)


def rows_from_output(text: str, schema: Sequence[ColumnDef], max_rows: int) -> list[tuple]:
    return [coerce_row(line, schema) for line in text.splitlines()[:max_rows]]


def chunk_payload(chunk: Chunk, camera_id: str, fps: int) -> str:
    lines = [f"{camera_id}\t{chunk.t0!r}\t{fps}\t{len(chunk.frames)}"]
    lines.extend(json.dumps(f.to_record()) for f in chunk.frames)
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Executable:
    path: Path
    interpreter: tuple[str, ...] = ()

    def command(self, local_copy: str) -> list[str]:
        return list(self.interpreter) + [local_copy]


def resolve_executable(path: str, base_dir: str | Path | None = None) -> Executable:
    """Locate a processor: next to the query, then the working directory, then the bundled ones."""
    candidates = [Path(path)] if Path(path).is_absolute() else []
    if not candidates:
        if base_dir is not None:
            candidates.append(Path(base_dir) / path)
        candidates.append(Path.cwd() / path)
        candidates.append(BUNDLED_PROCESSORS / path)
    for cand in candidates:
        if cand.is_file():
            cand = cand.resolve()
            if cand.suffix == ".py":
                return Executable(cand, (sys.executable, "-I"))
            if os.access(cand, os.X_OK):
                return Executable(cand)
    raise ProcessorMissing(f"processor executable {path!r} not found or not runnable")


# Runs inside fresh user, mount, network and IPC namespaces: the root filesystem is remounted
# read-only, /tmp and friends become private tmpfs mounts, and the processor copy is read through
# an fd opened before /tmp was covered.
_SANDBOX_SCRIPT = r"""
set -e
exec 3<"$1"; shift
mount -o remount,bind,ro /
mount -t tmpfs -o size=64m,mode=700 none /tmp
for d in /var/tmp /dev/shm; do
  if [ -d "$d" ]; then mount -t tmpfs -o size=1m none "$d" 2>/dev/null || true; fi
done
mkdir /tmp/.prog /tmp/work
cat <&3 >/tmp/.prog/run
exec 3<&-
chmod 500 /tmp/.prog/run
cd /tmp/work
exec "$@"
"""
SANDBOX_PROGRAM = "/tmp/.prog/run"
SANDBOX_HOME = "/tmp/work"


def _probe(cmd: list[str]) -> bool:
    try:
        return subprocess.run(cmd, capture_output=True, timeout=10).returncode == 0
    except (OSError, subprocess.SubprocessError):
        return False


@lru_cache(maxsize=1)
def sandbox_mode() -> str:
    """'mount' (full namespace sandbox), 'namespace' (network and IPC only) or 'none'."""
    if not shutil.which("unshare"):
        return "none"
    with tempfile.NamedTemporaryFile("w", suffix=".sh") as fh:
        fh.write("exit 0\n")
        fh.flush()
        if _probe(["unshare", "-rmni", "--", "sh", "-c", _SANDBOX_SCRIPT, "sandbox", fh.name, "sh", SANDBOX_PROGRAM]):
            return "mount"
    return "namespace" if _probe(["unshare", "-rni", "true"]) else "none"


@lru_cache(maxsize=1)
def _limits_prefix() -> tuple[str, ...]:
    if shutil.which("prlimit") and _probe(["prlimit", "--core=0", "true"]):
        return ("prlimit", "--core=0", f"--fsize={FILE_SIZE_LIMIT}", "--")
    return ()


def sandbox_command(executable: Executable, local_copy: str) -> tuple[list[str], str | None]:
    """Full command line for one instance and the home directory it will see (None: use the scratch dir)."""
    mode = sandbox_mode()
    if mode == "mount":
        cmd = ["unshare", "-rmni", "--", "sh", "-c", _SANDBOX_SCRIPT, "sandbox", local_copy]
        return cmd + list(_limits_prefix()) + executable.command(SANDBOX_PROGRAM), SANDBOX_HOME
    prefix = ["unshare", "-rni", "--"] if mode == "namespace" else []
    return prefix + list(_limits_prefix()) + executable.command(local_copy), None


@dataclass(frozen=True)
class ChunkResult:
    status: str  # ok, timeout, crash
    rows: tuple[tuple, ...]


def run_chunk(executable: Executable, payload: str, schema: Sequence[ColumnDef], max_rows: int,
              timeout: float, pad_to_timeout: bool = False) -> ChunkResult:
    """Run one fresh processor instance on one chunk, from a private copy of the executable."""
    started = time.monotonic()
    with tempfile.TemporaryDirectory(prefix="durpriv-io-") as io_dir, \
            tempfile.TemporaryDirectory(prefix="durpriv-scratch-") as scratch:
        in_path = os.path.join(io_dir, "stdin")
        out_path = os.path.join(io_dir, "stdout")
        with open(in_path, "w", encoding="utf-8") as fh:
            fh.write(payload)
        local = os.path.join(io_dir, executable.path.name)
        shutil.copyfile(executable.path, local)
        os.chmod(local, 0o500)
        cmd, home = sandbox_command(executable, local)
        home = home or scratch
        env = {"PATH": "/usr/bin:/bin", "HOME": home, "TMPDIR": home, "LANG": "C.UTF-8",
               "PYTHONDONTWRITEBYTECODE": "1"}
        with open(in_path, "rb") as stdin, open(out_path, "wb") as stdout:
            try:
                proc = subprocess.Popen(cmd, stdin=stdin, stdout=stdout, stderr=subprocess.DEVNULL,
                                        cwd=scratch, env=env, close_fds=True, start_new_session=True)
            except OSError:
                status = "crash"
            else:
                try:
                    code = proc.wait(timeout=timeout)
                    status = "ok" if code == 0 else "crash"
                except subprocess.TimeoutExpired:
                    status = "timeout"
                finally:
                    try:
                        os.killpg(proc.pid, signal.SIGKILL)
                    except (ProcessLookupError, PermissionError):
                        pass
                    proc.wait()
        if status == "ok":
            with open(out_path, "rb") as fh:
                text = fh.read(min(max_rows * LINE_BYTES, FILE_SIZE_LIMIT)).decode("utf-8", errors="replace")
            rows = tuple(rows_from_output(text, schema, max_rows))
        else:
            rows = (default_row(schema),)
    if pad_to_timeout:
        remaining = timeout - (time.monotonic() - started)
        if remaining > 0:
            time.sleep(remaining)
    return ChunkResult(status, rows)


def run_processor(chunks: Sequence[Chunk], spec: ProcessStmt, camera_id: str, chunk_spec: ChunkSpec,
                  chunk_times: Sequence[float] | None = None, n_regions: int = 1, boundary: str | None = None,
                  base_dir: str | Path | None = None, workers: int = 1, pad_to_timeout: bool = False,
                  timeout: float | None = None, max_rows: int | None = None) -> IntermediateTable:
    """Process every chunk with a fresh instance and assemble rows in (chunk, region, output) order.

    ``timeout`` and ``max_rows`` override the statement's values (used by the non-private baseline).
    """
    executable = resolve_executable(spec.executable, base_dir)
    limit = spec.timeout.value if timeout is None else timeout
    cap = spec.max_rows if max_rows is None else max_rows
    payloads = [chunk_payload(c, camera_id, chunk_spec.fps) for c in chunks]

    def work(i: int) -> ChunkResult:
        return run_chunk(executable, payloads[i], spec.schema, cap, limit, pad_to_timeout)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(chunks))))
    else:
        results = [work(i) for i in range(len(chunks))]

    order = sorted(range(len(chunks)), key=lambda i: (chunks[i].chunk_index, chunks[i].region_id))
    rows = []
    failures: dict = {}
    for i in order:
        c, res = chunks[i], results[i]
        if res.status != "ok":
            failures[(c.chunk_index, c.region_id)] = res.status
        rows.extend(r + (c.t0, float(c.region_id)) for r in res.rows)
    columns = tuple(col.name for col in spec.schema) + ENGINE_COLUMNS
    if chunk_times is None:
        chunk_times = tuple(sorted({c.t0 for c in chunks}))
    meta = TableMeta(camera_id, chunk_spec, cap, tuple(chunk_times), n_regions, boundary)
    return IntermediateTable(columns, rows, name=spec.name, schema=tuple(spec.schema), meta=meta,
                             failures=failures)
