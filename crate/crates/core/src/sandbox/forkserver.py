# Fork server used by the execution sandbox.
#
# Reads one JSON request per line on stdin and writes one JSON response per
# line on stdout. The server itself never executes candidate code: every
# compile, parse and test run happens in a freshly forked child with resource
# limits applied, so no state leaks between tests.
import ast
import json
import os
import resource
import select
import signal
import sys
import time

PROTOCOL_VERSION = 1


def _limit(kind, value):
    try:
        resource.setrlimit(kind, (value, value))
    except (ValueError, OSError):
        pass


def _child_setup(limits, out_w):
    os.setsid()
    devnull = os.open(os.devnull, os.O_RDONLY)
    os.dup2(devnull, 0)
    os.dup2(out_w, 1)
    os.dup2(out_w, 2)
    _limit(resource.RLIMIT_AS, int(limits["memory_bytes"]))
    _limit(resource.RLIMIT_CPU, int(limits["wall_time_secs"]) + 1)
    _limit(resource.RLIMIT_FSIZE, 0)
    _limit(resource.RLIMIT_CORE, 0)
    sys.stdout = os.fdopen(1, "w", closefd=False)
    sys.stderr = os.fdopen(2, "w", closefd=False)


def _fork_and_wait(limits, body, output_cap):
    out_r, out_w = os.pipe()
    pid = os.fork()
    if pid == 0:
        code = 4
        try:
            os.close(out_r)
            _child_setup(limits, out_w)
            code = body()
        except SystemExit as exc:
            code = exc.code if isinstance(exc.code, int) else 4
        except BaseException as exc:
            try:
                sys.stderr.write("%s: %s\n" % (type(exc).__name__, exc))
            except BaseException:
                pass
            code = 4
        try:
            sys.stdout.flush()
            sys.stderr.flush()
        except BaseException:
            pass
        os._exit(code)

    os.close(out_w)
    deadline = time.monotonic() + float(limits["wall_time_secs"])
    chunks = []
    kept = 0
    truncated = False
    status = None
    timed_out = False
    pidfd = os.pidfd_open(pid) if hasattr(os, "pidfd_open") else None
    pipe_open = True
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            timed_out = True
            break
        watch = [out_r] if pipe_open else []
        if pidfd is not None:
            watch.append(pidfd)
        ready, _, _ = select.select(watch, [], [], min(remaining, 0.05))
        if pipe_open and out_r in ready:
            data = os.read(out_r, 65536)
            if not data:
                pipe_open = False
            elif kept < output_cap:
                take = data[: output_cap - kept]
                chunks.append(take)
                kept += len(take)
                truncated = truncated or len(take) < len(data)
            else:
                truncated = True
        done, st = os.waitpid(pid, os.WNOHANG)
        if done:
            status = st
            break
    if timed_out:
        try:
            os.killpg(pid, signal.SIGKILL)
        except OSError:
            try:
                os.kill(pid, signal.SIGKILL)
            except OSError:
                pass
        _, status = os.waitpid(pid, 0)
    # drain whatever the child left in the pipe
    while True:
        ready, _, _ = select.select([out_r], [], [], 0)
        if not ready:
            break
        data = os.read(out_r, 65536)
        if not data:
            break
        if kept < output_cap:
            take = data[: output_cap - kept]
            chunks.append(take)
            kept += len(take)
    os.close(out_r)
    if pidfd is not None:
        os.close(pidfd)
    text = b"".join(chunks).decode("utf-8", "replace")
    if truncated:
        text += "\n[output truncated]"
    return timed_out, status, text


def _status_name(timed_out, status):
    if timed_out:
        return "timed_out"
    if os.WIFEXITED(status):
        code = os.WEXITSTATUS(status)
        if code == 0:
            return "passed"
        if code == 3:
            return "failed"
        return "errored"
    return "errored"


def _signal_note(status):
    if status is not None and os.WIFSIGNALED(status):
        return "killed by signal %d" % os.WTERMSIG(status)
    return ""


def op_compile(req):
    code = req["code"]

    def body():
        try:
            compile(code, "<solution>", "exec")
        except BaseException as exc:
            line = getattr(exc, "lineno", None)
            where = " (line %s)" % line if line else ""
            sys.stderr.write("%s: %s%s\n" % (type(exc).__name__, getattr(exc, "msg", exc), where))
            return 1
        return 0

    timed_out, status, text = _fork_and_wait(req["limits"], body, int(req["limits"]["output_bytes"]))
    ok = (not timed_out) and os.WIFEXITED(status) and os.WEXITSTATUS(status) == 0
    if timed_out:
        text = "compile timed out"
    return {"ok": ok, "diag": (text or _signal_note(status)).strip()}


def op_run(req):
    limits = req["limits"]
    results = []
    for program in req["programs"]:

        def body(program=program):
            glb = {"__name__": "__main__", "__builtins__": __builtins__}
            exec(compile(program, "<program>", "exec"), glb)
            return 0

        timed_out, status, text = _fork_and_wait(limits, body, int(limits["output_bytes"]))
        name = _status_name(timed_out, status)
        diag = text.strip()
        if not diag:
            diag = _signal_note(status)
        results.append({"status": name, "diag": diag})
    return {"results": results}


def _bound_names(stmt):
    if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
        return [stmt.name]
    if isinstance(stmt, (ast.Import, ast.ImportFrom)):
        out = []
        for alias in stmt.names:
            out.append(alias.asname or alias.name.split(".")[0])
        return out
    names = []
    for node in ast.walk(stmt):
        if isinstance(node, ast.Name) and isinstance(node.ctx, ast.Store):
            names.append(node.id)
    return sorted(set(names))


def _kind(stmt):
    if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef)):
        return "def"
    if isinstance(stmt, ast.ClassDef):
        return "class"
    if isinstance(stmt, (ast.Import, ast.ImportFrom)):
        return "import"
    return "other"


def op_parse(req):
    code = req["code"]

    def body():
        try:
            tree = ast.parse(code, "<solution>")
        except BaseException as exc:
            sys.stdout.write(json.dumps({"ok": False, "diag": "%s: %s" % (type(exc).__name__, getattr(exc, "msg", exc))}))
            return 0
        items = []
        for stmt in tree.body:
            refs = set()
            for node in ast.walk(stmt):
                if isinstance(node, ast.Name) and not isinstance(node.ctx, ast.Store):
                    refs.add(node.id)
            items.append(
                {
                    "kind": _kind(stmt),
                    "names": _bound_names(stmt),
                    "refs": sorted(refs),
                    "src": ast.unparse(stmt),
                }
            )
        sys.stdout.write(json.dumps({"ok": True, "diag": "", "items": items}))
        return 0

    limits = req["limits"]
    timed_out, status, text = _fork_and_wait(limits, body, 1 << 26)
    if timed_out:
        return {"ok": False, "diag": "parse timed out", "items": []}
    try:
        return json.loads(text)
    except ValueError:
        return {"ok": False, "diag": "parse helper failed: " + (text.strip() or _signal_note(status)), "items": []}


def main():
    handlers = {"compile": op_compile, "run": op_run, "parse": op_parse}
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            op = req.get("op")
            if op == "hello":
                resp = {"ok": True, "version": PROTOCOL_VERSION, "python": sys.version.split()[0]}
            elif op in handlers:
                resp = handlers[op](req)
            else:
                resp = {"error": "unknown op %r" % (op,)}
        except Exception as exc:
            resp = {"error": "%s: %s" % (type(exc).__name__, exc)}
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
