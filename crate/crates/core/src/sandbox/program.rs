//! Assembly of a candidate solution and one assertion into a standalone
//! target-language program whose exit status encodes the test outcome.

/// Exit status of a program whose assertion held.
pub const EXIT_PASSED: i32 = 0;
/// Exit status when the test's own assertion evaluated to false.
pub const EXIT_FAILED: i32 = 3;
/// Exit status for any other uncaught error, including errors raised while
/// defining the solution and assertion errors raised inside the solution.
pub const EXIT_ERRORED: i32 = 4;

const PRELUDE: &str = r#"# utrl test program: exit 0 = passed, 3 = assertion failed, 4 = error
import os as _utrl_os
import sys as _utrl_sys

"#;

const HARNESS: &str = r#"
_UTRL_DENY = frozenset((
    "os.system", "os.exec", "os.posix_spawn", "os.spawn", "os.fork", "os.forkpty",
    "os.kill", "os.killpg", "os.remove", "os.rmdir", "os.rename", "os.replace",
    "os.mkdir", "os.chmod", "os.chown", "os.truncate", "os.link", "os.symlink",
    "os.putenv", "os.unsetenv", "os.setxattr", "os.removexattr", "os.utime",
    "shutil.rmtree", "shutil.move", "shutil.copyfile", "shutil.copytree",
    "shutil.copymode", "shutil.copystat", "shutil.chown", "shutil.make_archive",
    "subprocess.Popen", "pty.spawn", "socket.__new__", "socket.connect",
    "socket.bind", "socket.sendto", "socket.sendmsg", "socket.getaddrinfo",
    "socket.gethostbyname", "socket.gethostbyaddr", "ctypes.dlopen",
    "ctypes.dlsym", "ctypes.cdata", "ctypes.call_function", "sys.setprofile",
    "sys.settrace", "signal.pthread_kill",
))
_UTRL_WRITE_FLAGS = (
    _utrl_os.O_WRONLY | _utrl_os.O_RDWR | _utrl_os.O_CREAT
    | _utrl_os.O_TRUNC | _utrl_os.O_APPEND
)


def _utrl_guard(event, args):
    if event in _UTRL_DENY:
        raise PermissionError("sandbox: %s denied" % event)
    if event == "open" and len(args) >= 3:
        mode, flags = args[1], args[2]
        if isinstance(mode, str) and any(c in mode for c in "wax+"):
            raise PermissionError("sandbox: write access denied")
        if isinstance(flags, int) and flags & _UTRL_WRITE_FLAGS:
            raise PermissionError("sandbox: write access denied")


def _utrl_last_file(tb):
    while tb.tb_next is not None:
        tb = tb.tb_next
    return tb.tb_frame.f_code.co_filename


def _utrl_main():
    namespace = {"__name__": "__candidate__"}
    try:
        exec(compile(_UTRL_SOLUTION, "<solution>", "exec"), namespace)
    except BaseException as exc:
        _utrl_sys.stderr.write("solution raised %s: %s\n" % (type(exc).__name__, exc))
        return 4
    try:
        exec(compile(_UTRL_TEST, "<test>", "exec"), namespace)
    except AssertionError as exc:
        if _utrl_last_file(exc.__traceback__) == "<test>":
            _utrl_sys.stderr.write("assertion failed\n")
            return 3
        _utrl_sys.stderr.write("solution raised AssertionError: %s\n" % (exc,))
        return 4
    except BaseException as exc:
        _utrl_sys.stderr.write("test raised %s: %s\n" % (type(exc).__name__, exc))
        return 4
    return 0


if hasattr(_utrl_sys, "addaudithook"):
    _utrl_sys.addaudithook(_utrl_guard)
_utrl_sys.exit(_utrl_main())
"#;

/// Builds the program executed for one (solution, test) pair.
///
/// Solution and test travel as string literals and are compiled under the
/// file names `<solution>` and `<test>`, which is how a failing assertion in
/// the test is told apart from one raised inside the solution.
pub fn assemble_program(code: &str, test: &str) -> String {
    let mut out = String::with_capacity(PRELUDE.len() + HARNESS.len() + code.len() + test.len() + 64);
    out.push_str(PRELUDE);
    out.push_str("_UTRL_SOLUTION = ");
    out.push_str(&py_string_literal(code));
    out.push_str("\n_UTRL_TEST = ");
    out.push_str(&py_string_literal(test));
    out.push('\n');
    out.push_str(HARNESS);
    out
}

/// A JSON string literal is also a valid Python `str` literal.
fn py_string_literal(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}
