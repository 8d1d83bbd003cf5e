"""Restricted execution of candidate code blocks.

Candidate source is compiled into a private namespace whose ``__import__``
only admits an allowlist of numerical packages. Checks run in a forked
worker with an address-space cap, a per-call wall-clock alarm and an audit
hook that denies writes, sockets and process spawning. Training reuses the
same restricted namespace in-process once a candidate has passed its checks.
"""

from __future__ import annotations

import builtins
import inspect
import multiprocessing as mp
import os
import resource
import signal
import sys
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import torch

from ..sim import StreamObservation
from .design import CandidateDesign

STATE_ENTRY = "build_state"
NETWORK_ENTRY = "build_actor_critic"

STATE_ARGS = (
    "throughput_history_mbps",
    "download_time_history_s",
    "next_chunk_sizes_bytes",
    "buffer_level_s",
    "chunks_remaining",
    "last_bitrate_kbps",
    "buffer_history_s",
)

DEFAULT_ALLOWLIST = (
    "numpy", "math", "scipy", "statsmodels", "statistics",
    "collections", "itertools", "functools",
)
NETWORK_EXTRA_IMPORTS = ("torch",)

_DENIED_BUILTINS = ("open", "exec", "eval", "compile", "input", "breakpoint",
                    "exit", "quit", "help", "__import__", "memoryview")

# failure reasons
SYNTAX = "syntax error"
EXECUTION = "execution error"
TIMEOUT = "timeout"
MEMORY = "memory limit"
IMPORT = "disallowed import"
NON_NUMERIC = "non-numeric output"
SHAPE_DRIFT = "shape drift"
MISSING_ENTRY = "missing entry point"
ACTION_DIM = "action-dimension mismatch"
BAD_PROBE = "invalid probe output"
INFRA = "infrastructure error"


class CandidateFailure(Exception):
    """Candidate code misbehaved; ``reason`` is one of the module constants."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class DisallowedImport(ImportError):
    pass


class _CallTimeout(BaseException):
    # BaseException so candidate ``except Exception`` blocks cannot swallow it
    pass


@dataclass(frozen=True)
class SandboxPolicy:
    time_limit_s: float = 5.0
    memory_limit_bytes: int = 256 * 2**20
    import_allowlist: tuple[str, ...] = DEFAULT_ALLOWLIST
    isolation: str = "process"  # "process" or "inline"

    def __post_init__(self):
        if self.time_limit_s <= 0 or self.memory_limit_bytes <= 0:
            raise ValueError("sandbox limits must be positive")
        if self.isolation not in ("process", "inline"):
            raise ValueError(f"unknown isolation mode {self.isolation!r}")

    @property
    def network_access(self) -> bool:
        return False

    def for_networks(self) -> "SandboxPolicy":
        extra = tuple(m for m in NETWORK_EXTRA_IMPORTS if m not in self.import_allowlist)
        return SandboxPolicy(self.time_limit_s, self.memory_limit_bytes,
                             self.import_allowlist + extra, self.isolation)


# -- compilation -------------------------------------------------------------

def _guarded_import(allowlist):
    real_import = builtins.__import__

    def _import(name, globals=None, locals=None, fromlist=(), level=0):
        root = name.split(".")[0]
        if level != 0 or root not in allowlist:
            raise DisallowedImport(f"import of {name!r} is not permitted")
        return real_import(name, globals, locals, fromlist, level)

    return _import


def compile_candidate(source: str, allowlist, name: str = "candidate") -> dict:
    """Execute ``source`` at module level inside a restricted namespace."""
    safe = {k: v for k, v in vars(builtins).items() if k not in _DENIED_BUILTINS}
    safe["__import__"] = _guarded_import(tuple(allowlist))
    ns = {"__builtins__": safe, "__name__": f"candidate_{name}"}
    try:
        code = compile(source, f"<candidate {name}>", "exec")
    except SyntaxError as exc:
        raise CandidateFailure(SYNTAX, f"line {exc.lineno}: {exc.msg}") from None
    try:
        exec(code, ns)
    except DisallowedImport as exc:
        raise CandidateFailure(IMPORT, str(exc)) from None
    except MemoryError:
        raise CandidateFailure(MEMORY, "allocation failed at import time") from None
    except Exception as exc:
        raise CandidateFailure(EXECUTION, _describe(exc)) from None
    return ns


def _describe(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def call_limited(fn: Callable, policy: SandboxPolicy, *args, **kwargs):
    """Call ``fn`` mapping candidate misbehaviour onto :class:`CandidateFailure`.

    A wall-clock alarm enforces ``policy.time_limit_s`` when running on the
    main thread.
    """
    use_alarm = hasattr(signal, "setitimer") and _on_main_thread()
    if use_alarm:
        def _expire(signum, frame):
            raise _CallTimeout()
        old = signal.signal(signal.SIGALRM, _expire)
        signal.setitimer(signal.ITIMER_REAL, policy.time_limit_s)
    try:
        return fn(*args, **kwargs)
    except _CallTimeout:
        raise CandidateFailure(TIMEOUT, f"exceeded {policy.time_limit_s} s") from None
    except CandidateFailure:
        raise
    except DisallowedImport as exc:
        raise CandidateFailure(IMPORT, str(exc)) from None
    except MemoryError:
        raise CandidateFailure(MEMORY, "allocation failed") from None
    except Exception as exc:
        raise CandidateFailure(EXECUTION, _describe(exc)) from None
    finally:
        if use_alarm:
            signal.setitimer(signal.ITIMER_REAL, 0)
            signal.signal(signal.SIGALRM, old)


def _on_main_thread() -> bool:
    import threading
    return threading.current_thread() is threading.main_thread()


# -- process isolation -------------------------------------------------------

_WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC
_BLOCKED_EVENTS = ("subprocess.Popen", "os.system", "os.exec", "os.posix_spawn", "os.spawn",
                   "os.fork", "os.forkpty", "os.kill", "os.remove", "os.rename", "os.rmdir",
                   "os.mkdir", "os.chmod", "os.truncate", "shutil.rmtree", "ctypes.dlopen")


def _install_audit_hook():
    readable_roots = tuple(
        os.path.realpath(p) for p in {sys.prefix, sys.base_prefix, sys.exec_prefix, *sys.path}
        if p and os.path.isdir(p)
    )

    def hook(event, args):
        if event == "open":
            path, mode, flags = args
            if isinstance(mode, str) and any(c in mode for c in "wax+"):
                raise PermissionError("sandbox: file writes denied")
            if isinstance(flags, int) and flags & _WRITE_FLAGS:
                raise PermissionError("sandbox: file writes denied")
            if isinstance(path, (str, bytes, os.PathLike)):
                real = os.path.realpath(os.fsdecode(path))
                if not real.startswith(readable_roots):
                    raise PermissionError(f"sandbox: read of {real} denied")
        elif event.startswith("socket.") or event.startswith(_BLOCKED_EVENTS):
            raise PermissionError(f"sandbox: {event} denied")

    sys.addaudithook(hook)


def _apply_memory_cap(limit: int) -> None:
    # the forked worker inherits the parent's mappings; cap growth beyond them
    page = os.sysconf("SC_PAGE_SIZE")
    with open("/proc/self/statm") as fh:
        current = int(fh.read().split()[0]) * page
    _, hard = resource.getrlimit(resource.RLIMIT_AS)
    cap = current + limit
    if hard != resource.RLIM_INFINITY:
        cap = min(cap, hard)
    resource.setrlimit(resource.RLIMIT_AS, (cap, hard))


def _deny_file_growth() -> None:
    # native writers (e.g. torch.save) bypass the audit hook; regular-file writes
    # then fail with EFBIG while pipes stay usable
    signal.signal(signal.SIGXFSZ, signal.SIG_IGN)
    resource.setrlimit(resource.RLIMIT_FSIZE, (0, resource.getrlimit(resource.RLIMIT_FSIZE)[1]))


def _child_main(conn, target, args, policy):
    try:
        _apply_memory_cap(policy.memory_limit_bytes)
        _deny_file_growth()
        _install_audit_hook()
        result = ("ok", target(*args))
    except CandidateFailure as exc:
        result = ("fail", (exc.reason, exc.detail))
    except MemoryError:
        result = ("fail", (MEMORY, "allocation failed"))
    except BaseException as exc:  # noqa: BLE001 - report anything back to the parent
        result = ("fail", (EXECUTION, _describe(exc)))
    try:
        conn.send(result)
    except Exception as exc:
        conn.send(("fail", (NON_NUMERIC, f"result not transferable: {_describe(exc)}")))
    finally:
        conn.close()
        os._exit(0)


def run_isolated(target: Callable, args: tuple, policy: SandboxPolicy, n_calls: int = 1):
    """Run ``target(*args)`` in a forked worker and return its result.

    ``target`` is expected to use :func:`call_limited` for each candidate call;
    the worker as a whole gets ``n_calls`` time limits plus slack.
    """
    if policy.isolation == "inline":
        return target(*args)
    try:
        ctx = mp.get_context("fork")
        recv, send = ctx.Pipe(duplex=False)
        proc = ctx.Process(target=_child_main, args=(send, target, args, policy), daemon=True)
        proc.start()
    except OSError as exc:
        raise CandidateFailure(INFRA, f"could not start sandbox worker: {exc}") from None
    send.close()
    budget = policy.time_limit_s * max(n_calls, 1) + 10.0
    try:
        if not recv.poll(budget):
            raise CandidateFailure(TIMEOUT, f"worker exceeded {budget:.0f} s")
        try:
            status, payload = recv.recv()
        except EOFError:
            proc.join(1.0)
            code = proc.exitcode
            if code is not None and code < 0 and -code in (signal.SIGKILL, signal.SIGSEGV):
                raise CandidateFailure(MEMORY, f"worker killed by signal {-code}") from None
            raise CandidateFailure(EXECUTION, f"worker exited abnormally ({code})") from None
    finally:
        if proc.is_alive():
            proc.kill()
        proc.join()
        recv.close()
    if status == "fail":
        raise CandidateFailure(*payload)
    return payload


# -- state candidates --------------------------------------------------------

def _as_state_tensor(out: Any) -> np.ndarray:
    if isinstance(out, torch.Tensor):
        out = out.detach().cpu().numpy()
    try:
        arr = np.array(out, dtype=float)
    except (TypeError, ValueError) as exc:
        raise CandidateFailure(NON_NUMERIC, _describe(exc)) from None
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise CandidateFailure(NON_NUMERIC, f"expected a 2-D feature matrix, got shape {arr.shape}")
    if arr.size == 0:
        raise CandidateFailure(NON_NUMERIC, "empty feature matrix")
    return arr


class StateProgram:
    """A compiled state candidate: observation -> (channels, width) feature matrix.

    The first call fixes the output shape; later calls with a different shape
    fail with ``shape drift``. Inputs are handed over as fresh copies.
    """

    def __init__(self, candidate: CandidateDesign, policy: SandboxPolicy = SandboxPolicy()):
        if candidate.kind != "state":
            raise ValueError(f"{candidate.id} is a {candidate.kind} candidate, not a state")
        self.candidate = candidate
        self.policy = policy
        self._ns = compile_candidate(candidate.source_text, policy.import_allowlist, candidate.id)
        fn = self._ns.get(STATE_ENTRY)
        if not callable(fn):
            raise CandidateFailure(MISSING_ENTRY, f"no callable {STATE_ENTRY}()")
        self._fn = fn
        params = inspect.signature(fn).parameters
        takes_kwargs = any(p.kind is p.VAR_KEYWORD for p in params.values())
        self._wanted = STATE_ARGS if takes_kwargs else tuple(a for a in STATE_ARGS if a in params)
        unknown = [n for n, p in params.items()
                   if n not in STATE_ARGS and p.default is p.empty
                   and p.kind in (p.POSITIONAL_OR_KEYWORD, p.KEYWORD_ONLY)]
        if unknown:
            raise CandidateFailure(EXECUTION, f"{STATE_ENTRY}() requires unknown inputs {unknown}")
        self.shape: tuple[int, int] | None = None

    def _kwargs(self, obs: StreamObservation) -> dict:
        values = {
            "throughput_history_mbps": np.array(obs.throughput_hist_mbps, dtype=float),
            "download_time_history_s": np.array(obs.download_time_hist_s, dtype=float),
            "next_chunk_sizes_bytes": np.array(obs.next_sizes_bytes, dtype=float),
            "buffer_level_s": float(obs.buffer_s),
            "chunks_remaining": int(obs.chunks_remaining),
            "last_bitrate_kbps": float(obs.ladder_kbps[obs.last_level]),
            "buffer_history_s": np.array(obs.buffer_hist_s, dtype=float),
        }
        return {k: values[k] for k in self._wanted}

    def _constants(self, obs: StreamObservation) -> None:
        self._ns["BITRATE_LEVELS_KBPS"] = np.array(obs.ladder_kbps, dtype=float)
        self._ns["TOTAL_CHUNKS"] = int(obs.total_chunks)
        self._ns["HISTORY_LEN"] = len(obs.throughput_hist_mbps)

    def __call__(self, obs: StreamObservation) -> np.ndarray:
        self._constants(obs)
        out = call_limited(self._fn, self.policy, **self._kwargs(obs))
        arr = _as_state_tensor(out)
        if self.shape is None:
            self.shape = arr.shape
        elif arr.shape != self.shape:
            raise CandidateFailure(SHAPE_DRIFT, f"shape {arr.shape} after {self.shape}")
        return arr


def _state_worker(candidate, observations, policy):
    prog = StateProgram(candidate, policy)
    return [prog(o) for o in observations]


def execute_state_many(candidate: CandidateDesign, observations, policy: SandboxPolicy = SandboxPolicy()):
    """Evaluate a state candidate on several observations inside one sandbox worker."""
    if candidate.kind != "state":
        raise ValueError("execute_state requires a state candidate")
    observations = list(observations)
    return run_isolated(_state_worker, (candidate, observations, policy), policy, len(observations))


def execute_state(candidate: CandidateDesign, obs: StreamObservation,
                  policy: SandboxPolicy = SandboxPolicy()) -> np.ndarray:
    return execute_state_many(candidate, [obs], policy)[0]


# -- network candidates ------------------------------------------------------

class PolicyHandle:
    """Actor/critic pair built by a network candidate.

    ``forward`` maps one (channels, width) state to action probabilities over
    the ladder and a scalar value estimate.
    """

    def __init__(self, actor: torch.nn.Module, critic: torch.nn.Module, n_actions: int,
                 state_shape: tuple[int, int]):
        self.actor = actor
        self.critic = critic
        self.n_actions = n_actions
        self.state_shape = tuple(state_shape)
        actor_ids = {id(p) for p in actor.parameters()}
        self.actor_params = list(actor.parameters())
        self.critic_params = [p for p in critic.parameters() if id(p) not in actor_ids]

    def parameters(self) -> list[torch.Tensor]:
        return self.actor_params + self.critic_params

    def logits_values(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.actor(x)
        value = self.critic(x)
        if value.dim() == 2 and value.shape[1] == 1:
            value = value[:, 0]
        return logits, value

    @torch.no_grad()
    def forward(self, state) -> tuple[np.ndarray, float]:
        x = torch.as_tensor(np.asarray(state, dtype=np.float32)).reshape(1, *self.state_shape)
        logits, value = self.logits_values(x)
        probs = torch.softmax(logits.double(), dim=-1)[0]
        return probs.numpy(), float(value[0])

    __call__ = forward

    @torch.no_grad()
    def action_probs(self, state) -> np.ndarray:
        """Actor output only; the cheap path used while acting."""
        x = torch.as_tensor(np.asarray(state, dtype=np.float32)).reshape(1, *self.state_shape)
        return torch.softmax(self.actor(x).double(), dim=-1)[0].numpy()

    def train(self, mode: bool = True) -> None:
        self.actor.train(mode)
        self.critic.train(mode)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.detach().double().cpu().numpy().ravel() for p in self.parameters()])

    @torch.no_grad()
    def load_flat_parameters(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        need = sum(p.numel() for p in self.parameters())
        if need != flat.size:
            raise ValueError(f"parameter vector has {flat.size} entries, network needs {need}")
        i = 0
        for p in self.parameters():
            n = p.numel()
            p.copy_(torch.as_tensor(flat[i:i + n]).reshape(p.shape).to(p.dtype))
            i += n


def _probe_input(state_shape, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((2, *state_shape), generator=gen)


def validate_handle(handle: PolicyHandle) -> None:
    x = _probe_input(handle.state_shape)
    with torch.no_grad():
        try:
            logits, value = handle.logits_values(x)
        except Exception as exc:
            raise CandidateFailure(EXECUTION, f"forward pass failed: {_describe(exc)}") from None
    if not isinstance(logits, torch.Tensor) or logits.dim() != 2 or logits.shape[0] != 2:
        raise CandidateFailure(BAD_PROBE, f"actor output shape {getattr(logits, 'shape', None)}")
    if logits.shape[1] != handle.n_actions:
        raise CandidateFailure(ACTION_DIM,
                               f"actor emits {logits.shape[1]} logits for {handle.n_actions} actions")
    if not isinstance(value, torch.Tensor) or tuple(value.shape) != (2,):
        raise CandidateFailure(BAD_PROBE, f"critic output shape {getattr(value, 'shape', None)}")
    probs = torch.softmax(logits.double(), dim=-1)
    if not (torch.isfinite(probs).all() and torch.isfinite(value).all()):
        raise CandidateFailure(BAD_PROBE, "non-finite probabilities or value")
    if (probs < 0).any() or (probs.sum(-1) - 1).abs().max() > 1e-6:
        raise CandidateFailure(BAD_PROBE, "actor output is not a probability simplex")


def instantiate_network(candidate: CandidateDesign, state_shape: tuple[int, int], n_actions: int,
                        seed: int = 0, policy: SandboxPolicy = SandboxPolicy()) -> PolicyHandle:
    """Build and probe a network candidate in the current process."""
    if candidate.kind != "network":
        raise ValueError(f"{candidate.id} is a {candidate.kind} candidate, not a network")
    net_policy = policy.for_networks()
    ns = compile_candidate(candidate.source_text, net_policy.import_allowlist, candidate.id)
    factory = ns.get(NETWORK_ENTRY)
    if not callable(factory):
        raise CandidateFailure(MISSING_ENTRY, f"no callable {NETWORK_ENTRY}()")
    channels, width = state_shape
    torch.manual_seed(seed)
    built = call_limited(factory, net_policy, channels, width, n_actions)
    if not (isinstance(built, tuple) and len(built) == 2
            and all(isinstance(m, torch.nn.Module) for m in built)):
        raise CandidateFailure(BAD_PROBE, f"{NETWORK_ENTRY}() must return (actor, critic) modules")
    actor, critic = built
    actor.float()
    critic.float()
    handle = PolicyHandle(actor, critic, n_actions, state_shape)
    call_limited(validate_handle, net_policy, handle)
    return handle


def _network_worker(candidate, state_shape, n_actions, seed, policy):
    handle = instantiate_network(candidate, state_shape, n_actions, seed, policy)
    return handle.forward(_probe_input(state_shape)[0].numpy())


def probe_network(candidate: CandidateDesign, state_shape, n_actions: int, seed: int = 0,
                  policy: SandboxPolicy = SandboxPolicy()):
    """Instantiate and probe a network inside a sandbox worker; returns (probs, value)."""
    return run_isolated(_network_worker, (candidate, tuple(state_shape), n_actions, seed, policy),
                        policy.for_networks(), 2)


def format_failure(exc: CandidateFailure) -> str:
    return exc.reason if not exc.detail else f"{exc.reason} ({exc.detail})"
