"""RemoteEnv: reset/step over the wire protocol, gym-style.

Default usage launches the server as a subprocess speaking JSON lines over
standard streams; pass an (host, port) address to attach to a TCP server
instead. One RemoteEnv per session; not shareable across concurrent callers.
"""
from __future__ import annotations

import base64
import json
import socket
import subprocess
import sys

import numpy as np

PROTO_VERSION = 1
FRAME_SHAPE = (84, 84, 3)  # protocol constant: raw row-major RGB bytes


class ProtocolError(RuntimeError):
    """Transport failures, malformed responses, or server-side errors."""


class RemoteEnv:
    def __init__(self, send_line, recv_line, close_fn, expected_proto: int = PROTO_VERSION):
        self._send = send_line
        self._recv = recv_line
        self._close = close_fn
        self._closed = False
        self.last_observation = None
        self.info = self._ask({"cmd": "info"})
        proto = self.info.get("proto")
        if proto != expected_proto:
            self.close()
            raise ProtocolError(
                f"protocol version mismatch: server speaks {proto!r}, "
                f"client expects {expected_proto}"
            )
        self.n_actions = self.info["actions"]
        self.grid = tuple(self.info["grid"])
        self.vocab_size = self.info["vocab_size"]
        self.observation_shape = FRAME_SHAPE

    # -------- transport --------

    def _ask(self, doc: dict) -> dict:
        if self._closed:
            raise ProtocolError("session is closed")
        try:
            self._send(json.dumps(doc) + "\n")
            line = self._recv()
        except (OSError, ValueError) as exc:
            raise ProtocolError(f"transport failure: {exc}") from exc
        if not line:
            raise ProtocolError("server closed the connection")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed server response: {line!r}") from exc
        if isinstance(resp, dict) and "error" in resp:
            raise ProtocolError(resp["error"])
        return resp

    @staticmethod
    def _decode_frame(payload: str) -> np.ndarray:
        raw = base64.b64decode(payload)
        frame = np.frombuffer(raw, dtype=np.uint8)
        if frame.size != int(np.prod(FRAME_SHAPE)):
            raise ProtocolError(f"frame has {frame.size} bytes, expected {FRAME_SHAPE}")
        return frame.reshape(FRAME_SHAPE)

    # -------- environment surface --------

    def reset(self, seed: int, split: str = "train"):
        """Returns (frame, tokens, text) for a fresh episode."""
        resp = self._ask({"cmd": "reset", "seed": seed, "split": split})
        frame = self._decode_frame(resp["frame"])
        self.last_observation = frame
        return frame, list(resp["tokens"]), resp["text"]

    def step(self, action: int):
        """Returns (frame, reward, done, info); raises after the episode ends."""
        resp = self._ask({"cmd": "step", "action": int(action)})
        frame = self._decode_frame(resp["frame"])
        self.last_observation = frame
        info = {
            "success": resp["success"],
            "step_count": resp["step_count"],
            "text": resp["text"],
            "tokens": list(resp["tokens"]),
        }
        return frame, float(resp["reward"]), bool(resp["done"]), info

    def close(self) -> None:
        if self._closed:
            return
        try:
            self._send(json.dumps({"cmd": "close"}) + "\n")
            self._recv()
        except Exception:
            pass
        self._closed = True
        self._close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _subprocess_env(server_argv, expected_proto: int) -> RemoteEnv:
    proc = subprocess.Popen(
        server_argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
    )

    def send(line):
        proc.stdin.write(line)
        proc.stdin.flush()

    def recv():
        return proc.stdout.readline()

    def close():
        try:
            proc.stdin.close()
        except Exception:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()

    return RemoteEnv(send, recv, close, expected_proto)


def _tcp_env(address, expected_proto: int) -> RemoteEnv:
    try:
        sock = socket.create_connection(address, timeout=30)
    except OSError as exc:
        raise ProtocolError(f"cannot connect to {address}: {exc}") from exc
    fh = sock.makefile("rw")

    def send(line):
        fh.write(line)
        fh.flush()

    def recv():
        return fh.readline()

    def close():
        fh.close()
        sock.close()

    return RemoteEnv(send, recv, close, expected_proto)


def connect(address=None, scenario_path=None, preset=None,
            expected_proto: int = PROTO_VERSION,
            server_command=None) -> RemoteEnv:
    """Open a session.

    With `address` (host, port): attach to a running TCP server. Otherwise a
    server subprocess is launched over standard streams (`python -m langnav
    serve --stdio`), configured by `scenario_path` or `preset`.
    """
    if address is not None:
        return _tcp_env(address, expected_proto)
    argv = list(server_command) if server_command else [
        sys.executable, "-m", "langnav", "serve", "--stdio",
    ]
    if scenario_path is not None:
        argv += ["--scenario", str(scenario_path)]
    elif preset is not None:
        argv += ["--preset", preset]
    return _subprocess_env(argv, expected_proto)
