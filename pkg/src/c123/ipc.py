"""Framed request/response protocol for out-of-process model backends.

Every message is::

    b"C123GUID"                      8-byte magic
    <uint32 little-endian n>         length of the header line
    <n bytes>                        UTF-8 JSON object terminated by "\\n"
    <raster bytes>                   float32 little-endian, C order

The header's ``shapes`` list gives the shape of each raster that follows.
Requests carry ``id`` and ``kind`` (``INFO``, ``TEXT``, ``IMAGE_POSE``,
``EMBED`` or ``PERCEPTUAL``); responses echo ``id`` and add ``error`` on
failure.
"""

from __future__ import annotations

import io
import json
import socket
import struct
from typing import BinaryIO, List, Sequence, Tuple

import numpy as np

from .errors import BackendError
from .guidance import Conditioning

MAGIC = b"C123GUID"


def encode_message(header: dict, arrays: Sequence[np.ndarray] = ()) -> bytes:
    arrays = [np.ascontiguousarray(a, dtype="<f4") for a in arrays]
    header = dict(header, shapes=[list(a.shape) for a in arrays])
    line = (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
    return b"".join([MAGIC, struct.pack("<I", len(line)), line] + [a.tobytes() for a in arrays])


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            raise EOFError("connection closed mid-message")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_message(stream: BinaryIO) -> Tuple[dict, List[np.ndarray]]:
    magic = _read_exact(stream, len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    (n,) = struct.unpack("<I", _read_exact(stream, 4))
    line = _read_exact(stream, n)
    if not line.endswith(b"\n"):
        raise ValueError("header line is not newline-terminated")
    header = json.loads(line.decode("utf-8"))
    arrays = []
    for shape in header.get("shapes", []):
        count = int(np.prod(shape)) if shape else 1
        buf = _read_exact(stream, 4 * count)
        arrays.append(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64))
    return header, arrays


def decode_message(data: bytes) -> Tuple[dict, List[np.ndarray]]:
    return read_message(io.BytesIO(data))


def connect(address: str) -> socket.socket:
    """``unix:/path``, ``/path`` or ``host:port``."""
    if address.startswith("unix:"):
        address = address[len("unix:"):]
    if "/" in address:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.connect(address)
        return sock
    host, _, port = address.rpartition(":")
    return socket.create_connection((host or "127.0.0.1", int(port)))


class IPCClient:
    def __init__(self, address=None, sock: socket.socket = None):
        if sock is None and address is None:
            raise ValueError("need an address or a connected socket")
        self.address = address
        self._sock = sock
        self._stream = None
        self._next_id = 0

    def _ensure(self):
        if self._sock is None:
            try:
                self._sock = connect(self.address)
            except OSError as exc:
                raise BackendError(f"cannot reach backend at {self.address}: {exc}") from exc
        if self._stream is None:
            self._stream = self._sock.makefile("rb")

    def request(self, header: dict, arrays: Sequence[np.ndarray] = ()):
        self._ensure()
        self._next_id += 1
        rid = self._next_id
        try:
            self._sock.sendall(encode_message(dict(header, id=rid), arrays))
            reply, out = read_message(self._stream)
        except (OSError, EOFError, ValueError) as exc:
            raise BackendError(f"backend exchange failed: {exc}") from exc
        if reply.get("id") != rid:
            raise BackendError(f"response id {reply.get('id')} does not match request {rid}")
        if "error" in reply:
            raise BackendError(f"backend reported: {reply['error']}")
        return reply, out

    def close(self):
        if self._stream is not None:
            self._stream.close()
        if self._sock is not None:
            self._sock.close()


class IPCNoisePredictor:
    """Noise predictor served by another process.  Latents are the rgb raster."""

    source = None

    def __init__(self, client: IPCClient):
        self.client = client
        info, arrays = client.request({"kind": "INFO"})
        self.num_steps = int(info["num_steps"])
        self.alphas_cumprod = arrays[0]

    def encode(self, rgb):
        return np.asarray(rgb, dtype=np.float64)

    def pullback(self, rgb, grad_latent):
        return grad_latent

    def predict_noise(self, z_t, condition, t_diff):
        header = {"kind": condition.kind, "t": int(t_diff)}
        arrays = [z_t]
        if condition.text is not None:
            header["text"] = condition.text
        if condition.R is not None:
            header["R"] = np.asarray(condition.R).tolist()
            header["T"] = np.asarray(condition.T).tolist()
        if condition.image is not None:
            arrays.append(condition.image)
        reply, out = self.client.request(header, arrays)
        return out[0]


class IPCEmbedding:
    def __init__(self, client: IPCClient):
        self.client = client
        self.dimension = None

    def _embed(self, header, arrays):
        _, out = self.client.request(dict(header, kind="EMBED"), arrays)
        self.dimension = out[0].size
        return out[0]

    def embed_image(self, raster):
        return self._embed({"modality": "image"}, [raster])

    def embed_text(self, text):
        return self._embed({"modality": "text", "text": text}, [])


class IPCPerceptual:
    def __init__(self, client: IPCClient):
        self.client = client

    def __call__(self, a, b):
        reply, _ = self.client.request({"kind": "PERCEPTUAL"}, [a, b])
        return float(reply["distance"])


def handle_request(header, arrays, predictor=None, embedding=None, perceptual=None):
    """Answer one decoded request with in-process models; returns ``(header, arrays)``."""
    kind = header.get("kind")
    reply = {"id": header.get("id")}
    if kind == "INFO" and predictor is not None:
        reply["num_steps"] = int(predictor.num_steps)
        return reply, [np.asarray(predictor.alphas_cumprod)]
    if kind in ("TEXT", "IMAGE_POSE") and predictor is not None:
        t = int(header["t"])
        cond = Conditioning(kind, text=header.get("text"),
                            image=arrays[1] if len(arrays) > 1 else None,
                            R=None if "R" not in header else np.array(header["R"]),
                            T=None if "T" not in header else np.array(header["T"]))
        eps = predictor.predict_noise(arrays[0], cond, t)
        reply["alpha_bar"] = float(predictor.alphas_cumprod[t - 1])
        return reply, [eps]
    if kind == "EMBED" and embedding is not None:
        if header.get("modality") == "text":
            return reply, [embedding.embed_text(header.get("text", ""))]
        return reply, [embedding.embed_image(arrays[0])]
    if kind == "PERCEPTUAL" and perceptual is not None:
        reply["distance"] = float(perceptual(arrays[0], arrays[1]))
        return reply, []
    reply["error"] = f"unsupported request kind {kind!r}"
    return reply, []


def serve_connection(sock: socket.socket, **models) -> None:
    """Serve requests on one connected socket until the peer closes it."""
    stream = sock.makefile("rb")
    try:
        while True:
            try:
                header, arrays = read_message(stream)
            except EOFError:
                return
            try:
                reply, out = handle_request(header, arrays, **models)
            except Exception as exc:  # reported to the client, not raised here
                reply, out = {"id": header.get("id"), "error": str(exc)}, []
            sock.sendall(encode_message(reply, out))
    finally:
        stream.close()
