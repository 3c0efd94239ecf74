import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from c123.embedding import DownsampleEmbedding
from c123.errors import BackendError
from c123.guidance import IdentityLatentBackend, sds_grad_2d, sds_grad_3d
from c123.ipc import (MAGIC, IPCClient, IPCEmbedding, IPCNoisePredictor, IPCPerceptual, decode_message,
                      encode_message, serve_connection)
from c123.losses import CaseInput
from c123.scene import pose_from_spherical, render

from conftest import random_scene


class HalfLatent(IdentityLatentBackend):
    """Needs nothing but z_t, so it behaves the same in and out of process."""

    def predict_noise(self, z_t, condition, t_diff):
        if condition.kind == "IMAGE_POSE":
            return 0.5 * z_t + condition.R[0, 0] + condition.image.mean()
        return 0.5 * z_t + len(condition.text)


def serve(**models):
    ours, theirs = socket.socketpair()
    thread = threading.Thread(target=serve_connection, args=(theirs,), kwargs=models, daemon=True)
    thread.start()
    return IPCClient(sock=ours), thread, theirs


def test_frame_layout():
    data = encode_message({"id": 1, "kind": "INFO"}, [np.arange(6.0).reshape(2, 3)])
    assert data[:8] == MAGIC
    (n,) = struct.unpack("<I", data[8:12])
    line = data[12:12 + n]
    assert line.endswith(b"\n")
    assert b'"shapes":[[2,3]]' in line
    assert np.array_equal(np.frombuffer(data[12 + n:], "<f4"), np.arange(6, dtype=np.float32))


@given(st.dictionaries(st.sampled_from(["kind", "text", "t"]), st.text(max_size=20)),
       st.lists(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                       elements=st.floats(-1e6, 1e6, width=32)), max_size=3))
def test_roundtrip(header, rasters):
    back, out = decode_message(encode_message(header, rasters))
    assert {k: back[k] for k in header} == header
    assert len(out) == len(rasters)
    for a, b in zip(rasters, out):
        assert np.array_equal(a.astype(np.float64), b)


def test_bad_magic():
    data = bytearray(encode_message({"id": 1}))
    data[0:1] = b"X"
    with pytest.raises(ValueError):
        decode_message(bytes(data))


def test_remote_predictor_matches_local():
    local = HalfLatent()
    client, thread, _ = serve(predictor=local)
    remote = IPCNoisePredictor(client)
    assert remote.num_steps == 1000
    np.testing.assert_allclose(remote.alphas_cumprod, local.alphas_cumprod, rtol=1e-6)
    view = render(random_scene(5), pose_from_spherical(30, 10, 3), 8, keep_tape=False)
    noise = np.random.default_rng(0).standard_normal(view.rgb.shape)
    g_local = sds_grad_2d(view, "a chair", local, 200, noise)
    g_remote = sds_grad_2d(view, "a chair", remote, 200, noise)
    np.testing.assert_allclose(g_remote.grad, g_local.grad, atol=1e-5)
    ref = CaseInput(view.rgb, np.ones((8, 8)), None, "p", pose_from_spherical(0, 0, 3))
    g_local = sds_grad_3d(view, ref, view.pose, local, 300, noise)
    g_remote = sds_grad_3d(view, ref, view.pose, remote, 300, noise)
    np.testing.assert_allclose(g_remote.grad, g_local.grad, atol=1e-5)
    client.close()
    thread.join(timeout=5)
    assert not thread.is_alive()


def test_remote_embedding_and_perceptual():
    target = np.random.default_rng(1).uniform(size=(16, 16, 3))
    local = DownsampleEmbedding(target)
    client, _, _ = serve(embedding=local, perceptual=lambda a, b: float(np.mean(np.abs(a - b))))
    remote = IPCEmbedding(client)
    img = np.random.default_rng(2).uniform(size=(16, 16, 3))
    np.testing.assert_allclose(remote.embed_image(img), local.embed_image(img), atol=1e-6)
    np.testing.assert_allclose(remote.embed_text("x"), local.embed_text("x"), atol=1e-6)
    assert IPCPerceptual(client)(img, img * 0) == pytest.approx(img.mean(), abs=1e-6)
    client.close()


def test_unsupported_kind_is_backend_error():
    client, _, _ = serve(embedding=DownsampleEmbedding())
    with pytest.raises(BackendError, match="unsupported"):
        IPCNoisePredictor(client)
    client.close()


def test_server_exception_is_reported():
    client, _, _ = serve(embedding=DownsampleEmbedding())  # no target: text embedding fails
    with pytest.raises(BackendError, match="target"):
        IPCEmbedding(client).embed_text("x")
    client.close()


def test_dead_peer():
    ours, theirs = socket.socketpair()
    theirs.close()
    with pytest.raises(BackendError):
        IPCClient(sock=ours).request({"kind": "INFO"})


def test_unreachable_address(tmp_path):
    with pytest.raises(BackendError):
        IPCClient(str(tmp_path / "missing.sock")).request({"kind": "INFO"})


def test_unix_socket_address(tmp_path):
    path = str(tmp_path / "g.sock")
    server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    server.bind(path)
    server.listen(1)

    def accept():
        conn, _ = server.accept()
        serve_connection(conn, predictor=HalfLatent())
        conn.close()

    thread = threading.Thread(target=accept, daemon=True)
    thread.start()
    client = IPCClient("unix:" + path)
    assert IPCNoisePredictor(client).num_steps == 1000
    client.close()
    thread.join(timeout=5)
    server.close()
