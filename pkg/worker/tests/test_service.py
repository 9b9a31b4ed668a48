"""Service tests: the wire behavior, exercised both with the protection
toolkit's own remote client and with raw sockets for the error paths."""

import json
import socket
import struct

import numpy as np
import pytest

from impasto.errors import OracleError
from impasto.oracle import LspSpec, RemoteOracle
from impasto.image import ImageTensor

from impasto_worker import protocol


@pytest.fixture
def oracle(server):
    orc = RemoteOracle(server.bound_endpoint)
    yield orc
    orc.close()


def make_image(rng, h=64, w=64):
    return rng.uniform(0.1, 0.9, (h, w, 3))


class TestRemoteClientIntegration:
    def test_eval_lsp_roundtrip(self, oracle, rng):
        y = ImageTensor(make_image(rng))
        xhat = np.clip(np.asarray(y.data) + 0.02, 0, 1)
        res = oracle.eval_lsp(xhat, LspSpec(1.0, 0.0, target=y, seed=3))
        assert res.loss < 0.0  # encoder term enters negated
        assert res.loss_e > 0.0
        assert res.grad.shape == xhat.shape
        assert np.isfinite(res.grad).all()

    def test_eval_lsp_at_target_is_zero(self, oracle, rng):
        y = ImageTensor(make_image(rng))
        res = oracle.eval_lsp(np.asarray(y.data), LspSpec(1.0, 0.0, target=y))
        assert res.loss == 0.0
        assert np.abs(res.grad).max() == 0.0

    def test_seeded_reproducibility_over_the_wire(self, oracle, rng):
        y = ImageTensor(make_image(rng))
        xhat = np.clip(np.asarray(y.data) + 0.03, 0, 1)
        spec = LspSpec(1.0, 1.0, target=y, seed=77)
        a = oracle.eval_lsp(xhat, spec)
        b = oracle.eval_lsp(xhat, spec)
        assert abs(a.loss - b.loss) < 1e-5
        assert np.abs(a.grad - b.grad).max() < 1e-5

    def test_roundtrip_and_distance(self, oracle, rng):
        x = make_image(rng)
        out = oracle.diffusion_roundtrip(x, 5, 25, seed=2)
        assert out.shape == x.shape
        dist = oracle.spatial_distance(x, x)
        assert np.abs(dist).max() < 1e-6

    def test_masked_lpips_and_alignment(self, oracle, rng):
        x = make_image(rng)
        xhat = np.clip(x + 0.02, 0, 1)
        fv = oracle.masked_lpips(x, xhat, np.ones((64, 64)))
        assert fv.loss > 0 and fv.grad.shape == x.shape
        al = oracle.clip_alignment(xhat)
        assert -1.0 <= al.loss <= 1.0

    def test_worker_error_becomes_oracle_error(self, oracle, rng):
        tiny = make_image(rng, 8, 8)  # below the worker's minimum extent
        with pytest.raises(OracleError):
            oracle.spatial_distance(tiny, tiny)

    def test_connection_survives_worker_error(self, oracle, rng):
        tiny = make_image(rng, 8, 8)
        with pytest.raises(OracleError):
            oracle.spatial_distance(tiny, tiny)
        x = make_image(rng)
        out = oracle.diffusion_roundtrip(x, 5, 25)  # same connection still works
        assert out.shape == x.shape

    def test_resize_noted_for_offsize_inputs(self, server, rng):
        # raw request so the response header is visible
        x = make_image(rng, 96, 96).astype(np.float32)
        host, _, port = server.bound_endpoint.rpartition(":")
        with socket.create_connection((host, int(port))) as sock:
            sock.sendall(
                protocol.pack_response(
                    {"op": "spatial_distance"}, [x, x]
                )
            )
            resp = protocol.read_header(sock)
            protocol.read_arrays(sock, resp["shapes"])
        assert resp["status"] == "ok"
        assert resp["meta"]["resized_from"] == [96, 96]
        assert resp["meta"]["worked_at"] == 512


class TestWireErrorPaths:
    def _connect(self, server):
        host, _, port = server.bound_endpoint.rpartition(":")
        return socket.create_connection((host, int(port)), timeout=30)

    def test_unknown_op_rejected_connection_kept(self, server, rng):
        x = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        with self._connect(server) as sock:
            sock.sendall(protocol.pack_response({"op": "transmogrify"}, [x]))
            resp = protocol.read_header(sock)
            assert resp["status"] == "error"
            assert "unknown op" in resp["message"]
            # the payload was drained; the next frame still parses
            sock.sendall(protocol.pack_response({"op": "spatial_distance"}, [x, x]))
            resp2 = protocol.read_header(sock)
            protocol.read_arrays(sock, resp2["shapes"])
            assert resp2["status"] == "ok"

    def test_malformed_header_errors_and_closes(self, server):
        with self._connect(server) as sock:
            garbage = b"This is not JSON"
            sock.sendall(struct.pack("<I", len(garbage)) + garbage)
            resp = protocol.read_header(sock)
            assert resp["status"] == "error"
            # stream is untrustworthy afterwards: server hangs up
            assert sock.recv(1) == b""

    def test_bad_shapes_reported(self, server, rng):
        flat = rng.uniform(0, 1, (16, 16)).astype(np.float32)  # not HxWxC
        with self._connect(server) as sock:
            sock.sendall(protocol.pack_response({"op": "clip_align"}, [flat]))
            resp = protocol.read_header(sock)
            assert resp["status"] == "error"

    def test_missing_lsp_weights_reported(self, server, rng):
        x = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        with self._connect(server) as sock:
            sock.sendall(
                protocol.pack_response(
                    {"op": "eval_lsp", "lambda_e": 0.0, "lambda_sd": 0.0}, [x]
                )
            )
            resp = protocol.read_header(sock)
            assert resp["status"] == "error"

    def test_payload_length_is_shape_product(self):
        assert protocol.payload_bytes([[4, 4, 3], [2, 2]]) == 4 * (48 + 4)

    def test_json_header_roundtrip(self):
        frame = protocol.pack_response({"status": "ok", "loss": 1.5}, [])
        head_len = struct.unpack("<I", frame[:4])[0]
        header = json.loads(frame[4 : 4 + head_len].decode())
        assert header["loss"] == 1.5
        assert header["shapes"] == []


class TestRemoteDiagnostics:
    def test_gradient_spotcheck_at_eight_pixels(self, server, rng):
        from impasto.oracle import spotcheck_lsp_gradient

        y = ImageTensor(make_image(rng))
        xhat = np.clip(np.asarray(y.data) + rng.uniform(-0.03, 0.03, y.shape), 0, 1)
        with RemoteOracle(server.bound_endpoint) as oracle:
            report = spotcheck_lsp_gradient(
                oracle,
                xhat,
                LspSpec(1.0, 1.0, target=y, seed=5),
                pixels=8,
                step=1e-4,
                tolerance=5e-2,
            )
        assert report.checked == 8
        assert report.passed, report.worst_rel_error


class TestCliRemoteMode:
    def test_protect_command_against_live_worker(self, server, rng, tmp_path):
        from click.testing import CliRunner
        from impasto.cli import main as cli_main
        from impasto.image import ImageTensor as IT, write_png

        img = np.clip(0.5 + 0.1 * rng.standard_normal((64, 64, 3)), 0, 1)
        sample = tmp_path / "art.png"
        write_png(str(sample), IT(img), 16)
        out = tmp_path / "out"
        result = CliRunner().invoke(
            cli_main,
            [
                "protect",
                "--input", str(sample),
                "--oracle", "remote",
                "--endpoint", server.bound_endpoint,
                "--steps", "4",
                "--seed", "2",
                "--out", str(out),
            ],
            catch_exceptions=False,
        )
        assert result.exit_code == 0, result.output
        assert (out / "art" / "protected.png").is_file()
        summary = (out / "art" / "summary.json").read_text()
        assert '"oracle": "remote"' in summary


class TestTransports:
    def test_unix_socket_endpoint(self, suite, rng, tmp_path):
        from impasto_worker.service import WorkerServer

        path = str(tmp_path / "guidance.sock")
        srv = WorkerServer(path, suite)
        srv.start_background()
        try:
            x = make_image(rng)
            with RemoteOracle(path) as oracle:
                out = oracle.diffusion_roundtrip(x, 5, 25, seed=1)
            assert out.shape == x.shape
        finally:
            srv.shutdown()

    def test_concurrent_connections_are_independent(self, server, rng):
        import threading

        y = ImageTensor(make_image(rng))
        xhat = np.clip(np.asarray(y.data) + 0.02, 0, 1)
        spec = LspSpec(1.0, 1.0, target=y, seed=31)
        results = [None] * 4
        errors = []

        def run(i):
            try:
                with RemoteOracle(server.bound_endpoint) as oracle:
                    results[i] = oracle.eval_lsp(xhat, spec)
            except Exception as exc:  # noqa: BLE001 - recorded for the assert
                errors.append(exc)

        threads = [threading.Thread(target=run, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        # same request from four sessions: identical answers
        for res in results[1:]:
            assert res.loss == results[0].loss
            assert np.array_equal(res.grad, results[0].grad)


class TestFinitenessGate:
    def test_infinite_input_yields_error_not_nan(self, server):
        # an inf payload propagates NaN through the feature normalization;
        # the response must be an error frame, never a NaN tensor
        bad = np.full((32, 32, 3), np.inf, dtype=np.float32)
        ok = np.zeros((32, 32, 3), dtype=np.float32)
        host, _, port = server.bound_endpoint.rpartition(":")
        with socket.create_connection((host, int(port))) as sock:
            sock.sendall(protocol.pack_response({"op": "spatial_distance"}, [bad, ok]))
            resp = protocol.read_header(sock)
        assert resp["status"] == "error"
