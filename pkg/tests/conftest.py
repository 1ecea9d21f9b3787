import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rdmeflow.mesh import Mesh, SubdomainMap, build_cartesian_grid
from rdmeflow.model import ModelBuilder

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

S3_KEY, S3_SECRET = "testing-key", "testing-secret"


@pytest.fixture(scope="session")
def s3_endpoint():
    """A local S3-compatible server (moto) with its base URL."""
    from moto.server import ThreadedMotoServer

    server = ThreadedMotoServer(ip_address="127.0.0.1", port=0, verbose=False)
    server.start()
    host, port = server.get_host_and_port()
    yield f"http://{host}:{port}"
    server.stop()


@pytest.fixture
def s3_bucket(s3_endpoint):
    import uuid

    import boto3

    name = f"bucket-{uuid.uuid4().hex[:10]}"
    boto3.client("s3", endpoint_url=s3_endpoint, aws_access_key_id=S3_KEY,
                 aws_secret_access_key=S3_SECRET, region_name="us-east-1").create_bucket(Bucket=name)
    return name


@pytest.fixture
def persistent(s3_endpoint, s3_bucket):
    from rdmeflow.storage import object_store_client

    return object_store_client(f"{s3_endpoint}/{s3_bucket}", (S3_KEY, S3_SECRET), backoff=0.01)


class StubS3:
    """Minimal object endpoint answering from a script of status codes.

    ``script`` is a list of statuses consumed one per request; once empty,
    requests succeed against an in-memory dict.
    """

    def __init__(self):
        self.script = []
        self.requests = []
        self.objects = {}
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, status, body=b"", headers=()):
                self.send_response(status)
                for k, v in headers:
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                if self.command != "HEAD":
                    self.wfile.write(body)

            def _handle(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                stub.requests.append((self.command, self.path, dict(self.headers)))
                if stub.script:
                    status = stub.script.pop(0)
                    if status != 200:
                        code = {403: "AccessDenied", 500: "InternalError", 503: "SlowDown"}.get(status, "Error")
                        xml = (f"<?xml version='1.0' encoding='UTF-8'?><Error><Code>{code}</Code>"
                               f"<Message>scripted</Message></Error>").encode()
                        return self._reply(status, xml, [("Content-Type", "application/xml")])
                path = self.path.split("?")[0]
                if self.command == "PUT":
                    stub.objects[path] = body
                    return self._reply(200, b"", [("ETag", '"0"')])
                if self.command in ("GET", "HEAD"):
                    if path not in stub.objects:
                        xml = b"<Error><Code>NoSuchKey</Code><Message>x</Message></Error>"
                        return self._reply(404, xml, [("Content-Type", "application/xml")])
                    data = stub.objects[path]
                    return self._reply(200, data, [("Content-Type", "application/octet-stream"), ("ETag", '"0"')])
                if self.command == "DELETE":
                    stub.objects.pop(path, None)
                    return self._reply(204)
                return self._reply(400)

            do_PUT = do_GET = do_HEAD = do_DELETE = _handle

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_s3():
    stub = StubS3()
    yield stub
    stub.close()


def birth_death_2voxel(kb=1.0, kd=1.0, d=1.0, tspan=(0.0, 1.0)):
    """Birth in voxel 0 only, death everywhere, jump rate ``d`` between two unit voxels."""
    mesh = Mesh(np.array([[0.0], [1.0]]), np.array([1.0, 1.0]), np.array([[0, 1]]),
                np.array([1.0]), np.array([1.0]), 1)
    sub = SubdomainMap(np.array([1, 2]), {1: "left", 2: "right"})
    b = ModelBuilder("bd2")
    b.add_species("A", d)
    b.add_parameter("kb", kb).add_parameter("kd", kd)
    b.add_reaction("birth", {}, {"A": 1}, rate="kb", restrict_to={1})
    b.add_reaction("death", {"A": 1}, {}, rate="kd")
    b.set_mesh(mesh, sub)
    b.set_tspan(tspan)
    return b.build()


def pure_death(x0=1000, k=1.0, t_end=5.0):
    mesh = build_cartesian_grid(1, [1.0], [1])
    b = ModelBuilder("death")
    b.add_species("A", 0.0)
    b.add_parameter("k", k)
    b.add_reaction("decay", {"A": 1}, {}, rate="k")
    b.set_mesh(mesh)
    b.set_count("A", 0, x0)
    b.set_tspan([0.0, t_end])
    return b.build()


@pytest.fixture
def bd2():
    return birth_death_2voxel()


@pytest.fixture
def death_model():
    return pure_death()
