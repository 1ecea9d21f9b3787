"""API-compatible blob stores for the three storage tiers.

``LocalStorage``
    per-worker scratch directory; fastest, lost with the worker.
``SharedStorage``
    a directory every worker can reach; lives as long as the cluster.
    :meth:`SharedStorage.teardown` removes it, modelling cluster shutdown.
``PersistentStorage``
    an S3-compatible object store (PUT/GET/HEAD/DELETE object and
    ListObjectsV2 against a pre-created bucket); outlives the cluster.

All three implement ``put/get/delete/list/exists/stat`` with identical
semantics. Keys are ``namespace/name`` strings over ``[A-Za-z0-9._-/]``.
``delete`` of a missing key is a no-op; ``get`` and ``stat`` of a missing
key raise :class:`NotFoundError`.
"""
from __future__ import annotations

import configparser
import errno
import os
import re
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlparse

import xxhash

from .errors import RdmeflowError

MAX_KEY_LENGTH = 512
_KEY_RE = re.compile(r"^[A-Za-z0-9._\-/]+$")
_CHECKSUM_DIR = ".checksums"


class StorageError(RdmeflowError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{message} [key={key}]" if key is not None else message)


class NotFoundError(StorageError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class KeyValidationError(StorageError, ValueError):
    pass


class StorageAuthError(StorageError):
    pass


class StoragePermissionError(StorageError):
    pass


class StorageCapacityError(StorageError):
    pass


class BucketNotFoundError(StorageError):
    pass


class StorageUnavailableError(StorageError):
    """Network failure or retries exhausted."""


class ChecksumMismatchError(StorageError):
    pass


@dataclass(frozen=True)
class Receipt:
    backend: str
    key: str
    size: int
    checksum: str


def checksum(data: bytes) -> str:
    return xxhash.xxh64_hexdigest(data, seed=0)


def validate_key(key: str) -> str:
    if not isinstance(key, str) or not key:
        raise KeyValidationError("key must be a non-empty string", key)
    if len(key) > MAX_KEY_LENGTH:
        raise KeyValidationError(f"key longer than {MAX_KEY_LENGTH} characters", key)
    if not _KEY_RE.match(key):
        raise KeyValidationError("key may only contain [A-Za-z0-9._-/]", key)
    parts = key.split("/")
    if any(p == "" or p.startswith(".") for p in parts):
        raise KeyValidationError("key has an empty, '.', '..' or hidden path segment", key)
    return key


def validate_namespace(namespace: str) -> str:
    return validate_key(namespace).rstrip("/")


def make_key(namespace: str, name: str) -> str:
    return validate_key(f"{namespace}/{name}")


class StorageBackend:
    """Common interface; subclasses implement the ``_``-prefixed primitives."""

    name = "abstract"

    def put(self, key: str, data: bytes) -> Receipt:
        validate_key(key)
        data = bytes(data)
        self._put(key, data)
        return Receipt(self.name, key, len(data), checksum(data))

    def get(self, key: str) -> bytes:
        return self._get(validate_key(key))

    def delete(self, key: str) -> None:
        self._delete(validate_key(key))

    def exists(self, key: str) -> bool:
        return self._exists(validate_key(key))

    def list(self, namespace: str) -> list:
        return sorted(self._list(validate_namespace(namespace)))

    def stat(self, key: str) -> Receipt:
        data = self.get(key)
        return Receipt(self.name, key, len(data), checksum(data))


def _map_os_error(exc: OSError, key):
    if exc.errno in (errno.ENOSPC, errno.EDQUOT, errno.EFBIG):
        return StorageCapacityError(str(exc), key)
    if exc.errno in (errno.EACCES, errno.EPERM, errno.EROFS):
        return StoragePermissionError(str(exc), key)
    return StorageError(str(exc), key)


class FileStorage(StorageBackend):
    """Directory-backed store; writes go to a temp file then ``os.replace``."""

    name = "file"

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def __repr__(self):
        return f"{type(self).__name__}({str(self.root)!r})"

    def _path(self, key):
        return self.root.joinpath(*key.split("/"))

    def _put(self, key, data):
        path = self._path(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as exc:
            raise _map_os_error(exc, key) from exc

    def _get(self, key):
        try:
            return self._path(key).read_bytes()
        except FileNotFoundError:
            raise NotFoundError("no such key", key) from None
        except IsADirectoryError:
            raise NotFoundError("no such key", key) from None
        except OSError as exc:
            raise _map_os_error(exc, key) from exc

    def _delete(self, key):
        try:
            self._path(key).unlink()
        except (FileNotFoundError, IsADirectoryError):
            pass
        except OSError as exc:
            raise _map_os_error(exc, key) from exc

    def _exists(self, key):
        return self._path(key).is_file()

    def _list(self, namespace):
        base = self._path(namespace)
        if not base.is_dir():
            return []
        out = []
        for dirpath, dirnames, filenames in os.walk(base):
            dirnames[:] = [d for d in dirnames if not d.startswith(".")]
            rel = Path(dirpath).relative_to(self.root)
            for f in filenames:
                if not f.startswith("."):
                    out.append("/".join((*rel.parts, f)))
        return out


class LocalStorage(FileStorage):
    """Ephemeral per-worker cache directory."""

    name = "local"

    def __init__(self, root=None):
        if root is None:
            root = tempfile.mkdtemp(prefix=f"rdmeflow-local-{os.getpid()}-")
        super().__init__(root)

    def _checksum_path(self, key):
        return self.root.joinpath(_CHECKSUM_DIR, *key.split("/"))

    def record_checksum(self, key, value):
        p = self._checksum_path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(value)

    def recorded_checksum(self, key):
        try:
            return self._checksum_path(key).read_text()
        except OSError:
            return None

    def invalidate(self, key):
        self.delete(key)
        try:
            self._checksum_path(key).unlink()
        except OSError:
            pass

    def teardown(self):
        shutil.rmtree(self.root, ignore_errors=True)


class SharedStorage(FileStorage):
    """Cluster-wide directory; defaults to ``$RF_SHARED_DIR``."""

    name = "shared"

    def __init__(self, root=None):
        root = root or os.environ.get("RF_SHARED_DIR")
        if not root:
            raise StorageError("SharedStorage needs a directory (argument or RF_SHARED_DIR)")
        super().__init__(root)

    def teardown(self):
        """Remove everything, as when the cluster and its controller disk go away."""
        shutil.rmtree(self.root, ignore_errors=True)


# --------------------------------------------------------------------------
# object store
# --------------------------------------------------------------------------

_RETRYABLE_NETWORK = (
    "EndpointConnectionError", "ConnectTimeoutError", "ReadTimeoutError",
    "ConnectionClosedError", "ProxyConnectionError",
)


class PersistentStorage(StorageBackend):
    """S3-compatible object store over HTTP.

    Requests are signed with AWS Signature Version 4 (header form) using a
    static access key and secret; the bucket must already exist. Server
    errors (5xx) and network timeouts are retried up to ``attempts`` total
    tries with exponential backoff ``backoff * 2**n``; 4xx responses are
    never retried.
    """

    name = "persistent"

    def __init__(self, endpoint, bucket, access_key, secret_key, *, region="us-east-1",
                 attempts=3, backoff=0.2, timeout=10.0):
        self.endpoint = endpoint.rstrip("/")
        self.bucket = bucket
        self.access_key = access_key
        self.secret_key = secret_key
        self.region = region
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self._client = None

    def __repr__(self):
        return f"PersistentStorage({self.endpoint!r}, bucket={self.bucket!r})"

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_client"] = None
        return state

    @property
    def client(self):
        if self._client is None:
            import boto3
            from botocore.config import Config

            self._client = boto3.session.Session().client(
                "s3",
                endpoint_url=self.endpoint,
                aws_access_key_id=self.access_key,
                aws_secret_access_key=self.secret_key,
                region_name=self.region,
                config=Config(
                    signature_version="s3v4",
                    s3={"addressing_style": "path"},
                    retries={"total_max_attempts": 1, "mode": "standard"},
                    connect_timeout=self.timeout,
                    read_timeout=self.timeout,
                ),
            )
        return self._client

    def _call(self, op, key, **kwargs):
        from botocore.exceptions import BotoCoreError, ClientError

        last = None
        for attempt in range(self.attempts):
            try:
                return getattr(self.client, op)(Bucket=self.bucket, **kwargs)
            except ClientError as exc:
                err = exc.response.get("Error", {})
                status = exc.response.get("ResponseMetadata", {}).get("HTTPStatusCode", 0)
                code = str(err.get("Code", ""))
                if status >= 500:
                    last = exc
                elif status == 403 or code in ("AccessDenied", "InvalidAccessKeyId", "SignatureDoesNotMatch"):
                    raise StorageAuthError(f"{op}: access denied ({code or status})", key) from exc
                elif code == "NoSuchBucket":
                    raise BucketNotFoundError(f"bucket {self.bucket!r} does not exist", key) from exc
                elif status == 404 or code in ("NoSuchKey", "404", "NotFound"):
                    raise NotFoundError("no such key", key) from exc
                elif code in ("EntityTooLarge", "QuotaExceeded"):
                    raise StorageCapacityError(f"{op}: {code}", key) from exc
                else:
                    raise StorageError(f"{op}: {code or status}", key) from exc
            except BotoCoreError as exc:
                if type(exc).__name__ not in _RETRYABLE_NETWORK:
                    raise StorageError(f"{op}: {exc}", key) from exc
                last = exc
            if attempt + 1 < self.attempts:
                time.sleep(self.backoff * 2**attempt)
        raise StorageUnavailableError(f"{op} failed after {self.attempts} attempts: {last}", key) from last

    def _put(self, key, data):
        self._call("put_object", key, Key=key, Body=data, Metadata={"xxh64": checksum(data)})

    def _get(self, key):
        return self._call("get_object", key, Key=key)["Body"].read()

    def _delete(self, key):
        self._call("delete_object", key, Key=key)

    def _exists(self, key):
        try:
            self._call("head_object", key, Key=key)
            return True
        except NotFoundError:
            return False

    def _list(self, namespace):
        keys, token = [], None
        while True:
            kwargs = {"Prefix": namespace + "/"}
            if token:
                kwargs["ContinuationToken"] = token
            page = self._call("list_objects_v2", namespace, **kwargs)
            keys += [obj["Key"] for obj in page.get("Contents", [])]
            if not page.get("IsTruncated"):
                return keys
            token = page.get("NextContinuationToken")

    def stat(self, key):
        head = self._call("head_object", validate_key(key), Key=key)
        digest = head.get("Metadata", {}).get("xxh64")
        if digest is None:
            return super().stat(key)
        return Receipt(self.name, key, int(head.get("ContentLength", 0)), digest)


def object_store_client(endpoint: str, credentials, bucket: str | None = None, **kwargs) -> PersistentStorage:
    """Client for ``endpoint``; the bucket is the URL path or ``bucket``.

    ``credentials`` is an ``(access_key, secret_key)`` pair.
    """
    parsed = urlparse(endpoint)
    path_bucket = parsed.path.strip("/")
    bucket = bucket or path_bucket
    if not bucket:
        raise StorageError("no bucket given (append it to the endpoint URL or pass bucket=)")
    base = f"{parsed.scheme}://{parsed.netloc}"
    access, secret = credentials
    return PersistentStorage(base, bucket, access, secret, **kwargs)


# --------------------------------------------------------------------------
# caching and configuration
# --------------------------------------------------------------------------

def cache_through(local: LocalStorage, origin: StorageBackend, key: str) -> bytes:
    """Serve ``key`` from ``local``, fetching from ``origin`` on a miss.

    The checksum from the origin's receipt is recorded next to the cached
    copy. A cached copy that no longer matches is dropped and refetched once;
    a refetch that still disagrees with the origin raises
    :class:`ChecksumMismatchError`.
    """
    validate_key(key)
    expected = local.recorded_checksum(key)
    if expected is not None and local.exists(key):
        data = local.get(key)
        if checksum(data) == expected:
            return data
        local.invalidate(key)
    for _ in range(2):
        data = origin.get(key)
        receipt = origin.stat(key)
        if checksum(data) == receipt.checksum:
            local.put(key, data)
            local.record_checksum(key, receipt.checksum)
            return data
    raise ChecksumMismatchError("origin data does not match its checksum", key)


def load_storage_config(path=None) -> dict:
    """Merge the ``[storage]`` section of ``path`` with ``RF_STORAGE_*`` / ``RF_SHARED_DIR``.

    Environment variables win over the file.
    """
    cfg = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.read(path)
        if parser.has_section("storage"):
            cfg.update(parser["storage"])
    env = {
        "endpoint": "RF_STORAGE_ENDPOINT",
        "key": "RF_STORAGE_KEY",
        "secret": "RF_STORAGE_SECRET",
        "shared_dir": "RF_SHARED_DIR",
        "bucket": "RF_STORAGE_BUCKET",
    }
    for name, var in env.items():
        if os.environ.get(var):
            cfg[name] = os.environ[var]
    return cfg


def backend_for_mode(mode: str, config: dict | None = None) -> StorageBackend | None:
    """Backend for a storage mode name: ``none``, ``shared`` or ``persistent``."""
    config = load_storage_config() if config is None else config
    if mode in ("none", None):
        return None
    if mode == "shared":
        return SharedStorage(config.get("shared_dir"))
    if mode == "persistent":
        if not config.get("endpoint"):
            raise StorageError("persistent storage needs an endpoint (RF_STORAGE_ENDPOINT)")
        return object_store_client(config["endpoint"], (config.get("key", ""), config.get("secret", "")),
                                   bucket=config.get("bucket"))
    raise StorageError(f"unknown storage mode {mode!r}")
