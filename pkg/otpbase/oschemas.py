from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Annotated, Any, Type, TypeVar

import numpy as np
import orjson
from numpy.typing import NDArray
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    PrivateAttr,
    ValidationError,
)

from .oconst import FORMAT_VERSION
from .outils import ParseError, PersistenceError, VersionError

M = TypeVar("M", bound=BaseModel)


def _as_array(value: Any) -> NDArray[np.float64]:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _as_matrix(value: Any) -> NDArray[np.float64]:
    arr = _as_array(value)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
        arr.flags.writeable = False
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    return arr


def _to_list(arr: NDArray[np.float64]) -> list[Any]:
    return arr.tolist()


Vector = Annotated[
    np.ndarray,
    BeforeValidator(_as_array),
    PlainSerializer(_to_list, return_type=list),
]
"""A read-only float64 vector that serializes as a JSON list."""

Matrix = Annotated[
    np.ndarray,
    BeforeValidator(_as_matrix),
    PlainSerializer(_to_list, return_type=list),
]
"""A read-only row-major float64 matrix."""


class _Base(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def __str__(self) -> str:
        return self.model_dump_json()

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.model_dump_json()})"


class RngStream(BaseModel):
    """
    A reproducible random stream keyed by `(seed, stream_id)`.

    The generator is a counter-based Philox instance built lazily on first
    use; every draw advances it, so the position in the stream is the call
    index.
    """

    seed: int = Field(..., ge=0, lt=2**64, description="Master seed")
    stream_id: int = Field(default=0, ge=0, lt=2**64, description="Stream key")
    _generator: np.random.Generator | None = PrivateAttr(default=None)

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
            self._generator = np.random.Generator(np.random.Philox(seq))
        return self._generator

    def fresh(self) -> RngStream:
        """Same stream rewound to its first draw."""
        return RngStream(seed=self.seed, stream_id=self.stream_id)


def stream_key(seed: int, *labels: int | str) -> int:
    """64-bit key hashed from a seed and a path of integer/role labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def derive_stream(seed: int, *labels: int | str) -> RngStream:
    return RngStream(seed=int(seed) % 2**64, stream_id=stream_key(seed, *labels))


def dump_json(payload: Any) -> bytes:
    return orjson.dumps(
        payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY
    )


def write_artifact(path: str | Path, kind: str, model: BaseModel) -> None:
    """Writes `model` as a versioned JSON document."""
    document = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "data": model.model_dump(mode="json"),
    }
    Path(path).write_bytes(dump_json(document))


def read_document(path: str | Path) -> Any:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise PersistenceError(f"cannot read {path}: {e}") from e
    try:
        return orjson.loads(raw)
    except orjson.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e


def read_artifact(path: str | Path, kind: str, cls: Type[M]) -> M:
    """Reads a document written by `write_artifact`, checking kind and version."""
    document = read_document(path)
    if not isinstance(document, dict) or "data" not in document:
        raise ParseError(f"{path}: not an otpbase artifact")
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format_version {version!r}, expected {FORMAT_VERSION}"
        )
    if document.get("kind") != kind:
        raise ParseError(f"{path}: kind {document.get('kind')!r}, expected {kind!r}")
    try:
        return cls.model_validate(document["data"])
    except ValidationError as e:
        loc = ".".join(str(p) for p in e.errors()[0]["loc"])
        raise ParseError(f"{path}: data.{loc}: {e.errors()[0]['msg']}") from e
