"""Single-file container for named float64 arrays plus provenance metadata.

Layout: the magic line ``TTRX 1``, sorted ``meta key = value`` lines, one
``array <name> <dim> ...`` line per array (payload lengths are implied by the
declared dims), a payload digest line, ``end``, then the raw little-endian
float64 payloads concatenated in header order.  Writing is canonical, so
identical content produces identical bytes.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import BackboneArch, BackboneParams, HeadParams, SegModel
from .autodiff import Tensor
from .synthdata import Cohort, CohortConfig, FewShotSplit, SyntheticSubject

MAGIC = b"TTRX"
FORMAT_VERSION = 1


def _payload_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8")
        chunks.append(data.tobytes())
    return b"".join(chunks)


def write_container(path, arrays: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    for key, value in meta.items():
        if "\n" in key or "\n" in str(value) or "=" in key:
            raise FormatError(f"illegal metadata entry {key!r}")
    payload = _payload_bytes(arrays)
    digest = hashlib.sha256(payload).hexdigest()
    lines = [f"TTRX {FORMAT_VERSION}"]
    for key in sorted(meta):
        lines.append(f"meta {key} = {meta[key]}")
    for name in sorted(arrays):
        dims = " ".join(str(d) for d in np.asarray(arrays[name]).shape)
        lines.append(f"array {name} {dims}".rstrip())
    lines.append(f"digest {digest}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(header + payload)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"container file not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path} is not a TTRX container (bad magic bytes)")
    try:
        header_end = blob.index(b"\nend\n") + len(b"\nend\n")
    except ValueError:
        raise FormatError(f"{path}: header terminator missing") from None
    header = blob[:header_end].decode("utf-8").splitlines()
    version_line = header[0].split()
    if len(version_line) != 2 or int(version_line[1]) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version line {header[0]!r}")

    meta: dict[str, str] = {}
    shapes: dict[str, tuple] = {}
    declared_digest = None
    for line in header[1:-1]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" = ")
            meta[key] = value
        elif kind == "array":
            parts = rest.split()
            name, dims = parts[0], tuple(int(d) for d in parts[1:])
            if name in shapes or any(d <= 0 for d in dims):
                raise FormatError(f"{path}: bad array declaration {line!r}")
            shapes[name] = dims
        elif kind == "digest":
            declared_digest = rest.strip()
        else:
            raise FormatError(f"{path}: unknown header line {line!r}")

    payload = blob[header_end:]
    expected = sum(8 * int(np.prod(dims)) for dims in shapes.values())
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    if declared_digest != hashlib.sha256(payload).hexdigest():
        raise FormatError(f"{path}: payload digest mismatch")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name in sorted(shapes):
        dims = shapes[name]
        count = int(np.prod(dims))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count,
                                     offset=offset).reshape(dims).copy()
        offset += 8 * count
    return arrays, meta


def save_model(path, model: SegModel, extra_meta: dict[str, str] | None = None) -> None:
    arrays = {f"backbone.{name}": tensor.data
              for name, tensor in model.backbone.params.items()}
    arrays["head.weight"] = model.head.weight.data
    arrays["head.bias"] = model.head.bias.data
    meta = {"kind": "model", "task": model.task}
    meta.update({f"arch.{k}": v for k, v in model.backbone.arch.to_meta().items()})
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, arrays, meta)


def load_model(path) -> SegModel:
    arrays, meta = read_container(path)
    if meta.get("kind") != "model":
        raise FormatError(f"{path} is not a model checkpoint")
    arch = BackboneArch.from_meta(
        {k.removeprefix("arch."): v for k, v in meta.items() if k.startswith("arch.")})
    params = {name.removeprefix("backbone."): Tensor(data)
              for name, data in arrays.items() if name.startswith("backbone.")}
    backbone = BackboneParams(arch=arch, params={
        key: params[key] for key in sorted(params)})
    head = HeadParams(Tensor(arrays["head.weight"]), Tensor(arrays["head.bias"]))
    return SegModel(backbone=backbone, head=head, task=meta.get("task", "novel"))


_SPLIT_NAMES = ("existing_train", "existing_val", "fewshot_train", "fewshot_val", "test")


def save_cohort(path, cohort: Cohort) -> None:
    arrays: dict[str, np.ndarray] = {}
    groups = {
        "existing_train": cohort.existing_train,
        "existing_val": cohort.existing_val,
        "fewshot_train": cohort.fewshot.train,
        "fewshot_val": cohort.fewshot.val,
        "test": cohort.fewshot.test,
    }
    meta = {"kind": "cohort"}
    meta.update({f"cohort.{k}": v for k, v in cohort.config.to_meta().items()})
    for split, subjects in groups.items():
        meta[f"split.{split}"] = ",".join(str(s.id) for s in subjects)
        for subject in subjects:
            prefix = f"subject.{subject.id:04d}"
            arrays[f"{prefix}.input"] = subject.input
            arrays[f"{prefix}.existing"] = subject.existing_labels
            arrays[f"{prefix}.novel"] = subject.novel_labels
    write_container(path, arrays, meta)


def load_cohort(path) -> Cohort:
    arrays, meta = read_container(path)
    if meta.get("kind") != "cohort":
        raise FormatError(f"{path} is not a cohort container")
    config = CohortConfig.from_meta(
        {k.removeprefix("cohort."): v for k, v in meta.items() if k.startswith("cohort.")})

    def subjects_of(split: str) -> list[SyntheticSubject]:
        ids = meta.get(f"split.{split}", "")
        out = []
        for token in filter(None, ids.split(",")):
            sid = int(token)
            prefix = f"subject.{sid:04d}"
            out.append(SyntheticSubject(
                id=sid,
                input=arrays[f"{prefix}.input"],
                existing_labels=arrays[f"{prefix}.existing"],
                novel_labels=arrays[f"{prefix}.novel"]))
        return out

    fewshot = FewShotSplit(train=subjects_of("fewshot_train"),
                           val=subjects_of("fewshot_val"),
                           test=subjects_of("test"))
    return Cohort(config=config, existing_train=subjects_of("existing_train"),
                  existing_val=subjects_of("existing_val"), fewshot=fewshot)
