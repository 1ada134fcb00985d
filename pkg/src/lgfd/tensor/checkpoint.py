"""Binary checkpoint: plain-text manifest followed by little-endian float64 data.

Layout::

    LGFD-CKPT 1
    meta <json>                        (optional, single line)
    <name> <d0,d1,...> <byte offset>   (one line per array)
    end
    <raw little-endian float64 payload>

Offsets are relative to the first payload byte. Scalars use the shape ``-``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = "LGFD-CKPT 1"


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    lines = [MAGIC]
    if meta is not None:
        lines.append("meta " + json.dumps(meta, sort_keys=True, separators=(",", ":")))
    chunks = []
    offset = 0
    for name in sorted(arrays):
        if any(ch.isspace() for ch in name):
            raise ValueError(f"checkpoint entry name may not contain whitespace: {name!r}")
        arr = np.asarray(arrays[name], dtype="<f8")
        shape = ",".join(str(n) for n in arr.shape) or "-"
        lines.append(f"{name} {shape} {offset}")
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Optional[dict]]:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}: not an LGFD checkpoint")
    header = raw[:cut].decode("ascii").split("\n")
    payload = raw[cut + len(marker):]
    meta = None
    arrays = {}
    for lineno, line in enumerate(header[1:], start=2):
        if line.startswith("meta "):
            meta = json.loads(line[5:])
            continue
        try:
            name, shape_txt, off_txt = line.split(" ")
            shape = () if shape_txt == "-" else tuple(int(n) for n in shape_txt.split(","))
            offset = int(off_txt)
        except ValueError as exc:
            raise ValueError(f"{path}: bad manifest line {lineno}: {line!r}") from exc
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise ValueError(f"{path}: entry {name} runs past end of payload")
        arrays[name] = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, meta
