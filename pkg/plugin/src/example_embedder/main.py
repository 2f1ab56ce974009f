"""Deterministic pooled-feature embedder runnable as an external block.

Invoked per patch as:

    example_embedder --input in.evbt --output out.evbt --dim 64 --seed 7

Reads the input tensor, mean-pools its voxels over a seeded random
partition into `dim` bins, and writes the result as a rank-1 float32
tensor. No model weights, so it runs anywhere, yet the pooled features
stay label-informative on mean-separated data. Exit codes: 0 ok, 1 bad
arguments, 2 unreadable or invalid input, 3 write failure.

The tensor codec below is intentionally self-contained: this plugin
shares no code with the pipeline, only the file format.
"""

from __future__ import annotations

import argparse
import struct
import sys

import numpy as np

# --- minimal .evbt codec ---------------------------------------------------
# layout: magic "EVBT" | version 0x01 | dtype code | rank | rank x u32 LE
# dims | data, little-endian row-major. dtype codes: 1=f32, 2=f64, 3=u8.

MAGIC = b"EVBT"
VERSION = 1
CODE_TO_DTYPE = {1: "<f4", 2: "<f8", 3: "u1"}
DTYPE_TO_CODE = {"f4": 1, "f8": 2, "u1": 3}


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(7)
        if len(head) < 7 or head[:4] != MAGIC:
            raise ValueError("not an EVBT tensor file")
        version, code, rank = head[4], head[5], head[6]
        if version != VERSION or code not in CODE_TO_DTYPE or not 1 <= rank <= 4:
            raise ValueError("unsupported EVBT header")
        dims_raw = fh.read(4 * rank)
        if len(dims_raw) < 4 * rank:
            raise ValueError("truncated header")
        shape = struct.unpack(f"<{rank}I", dims_raw)
        dtype = np.dtype(CODE_TO_DTYPE[code])
        expected = int(np.prod(shape)) * dtype.itemsize
        data = fh.read(expected + 1)
    if len(data) != expected:
        raise ValueError("payload size does not match declared shape")
    return np.frombuffer(data, dtype=dtype).reshape(shape)


def write_tensor(path: str, arr: np.ndarray) -> None:
    code = DTYPE_TO_CODE[f"{arr.dtype.kind}{arr.dtype.itemsize}"]
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(f"<{arr.dtype.kind}{arr.dtype.itemsize}").tobytes())


# --- pooled embedding ------------------------------------------------------


def pooled_embedding(values: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """Mean of each bin of a seeded random partition of the voxels.

    Linear in the input, deterministic for a given (shape, dim, seed), and
    a constant input yields a constant output vector.
    """
    flat = values.astype(np.float64).ravel()
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if flat.size < dim:
        raise ValueError(f"input has {flat.size} voxels, fewer than dim={dim}")
    order = np.random.default_rng(seed).permutation(flat.size)
    bins = np.array_split(order, dim)
    return np.array([flat[b].mean() for b in bins], dtype=np.float32)


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; the protocol wants 1
        raise _ArgumentError(message)


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(prog="example_embedder", description=__doc__)
    parser.add_argument("--input", required=True)
    parser.add_argument("--output", required=True)
    parser.add_argument("--dim", type=int, required=True)
    parser.add_argument("--seed", type=int, required=True)
    try:
        args = parser.parse_args(argv)
        if args.dim < 1:
            raise _ArgumentError("--dim must be >= 1")
    except _ArgumentError as e:
        print(f"bad arguments: {e}", file=sys.stderr)
        return 1

    try:
        tensor = read_tensor(args.input)
        embedding = pooled_embedding(tensor, args.dim, args.seed)
    except (OSError, ValueError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return 2

    try:
        write_tensor(args.output, embedding)
    except OSError as e:
        print(f"write failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
