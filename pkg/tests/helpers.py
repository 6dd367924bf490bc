"""Shared test fixtures: tiny param vectors, updates, and an IDX writer."""

import struct

import numpy as np

from fedpriv.model import ClientUpdate, ParamVector


def vec_pv(values) -> ParamVector:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    return ParamVector(arr, (("W1", 0, arr.size, 1),))


def make_update(client_id, values, n=1, loss_delta=0.0, staleness=0) -> ClientUpdate:
    return ClientUpdate(client_id, vec_pv(values), n, loss_delta, staleness)


def write_idx(tmp_path, pixels: np.ndarray, labels: np.ndarray):
    """Test-only IDX writer; pixels is (n, rows, cols) uint8, labels (n,) uint8."""
    n, rows, cols = pixels.shape
    images_path = tmp_path / "images.idx"
    labels_path = tmp_path / "labels.idx"
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.astype(np.uint8).tobytes())
    return str(images_path), str(labels_path)
