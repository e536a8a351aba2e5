"""PCA-based slicing of attention query/key projections.

The eigenbasis of the pooled input covariance (sum of X^T X over calibration
inputs) rotates the channel axis; keeping the top-n eigendirections and
folding the truncated rotation into W_q and W_k shrinks the score matmul
from s x m by m x s to s x n by n x s. Because the rotation is orthonormal
and truncation only drops trailing columns, the scores computed in the
reduced space equal the scores of the reconstructed full-width queries and
keys, so no reconstruction happens at inference. V and the output projection
are never sliced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, as_matrix, frob, matmul, softmax_rows, sym_eig
from .model import AttentionResult, AttentionWeights

SLICED_MAGIC = b"UNICPSW1\n"


@dataclass(frozen=True)
class PcaBasis:
    """Orthonormal eigenvectors of pooled input covariance, eigenvalues descending."""

    rotation: np.ndarray  # m x m
    eigenvalues: np.ndarray  # length m
    calib_steps: tuple[int, ...]


@dataclass(frozen=True)
class SlicedWeights:
    n: int
    wq_sliced: np.ndarray  # m x n
    wk_sliced: np.ndarray  # m x n
    calib_steps: tuple[int, ...] = ()
    # Present when the weights were sliced in-process; containers do not
    # persist the rotation, execution only needs the folded projections.
    basis: PcaBasis | None = None


def compute_basis(calib_inputs: list[np.ndarray], calib_steps=()) -> PcaBasis:
    """Eigenbasis of sum(X^T X) over the calibration inputs."""
    if not calib_inputs:
        raise ValueError("compute_basis needs at least one calibration input")
    first = as_matrix(calib_inputs[0])
    m = first.shape[1]
    cov = np.zeros((m, m))
    for x in calib_inputs:
        x = as_matrix(x)
        if x.shape[1] != m:
            raise ShapeError(f"calibration inputs disagree on width: {x.shape[1]} vs {m}")
        cov += x.T @ x
    eig = sym_eig(cov)
    return PcaBasis(rotation=eig.eigenvectors, eigenvalues=eig.eigenvalues,
                    calib_steps=tuple(int(s) for s in calib_steps))


def slice_weights(w: AttentionWeights, basis: PcaBasis, n: int) -> SlicedWeights:
    """Fold the rank-n truncated rotation into the query/key projections."""
    m = basis.rotation.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"retained dimension n={n} out of range [1, {m}]")
    r_thin = basis.rotation[:, :n]
    return SlicedWeights(n=n, wq_sliced=matmul(w.w_q, r_thin),
                         wk_sliced=matmul(w.w_k, r_thin),
                         calib_steps=basis.calib_steps, basis=basis)


def sliced_attention_forward(x, w: AttentionWeights, sw: SlicedWeights) -> AttentionResult:
    """Attention with reduced-width scores; V path untouched.

    MACs: 2*s*m*n (Q/K projections) + s^2*n (scores) + 2*s*m^2 + s^2*m
    (value path). Score scaling keeps the original sqrt(m) so the n=m case
    matches full attention.
    """
    x = as_matrix(x)
    s = x.shape[0]
    m = w.w_v.shape[0]
    n = sw.n
    zq = matmul(x, sw.wq_sliced)
    zk = matmul(x, sw.wk_sliced)
    scores = matmul(zq, zk.T) / np.sqrt(m)
    a = softmax_rows(scores)
    o = matmul(matmul(a, matmul(x, w.w_v)), w.w_o)
    macs = 2 * s * m * n + 2 * s * m * m + s * s * n + s * s * m
    return AttentionResult(map=a, output=o, macs=macs)


def unit_attention_sliced(x_stack: np.ndarray, w: AttentionWeights, sw: SlicedWeights):
    """Sliced attention over a stack of instances (inst, L, m)."""
    outputs = []
    maps = []
    macs = 0
    for x in x_stack:
        r = sliced_attention_forward(x, w, sw)
        outputs.append(r.output)
        maps.append(r.map)
        macs += r.macs
    return np.stack(outputs), np.stack(maps), macs


def reconstruction_error(x, basis: PcaBasis, n: int) -> float:
    """Frobenius error of projecting X onto the top-n eigendirections.

    Equals sqrt(sum of dropped eigenvalues) when the basis came from this
    single input.
    """
    x = as_matrix(x)
    m = basis.rotation.shape[0]
    if x.shape[1] != m:
        raise ShapeError(f"input width {x.shape[1]} does not match basis width {m}")
    if not 1 <= n <= m:
        raise ValueError(f"retained dimension n={n} out of range [1, {m}]")
    if n == m:
        # Full-rank projector is the identity by construction.
        return 0.0
    r_thin = basis.rotation[:, :n]
    projected = matmul(matmul(x, r_thin), r_thin.T)
    return frob(x - projected)


# ---------------------------------------------------------------------------
# Sliced-weight container: same layout as the model weight container, with
# the retained dimensions and calibration steps recorded in the header.
# ---------------------------------------------------------------------------

def save_sliced_weights(path, sliced: dict, header_extra: dict):
    """Write per-unit sliced projections keyed by (block, kind).

    `sliced` maps (block index, attention kind) -> SlicedWeights; the header
    records n and calib_steps per unit plus whatever run parameters the
    caller passes in `header_extra`.
    """
    units = []
    arrays = []
    for (block, kind) in sorted(sliced.keys()):
        sw = sliced[(block, kind)]
        units.append({
            "block": block,
            "kind": kind,
            "n": sw.n,
            "calib_steps": list(sw.calib_steps),
        })
        arrays.append(sw.wq_sliced)
        arrays.append(sw.wk_sliced)
    header = dict(header_extra)
    header["units"] = units
    with open(path, "wb") as fh:
        fh.write(SLICED_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_sliced_weights(path, model_dim: int):
    """Read the sliced-weight container back into a (block, kind) -> SlicedWeights map."""
    with open(path, "rb") as fh:
        got = fh.read(len(SLICED_MAGIC))
        if got != SLICED_MAGIC:
            raise ValueError(f"{path}: bad magic {got!r}")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    cursor = 0
    out = {}
    for unit in header["units"]:
        n = int(unit["n"])
        size = model_dim * n
        wq = payload[cursor:cursor + size].reshape(model_dim, n).astype(np.float64)
        cursor += size
        wk = payload[cursor:cursor + size].reshape(model_dim, n).astype(np.float64)
        cursor += size
        out[(int(unit["block"]), unit["kind"])] = SlicedWeights(
            n=n, wq_sliced=wq, wk_sliced=wk,
            calib_steps=tuple(int(s) for s in unit["calib_steps"]))
    if cursor != payload.size:
        raise ValueError(f"{path}: {payload.size - cursor} trailing values in payload")
    return out, header
