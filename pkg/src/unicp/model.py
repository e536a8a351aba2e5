"""Small isotropic video diffusion transformer and its deterministic forward pass.

Each block applies spatial attention (per frame, over tokens), temporal
attention (per token position, over frames), then a two-layer MLP, all with
residual connections and an RMS pre-normalization that keeps activations
bounded over the denoising loop. The latent is a (frames, tokens, dim)
float64 tensor.

Weights are regenerated deterministically from the config seed; the binary
container here exists for debugging and interchange.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix, frob, matmul, softmax_rows

STATE_MAGIC = b"UNICPST1\n"
WEIGHTS_MAGIC = b"UNICPWT1\n"

# Step-size schedule: large at both ends of the run, small in the middle, so
# adjacent-step attention drift shows the U-shaped profile the cache
# scheduler exploits. Tuned at desk scale (m=64, s=64, f=8, T=30).
ETA_LO = 0.004
ETA_HI = 0.5
ETA_POWER = 3.0

# Amplitude of the sinusoidal timestep embedding added before block 1.
TEMB_AMP = 0.05

RMS_EPS = 1e-12


class NumericError(RuntimeError):
    """A run produced non-finite values; carries the offending step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int
    model_dim: int
    tokens_per_frame: int
    num_frames: int
    num_steps: int
    seed: int

    def __post_init__(self):
        if min(self.num_blocks, self.model_dim, self.tokens_per_frame,
               self.num_frames, self.num_steps) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.model_dim < 4:
            raise ValueError("model_dim must be >= 4")
        if self.num_steps < 2:
            raise ValueError("num_steps must be >= 2")

    def header(self) -> dict:
        return {
            "blocks": self.num_blocks,
            "dim": self.model_dim,
            "tokens": self.tokens_per_frame,
            "frames": self.num_frames,
            "steps": self.num_steps,
            "seed": self.seed,
        }

    @staticmethod
    def from_header(h: dict) -> "ModelConfig":
        return ModelConfig(
            num_blocks=int(h["blocks"]),
            model_dim=int(h["dim"]),
            tokens_per_frame=int(h["tokens"]),
            num_frames=int(h["frames"]),
            num_steps=int(h["steps"]),
            seed=int(h["seed"]),
        )


@dataclass(frozen=True)
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def matrices(self) -> list[np.ndarray]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]


@dataclass(frozen=True)
class MlpWeights:
    w1: np.ndarray  # m x 2m
    b1: np.ndarray  # 2m
    w2: np.ndarray  # 2m x m
    b2: np.ndarray  # m

    def matrices(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass(frozen=True)
class BlockWeights:
    spatial: AttentionWeights
    temporal: AttentionWeights
    mlp: MlpWeights


@dataclass(frozen=True)
class AttentionResult:
    """One attention evaluation: row-stochastic map, projected output, MACs."""

    map: np.ndarray  # seq x seq
    output: np.ndarray  # seq x m
    macs: int


# Attention kinds, in execution order within a block.
KIND_SPATIAL = "spatial"
KIND_TEMPORAL = "temporal"
KIND_MLP = "mlp"
ATTENTION_KINDS = (KIND_SPATIAL, KIND_TEMPORAL)


def _rng_pair(seed: int):
    w_ss, x_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(w_ss)), np.random.Generator(np.random.PCG64(x_ss))


def init_model(cfg: ModelConfig) -> list[BlockWeights]:
    """Seeded weights, 1/sqrt(m) scale; identical cfg gives identical bytes."""
    rng, _ = _rng_pair(cfg.seed)
    m = cfg.model_dim
    scale = 1.0 / np.sqrt(m)
    blocks = []
    for _ in range(cfg.num_blocks):
        def draw(*shape):
            return rng.standard_normal(shape) * scale

        spatial = AttentionWeights(draw(m, m), draw(m, m), draw(m, m), draw(m, m))
        temporal = AttentionWeights(draw(m, m), draw(m, m), draw(m, m), draw(m, m))
        mlp = MlpWeights(draw(m, 2 * m), draw(2 * m), draw(2 * m, m), draw(m))
        blocks.append(BlockWeights(spatial=spatial, temporal=temporal, mlp=mlp))
    return blocks


def init_latent(cfg: ModelConfig) -> np.ndarray:
    _, rng = _rng_pair(cfg.seed)
    return rng.standard_normal((cfg.num_frames, cfg.tokens_per_frame, cfg.model_dim))


def eta_schedule(t: int, num_steps: int) -> float:
    """Step size for physical step t (t runs num_steps..1)."""
    if num_steps == 1:
        return ETA_HI
    u = (t - 1) / (num_steps - 1)
    return ETA_LO + (ETA_HI - ETA_LO) * abs(2.0 * u - 1.0) ** ETA_POWER


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the physical step index, length dim."""
    emb = np.empty(dim)
    positions = np.arange(dim)
    freqs = np.power(10000.0, -2.0 * (positions // 2) / dim)
    angles = t * freqs
    emb[0::2] = np.sin(angles[0::2])
    emb[1::2] = np.cos(angles[1::2])
    return emb


def rms_normalize(x: np.ndarray) -> np.ndarray:
    """Scale a matrix to unit root-mean-square entry magnitude."""
    rms = frob(x) / np.sqrt(x.size)
    return x / max(rms, RMS_EPS)


def attention_forward(x, w: AttentionWeights) -> AttentionResult:
    """Single-head attention with 1/sqrt(m) score scaling.

    MACs count the five dense matmuls only (4*s*m^2 + 2*s^2*m); softmax is
    excluded from the accounting.
    """
    x = as_matrix(x)
    s = x.shape[0]
    m = w.w_q.shape[0]
    q = matmul(x, w.w_q)
    k = matmul(x, w.w_k)
    scores = matmul(q, k.T) / np.sqrt(m)
    a = softmax_rows(scores)
    o = matmul(matmul(a, matmul(x, w.w_v)), w.w_o)
    return AttentionResult(map=a, output=o, macs=4 * s * m * m + 2 * s * s * m)


def attention_from_map(x, a, w: AttentionWeights) -> AttentionResult:
    """Recompute the value path under a cached attention map.

    Skips Q/K entirely: 2*s*m^2 + s^2*m MACs.
    """
    x = as_matrix(x)
    a = as_matrix(a)
    s = x.shape[0]
    m = w.w_v.shape[0]
    o = matmul(matmul(a, matmul(x, w.w_v)), w.w_o)
    return AttentionResult(map=a, output=o, macs=2 * s * m * m + s * s * m)


def unit_attention_full(x_stack: np.ndarray, w: AttentionWeights):
    """Full attention over a stack of instances (inst, L, m).

    Returns (o_stack, a_stack, macs) with macs summed over instances.
    """
    outputs = []
    maps = []
    macs = 0
    for x in x_stack:
        r = attention_forward(x, w)
        outputs.append(r.output)
        maps.append(r.map)
        macs += r.macs
    return np.stack(outputs), np.stack(maps), macs


def unit_attention_from_map(x_stack: np.ndarray, a_stack: np.ndarray, w: AttentionWeights):
    """Value-path recomputation for every instance under cached maps."""
    outputs = []
    macs = 0
    for x, a in zip(x_stack, a_stack):
        r = attention_from_map(x, a, w)
        outputs.append(r.output)
        macs += r.macs
    return np.stack(outputs), macs


def mlp_forward(x: np.ndarray, w: MlpWeights):
    """Two-layer MLP with a smooth GELU-style nonlinearity.

    Counted at 4*tokens*m^2 MACs (the two linear layers).
    """
    h = x @ w.w1 + w.b1
    g = 0.5 * h * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (h + 0.044715 * h ** 3)))
    out = g @ w.w2 + w.b2
    tokens, m = x.shape
    return out, 4 * tokens * m * m


def unit_input_stack(state: np.ndarray, kind: str) -> np.ndarray:
    """Extract the per-instance sequences an attention unit operates on.

    Spatial: one instance per frame, shape (f, s, m). Temporal: one instance
    per token position, shape (s, f, m). Instances are RMS-normalized, which
    is what the unit (and PCAS calibration) actually consumes.
    """
    if kind == KIND_SPATIAL:
        raw = state
    elif kind == KIND_TEMPORAL:
        raw = state.transpose(1, 0, 2)
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    return np.stack([rms_normalize(x) for x in raw])


def apply_unit_output(state: np.ndarray, kind: str, o_stack: np.ndarray) -> np.ndarray:
    """Residual-add a unit's stacked outputs back onto the latent."""
    if kind == KIND_SPATIAL:
        return state + o_stack
    if kind == KIND_TEMPORAL:
        return state + o_stack.transpose(1, 0, 2)
    raise ValueError(f"unknown attention kind {kind!r}")


def apply_mlp(state: np.ndarray, block: BlockWeights):
    f, s, m = state.shape
    tokens = state.reshape(f * s, m)
    out, macs = mlp_forward(rms_normalize(tokens), block.mlp)
    return state + out.reshape(f, s, m), macs


def block_forward(state: np.ndarray, block: BlockWeights) -> np.ndarray:
    """Reference (scheduler-free) block: full attention everywhere."""
    for kind in ATTENTION_KINDS:
        x_stack = unit_input_stack(state, kind)
        o_stack, _, _ = unit_attention_full(x_stack, attention_weights_for(block, kind))
        state = apply_unit_output(state, kind, o_stack)
    state, _ = apply_mlp(state, block)
    return state


def attention_weights_for(block: BlockWeights, kind: str) -> AttentionWeights:
    if kind == KIND_SPATIAL:
        return block.spatial
    if kind == KIND_TEMPORAL:
        return block.temporal
    raise ValueError(f"unknown attention kind {kind!r}")


def check_finite(state: np.ndarray, step: int):
    if not np.all(np.isfinite(state)):
        raise NumericError(f"non-finite latent values at step {step}", step)


# ---------------------------------------------------------------------------
# Binary containers: versioned header line + raw little-endian float64 payload.
# ---------------------------------------------------------------------------

def _write_container(path, magic: bytes, header: dict, arrays: list[np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_container(path, magic: bytes):
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    return header, payload


def save_state(path, state: np.ndarray, cfg: ModelConfig):
    _write_container(path, STATE_MAGIC, cfg.header(), [state])


def load_state(path):
    header, payload = _read_container(path, STATE_MAGIC)
    cfg = ModelConfig.from_header(header)
    shape = (cfg.num_frames, cfg.tokens_per_frame, cfg.model_dim)
    if payload.size != np.prod(shape):
        raise ValueError(f"{path}: payload holds {payload.size} values, expected {np.prod(shape)}")
    return payload.reshape(shape).astype(np.float64), cfg


def save_weights(path, model: list[BlockWeights], cfg: ModelConfig):
    arrays = []
    for block in model:
        arrays.extend(block.spatial.matrices())
        arrays.extend(block.temporal.matrices())
        arrays.extend(block.mlp.matrices())
    _write_container(path, WEIGHTS_MAGIC, cfg.header(), arrays)


def load_weights(path):
    header, payload = _read_container(path, WEIGHTS_MAGIC)
    cfg = ModelConfig.from_header(header)
    m = cfg.model_dim
    cursor = 0

    def take(*shape):
        nonlocal cursor
        size = int(np.prod(shape))
        chunk = payload[cursor:cursor + size]
        if chunk.size != size:
            raise ValueError(f"{path}: truncated weight payload")
        cursor += size
        return chunk.reshape(shape).astype(np.float64)

    blocks = []
    for _ in range(cfg.num_blocks):
        spatial = AttentionWeights(take(m, m), take(m, m), take(m, m), take(m, m))
        temporal = AttentionWeights(take(m, m), take(m, m), take(m, m), take(m, m))
        mlp = MlpWeights(take(m, 2 * m), take(2 * m), take(2 * m, m), take(m))
        blocks.append(BlockWeights(spatial=spatial, temporal=temporal, mlp=mlp))
    if cursor != payload.size:
        raise ValueError(f"{path}: {payload.size - cursor} trailing values in weight payload")
    return blocks, cfg
