"""Trajectory auto-complete transformer.

A window of (state, action) pairs is embedded per timestep, positions are
encoded by distance-travelled tokens, and timesteps at or past the visible
prefix T_p enter as exact zero rows. The trunk is a pre-norm transformer;
causal attention is the default so the prediction at t reads only positions
<= t. Two affine heads decode the trunk output back to state and action
vectors for every timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Pose, quat_normalize

ACTION_DIM = 8
POSE_DIM = 7

# Commanded translations are millimetre-scale deltas while the pose
# coordinates they share the network with span half a metre. Flat action
# vectors carry translations premultiplied by this factor so both channels
# train at comparable numeric range; flat()/from_flat()/decode_action apply
# and invert it. A power of two keeps the round trip bit-exact.
ACTION_POS_SCALE = 16.0


def state_dim(j_max: int) -> int:
    """Numeric width of a state: ee pose (7) + gripper (1) + 7 per object slot."""
    return 8 + POSE_DIM * j_max


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    heads: int = 8
    d_model: int = 256
    d_emb: int = 128
    T_s: int = 400
    j_max: int = 2
    vocab_max: int = 4096
    attention_mode: str = "causal"
    dropout: float = 0.1
    activation: str = "gelu"

    def __post_init__(self):
        if self.d_model != 2 * self.d_emb:
            raise ValueError(f"d_model must be 2*d_emb, got {self.d_model} vs {self.d_emb}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.attention_mode not in ("causal", "bidirectional"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.T_s < 2 or self.layers < 1 or self.j_max < 0 or self.vocab_max < 1:
            raise ValueError("T_s >= 2, layers >= 1, j_max >= 0, vocab_max >= 1 required")

    @property
    def state_width(self) -> int:
        return state_dim(self.j_max)

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "d_model": self.d_model,
            "d_emb": self.d_emb,
            "T_s": self.T_s,
            "j_max": self.j_max,
            "vocab_max": self.vocab_max,
            "attention_mode": self.attention_mode,
            "dropout": self.dropout,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class StateVector:
    """Robot state: global end-effector pose, gripper fraction, object poses in the ee frame."""

    ee: Pose
    gripper: float
    objects: tuple = ()

    def flat(self, j_max: int) -> np.ndarray:
        if len(self.objects) > j_max:
            raise ValueError(f"{len(self.objects)} objects exceed j_max={j_max}")
        if not 0.0 <= self.gripper <= 1.0:
            raise ValueError(f"gripper fraction {self.gripper} outside [0, 1]")
        out = np.zeros(state_dim(j_max))
        out[:7] = self.ee.flat()
        out[7] = self.gripper
        for i, obj in enumerate(self.objects):
            if obj is not None:
                out[8 + 7 * i : 15 + 7 * i] = obj.flat()
        return out

    @classmethod
    def from_flat(cls, v: np.ndarray, j_max: int) -> "StateVector":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (state_dim(j_max),):
            raise ValueError(f"state vector has shape {v.shape}, expected ({state_dim(j_max)},)")
        objects = []
        for i in range(j_max):
            block = v[8 + 7 * i : 15 + 7 * i]
            objects.append(None if np.all(block == 0.0) else Pose.from_flat(block))
        return cls(ee=Pose.from_flat(v[:7]), gripper=float(v[7]), objects=tuple(objects))


@dataclass(frozen=True)
class ActionVector:
    """Commanded motion: target pose in the current ee frame plus a binary gripper command."""

    target: Pose
    gripper: float

    def flat(self) -> np.ndarray:
        if self.gripper not in (0.0, 1.0):
            raise ValueError(f"gripper command must be 0 or 1, got {self.gripper}")
        out = np.zeros(ACTION_DIM)
        out[:7] = self.target.flat()
        out[:3] *= ACTION_POS_SCALE
        out[7] = self.gripper
        return out

    @classmethod
    def from_flat(cls, v: np.ndarray) -> "ActionVector":
        v = np.array(v, dtype=np.float64)
        if v.shape != (ACTION_DIM,):
            raise ValueError(f"action vector has shape {v.shape}, expected ({ACTION_DIM},)")
        v[:3] /= ACTION_POS_SCALE
        return cls(target=Pose.from_flat(v[:7]), gripper=float(v[7]))


@dataclass
class Window:
    """Model input: T_s slots with everything at or past T_p zeroed out."""

    states: np.ndarray
    actions: np.ndarray
    tokens: np.ndarray
    T_p: int
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        T = self.states.shape[0]
        if self.valid is None:
            self.valid = np.ones(T, dtype=bool)
        if self.actions.shape[0] != T or self.tokens.shape[0] != T or self.valid.shape[0] != T:
            raise ValueError("window arrays disagree on T_s")
        if not 1 <= self.T_p <= T:
            raise ValueError(f"T_p={self.T_p} outside [1, {T}]")
        real = self.tokens[: self.T_p]
        if np.any(real[1:] < real[:-1]):
            raise ValueError("positional tokens must be non-decreasing over the real prefix")
        if np.any(self.states[self.T_p :]) or np.any(self.actions[self.T_p :]):
            raise ValueError("slots at or past T_p must be zero-filled")

    @classmethod
    def masked_from(
        cls,
        states: np.ndarray,
        actions: np.ndarray,
        tokens: np.ndarray,
        T_p: int,
        valid: np.ndarray | None = None,
    ) -> "Window":
        """Copy full arrays and zero every slot at or past T_p."""
        states = np.array(states, dtype=np.float64)
        actions = np.array(actions, dtype=np.float64)
        tokens = np.array(tokens, dtype=np.int64)
        states[T_p:] = 0.0
        actions[T_p:] = 0.0
        tokens[T_p:] = 0
        return cls(
            states=states,
            actions=actions,
            tokens=tokens,
            T_p=T_p,
            valid=np.ones(states.shape[0], dtype=bool) if valid is None else np.asarray(valid, dtype=bool),
        )


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters: N(0, 0.02) weights, zero biases, unit LN gains."""
    C, E = config.d_model, config.d_emb
    scale = 0.02

    def w(shape):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "embed.state.w": w((config.state_width, E)),
        "embed.state.b": zeros(E),
        "embed.action.w": w((ACTION_DIM, E)),
        "embed.action.b": zeros(E),
        "embed.pos.table": w((config.vocab_max, E)),
        "input_ln.gain": ones(C),
        "input_ln.bias": zeros(C),
        "final_ln.gain": ones(C),
        "final_ln.bias": zeros(C),
        "head.state.w": w((C, config.state_width)),
        "head.state.b": zeros(config.state_width),
        "head.action.w": w((C, ACTION_DIM)),
        "head.action.b": zeros(ACTION_DIM),
    }
    for i in range(config.layers):
        p = f"layers.{i}."
        params[p + "ln1.gain"] = ones(C)
        params[p + "ln1.bias"] = zeros(C)
        params[p + "attn.wq"] = w((C, C))
        params[p + "attn.bq"] = zeros(C)
        params[p + "attn.wk"] = w((C, C))
        params[p + "attn.bk"] = zeros(C)
        params[p + "attn.wv"] = w((C, C))
        params[p + "attn.bv"] = zeros(C)
        params[p + "attn.wo"] = w((C, C))
        params[p + "attn.bo"] = zeros(C)
        params[p + "ln2.gain"] = ones(C)
        params[p + "ln2.bias"] = zeros(C)
        params[p + "ff.w1"] = w((C, 4 * C))
        params[p + "ff.b1"] = zeros(4 * C)
        params[p + "ff.w2"] = w((4 * C, C))
        params[p + "ff.b2"] = zeros(C)
    return params


def _affine(x, w, b):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim == 1:
        out = ad.add(ad.matmul(ad.reshape(x, (1, -1)), w), b)
        return ad.reshape(out, (-1,))
    return ad.add(ad.matmul(x, w), b)


def embed_state(states, params) -> Tensor:
    """Affine map of raw state vectors; accepts (..., state_width)."""
    return _affine(states, params["embed.state.w"], params["embed.state.b"])


def embed_action(actions, params) -> Tensor:
    return _affine(actions, params["embed.action.w"], params["embed.action.b"])


def embed_position(tokens, params, config: ModelConfig) -> Tensor:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_max):
        raise ad.ShapeError(
            f"positional token out of range [0, {config.vocab_max}): "
            f"min={tokens.min()}, max={tokens.max()}"
        )
    return ad.embedding_lookup(params["embed.pos.table"], tokens)


def _stack_windows(windows: list[Window], config: ModelConfig):
    T = config.T_s
    for wdw in windows:
        if wdw.states.shape != (T, config.state_width):
            raise ad.ShapeError(
                f"window states shape {wdw.states.shape}, expected ({T}, {config.state_width})"
            )
    states = np.stack([wdw.states for wdw in windows])
    actions = np.stack([wdw.actions for wdw in windows])
    tokens = np.stack([wdw.tokens for wdw in windows])
    visible_rows = np.stack(
        [np.arange(T) < wdw.T_p for wdw in windows]
    )
    return states, actions, tokens, visible_rows


def build_inputs(
    windows: list[Window],
    params: dict[str, Tensor],
    config: ModelConfig,
) -> Tensor:
    """Per-timestep input rows (B, T_s, d_model); masked slots are exact zeros."""
    states, actions, tokens, real = _stack_windows(windows, config)
    s_emb = embed_state(states, params)
    a_emb = embed_action(actions, params)
    n_emb = embed_position(tokens, params, config)
    row = ad.concat([ad.add(s_emb, n_emb), ad.add(a_emb, n_emb)], axis=-1)
    row = ad.layer_norm(row, params["input_ln.gain"], params["input_ln.bias"])
    # exact zero rows at t >= T_p; multiplying after LN keeps masked slots off the tape
    return ad.mul(row, real[..., None].astype(np.float64))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, C = x.shape
    return ad.swapaxes(ad.reshape(x, (B, T, heads, C // heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, d = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (B, T, H * d))


def visibility_mask(config: ModelConfig) -> np.ndarray:
    T = config.T_s
    if config.attention_mode == "causal":
        return np.tril(np.ones((T, T), dtype=bool))
    return np.ones((T, T), dtype=bool)


def forward_masked(
    windows: list[Window] | Window,
    params: dict[str, Tensor],
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> tuple[Tensor, Tensor]:
    """Run the trunk and heads; returns raw (state, action) outputs (B, T_s, width).

    Quaternion blocks and gripper logits come back unnormalized; see
    decode_state/decode_action for consumer-facing values.
    """
    if isinstance(windows, Window):
        windows = [windows]
    drop = config.dropout if train else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    x = build_inputs(windows, params, config)
    visible = visibility_mask(config)
    act = ad.gelu if config.activation == "gelu" else ad.relu
    for i in range(config.layers):
        p = f"layers.{i}."
        h = ad.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        q = _split_heads(_affine(h, params[p + "attn.wq"], params[p + "attn.bq"]), config.heads)
        k = _split_heads(_affine(h, params[p + "attn.wk"], params[p + "attn.bk"]), config.heads)
        v = _split_heads(_affine(h, params[p + "attn.wv"], params[p + "attn.bv"]), config.heads)
        attn = _merge_heads(ad.attention(q, k, v, visible))
        attn = _affine(attn, params[p + "attn.wo"], params[p + "attn.bo"])
        if drop > 0.0:
            attn = ad.dropout(attn, drop, rng)
        x = ad.add(x, attn)
        h = ad.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        ff = _affine(act(_affine(h, params[p + "ff.w1"], params[p + "ff.b1"])), params[p + "ff.w2"], params[p + "ff.b2"])
        if drop > 0.0:
            ff = ad.dropout(ff, drop, rng)
        x = ad.add(x, ff)
    y = ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    state_out = _affine(y, params["head.state.w"], params["head.state.b"])
    action_out = _affine(y, params["head.action.w"], params["head.action.b"])
    return state_out, action_out


def _decode_pose(block: np.ndarray) -> Pose:
    q = block[3:7]
    n = np.linalg.norm(q)
    if n < 1e-12:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    else:
        q = quat_normalize(q)
    return Pose(block[:3], q)


def decode_state(row: np.ndarray, j_max: int) -> StateVector:
    """Raw state-head row -> StateVector with unit quaternions and sigmoid gripper."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (state_dim(j_max),):
        raise ValueError(f"state row has shape {row.shape}, expected ({state_dim(j_max)},)")
    objects = tuple(_decode_pose(row[8 + 7 * i : 15 + 7 * i]) for i in range(j_max))
    return StateVector(
        ee=_decode_pose(row[:7]),
        gripper=float(1.0 / (1.0 + np.exp(-row[7]))),
        objects=objects,
    )


def decode_action(row: np.ndarray) -> ActionVector:
    """Raw action-head row -> ActionVector; gripper thresholded at probability 0.5."""
    row = np.array(row, dtype=np.float64)
    if row.shape != (ACTION_DIM,):
        raise ValueError(f"action row has shape {row.shape}, expected ({ACTION_DIM},)")
    row[:3] /= ACTION_POS_SCALE
    return ActionVector(target=_decode_pose(row[:7]), gripper=1.0 if row[7] > 0.0 else 0.0)


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())
