"""Window sampling, corner-box losses, and the train loop.

The pose losses compare the 8 corners of an oriented box placed at the
predicted vs. true pose, summed over the masked range [T_p, T_s). Gripper
channels use binary cross entropy on raw logits. Reduction is sum over
masked steps, then mean over the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .geometry import CORNER_SIGNS, DEFAULT_BIN_SIZE, BoxExtents, positional_tokens_flat
from .model import ACTION_DIM, ModelConfig, Window, forward_masked, init_params
from .optim import AdamState, adam_step, clip_global_norm, linear_lr, zero_grads

DEFAULT_EXTENTS = BoxExtents()


@dataclass(frozen=True)
class LossWeights:
    """Relative weighting of the gripper terms and the object-pose ablation flag."""

    gripper: float = 1.0
    object_loss_enabled: bool = True

    def __post_init__(self):
        if self.gripper < 0.0:
            raise ValueError(f"gripper weight must be >= 0, got {self.gripper}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 128
    lr_start: float = 1e-4
    lr_end: float = 5e-5
    tp_min: int = 1
    tp_max: int = 350
    min_future: int = 50
    seed: int = 0
    log_every: int = 10
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.tp_min < 1 or self.tp_max < self.tp_min:
            raise ValueError(f"bad T_p bounds ({self.tp_min}, {self.tp_max})")
        if self.min_future < 0:
            raise ValueError("min_future must be >= 0")


@dataclass
class SliceSample:
    """A window-length slice of one demo, before any masking."""

    states: np.ndarray
    actions: np.ndarray
    tokens: np.ndarray
    valid: np.ndarray


def sample_subsequence(
    states: np.ndarray,
    actions: np.ndarray,
    T_s: int,
    rng: np.random.Generator,
    extents: BoxExtents = DEFAULT_EXTENTS,
    bin_size: float = DEFAULT_BIN_SIZE,
    vocab_max: int = 4096,
) -> SliceSample:
    """Uniform contiguous slice of length T_s; positional tokens restart at the slice.

    Demos shorter than T_s come back whole, right-padded by freezing the final
    state under a null action; padded rows are marked invalid for the loss.
    """
    T_d = states.shape[0]
    if T_d == 0:
        raise ValueError("cannot slice an empty demo")
    if actions.shape[0] != T_d:
        raise ValueError(f"demo has {T_d} states but {actions.shape[0]} actions")
    if T_d >= T_s:
        start = int(rng.integers(0, T_d - T_s + 1))
        s = states[start : start + T_s].copy()
        a = actions[start : start + T_s].copy()
        valid = np.ones(T_s, dtype=bool)
    else:
        s = np.concatenate([states, np.repeat(states[-1:], T_s - T_d, axis=0)])
        a = np.concatenate([actions, np.repeat(_null_action(actions[-1]), T_s - T_d, axis=0)])
        valid = np.arange(T_s) < T_d
    tokens = positional_tokens_flat(s[:, :7], extents, bin_size=bin_size, vocab_max=vocab_max)
    return SliceSample(states=s, actions=a, tokens=tokens, valid=valid)


def _null_action(last: np.ndarray) -> np.ndarray:
    """Stay in place, keep the terminal gripper command."""
    out = np.zeros((1, ACTION_DIM))
    out[0, 3] = 1.0
    out[0, 7] = last[7]
    return out


def sample_Tp(rng: np.random.Generator, tcfg: TrainConfig, T_s: int) -> int:
    """Visible-prefix length, uniform on [tp_min, min(tp_max, T_s - min_future)]."""
    upper = min(tcfg.tp_max, T_s - tcfg.min_future)
    if upper < tcfg.tp_min:
        raise ValueError(
            f"T_p range empty: tp_min={tcfg.tp_min}, effective max={upper} "
            f"(T_s={T_s}, min_future={tcfg.min_future})"
        )
    return int(rng.integers(tcfg.tp_min, upper + 1))


def corners_tensor(pose_block: Tensor | np.ndarray, extents: BoxExtents) -> Tensor:
    """Differentiable box corners for pose rows laid out as (..., 7).

    The quaternion block is normalized first; an all-zero quaternion maps to
    the identity rotation, matching the decode convention.
    """
    pb = pose_block if isinstance(pose_block, Tensor) else Tensor(pose_block)
    pos = ad.narrow(pb, (Ellipsis, slice(0, 3)))
    q = ad.normalize_lastdim(ad.narrow(pb, (Ellipsis, slice(3, 7))))
    w = ad.narrow(q, (Ellipsis, slice(0, 1)))
    x = ad.narrow(q, (Ellipsis, slice(1, 2)))
    y = ad.narrow(q, (Ellipsis, slice(2, 3)))
    z = ad.narrow(q, (Ellipsis, slice(3, 4)))
    xx, yy, zz = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
    xy, xz, yz = ad.mul(x, y), ad.mul(x, z), ad.mul(y, z)
    wx, wy, wz = ad.mul(w, x), ad.mul(w, y), ad.mul(w, z)
    two = 2.0
    rows = [
        ad.add(1.0, ad.mul(-two, ad.add(yy, zz))),
        ad.mul(two, ad.add(xy, ad.mul(-1.0, wz))),
        ad.mul(two, ad.add(xz, wy)),
        ad.mul(two, ad.add(xy, wz)),
        ad.add(1.0, ad.mul(-two, ad.add(xx, zz))),
        ad.mul(two, ad.add(yz, ad.mul(-1.0, wx))),
        ad.mul(two, ad.add(xz, ad.mul(-1.0, wy))),
        ad.mul(two, ad.add(yz, wx)),
        ad.add(1.0, ad.mul(-two, ad.add(xx, yy))),
    ]
    lead = pb.data.shape[:-1]
    rot = ad.reshape(ad.concat(rows, axis=-1), lead + (3, 3))
    local = CORNER_SIGNS * extents.h
    offsets = ad.matmul(Tensor(local), ad.swapaxes(rot, -1, -2))
    return ad.add(ad.reshape(pos, lead + (1, 3)), offsets)


def corner_pose_loss(
    pred_pose: Tensor,
    true_pose: np.ndarray,
    extents: BoxExtents,
    loss_mask: np.ndarray,
) -> Tensor:
    """Sum of per-corner L2 distances over masked steps, averaged over the batch.

    pred_pose/true_pose are (B, T, 7); loss_mask is (B, T) with 1.0 on steps
    that count. Truth corners run through the same corner routine, so a
    bit-equal prediction yields exactly zero.
    """
    pred_c = corners_tensor(pred_pose, extents)
    true_c = corners_tensor(true_pose, extents)
    diff = ad.add(pred_c, ad.mul(true_c, -1.0))
    dist = ad.l2norm_lastdim(diff)
    masked = ad.mul(dist, loss_mask[..., None])
    batch = loss_mask.shape[0]
    return ad.mul(ad.tensor_sum(masked), 1.0 / batch)


def gripper_bce_loss(
    pred_logits: Tensor,
    true: np.ndarray,
    loss_mask: np.ndarray,
) -> Tensor:
    """Masked binary cross entropy on raw logits, averaged over the batch."""
    per_step = ad.bce_with_logits(pred_logits, true)
    batch = loss_mask.shape[0]
    return ad.mul(ad.tensor_sum(ad.mul(per_step, loss_mask)), 1.0 / batch)


def loss_components(
    state_out: Tensor,
    action_out: Tensor,
    true_states: np.ndarray,
    true_actions: np.ndarray,
    loss_mask: np.ndarray,
    config: ModelConfig,
    weights: LossWeights,
    extents: BoxExtents = DEFAULT_EXTENTS,
) -> dict[str, Tensor]:
    """All loss terms plus their weighted total.

    Object slots whose true block is all-zero (absent objects) are excluded
    per step; s_obj is always reported, but enters the total only when
    object_loss_enabled is set.
    """
    comps: dict[str, Tensor] = {}
    comps["s_r"] = corner_pose_loss(
        ad.narrow(state_out, (Ellipsis, slice(0, 7))), true_states[..., 0:7], extents, loss_mask
    )
    comps["a_r"] = corner_pose_loss(
        ad.narrow(action_out, (Ellipsis, slice(0, 7))), true_actions[..., 0:7], extents, loss_mask
    )
    obj_terms = []
    for i in range(config.j_max):
        lo, hi = 8 + 7 * i, 15 + 7 * i
        block = true_states[..., lo:hi]
        present = np.any(block != 0.0, axis=-1).astype(np.float64)
        obj_mask = loss_mask * present
        if np.any(obj_mask):
            obj_terms.append(
                corner_pose_loss(ad.narrow(state_out, (Ellipsis, slice(lo, hi))), block, extents, obj_mask)
            )
    if obj_terms:
        total_obj = obj_terms[0]
        for t in obj_terms[1:]:
            total_obj = ad.add(total_obj, t)
        comps["s_obj"] = total_obj
    else:
        comps["s_obj"] = Tensor(0.0)
    comps["s_g"] = gripper_bce_loss(
        ad.narrow(state_out, (Ellipsis, 7)), true_states[..., 7], loss_mask
    )
    comps["a_g"] = gripper_bce_loss(
        ad.narrow(action_out, (Ellipsis, 7)), true_actions[..., 7], loss_mask
    )
    total = ad.add(comps["s_r"], comps["a_r"])
    if weights.object_loss_enabled:
        total = ad.add(total, comps["s_obj"])
    total = ad.add(total, ad.mul(ad.add(comps["s_g"], comps["a_g"]), weights.gripper))
    comps["total"] = total
    return comps


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    curve: list[dict]
    steps_run: int
    diverged: bool = False


def _sample_batch(
    dataset: list[tuple[np.ndarray, np.ndarray]],
    rng: np.random.Generator,
    config: ModelConfig,
    tcfg: TrainConfig,
    extents: BoxExtents,
    bin_size: float,
):
    """One batch of masked windows plus the unmasked truth and loss mask."""
    picks = rng.integers(0, len(dataset), size=tcfg.batch_size)
    windows, states, actions, masks = [], [], [], []
    for di in picks:
        demo_states, demo_actions = dataset[di]
        s = sample_subsequence(
            demo_states, demo_actions, config.T_s, rng, extents, bin_size, config.vocab_max
        )
        T_p = sample_Tp(rng, tcfg, config.T_s)
        windows.append(Window.masked_from(s.states, s.actions, s.tokens, T_p, s.valid))
        states.append(s.states)
        actions.append(s.actions)
        masks.append((np.arange(config.T_s) >= T_p) & s.valid)
    return (
        windows,
        np.stack(states),
        np.stack(actions),
        np.stack(masks).astype(np.float64),
    )


def evaluate(
    dataset: list[tuple[np.ndarray, np.ndarray]],
    params: dict[str, Tensor],
    config: ModelConfig,
    tcfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    extents: BoxExtents = DEFAULT_EXTENTS,
    bin_size: float = DEFAULT_BIN_SIZE,
) -> dict[str, float]:
    """Loss components on the batch the first training step would draw (no dropout)."""
    rng = np.random.default_rng(tcfg.seed)
    windows, ts, ta, mask = _sample_batch(dataset, rng, config, tcfg, extents, bin_size)
    state_out, action_out = forward_masked(windows, params, config)
    comps = loss_components(state_out, action_out, ts, ta, mask, config, weights, extents)
    return {k: float(v.data) for k, v in comps.items()}


CURVE_COLUMNS = ["step", "lr", "total", "s_r", "a_r", "s_obj", "s_g", "a_g"]


def write_loss_curve(path: str, curve: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in curve:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in CURVE_COLUMNS})


def train_loop(
    dataset: list[tuple[np.ndarray, np.ndarray]],
    config: ModelConfig,
    tcfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    extents: BoxExtents = DEFAULT_EXTENTS,
    bin_size: float = DEFAULT_BIN_SIZE,
    init: dict[str, Tensor] | None = None,
    on_step=None,
) -> TrainResult:
    """Masked-prediction training: sample windows, mask a prefix, regress the rest.

    Deterministic given tcfg.seed. A non-finite loss or gradient stops the run
    with parameters from the last completed step intact (diverged=True).
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(tcfg.seed)
    params = init if init is not None else init_params(config, rng)
    state = AdamState()
    curve: list[dict] = []
    steps_run = 0
    for step in range(tcfg.steps):
        lr = linear_lr(step, tcfg.steps, tcfg.lr_start, tcfg.lr_end)
        try:
            windows, ts, ta, mask = _sample_batch(dataset, rng, config, tcfg, extents, bin_size)
            zero_grads(params)
            with Graph() as g:
                state_out, action_out = forward_masked(
                    windows, params, config, rng=rng, train=True
                )
                comps = loss_components(state_out, action_out, ts, ta, mask, config, weights, extents)
                ad.backward(g, comps["total"])
            if tcfg.clip_norm > 0.0:
                clip_global_norm(params, tcfg.clip_norm)
            adam_step(params, state, lr)
        except (ad.NonFiniteError, FloatingPointError):
            return TrainResult(params=params, curve=curve, steps_run=steps_run, diverged=True)
        steps_run = step + 1
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            row = {"step": step, "lr": lr}
            row.update({k: float(comps[k].data) for k in ("total", "s_r", "a_r", "s_obj", "s_g", "a_g")})
            curve.append(row)
            if on_step is not None:
                on_step(row)
    return TrainResult(params=params, curve=curve, steps_run=steps_run)
