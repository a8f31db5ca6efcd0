"""Scene-level spatio-temporal transformer that predicts clean actions.

Data flow of one call::

    [history ; noisy future] --rFFN--> h  (+ step embedding, + time embedding)
    repeat `layers` times:
        temporal self-attention per agent          (over time)
        gated spatial attention with edge features (over agents, per timestep)
        map cross-attention over the agent's lane tokens
    linear head on the future rows --> (B, N, T, 2) actions

All geometry is agent-centric: each agent's trajectory lives in its own frame
anchored at the current timestep, relative information enters only through the
edge features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import tensor as tn
from .scene import Scene, lane_window
from .tensor import Tensor

CHECKPOINT_VERSION = 1

# fixed input scales for [x, y, vel, yaw, acc, yawvel]
CHANNEL_SCALE = np.array([1 / 20.0, 1 / 20.0, 1 / 10.0, 1.0, 1 / 2.0, 1 / 0.5])
ACTION_SCALE = np.array([2.0, 0.5])
EDGE_SCALE = np.array([1 / 20.0, 1 / 20.0, 1.0, 1.0, 1 / 10.0, 1 / 10.0, 1 / 20.0])


@dataclass(frozen=True)
class DenoiserDims:
    d_s: int = 4
    d_a: int = 2
    d_h: int = 64
    d_k: int = 16
    heads: int = 4
    layers: int = 2
    t_hist: int = 10
    T: int = 20
    lane_tokens: int = 8
    lane_points: int = 16
    social_radius: float = 30.0
    map_radius: float = 60.0

    def __post_init__(self):
        for name in ("d_s", "d_a", "d_h", "d_k", "heads", "layers", "t_hist", "T", "lane_tokens", "lane_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"DenoiserDims.{name} must be >= 1")
        if self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if self.d_s != 4 or self.d_a != 2:
            raise ValueError("the unicycle layout needs d_s=4 and d_a=2")

    @property
    def L(self) -> int:
        return self.t_hist + self.T


# ---------------------------------------------------------------- parameters

def param_shapes(dims: DenoiserDims) -> dict:
    d, hk = dims.d_h, dims.heads * dims.d_k
    c = dims.d_s + dims.d_a
    shapes = {
        "embed.w1": (c, d), "embed.b1": (d,), "embed.w2": (d, d), "embed.b2": (d,),
        "step.w": (d, d), "step.b": (d,),
        "edge.w1": (7, d), "edge.b1": (d,), "edge.w2": (d, d), "edge.b2": (d,),
        "lane.w1": (4, d), "lane.b1": (d,), "lane.w2": (d, d), "lane.b2": (d,), "lane.query": (d,),
    }
    for i in range(dims.layers):
        t, s, m = f"t{i}.", f"s{i}.", f"m{i}."
        shapes.update({
            t + "wq": (d, hk), t + "wk": (d, hk), t + "wv": (d, hk), t + "wo": (hk, d),
            t + "ln1.g": (d,), t + "ln1.b": (d,),
            t + "ff.w1": (d, 2 * d), t + "ff.b1": (2 * d,), t + "ff.w2": (2 * d, d), t + "ff.b2": (d,),
            t + "ln2.g": (d,), t + "ln2.b": (d,),
            s + "wq": (d, hk), s + "wkh": (d, hk), s + "wke": (d, hk), s + "wvh": (d, hk), s + "wve": (d, hk),
            s + "wo": (hk, d), s + "wgate": (2 * d, d), s + "bgate": (d,), s + "wself": (d, d),
            s + "ln.g": (d,), s + "ln.b": (d,),
            m + "wq": (d, hk), m + "wk": (d, hk), m + "wv": (d, hk), m + "wo": (hk, d),
            m + "ln.g": (d,), m + "ln.b": (d,),
        })
    shapes.update({"out.w": (d, dims.d_a), "out.b": (dims.d_a,)})
    return shapes


def init_params(dims: DenoiserDims, seed: int = 0) -> dict:
    """Uniform(+-1/sqrt(fan_in)) matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(dims).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1 and name != "lane.query":
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def save_checkpoint(params: dict, dims: DenoiserDims, path, extra: dict | None = None) -> None:
    manifest = {"version": CHECKPOINT_VERSION, "dims": asdict(dims), "names": sorted(params)}
    if extra:
        manifest["extra"] = extra
    arrays = {f"p:{k}": v.data for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.array(json.dumps(manifest)), **arrays)


def load_checkpoint(path):
    """Returns ``(params, dims, manifest)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(str(z["__manifest__"]))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
        dims = DenoiserDims(**manifest["dims"])
        params = {k: Tensor(z[f"p:{k}"].copy(), requires_grad=True) for k in manifest["names"]}
    expected = param_shapes(dims)
    for k, shape in expected.items():
        if k not in params or params[k].shape != shape:
            raise ValueError(f"checkpoint parameter {k} missing or misshaped")
    return params, dims, manifest


# ---------------------------------------------------------------- context

@dataclass
class Context:
    """Everything the denoiser needs from the scene, precomputed once."""

    s0: np.ndarray  # (B, 4) agent-frame initial states
    history: np.ndarray  # (B, T_hist, 6) agent-frame
    edge_raw: np.ndarray  # (B, B, L, 7)
    neighbors: np.ndarray  # (B, B, L) bool
    lane_feats: np.ndarray  # (B, Lm, P, 4)
    lane_mask: np.ndarray  # (B, Lm) bool
    frames: np.ndarray  # (B, 3)

    @property
    def num_agents(self) -> int:
        return len(self.s0)

    def permuted(self, perm) -> "Context":
        p = np.asarray(perm)
        return Context(
            s0=self.s0[p], history=self.history[p], edge_raw=self.edge_raw[p][:, p],
            neighbors=self.neighbors[p][:, p], lane_feats=self.lane_feats[p], lane_mask=self.lane_mask[p],
            frames=self.frames[p],
        )


def history_window(scene: Scene, t_hist: int) -> np.ndarray:
    """``(B, t_hist + 1, 4)`` world states ending at the current one; short
    histories are padded by repeating the oldest available state."""
    pc = scene.past_and_current()
    need = t_hist + 1
    if pc.shape[1] >= need:
        return pc[:, -need:]
    pad = np.repeat(pc[:, :1], need - pc.shape[1], axis=1)
    return np.concatenate([pad, pc], axis=1)


def history_block(scene: Scene, t_hist: int) -> np.ndarray:
    """Agent-frame ``(B, t_hist, 6)`` rows ``[s_t, a_{t-1}]`` for t = -t_hist+1 .. 0."""
    win = history_window(scene, t_hist)
    acts = dyn.inverse_actions(win, scene.dt)
    local = dyn.states_world_to_agent(win[:, 1:], scene.frames())
    return np.concatenate([local, acts], axis=-1)


def edge_raw_features(world_seq: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """The 7 relative components for every ``(i, j, t)``.

    ``world_seq`` is ``(B, L, 4)`` world states, ``anchors`` ``(B, 4)`` the
    states at the current timestep.  Components: offset of j at t from i at 0
    rotated into i's frame (2), cos/sin of the yaw difference (2), relative
    velocity terms (2), distance between i and j at t (1).
    """
    xi, yi, vi, thi = (anchors[:, k][:, None, None] for k in range(4))
    xj = world_seq[None, :, :, 0]
    yj = world_seq[None, :, :, 1]
    vj = world_seq[None, :, :, 2]
    thj = world_seq[None, :, :, 3]
    dx, dy = xj - xi, yj - yi
    c, s = np.cos(thi), np.sin(thi)
    rx = dx * c + dy * s
    ry = -dx * s + dy * c
    dth = thj - thi
    cd, sd = np.cos(dth), np.sin(dth)
    pos = world_seq[..., :2]
    dist = np.linalg.norm(pos[None, :, :, :] - pos[:, None, :, :], axis=-1)
    return np.stack([rx, ry, cd, sd, vj * cd - vi, vj * sd, dist], axis=-1)


def build_context(scene: Scene, dims: DenoiserDims, future_states=None) -> Context:
    """Precompute agent-centric conditioning.

    ``future_states`` (``(B, T, 4)`` world) supplies ground-truth relative
    information for training; without it future edges come from a
    constant-velocity forecast.
    """
    B = scene.num_agents
    if future_states is None:
        future_states = dyn.constant_velocity_forecast(scene, dims.T, scene.dt)
    future_states = np.asarray(future_states, dtype=np.float64)
    if future_states.shape != (B, dims.T, 4):
        raise ValueError(f"future states must be {(B, dims.T, 4)}, got {future_states.shape}")
    win = history_window(scene, dims.t_hist)
    seq = np.concatenate([win[:, 1:], future_states], axis=1)
    raw = edge_raw_features(seq, scene.states)
    nbr = (raw[..., 6] < dims.social_radius) & ~np.eye(B, dtype=bool)[:, :, None]

    lane_feats = np.zeros((B, dims.lane_tokens, dims.lane_points, 4))
    lane_mask = np.zeros((B, dims.lane_tokens), dtype=bool)
    frames = scene.frames()
    for b in range(B):
        pos = scene.states[b, :2]
        near = []
        for lane in scene.lanes:
            dist = float(lane.nearest(pos)[2])
            if dist <= dims.map_radius:
                near.append((dist, lane.id, lane))
        near.sort(key=lambda r: (r[0], r[1]))
        for slot, (_, _, lane) in enumerate(near[: dims.lane_tokens]):
            pts = lane_window(lane, pos, dims.lane_points)
            local = dyn.world_to_frame_np(pts[:, :2], frames[b])
            rel_h = pts[:, 2] - frames[b, 2]
            lane_feats[b, slot] = np.stack(
                [local[:, 0] / 20.0, local[:, 1] / 20.0, np.cos(rel_h), np.sin(rel_h)], axis=-1
            )
            lane_mask[b, slot] = True
    return Context(
        s0=dyn.agent_frame_initial(scene.states[:, 2]),
        history=history_block(scene, dims.t_hist),
        edge_raw=raw,
        neighbors=nbr,
        lane_feats=lane_feats,
        lane_mask=lane_mask,
        frames=frames,
    )


# ---------------------------------------------------------------- building blocks

def linear(x, w, b=None):
    y = tn.matmul(x, w)
    return y if b is None else y + b


def sinusoidal(pos, dim: int) -> np.ndarray:
    """Interleaved [sin, cos, sin, cos, ...] encoding with base 10000."""
    pos = np.asarray(pos, dtype=np.float64)
    i = np.arange(dim // 2 + dim % 2)
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    ang = pos[..., None] * freq
    out = np.empty(pos.shape + (dim,))
    out[..., 0::2] = np.sin(ang)[..., : (dim + 1) // 2]
    out[..., 1::2] = np.cos(ang)[..., : dim // 2]
    return out


def _split_heads(x, heads, d_k):
    return x.reshape(x.shape[:-1] + (heads, d_k))


def embed_inputs(traj, history, k: int, dims: DenoiserDims, params: dict) -> Tensor:
    """``(B, N, T, 6)`` noisy future + ``(B, T_hist, 6)`` history -> ``(B, N, L, d_h)``."""
    traj = tn.as_tensor(traj)
    B, N, T, C = traj.shape
    history = np.asarray(history, dtype=np.float64)
    if history.shape != (B, dims.t_hist, C):
        raise ValueError(f"history must have shape {(B, dims.t_hist, C)}, got {history.shape}")
    if T != dims.T:
        raise ValueError(f"trajectory length {T} does not match dims.T={dims.T}")
    hist = np.broadcast_to(history[:, None], (B, N, dims.t_hist, C))
    x = tn.concat([Tensor(hist), traj], dim=2) * CHANNEL_SCALE
    h = linear(tn.relu(linear(x, params["embed.w1"], params["embed.b1"])), params["embed.w2"], params["embed.b2"])
    step = linear(Tensor(sinusoidal(float(k), dims.d_h)[None]), params["step.w"], params["step.b"])[0]
    return h + step + sinusoidal(np.arange(dims.L), dims.d_h)


def temporal_attention(h, params: dict, layer: int, dims: DenoiserDims) -> Tensor:
    """Self-attention over time per (agent, sample), then feed-forward; post-norm."""
    p = f"t{layer}."
    B, N, L, d = h.shape
    H, dk = dims.heads, dims.d_k
    q = _split_heads(tn.matmul(h, params[p + "wq"]), H, dk).transpose(0, 1, 3, 2, 4)
    k = _split_heads(tn.matmul(h, params[p + "wk"]), H, dk).transpose(0, 1, 3, 4, 2)
    v = _split_heads(tn.matmul(h, params[p + "wv"]), H, dk).transpose(0, 1, 3, 2, 4)
    att = tn.softmax(tn.matmul(q, k) / math.sqrt(dk), -1)
    o = tn.matmul(att, v).transpose(0, 1, 3, 2, 4).reshape(B, N, L, H * dk)
    h = tn.layer_norm(h + tn.matmul(o, params[p + "wo"]), params[p + "ln1.g"], params[p + "ln1.b"])
    ff = linear(tn.relu(linear(h, params[p + "ff.w1"], params[p + "ff.b1"])), params[p + "ff.w2"], params[p + "ff.b2"])
    return tn.layer_norm(h + ff, params[p + "ln2.g"], params[p + "ln2.b"])


def edge_features(edge_raw, params: dict) -> Tensor:
    """Two-layer feed-forward encoding of the raw relative vectors -> ``(B, B, L, d_h)``."""
    x = Tensor(np.asarray(edge_raw) * EDGE_SCALE)
    return linear(tn.relu(linear(x, params["edge.w1"], params["edge.b1"])), params["edge.w2"], params["edge.b2"])


def spatial_weights(h, edges, neighbors, params: dict, layer: int, dims: DenoiserDims):
    """Attention weights ``(N, L, H, B_i, B_j)`` plus the pieces needed for values."""
    p = f"s{layer}."
    B, N, L, d = h.shape
    H, dk = dims.heads, dims.d_k
    q = _split_heads(tn.matmul(h, params[p + "wq"]), H, dk)  # (B,N,L,H,dk)
    kh = _split_heads(tn.matmul(h, params[p + "wkh"]), H, dk)
    ke = _split_heads(tn.matmul(edges, params[p + "wke"]), H, dk)  # (Bi,Bj,L,H,dk)
    s1 = tn.matmul(q.transpose(1, 2, 3, 0, 4), kh.transpose(1, 2, 3, 4, 0))  # (N,L,H,Bi,Bj)
    s2 = tn.matmul(q.transpose(0, 2, 3, 1, 4), ke.transpose(0, 2, 3, 4, 1))  # (Bi,L,H,N,Bj)
    scores = (s1 + s2.transpose(3, 1, 2, 0, 4)) / math.sqrt(dk)
    mask = np.transpose(np.asarray(neighbors, dtype=bool), (2, 0, 1))[None, :, None]  # (1,L,1,Bi,Bj)
    return tn.softmax(scores, -1, mask=mask)


def spatial_attention(h, edges, neighbors, params: dict, layer: int, dims: DenoiserDims) -> Tensor:
    """Gated edge-aware attention across agents at each timestep.

    ``k_ij = W_K [h_j, e_ij]`` and ``v_ij = W_V [h_j, e_ij]`` are split into
    the h- and e-halves of the weight matrix.  Agents without neighbors get a
    zero message; the gate then mixes ``W_self h`` with zero.
    """
    p = f"s{layer}."
    B, N, L, d = h.shape
    H, dk = dims.heads, dims.d_k
    att = spatial_weights(h, edges, neighbors, params, layer, dims)  # (N,L,H,Bi,Bj)
    vh = _split_heads(tn.matmul(h, params[p + "wvh"]), H, dk)  # (B,N,L,H,dk)
    ve = _split_heads(tn.matmul(edges, params[p + "wve"]), H, dk)  # (Bi,Bj,L,H,dk)
    m1 = tn.matmul(att, vh.transpose(1, 2, 3, 0, 4))  # (N,L,H,Bi,dk)
    m2 = tn.matmul(att.transpose(3, 1, 2, 0, 4), ve.transpose(0, 2, 3, 1, 4))  # (Bi,L,H,N,dk)
    m = (m1 + m2.transpose(3, 1, 2, 0, 4)).transpose(3, 0, 1, 2, 4).reshape(B, N, L, H * dk)
    m = tn.matmul(m, params[p + "wo"])
    gate = tn.sigmoid(linear(tn.concat([h, m], -1), params[p + "wgate"], params[p + "bgate"]))
    fused = gate * tn.matmul(h, params[p + "wself"]) + (1.0 - gate) * m
    return tn.layer_norm(h + fused, params[p + "ln.g"], params[p + "ln.b"])


def encode_map(lane_feats, lane_mask, params: dict) -> Tensor:
    """Attention-pool each lane's agent-frame waypoints into one ``d_h`` token.

    Returns ``(B, Lm, d_h)``; padded lane slots are later masked out.
    """
    feats = np.asarray(lane_feats)
    B, Lm, P, _ = feats.shape
    if Lm == 0:
        return Tensor(np.zeros((B, 0, params["lane.w2"].shape[1])))
    pts = linear(tn.relu(linear(Tensor(feats), params["lane.w1"], params["lane.b1"])), params["lane.w2"], params["lane.b2"])
    d = pts.shape[-1]
    score = tn.sum_(pts * params["lane.query"], -1) / math.sqrt(d)  # (B,Lm,P)
    w = tn.softmax(score, -1)
    return tn.sum_(pts * tn.unsqueeze(w, -1), 2)


def map_attention(h, tokens, lane_mask, params: dict, layer: int, dims: DenoiserDims) -> Tensor:
    """Per-agent cross-attention from trajectory rows to that agent's lane tokens."""
    lane_mask = np.asarray(lane_mask, dtype=bool)
    if tokens.shape[1] == 0 or not lane_mask.any():
        return h
    p = f"m{layer}."
    B, N, L, d = h.shape
    H, dk = dims.heads, dims.d_k
    Lm = tokens.shape[1]
    q = _split_heads(tn.matmul(h, params[p + "wq"]), H, dk).transpose(0, 3, 1, 2, 4).reshape(B, H, N * L, dk)
    k = _split_heads(tn.matmul(tokens, params[p + "wk"]), H, dk).transpose(0, 2, 3, 1)  # (B,H,dk,Lm)
    v = _split_heads(tn.matmul(tokens, params[p + "wv"]), H, dk).transpose(0, 2, 1, 3)  # (B,H,Lm,dk)
    att = tn.softmax(tn.matmul(q, k) / math.sqrt(dk), -1, mask=lane_mask[:, None, None, :])
    o = tn.matmul(att, v).reshape(B, H, N, L, dk).transpose(0, 2, 3, 1, 4).reshape(B, N, L, H * dk)
    out = tn.layer_norm(h + tn.matmul(o, params[p + "wo"]), params[p + "ln.g"], params[p + "ln.b"])
    has = lane_mask.any(axis=1)[:, None, None, None]
    return tn.where(has, out, h)


def forward(traj, k: int, ctx, params: dict, dims: DenoiserDims, ablate_edges: bool = False, edges=None) -> Tensor:
    """Predict clean actions ``(B, N, T, 2)`` from a noisy 6-channel block.

    ``ctx`` is a :class:`Context` or a :class:`Scene` (converted with a
    constant-velocity forecast).  ``edges`` injects an explicit ``(B, B, L, d_h)``
    edge block; ``ablate_edges`` replaces it with zeros.
    """
    if isinstance(ctx, Scene):
        ctx = build_context(ctx, dims)
    traj = tn.as_tensor(traj)
    B = traj.shape[0]
    if ctx.num_agents != B:
        raise ValueError(f"trajectory has {B} agents but the context has {ctx.num_agents}")
    if traj.shape[-1] != dims.d_s + dims.d_a:
        raise ValueError(f"trajectory must have {dims.d_s + dims.d_a} channels, got {traj.shape[-1]}")
    h = embed_inputs(traj, ctx.history, k, dims, params)
    if ablate_edges:
        e = Tensor(np.zeros((B, B, dims.L, dims.d_h)))
    elif edges is not None:
        e = tn.as_tensor(edges)
    else:
        e = edge_features(ctx.edge_raw, params)
    tokens = encode_map(ctx.lane_feats, ctx.lane_mask, params)
    for layer in range(dims.layers):
        h = temporal_attention(h, params, layer, dims)
        h = spatial_attention(h, e, ctx.neighbors, params, layer, dims)
        h = map_attention(h, tokens, ctx.lane_mask, params, layer, dims)
    fut = h[:, :, dims.t_hist:, :]
    return linear(fut, params["out.w"], params["out.b"]) * ACTION_SCALE
