"""Small numpy networks with hand-written reverse-mode gradients.

Actors score a variable-size candidate list plus a stop logit. The critic has
one utility network per agent with four outputs (task, edge, lat, tok) and a
per-head monotonic mixer whose weights come from a hypernetwork over the global
state and pass through ``abs``.
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

HEADS = ("task", "edge", "lat", "tok")
CHECKPOINT_VERSION = 1


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class Module:
    """Parameter container; subclasses fill ``self.params`` or nest modules."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.params.items()}
        for name, child in self.children.items():
            out.update(child.named_params(f"{prefix}{name}."))
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.named_params().items()}

    def load_params(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, v in self.named_params(prefix).items():
            if k not in values:
                raise KeyError(f"missing parameter {k}")
            if values[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {values[k].shape} vs {v.shape}")
            v[...] = values[k]

    def n_params(self) -> int:
        return sum(v.size for v in self.named_params().values())


class Mlp(Module):
    """tanh hidden layers, identity output (or tanh when ``out_act='tanh'``)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, out_act: str | None = None,
                 hidden_gain: float = 1.0, out_gain: float = 0.01):
        super().__init__()
        self.sizes = tuple(int(s) for s in sizes)
        self.out_act = out_act
        n = len(self.sizes) - 1
        for i in range(n):
            last = i == n - 1
            gain = out_gain if (last and out_act is None) else hidden_gain
            self.params[f"W{i}"] = orthogonal(rng, self.sizes[i], self.sizes[i + 1], gain)
            self.params[f"b{i}"] = np.zeros(self.sizes[i + 1])

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        acts = [x]
        h = x
        for i in range(self.n_layers):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1 or self.out_act == "tanh":
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], dy: np.ndarray, grads: dict[str, np.ndarray] | None = None,
                 prefix: str = "") -> tuple[dict[str, np.ndarray], np.ndarray]:
        grads = {} if grads is None else grads
        d = dy
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1 or self.out_act == "tanh":
                d = d * (1.0 - acts[i + 1] ** 2)
            _acc(grads, f"{prefix}W{i}", acts[i].T @ d)
            _acc(grads, f"{prefix}b{i}", d.sum(axis=0))
            d = d @ self.params[f"W{i}"].T
        return grads, d


def _acc(grads: dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


# --- masked softmax over segments ----------------------------------------

def segment_log_softmax(logits: np.ndarray, mask: np.ndarray, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-softmax within contiguous segments ``[starts[b], starts[b+1])``; masked entries get -inf."""
    lengths = np.diff(starts)
    x = np.where(mask, logits, -np.inf)
    mx = np.maximum.reduceat(x, starts[:-1])
    if not np.all(np.isfinite(mx)):
        raise ValueError("every action of some decision is masked")
    shifted = x - np.repeat(mx, lengths)
    z = np.exp(shifted)
    lse = np.log(np.add.reduceat(z, starts[:-1]))
    logp = shifted - np.repeat(lse, lengths)
    return logp, np.exp(logp)


class ActorNet(Module):
    """Trunk over the observation, a shared candidate scorer and a stop head.

    With ``fusion > 0`` the first ``fusion`` candidate features also enter the
    logit through a learned linear map (the architect's fused edge score).
    """

    def __init__(self, obs_dim: int, feat_dim: int, rng: np.random.Generator, trunk: Sequence[int] = (64, 64),
                 scorer_hidden: int = 32, fusion: int = 0, fusion_init: float = 0.25):
        super().__init__()
        self.obs_dim = obs_dim
        self.feat_dim = feat_dim
        self.fusion = fusion
        self.children["trunk"] = Mlp([obs_dim, *trunk], rng, out_act="tanh")
        self.children["scorer"] = Mlp([trunk[-1] + feat_dim, scorer_hidden, 1], rng)
        self.children["stop"] = Mlp([trunk[-1], 1], rng)
        if fusion:
            self.params["fusion"] = np.full(fusion, fusion_init)
        self.frozen: set[str] = set()

    @property
    def fusion_weights(self) -> np.ndarray:
        return self.params["fusion"] if self.fusion else np.zeros(0)

    def forward(self, obs: np.ndarray, feats: np.ndarray, seg: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        """Candidate logits (N,) for rows of ``feats`` owned by ``obs[seg]``, and stop logits (B,)."""
        obs = np.atleast_2d(obs)
        h, trunk_acts = self.children["trunk"].forward(obs)
        x = np.concatenate([h[seg], feats], axis=1) if len(feats) else np.zeros((0, h.shape[1] + self.feat_dim))
        if len(feats):
            s, scorer_acts = self.children["scorer"].forward(x)
            cand = s[:, 0]
        else:
            scorer_acts, cand = None, np.zeros(0)
        if self.fusion and len(feats):
            cand = cand + feats[:, : self.fusion] @ self.params["fusion"]
        st, stop_acts = self.children["stop"].forward(h)
        cache = {"trunk": trunk_acts, "scorer": scorer_acts, "stop": stop_acts, "seg": seg, "feats": feats, "B": len(obs)}
        return cand, st[:, 0], cache

    def backward(self, cache: dict, d_cand: np.ndarray, d_stop: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        dh = np.zeros((cache["B"], self.children["trunk"].sizes[-1]))
        if cache["scorer"] is not None:
            _, dx = self.children["scorer"].backward(cache["scorer"], d_cand[:, None], grads, "scorer.")
            np.add.at(dh, cache["seg"], dx[:, : dh.shape[1]])
        else:
            for k, v in self.children["scorer"].params.items():
                grads["scorer." + k] = np.zeros_like(v)
        if self.fusion:
            feats = cache["feats"]
            grads["fusion"] = feats[:, : self.fusion].T @ d_cand if len(feats) else np.zeros(self.fusion)
            if "fusion" in self.frozen:
                grads["fusion"] = np.zeros(self.fusion)
        _, dh_stop = self.children["stop"].backward(cache["stop"], d_stop[:, None], grads, "stop.")
        dh = dh + dh_stop
        self.children["trunk"].backward(cache["trunk"], dh, grads, "trunk.")
        return grads

    def backward_full(self, cache: dict, d_logits: np.ndarray, cand_pos: np.ndarray, stop_pos: np.ndarray) -> dict:
        return self.backward(cache, d_logits[cand_pos], d_logits[stop_pos])


def actor_forward(actor: ActorNet, observation: np.ndarray, cand_feats: np.ndarray, mask: np.ndarray | None = None,
                  offsets: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and log-probabilities over [candidates..., stop] for one decision."""
    n = len(cand_feats)
    feats = np.asarray(cand_feats, dtype=float).reshape(n, actor.feat_dim)
    cand, stop, _ = actor.forward(np.asarray(observation, dtype=float)[None, :], feats, np.zeros(n, dtype=np.int64))
    logits = np.append(cand + (0.0 if offsets is None else offsets), stop)
    mask = np.ones(n + 1, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (n + 1,):
        raise ValueError("mask must cover every candidate plus stop")
    logp, p = segment_log_softmax(logits, mask, np.array([0, n + 1]))
    return p, logp


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logp, p = segment_log_softmax(np.asarray(logits, dtype=float), np.asarray(mask, dtype=bool), np.array([0, len(logits)]))
    return p, logp


# --- critic ---------------------------------------------------------------

def mix(w_raw: np.ndarray, bias: np.ndarray, utils: np.ndarray) -> np.ndarray:
    """mixed[b, h] = sum_i |w_raw[b, h, i]| * utils[b, i, h] + bias[b, h]."""
    return np.einsum("bhi,bih->bh", np.abs(w_raw), utils) + bias


class CriticBundle(Module):
    def __init__(self, global_dim: int, action_dim: int, rng: np.random.Generator, n_agents: int = 3,
                 hidden: Sequence[int] = (64, 64), mixer_hidden: int = 32):
        super().__init__()
        self.global_dim = global_dim
        self.action_dim = action_dim
        self.n_agents = n_agents
        self.n_heads = len(HEADS)
        for i in range(n_agents):
            self.children[f"util{i}"] = Mlp([global_dim + action_dim, *hidden, self.n_heads], rng)
        # Hypernetwork output gain 1.0 keeps mixing weights away from zero at init.
        self.children["hyper_w"] = Mlp([global_dim, mixer_hidden, self.n_heads * n_agents], rng, out_gain=1.0)
        self.children["hyper_b"] = Mlp([global_dim, mixer_hidden, self.n_heads], rng)

    def utility(self, agent: int, glob: np.ndarray, act: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        return self.children[f"util{agent}"].forward(np.concatenate([glob, act], axis=1))

    def mixer(self, glob: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        wr, wa = self.children["hyper_w"].forward(glob)
        b, ba = self.children["hyper_b"].forward(glob)
        return wr.reshape(-1, self.n_heads, self.n_agents), b, {"w": wa, "b": ba}

    def forward(self, glob: np.ndarray, joint: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        glob = np.atleast_2d(glob)
        joint = np.asarray(joint, dtype=float)
        if joint.ndim == 2:
            joint = joint[None]
        if glob.shape[1] != self.global_dim or joint.shape[1:] != (self.n_agents, self.action_dim) or len(glob) != len(joint):
            raise ValueError(f"critic input shapes {glob.shape}, {joint.shape} do not match configuration")
        utils, uc = [], []
        for i in range(self.n_agents):
            u, c = self.utility(i, glob, joint[:, i])
            utils.append(u)
            uc.append(c)
        U = np.stack(utils, axis=1)  # (B, agents, heads)
        w_raw, bias, mc = self.mixer(glob)
        mixed = mix(w_raw, bias, U)
        return mixed, U, {"U": U, "uc": uc, "w_raw": w_raw, "mc": mc}

    def backward(self, cache: dict, d_mixed: np.ndarray, d_utils: np.ndarray | None = None) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        U, w_raw = cache["U"], cache["w_raw"]
        dU = np.einsum("bh,bhi->bih", d_mixed, np.abs(w_raw))
        if d_utils is not None:
            dU = dU + d_utils
        d_w = np.einsum("bh,bih->bhi", d_mixed, U) * np.sign(w_raw)
        for i in range(self.n_agents):
            self.children[f"util{i}"].backward(cache["uc"][i], dU[:, i], grads, f"util{i}.")
        self.children["hyper_w"].backward(cache["mc"]["w"], d_w.reshape(len(d_w), -1), grads, "hyper_w.")
        self.children["hyper_b"].backward(cache["mc"]["b"], d_mixed, grads, "hyper_b.")
        return grads


def critic_forward(bundle: CriticBundle, global_feats: np.ndarray, joint_action_feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mixed, U, _ = bundle.forward(global_feats, joint_action_feats)
    return mixed, U


# --- optimizer ------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: float | None = 0.5):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    """npz container; ``meta`` is stored as a JSON section named ``__meta__``."""
    meta = {"version": CHECKPOINT_VERSION, **meta}
    buf = io.BytesIO()
    payload = {k: np.ascontiguousarray(v) for k, v in sorted(tensors.items())}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(io.BytesIO(Path(path).read_bytes())) as z:
        tensors = {k: z[k].copy() for k in z.files if k != "__meta__"}
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return tensors, meta
