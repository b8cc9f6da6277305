"""Differentiable planning policy: shared encoder, projection head, planner head, losses.

The network is small enough that forward and backward passes are written out
by hand in float64 numpy. Gradients are checked against central finite
differences in the test-suite and by :func:`dtccl.train.grad_check`.

Layout of one forward pass::

    tokens  = [ego] + agents (masked) + route samples (with slot embedding)
    latent  = ego row of one 2-head self-attention block + tanh feed-forward
    z       = proj2(tanh(proj1(latent)))             # contrastive embedding
    plan    = plan_w @ latent + plan_b, scaled        # T x (accel, yaw_rate)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .features import AGENT_DIM, EGO_DIM, MAX_AGENTS, ROUTE_DIM, ROUTE_SAMPLES, stack

HIDDEN = 32
HEADS = 2
PROJ = 16
HORIZON = 10
HEAD_DIM = HIDDEN // HEADS
CHECKPOINT_FORMAT = "dtccl-policy/1"

# Fixed input normalisation (part of the architecture, not learned).
EGO_SCALE = np.array([200.0, 2.0, 0.5, 10.0, 2.0, 50.0])
AGENT_SCALE = np.array([30.0, 10.0, np.pi, 10.0, 3.0, 1.5, 1.0])
ROUTE_SCALE = np.array([0.05, 5.0])
# Planner outputs (accel m/s^2, yaw_rate rad/s) per step.
CONTROL_SCALE = np.tile(np.array([2.0, 0.2]), HORIZON)

SHAPES = {
    "ego_w": (EGO_DIM, HIDDEN), "ego_b": (HIDDEN,),
    "agent_w": (AGENT_DIM, HIDDEN), "agent_b": (HIDDEN,),
    "route_w": (ROUTE_DIM, HIDDEN), "route_b": (HIDDEN,), "route_pos": (ROUTE_SAMPLES, HIDDEN),
    "wq": (HIDDEN, HIDDEN), "wk": (HIDDEN, HIDDEN), "wv": (HIDDEN, HIDDEN),
    "wo": (HIDDEN, HIDDEN), "bo": (HIDDEN,),
    "ff1_w": (HIDDEN, HIDDEN), "ff1_b": (HIDDEN,), "ff2_w": (HIDDEN, HIDDEN), "ff2_b": (HIDDEN,),
    "proj1_w": (HIDDEN, HIDDEN), "proj1_b": (HIDDEN,), "proj2_w": (HIDDEN, PROJ), "proj2_b": (PROJ,),
    "plan_w": (HIDDEN, 2 * HORIZON), "plan_b": (2 * HORIZON,),
}


class NonFiniteError(FloatingPointError):
    pass


@dataclass(eq=False)
class PolicyParams:
    tensors: dict
    version: str = "v0"

    def __post_init__(self):
        for name, shape in SHAPES.items():
            if name not in self.tensors:
                raise ValueError(f"missing tensor {name}")
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.tensors[name] = arr
        extra = set(self.tensors) - set(SHAPES)
        if extra:
            raise ValueError(f"unexpected tensors {sorted(extra)}")

    def __getitem__(self, key):
        return self.tensors[key]

    def copy(self, version: Optional[str] = None) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.tensors.items()},
                            self.version if version is None else version)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            h.update(name.encode())
            h.update(json.dumps(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def num_entries(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def init_params(seed: int = 0, version: str = "v0") -> PolicyParams:
    rng = np.random.default_rng(seed)
    t = {}
    for name, shape in SHAPES.items():
        if len(shape) == 1:
            t[name] = np.zeros(shape)
        elif name == "route_pos":
            t[name] = rng.normal(0.0, 0.1, shape)
        else:
            t[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
    t["plan_w"] *= 0.1
    return PolicyParams(t, version)


def zero_params(version: str = "zero") -> PolicyParams:
    return PolicyParams({k: np.zeros(s) for k, s in SHAPES.items()}, version)


def zeros_like(params: PolicyParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ------------------------------------------------------------------ forward/backward


def _as_batch(features) -> dict:
    if isinstance(features, dict):
        return features
    if isinstance(features, (list, tuple)):
        return stack(features)
    return stack([features])


def _encode(batch: dict, p: PolicyParams):
    ego_in = batch["ego"] / EGO_SCALE
    ag_in = batch["agents"] / AGENT_SCALE
    rt_in = batch["route"] / ROUTE_SCALE
    B = len(ego_in)
    mask = np.concatenate([np.ones((B, 1)), batch["mask"], np.ones((B, ROUTE_SAMPLES))], axis=1)

    e0 = ego_in @ p["ego_w"] + p["ego_b"]
    xa = ag_in @ p["agent_w"] + p["agent_b"]
    xr = rt_in @ p["route_w"] + p["route_b"] + p["route_pos"]
    X = np.concatenate([e0[:, None, :], xa, xr], axis=1)

    q = (e0 @ p["wq"]).reshape(B, HEADS, HEAD_DIM)
    K = (X @ p["wk"]).reshape(B, -1, HEADS, HEAD_DIM)
    V = (X @ p["wv"]).reshape(B, -1, HEADS, HEAD_DIM)
    S = np.einsum("bhd,bnhd->bhn", q, K) / np.sqrt(HEAD_DIM)
    present = mask[:, None, :] > 0
    S_safe = np.where(present, S, -np.inf)
    w = np.exp(S_safe - S_safe.max(axis=-1, keepdims=True))
    alpha = w / w.sum(axis=-1, keepdims=True)
    O = np.einsum("bhn,bnhd->bhd", alpha, V).reshape(B, HIDDEN)
    Y = e0 + O @ p["wo"] + p["bo"]
    Hf = np.tanh(Y @ p["ff1_w"] + p["ff1_b"])
    latent = Y + Hf @ p["ff2_w"] + p["ff2_b"]
    cache = dict(ego_in=ego_in, ag_in=ag_in, rt_in=rt_in, e0=e0, X=X, q=q, K=K, V=V,
                 alpha=alpha, O=O, Y=Y, Hf=Hf)
    return latent, cache


def _encode_backward(dlat: np.ndarray, c: dict, p: PolicyParams, g: dict) -> None:
    B = len(dlat)
    dY = dlat.copy()
    g["ff2_w"] += c["Hf"].T @ dlat
    g["ff2_b"] += dlat.sum(0)
    dpre = (dlat @ p["ff2_w"].T) * (1.0 - c["Hf"] ** 2)
    g["ff1_w"] += c["Y"].T @ dpre
    g["ff1_b"] += dpre.sum(0)
    dY += dpre @ p["ff1_w"].T

    de0 = dY.copy()
    g["wo"] += c["O"].T @ dY
    g["bo"] += dY.sum(0)
    dO = (dY @ p["wo"].T).reshape(B, HEADS, HEAD_DIM)
    alpha, K, V, q = c["alpha"], c["K"], c["V"], c["q"]
    dalpha = np.einsum("bhd,bnhd->bhn", dO, V)
    dV = np.einsum("bhn,bhd->bnhd", alpha, dO)
    dS = alpha * (dalpha - (alpha * dalpha).sum(-1, keepdims=True))
    scale = 1.0 / np.sqrt(HEAD_DIM)
    dq = np.einsum("bhn,bnhd->bhd", dS, K).reshape(B, HIDDEN) * scale
    dK = np.einsum("bhn,bhd->bnhd", dS, q).reshape(B, -1, HIDDEN) * scale
    dV = dV.reshape(B, -1, HIDDEN)
    X = c["X"]
    g["wq"] += c["e0"].T @ dq
    de0 += dq @ p["wq"].T
    g["wk"] += np.einsum("bni,bnj->ij", X, dK)
    g["wv"] += np.einsum("bni,bnj->ij", X, dV)
    dX = dK @ p["wk"].T + dV @ p["wv"].T
    de0 += dX[:, 0]
    dxa = dX[:, 1:1 + MAX_AGENTS]
    dxr = dX[:, 1 + MAX_AGENTS:]

    g["ego_w"] += c["ego_in"].T @ de0
    g["ego_b"] += de0.sum(0)
    g["agent_w"] += np.einsum("bai,baj->ij", c["ag_in"], dxa)
    g["agent_b"] += dxa.sum((0, 1))
    g["route_w"] += np.einsum("bri,brj->ij", c["rt_in"], dxr)
    g["route_b"] += dxr.sum((0, 1))
    g["route_pos"] += dxr.sum(0)


def _project(latent, p):
    a = np.tanh(latent @ p["proj1_w"] + p["proj1_b"])
    return a @ p["proj2_w"] + p["proj2_b"], a


def _project_backward(dz, latent, a, p, g):
    g["proj2_w"] += a.T @ dz
    g["proj2_b"] += dz.sum(0)
    dpre = (dz @ p["proj2_w"].T) * (1.0 - a ** 2)
    g["proj1_w"] += latent.T @ dpre
    g["proj1_b"] += dpre.sum(0)
    return dpre @ p["proj1_w"].T


def _plan(latent, p):
    return (latent @ p["plan_w"] + p["plan_b"]) * CONTROL_SCALE


def _plan_backward(du, latent, p, g):
    dr = du * CONTROL_SCALE
    g["plan_w"] += latent.T @ dr
    g["plan_b"] += dr.sum(0)
    return dr @ p["plan_w"].T


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def encode(features, params: PolicyParams) -> np.ndarray:
    """Shared encoder output; (H,) for one scene or (B, H) for a batch."""
    single = not isinstance(features, (dict, list, tuple))
    lat, _ = _encode(_as_batch(features), params)
    _check_finite(lat, "encoder output")
    return lat[0] if single else lat


def project(latent: np.ndarray, params: PolicyParams) -> np.ndarray:
    """Two-layer projection head applied to encoder output(s)."""
    lat = np.atleast_2d(latent)
    z, _ = _project(lat, params)
    return z[0] if np.ndim(latent) == 1 else z


def plan(features, params: PolicyParams) -> np.ndarray:
    """Planned controls, shape (T, 2) of (accel, yaw_rate); (B, T, 2) for a batch."""
    single = not isinstance(features, (dict, list, tuple))
    lat, _ = _encode(_as_batch(features), params)
    u = _plan(lat, params)
    _check_finite(u, "plan")
    u = u.reshape(-1, HORIZON, 2)
    return u[0] if single else u


def embed(features, params: PolicyParams) -> np.ndarray:
    single = not isinstance(features, (dict, list, tuple))
    lat, _ = _encode(_as_batch(features), params)
    z, _ = _project(lat, params)
    return z[0] if single else z


# ------------------------------------------------------------------ losses


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _cos_rows(u, v):
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nu == 0) or np.any(nv == 0):
        raise ValueError("zero embedding in contrastive loss")
    s = (u * v).sum(-1, keepdims=True) / (nu * nv)
    du = v / (nu * nv) - s * u / nu ** 2
    dv = u / (nu * nv) - s * v / nv ** 2
    return s[..., 0], du, dv


def contrastive_loss(z, z_pos, z_neg, tau: float):
    """Triplet loss -log(e^{s+/tau} / (e^{s+/tau} + e^{s-/tau})) with cosine similarities.

    Returns ``(loss, (grad_z, grad_pos, grad_neg))``. Batched inputs of shape
    (N, P) give the mean loss over the N triplets and per-row gradients of that mean.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    single = np.ndim(z) == 1
    z, zp, zn = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (z, z_pos, z_neg))
    s_pos, dz_p, dzp = _cos_rows(z, zp)
    s_neg, dz_n, dzn = _cos_rows(z, zn)
    d = (s_neg - s_pos) / tau
    losses = np.logaddexp(0.0, d)
    n = len(z)
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))  # logistic(d), overflow-free
    g_pos = (-sig / tau / n)[:, None]
    g_neg = (sig / tau / n)[:, None]
    gz = g_pos * dz_p + g_neg * dz_n
    gp = g_pos * dzp
    gn = g_neg * dzn
    loss = float(losses.mean())
    if single:
        return loss, (gz[0], gp[0], gn[0])
    return loss, (gz, gp, gn)


def bc_loss(pred, expert):
    """Mean squared error over all control entries; returns (loss, grad wrt pred)."""
    pred = np.asarray(pred, dtype=float)
    expert = np.asarray(expert, dtype=float)
    if pred.shape != expert.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {expert.shape}")
    diff = pred - expert
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def stab_loss(params_new: PolicyParams, params_ref: PolicyParams, probe_features, mode="output",
              ref_plans=None):
    """Deviation of the new policy from the frozen reference; returns (loss, grads)."""
    g = zeros_like(params_new)
    if mode == "params":
        n = params_new.num_entries()
        total = 0.0
        for k in params_new.tensors:
            diff = params_new[k] - params_ref[k]
            total += float((diff ** 2).sum())
            g[k] = 2.0 * diff / n
        return total / n, g
    batch = _as_batch(probe_features)
    if len(batch["ego"]) == 0:
        raise ValueError("stability probe set is empty")
    lat, cache = _encode(batch, params_new)
    u = _plan(lat, params_new)
    if ref_plans is None:
        ref_plans = _plan(_encode(batch, params_ref)[0], params_ref)
    loss, du = bc_loss(u, ref_plans)
    dlat = _plan_backward(du, lat, params_new, g)
    _encode_backward(dlat, cache, params_new, g)
    return loss, g


@dataclass
class LossWeights:
    bc: float = 1.0
    cl: float = 0.5
    stab: float = 0.1

    def __post_init__(self):
        if min(self.bc, self.cl, self.stab) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Batch:
    """Training batch.

    ``bc_feats``/``bc_targets`` hold the anchor and positive instances that carry
    imitation targets; ``cl_*`` hold the contrastive triplets (negatives appear
    only there). ``nom_*`` is the rehearsal slice of nominal human data and
    ``probe`` the frozen stability probe set.
    """

    bc_feats: Optional[dict] = None
    bc_targets: Optional[np.ndarray] = None  # (N, T, 2)
    cl_anchor: Optional[dict] = None
    cl_pos: Optional[dict] = None
    cl_neg: Optional[dict] = None
    nom_feats: Optional[dict] = None
    nom_targets: Optional[np.ndarray] = None
    probe: Optional[dict] = None
    probe_ref_plans: Optional[np.ndarray] = None
    rehearsal: float = 0.5
    roles: tuple = ()
    instances: tuple = ()

    @property
    def num_instances(self) -> int:
        return len(self.roles)


def _n(b):
    return 0 if b is None else len(b["ego"])


def joint_loss(batch: Batch, params: PolicyParams, params_ref: Optional[PolicyParams],
               weights: LossWeights, tau: float, stab_mode: str = "output"):
    """w_bc * imitation + w_cl * contrastive + w_stab * stability.

    Returns ``(total, components, grads)`` where ``components`` maps bc/cl/stab/total
    to floats and ``grads`` maps tensor names to arrays.
    """
    g = zeros_like(params)
    comp = {"bc": 0.0, "cl": 0.0, "stab": 0.0}

    n_dis, n_nom = _n(batch.bc_feats), _n(batch.nom_feats)
    if n_dis or n_nom:
        parts = []
        if n_dis:
            parts.append((batch.bc_feats, batch.bc_targets.reshape(n_dis, -1)))
        if n_nom:
            parts.append((batch.nom_feats, batch.nom_targets.reshape(n_nom, -1)))
        mix = [1.0] if len(parts) == 1 else [1.0 - batch.rehearsal, batch.rehearsal]
        for (feats, targets), m in zip(parts, mix):
            lat, cache = _encode(feats, params)
            u = _plan(lat, params)
            loss, du = bc_loss(u, targets)
            comp["bc"] += m * loss
            if weights.bc and m:
                gl = zeros_like(params)
                dlat = _plan_backward(du, lat, params, gl)
                _encode_backward(dlat, cache, params, gl)
                for k in g:
                    g[k] += weights.bc * m * gl[k]

    n_cl = _n(batch.cl_anchor)
    if n_cl:
        feats = {k: np.concatenate([batch.cl_anchor[k], batch.cl_pos[k], batch.cl_neg[k]])
                 for k in batch.cl_anchor}
        lat, cache = _encode(feats, params)
        z, a = _project(lat, params)
        loss, (gz, gp, gn) = contrastive_loss(z[:n_cl], z[n_cl:2 * n_cl], z[2 * n_cl:], tau)
        comp["cl"] = loss
        if weights.cl:
            gl = zeros_like(params)
            dz = np.concatenate([gz, gp, gn]) * weights.cl
            dlat = _project_backward(dz, lat, a, params, gl)
            _encode_backward(dlat, cache, params, gl)
            for k in g:
                g[k] += gl[k]

    if params_ref is not None and (batch.probe is not None or stab_mode == "params"):
        loss, gs = stab_loss(params, params_ref, batch.probe, stab_mode, batch.probe_ref_plans)
        comp["stab"] = loss
        if weights.stab:
            for k in g:
                g[k] += weights.stab * gs[k]

    total = weights.bc * comp["bc"] + weights.cl * comp["cl"] + weights.stab * comp["stab"]
    comp["total"] = total
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite loss {comp}")
    return total, comp, g


# ------------------------------------------------------------------ checkpoints


def params_to_json(params: PolicyParams) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": params.version,
        "arch": {"hidden": HIDDEN, "heads": HEADS, "proj": PROJ, "horizon": HORIZON,
                 "max_agents": MAX_AGENTS, "route_samples": ROUTE_SAMPLES},
        "digest": params.digest(),
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in sorted(params.tensors.items())},
    }
    return json.dumps(doc, separators=(",", ":"))


def params_from_json(text: str) -> PolicyParams:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a policy checkpoint: {doc.get('format')!r}")
    tensors = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
               for k, v in doc["tensors"].items()}
    params = PolicyParams(tensors, doc.get("version", "v0"))
    if params.digest() != doc["digest"]:
        raise ValueError("checkpoint digest mismatch")
    return params


def save_params(params: PolicyParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(params_to_json(params))


def load_params(path) -> PolicyParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_json(fh.read())


def inspect(params: PolicyParams) -> dict:
    return {"version": params.version, "digest": params.digest(),
            "entries": params.num_entries(),
            "shapes": {k: list(v.shape) for k, v in sorted(params.tensors.items())}}
