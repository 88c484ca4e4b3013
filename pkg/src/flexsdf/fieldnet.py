"""Learnable computation graphs.

A hypernetwork decodes each object code into the weights of a sinusoidal
implicit network giving the nominal SDF. A second hypernetwork, conditioned
on the (force code, object code) pair, decodes the weights of a deformation
network whose 3D output maps deformed space back onto the nominal shape:
``deformed_sdf(x) = object_sdf(x + deformation(x))``. A permutation-invariant
encoder summarizes contact locations and the reaction force into the force
code.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .datagen import ContactObservation
from .errors import InvalidInputError, InvalidStateError, ShapeError


@dataclass
class ModelConfig:
    object_code_dim: int = 8           # l
    force_code_dim: int = 32           # m
    hidden_features: int = 256
    hidden_layers: int = 5
    w0: float = 30.0                   # first/hidden-layer frequency scale
    hyper_hidden: int = 256
    point_feature_dims: tuple[int, int] = (64, 128)
    fusion_hidden: int = 64
    force_scale: float = 0.1           # reaction force in N is multiplied by this

    def __post_init__(self):
        self.point_feature_dims = tuple(self.point_feature_dims)

    def siren_dims(self, out_features: int) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every linear layer of a target network."""
        dims = [(3, self.hidden_features)]
        dims += [(self.hidden_features, self.hidden_features)] * (self.hidden_layers - 1)
        dims += [(self.hidden_features, out_features)]
        return dims


def siren_forward(params: list[tuple[torch.Tensor, torch.Tensor]], x: torch.Tensor,
                  w0: float) -> torch.Tensor:
    """Evaluate a sinusoidal MLP with externally supplied (weight, bias) pairs;
    all layers but the last apply sin(w0 * linear(x)), the last is linear."""
    h = x
    for W, b in params[:-1]:
        h = torch.sin(w0 * (h @ W.T + b))
    W, b = params[-1]
    return h @ W.T + b


def _siren_init_bounds(fan_in: int, is_first: bool, w0: float) -> float:
    return 1.0 / fan_in if is_first else float(np.sqrt(6.0 / fan_in) / w0)


class HyperNetwork(nn.Module):
    """One feed-forward head per target layer, emitting that layer's weights
    and biases from a latent code.

    Head output layers start near zero (scaled-down Kaiming) with biases drawn
    from the sinusoidal-MLP initialization of the target layer, so the decoded
    network behaves like a freshly initialized implicit network for any code.
    """

    def __init__(self, in_features: int, target_dims: list[tuple[int, int]],
                 hyper_hidden: int, w0: float):
        super().__init__()
        self.target_dims = list(target_dims)
        self.heads = nn.ModuleList()
        for i, (fan_in, fan_out) in enumerate(self.target_dims):
            numel = fan_in * fan_out + fan_out
            head = nn.Sequential(
                nn.Linear(in_features, hyper_hidden),
                nn.ReLU(),
                nn.Linear(hyper_hidden, numel),
            )
            out = head[-1]
            nn.init.kaiming_normal_(out.weight, nonlinearity="relu", mode="fan_in")
            with torch.no_grad():
                out.weight.mul_(0.01)
                bound = _siren_init_bounds(fan_in, is_first=(i == 0), w0=w0)
                out.bias[: fan_in * fan_out].uniform_(-bound, bound)
                out.bias[fan_in * fan_out:].uniform_(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in))
            self.heads.append(head)

    @property
    def target_numel(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.target_dims)

    def forward(self, code: torch.Tensor) -> tuple[list[tuple[torch.Tensor, torch.Tensor]], torch.Tensor]:
        """Decode a code into per-layer (weight, bias) pairs plus the flat
        parameter vector (used by the weight-norm regularizer)."""
        params, flats = [], []
        for head, (fan_in, fan_out) in zip(self.heads, self.target_dims):
            flat = head(code)
            W = flat[: fan_in * fan_out].reshape(fan_out, fan_in)
            b = flat[fan_in * fan_out:]
            params.append((W, b))
            flats.append(flat)
        return params, torch.cat(flats)


class ForceEncoder(nn.Module):
    """Permutation-invariant summary of a contact formation.

    A shared per-point transform lifts each contact location, coordinate-wise
    max pooling collapses the set into the contact feature, and a small fusion
    MLP maps [feature; scaled reaction force] to the force code.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d1, d2 = cfg.point_feature_dims
        self.point_mlp = nn.Sequential(
            nn.Linear(3, d1), nn.ReLU(),
            nn.Linear(d1, d2), nn.ReLU(),
        )
        self.fusion = nn.Sequential(
            nn.Linear(d2 + 3, cfg.fusion_hidden), nn.ReLU(),
            nn.Linear(cfg.fusion_hidden, cfg.force_code_dim),
        )
        self.feature_dim = d2
        self.force_scale = cfg.force_scale

    def contact_feature(self, q: torch.Tensor) -> torch.Tensor:
        if q.ndim != 2 or q.shape[1] != 3 or q.shape[0] < 1:
            raise InvalidInputError(f"contact set must be (|Q| >= 1, 3), got {tuple(q.shape)}")
        return self.point_mlp(q).amax(dim=0)

    def fuse(self, feature: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        if feature.shape != (self.feature_dim,):
            raise ShapeError(f"contact feature must be ({self.feature_dim},), got {tuple(feature.shape)}")
        return self.fusion(torch.cat([feature, u.reshape(3) * self.force_scale]))

    def forward(self, q: torch.Tensor, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feature = self.contact_feature(q)
        return feature, self.fuse(feature, u)


def _as_tensor(x, like: torch.Tensor | None = None, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        t = t.to(dtype)
    elif like is not None:
        t = t.to(like.dtype)
    return t


class FieldModel(nn.Module):
    """Full model state: both hypernetworks, the force encoder, and the
    per-object / per-deformation latent code tables."""

    def __init__(self, cfg: ModelConfig, object_ids: list[str], seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.object_ids = list(object_ids)
        self.deformation_ids: list[str] = []
        self.object_frozen = False

        gen = torch.Generator().manual_seed(seed)
        codes = torch.normal(0.0, 0.1, (len(self.object_ids), cfg.object_code_dim), generator=gen)
        self.object_codes = nn.Parameter(codes)

        self.psi_o = HyperNetwork(cfg.object_code_dim, cfg.siren_dims(1), cfg.hyper_hidden, cfg.w0)
        self.psi_d = HyperNetwork(cfg.object_code_dim + cfg.force_code_dim, cfg.siren_dims(3),
                                  cfg.hyper_hidden, cfg.w0)
        self.force_encoder = ForceEncoder(cfg)
        self.register_buffer("force_codes", torch.zeros(0, cfg.force_code_dim))
        self._theta_o_cache: dict[bytes, list[tuple[torch.Tensor, torch.Tensor]]] = {}

    # -- code bookkeeping ---------------------------------------------------

    def object_code(self, object_id: str) -> torch.Tensor:
        try:
            idx = self.object_ids.index(object_id)
        except ValueError:
            raise InvalidInputError(f"unknown object id {object_id!r}; known: {self.object_ids}")
        return self.object_codes[idx]

    def set_force_codes(self, deformation_ids: list[str], codes: torch.Tensor) -> None:
        if codes.shape != (len(deformation_ids), self.cfg.force_code_dim):
            raise ShapeError("force code table shape mismatch")
        self.deformation_ids = list(deformation_ids)
        self.force_codes = codes.detach().clone()

    def force_code(self, deformation_id: str) -> torch.Tensor:
        try:
            idx = self.deformation_ids.index(deformation_id)
        except ValueError:
            raise InvalidInputError(f"unknown deformation id {deformation_id!r}")
        return self.force_codes[idx]

    # -- core field evaluation ----------------------------------------------

    def _check_alpha(self, alpha) -> torch.Tensor:
        alpha = _as_tensor(alpha, like=self.object_codes)
        if alpha.shape != (self.cfg.object_code_dim,):
            raise ShapeError(f"object code must be ({self.cfg.object_code_dim},), got {tuple(alpha.shape)}")
        return alpha

    def _check_z(self, z) -> torch.Tensor:
        z = _as_tensor(z, like=self.object_codes)
        if z.shape != (self.cfg.force_code_dim,):
            raise ShapeError(f"force code must be ({self.cfg.force_code_dim},), got {tuple(z.shape)}")
        return z

    def _check_x(self, x) -> torch.Tensor:
        x = _as_tensor(x, like=self.object_codes)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ShapeError(f"query batch must be (B, 3), got {tuple(x.shape)}")
        return x

    def decode_object_params(self, alpha) -> tuple[list[tuple[torch.Tensor, torch.Tensor]], torch.Tensor]:
        alpha = self._check_alpha(alpha)
        if self.object_frozen and not alpha.requires_grad:
            key = alpha.detach().numpy().tobytes()
            if key not in self._theta_o_cache:
                with torch.no_grad():
                    params, flat = self.psi_o(alpha)
                self._theta_o_cache[key] = ([(W.detach(), b.detach()) for W, b in params], flat.detach())
            return self._theta_o_cache[key]
        return self.psi_o(alpha)

    def object_sdf(self, alpha, x) -> torch.Tensor:
        """Nominal signed distance at query points x under object code alpha."""
        x = self._check_x(x)
        params, _ = self.decode_object_params(alpha)
        return siren_forward(params, x, self.cfg.w0).squeeze(-1)

    def object_sdf_grad(self, alpha, x) -> tuple[torch.Tensor, torch.Tensor]:
        """SDF values and their spatial gradient, kept on the autograd graph."""
        x = self._check_x(x).clone().requires_grad_(True)
        s = self.object_sdf(alpha, x)
        grad = torch.autograd.grad(s.sum(), x, create_graph=True)[0]
        return s, grad

    def encode_force(self, obs: ContactObservation) -> tuple[torch.Tensor, torch.Tensor]:
        """Summarize a contact observation into (contact_feature, force code)."""
        if len(obs.Q) == 0:
            raise InvalidInputError("contact set Q must be non-empty")
        q = _as_tensor(obs.Q.points, like=self.object_codes)
        u = _as_tensor(obs.u, like=self.object_codes)
        return self.force_encoder(q, u)

    def deformation_field(self, z, alpha, x) -> torch.Tensor:
        """3D field that pushes deformed-space points back to nominal space."""
        z = self._check_z(z)
        alpha = self._check_alpha(alpha)
        x = self._check_x(x)
        params, _ = self.psi_d(torch.cat([z, alpha]))
        return siren_forward(params, x, self.cfg.w0)

    def deformed_sdf(self, z, alpha, x) -> torch.Tensor:
        """Signed distance of the deformed object: object_sdf(x + D(x))."""
        x = self._check_x(x)
        d = self.deformation_field(z, alpha, x)
        return self.object_sdf(alpha, x + d)

    def deformed_sdf_grad(self, z, alpha, x) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._check_x(x).clone().requires_grad_(True)
        s = self.deformed_sdf(z, alpha, x)
        grad = torch.autograd.grad(s.sum(), x, create_graph=True)[0]
        return s, grad

    # -- freezing -------------------------------------------------------------

    def freeze_object_module(self) -> None:
        """Fix the object codes and object hypernetwork after pretraining."""
        for p in self.psi_o.parameters():
            p.requires_grad_(False)
        self.object_codes.requires_grad_(False)
        self.object_frozen = True
        self._theta_o_cache.clear()

    # -- serialization --------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "config": asdict(self.cfg),
            "object_ids": self.object_ids,
            "deformation_ids": self.deformation_ids,
            "object_frozen": self.object_frozen,
            "n_force_codes": int(self.force_codes.shape[0]),
        }

    def save(self, path, provenance: dict | None = None) -> None:
        meta = self.metadata()
        meta["provenance"] = provenance or {}
        save_checkpoint(path, meta, dict(self.state_dict()))

    @classmethod
    def load(cls, path) -> "FieldModel":
        meta, tensors = load_checkpoint(path)
        cfg_dict = dict(meta["config"])
        cfg_dict["point_feature_dims"] = tuple(cfg_dict["point_feature_dims"])
        model = cls(ModelConfig(**cfg_dict), meta["object_ids"])
        model.deformation_ids = list(meta["deformation_ids"])
        model.force_codes = torch.zeros(meta["n_force_codes"], model.cfg.force_code_dim)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        for name, tensor in tensors.items():
            if name not in expected:
                raise InvalidStateError(f"checkpoint tensor {name!r} not part of the model")
            if tuple(tensor.shape) != expected[name]:
                raise InvalidStateError(
                    f"checkpoint tensor {name!r} has shape {tuple(tensor.shape)}, "
                    f"expected {expected[name]}")
        missing = set(expected) - set(tensors)
        if missing:
            raise InvalidStateError(f"checkpoint missing tensors: {sorted(missing)}")
        model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
        if meta["object_frozen"]:
            model.freeze_object_module()
        return model


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header + named little-endian float32 tensors in
# one file. Layout: magic 'FSDF', u32 version, u64 header length, header JSON,
# then raw tensor bytes at the offsets recorded in the header.
# ---------------------------------------------------------------------------

_MAGIC = b"FSDF"
_VERSION = 1


def save_checkpoint(path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "float32",
                         "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise InvalidStateError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise InvalidStateError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len))
        base = fh.tell()
        tensors = {}
        for name, entry in header["tensors"].items():
            fh.seek(base + entry["offset"])
            raw = np.frombuffer(fh.read(entry["nbytes"]), dtype="<f4")
            tensors[name] = torch.from_numpy(raw.reshape(entry["shape"]).copy())
    return header["meta"], tensors


def checkpoint_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
