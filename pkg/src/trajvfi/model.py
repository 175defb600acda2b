"""The full interpolation network and its checkpoint container."""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import MultiScaleFusion, ScaleTransformer
from .errors import InvalidArgument, InvalidData, NotFound
from .flow import approximate_bilateral, build_trajectories, inconsistency_map, resize_flow
from .motion import BaseFlowEstimator, ConsistentMotion, FeaturePyramid, check_frames
from .tokens import (
    ContextExtractor, FilterSynthesizer, TokenEmbedder, build_candidates, dynamic_local_conv,
)

SCHEMA_VERSION = 1


@dataclass
class ModelConfig:
    heads: int = 4
    window: int = 8
    layers: int = 2
    scales: tuple = (1, 2, 4)
    dim: int = 64
    context: int = 32
    grid: tuple = (32, 64, 96)
    pyramid: tuple = (16, 32, 32)
    radius: int = 3
    tau: float = 1.0
    use_cml: bool = True
    use_tac: bool = True
    use_tab: bool = True

    def __post_init__(self):
        self.scales = tuple(sorted(int(s) for s in self.scales))
        self.grid = tuple(int(c) for c in self.grid)
        self.pyramid = tuple(int(c) for c in self.pyramid)
        if self.dim % self.heads:
            raise InvalidArgument(f"d={self.dim} is not divisible by H={self.heads}")
        if not set(self.scales) <= {1, 2, 4} or 1 not in self.scales:
            raise InvalidArgument(f"scales must be a subset of {{1, 2, 4}} containing 1, got {self.scales}")
        if self.layers < 1 or self.window < 1:
            raise InvalidArgument("N and S must be >= 1")
        if self.tau <= 0:
            raise InvalidArgument("tau must be positive")

    @property
    def use_attention(self):
        return self.use_tac or self.use_tab

    def to_dict(self):
        d = asdict(self)
        for k in ("scales", "grid", "pyramid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _pool(x, s):
    return x if s == 1 else F.avg_pool2d(x, s)


class Interpolator(nn.Module):
    """Synthesize ``I_t`` from ``I_0`` and ``I_1``.

    Motion parameters (pyramid, base estimator, consistent-motion trunks) are
    kept apart from the synthesis parameters so training can give them their
    own learning rate.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.pyramid = FeaturePyramid(cfg.pyramid)
        self.estimator = BaseFlowEstimator(cfg.pyramid, cfg.radius)
        self.cml = ConsistentMotion(cfg.pyramid, cfg.radius)
        self.context = ContextExtractor(cfg.context)
        self.filters = FilterSynthesizer(cfg.context, cfg.grid)
        self.embed = TokenEmbedder(cfg.context, cfg.dim)
        scales = cfg.scales if cfg.use_attention else (1,)
        self.transformers = nn.ModuleDict(
            {str(s): ScaleTransformer(cfg.dim, cfg.heads, cfg.window, cfg.layers) for s in scales}
            if cfg.use_attention else {}
        )
        self.fusion = MultiScaleFusion(cfg.dim, scales)

    def motion_parameters(self):
        for m in (self.pyramid, self.estimator, self.cml):
            yield from m.parameters()

    def synthesis_parameters(self):
        motion = {id(p) for p in self.motion_parameters()}
        return (p for p in self.parameters() if id(p) not in motion)

    def motion(self, i0, i1, t, flows=None):
        """Base flows, bilateral approximation and consistent motion."""
        check_frames(i0, i1)
        pyr = self.pyramid(torch.cat([i0, i1], 0))
        pyr0 = [f[: i0.shape[0]] for f in pyr]
        pyr1 = [f[i0.shape[0]:] for f in pyr]
        if flows is None:
            o01 = self.estimator(pyr0, pyr1)
            o10 = self.estimator(pyr1, pyr0)
        else:
            o01, o10 = (f.to(i0) for f in flows)
            if o01.shape[2:] != i0.shape[2:] or o10.shape[2:] != i0.shape[2:]:
                raise InvalidArgument("supplied flows do not match the frame size")
        approx = approximate_bilateral(o01, o10, t)
        consistent = self.cml(o01, o10, t, pyr0, pyr1) if self.config.use_cml else approx
        return {"o01": o01, "o10": o10, "approx": approx, "consistent": consistent}

    def _scale_tokens(self, s, i0, i1, c0, c1, mot, p):
        """Candidates and tokens at downscale factor ``s``; trajectories are rebuilt from rescaled flows."""
        size = (i0.shape[2] // s, i0.shape[3] // s)
        approx = tuple(resize_flow(f, size) for f in mot["approx"])
        cons = tuple(resize_flow(f, size) for f in mot["consistent"])
        cands = build_candidates(
            _pool(i0, s), _pool(i1, s), approx, cons,
            build_trajectories(cons[0]), build_trajectories(cons[1]), _pool(c0, s), _pool(c1, s),
        )
        kc = self.embed.embed_group(self.embed.consistent, cands.features[:4], cands.frames[:4])
        kb = self.embed.embed_group(self.embed.boundary, cands.features[4:], cands.frames[4:])
        ps = p if s == 1 else F.interpolate(p, size=size, mode="bilinear", align_corners=False)
        return kc, kb, ps

    def forward(self, i0, i1, t=0.5, flows=None, return_aux=False):
        cfg = self.config
        mot = self.motion(i0, i1, t, flows)
        o_t0, o_t1 = mot["consistent"]
        p = inconsistency_map(o_t0, o_t1, cfg.tau)
        traj_t0, traj_t1 = build_trajectories(o_t0), build_trajectories(o_t1)
        c0, c1 = self.context(torch.cat([i0, i1], 0)).chunk(2, 0)
        cands = build_candidates(i0, i1, mot["approx"], mot["consistent"], traj_t0, traj_t1, c0, c1)
        filters = self.filters(cands)
        c_q = dynamic_local_conv(filters, cands.features)
        i_q = dynamic_local_conv(filters, cands.frames)
        query = self.embed.embed_query(c_q, i_q)

        features = {}
        if cfg.use_attention:
            if cfg.use_tac and cfg.use_tab:
                p_eff = p
            else:
                p_eff = torch.zeros_like(p) if cfg.use_tac else torch.ones_like(p)
            for s in cfg.scales:
                kc, kb, ps = self._scale_tokens(s, i0, i1, c0, c1, mot, p_eff)
                features[s] = self.transformers[str(s)](_pool(query, s), kc, kb, ps)
        else:
            features[1] = query
        residual = self.fusion(features)
        out = (i_q + residual).clamp(0.0, 1.0)
        if not return_aux:
            return out
        aux = dict(mot)
        aux.update(p=p, trajectories=(traj_t0, traj_t1), candidates=cands, filters=filters,
                   c_q=c_q, i_q=i_q, query=query, residual=residual)
        return out, aux


def interpolate(i0, i1, t, model: Interpolator, flows=None):
    """Run the full pipeline without tracking gradients."""
    with torch.no_grad():
        return model(i0, i1, t, flows)


def _zip_info(name):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(path, model: Interpolator, meta: dict | None = None) -> Path:
    """Write a zip archive: ``meta.json`` (schema version, config) plus one float32 ``.npy`` per parameter.

    Entry timestamps are fixed, so identical parameters give identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema_version": SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "fingerprint": model.config.fingerprint(),
        **(meta or {}),
    }
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_zip_info("meta.json"), json.dumps(header, sort_keys=True, indent=1))
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, tensor.detach().cpu().float().numpy(), allow_pickle=False)
            zf.writestr(_zip_info(f"params/{name}.npy"), buf.getvalue())
    return path


def read_checkpoint(path):
    """Return ``(meta, {name: ndarray})``."""
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            params = {
                n[len("params/"):-len(".npy")]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
                for n in zf.namelist() if n.startswith("params/")
            }
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise InvalidData(f"{path}: not a valid checkpoint ({exc})") from exc
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise InvalidData(f"{path}: unsupported schema version {meta.get('schema_version')}")
    return meta, params


def load_checkpoint(path) -> tuple[Interpolator, dict]:
    meta, params = read_checkpoint(path)
    model = Interpolator(ModelConfig.from_dict(meta["config"]))
    state = {k: torch.from_numpy(v.copy()) for k, v in params.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise InvalidData(f"{path}: parameters do not match the stored config ({exc})") from exc
    model.eval()
    return model, meta
