"""End-to-end slide model: selection -> clustering -> attention -> survival head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .dataio import PatchBag
from .edmll import HeadOutput, SurvivalCurve, SurvivalHead, head_forward, total_loss
from .ggc import ClusterAssignment, cluster_patches
from .hca import (
    AttentionPool,
    MhsaLayer,
    assemble_final,
    attention_pool,
    broadcast_residual,
    inter_cluster_attend,
    intra_cluster_attend,
    summarize_clusters,
)
from .qgps import PatchScorer, score_patches, select_patches
from .tensor import Tensor


@dataclass(frozen=True)
class GateReference:
    """Frozen selection used to evaluate the relaxed selection objective.

    ``scale`` holds the gate activations the straight-through multiplier is
    divided by; at the reference point the multiplier is exactly one.
    """

    selected: np.ndarray
    remaining: np.ndarray
    threshold: float
    scale: np.ndarray


@dataclass
class SlideTrace:
    z: Tensor
    head: HeadOutput
    selected: np.ndarray
    remaining: np.ndarray
    threshold: float | None
    clusters: ClusterAssignment | None
    gate_scale: np.ndarray | None
    p_final: Tensor


class SurvivalModel:
    def __init__(self, config: PipelineConfig, d: int, seed: int | None = None):
        self.config = config
        self.d = d
        rng = np.random.default_rng(config.seed if seed is None else seed)
        c = config
        self.scorer = None if c.disable_qgps else PatchScorer(d, c.scorer_hidden, rng)
        if c.disable_ggc_hca:
            self.intra = self.inter = None
        else:
            self.intra = MhsaLayer(d, c.heads, c.dropout, rng, name="intra")
            self.inter = MhsaLayer(d, c.heads, c.dropout, rng, name="inter")
        self.pool = AttentionPool(d, c.attn_hidden, rng)
        self.head = SurvivalHead(d, c.experts, c.components, rng)
        self.time_scale = 1.0
        self._cluster_cache: dict[tuple[str, bytes], ClusterAssignment] = {}

    # -- parameters ----------------------------------------------------
    def stages(self) -> dict[str, list[tuple[str, Tensor]]]:
        out = {}
        if self.scorer is not None:
            out["scorer"] = self.scorer.named_parameters()
        if self.intra is not None:
            out["intra"] = self.intra.named_parameters()
            out["inter"] = self.inter.named_parameters()
        out["pool"] = self.pool.named_parameters()
        out["head"] = self.head.named_parameters()
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [item for group in self.stages().values() for item in group]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.data.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    # -- forward -------------------------------------------------------
    def clusters_for(self, bag: PatchBag, selected: np.ndarray) -> ClusterAssignment:
        key = (bag.slide_id, selected.tobytes())
        hit = self._cluster_cache.get(key)
        if hit is None:
            c = self.config
            hit = cluster_patches(
                bag.features[selected], bag.coords[selected],
                knn_k=c.knn_k, group_size=c.group_size,
                omega_morph=c.omega_morph, omega_spatial=c.omega_spatial,
                seed=c.seed, max_iter=c.kmeans_iters,
            )
            self._cluster_cache[key] = hit
        return hit

    def forward(self, bag: PatchBag, training: bool = False, rng: np.random.Generator | None = None,
                gate_reference: GateReference | None = None) -> SlideTrace:
        if bag.d != self.d:
            raise T.ShapeError(f"{bag.slide_id}: feature width {bag.d} != model width {self.d}")
        x = bag.features
        n = x.shape[0]
        tau = scale = None
        if self.scorer is not None:
            logits = score_patches(self.scorer, x)
            if gate_reference is None:
                sel_res = select_patches(logits.data, self.config.quantile)
                sel, rem, tau = sel_res.selected, sel_res.remaining, sel_res.threshold
            else:
                sel, rem, tau = gate_reference.selected, gate_reference.remaining, gate_reference.threshold
            act = T.sigmoid(logits[sel] - tau)
            scale = act.data.copy() if gate_reference is None else gate_reference.scale
            # straight-through gate: exactly 1 forward, d log(act) backward
            mult = act / T.Tensor(scale)
            x_sel = T.Tensor(x[sel]) * mult.reshape(-1, 1)
        else:
            sel, rem = np.arange(n), np.arange(0)
            x_sel = T.Tensor(x)

        clusters = None
        if self.intra is not None:
            clusters = self.clusters_for(bag, sel)
            groups = clusters.groups()
            refined = intra_cluster_attend(self.intra, [x_sel[g] for g in groups], rng, training)
            r_prime = inter_cluster_attend(self.inter, summarize_clusters(refined), rng, training)
            p_hat = broadcast_residual(T.concat(refined, axis=0), r_prime)
        else:
            p_hat = x_sel
        p_final = assemble_final(p_hat, x[rem] if rem.size else None)
        z = attention_pool(self.pool, p_final)
        z = T.dropout(z, self.config.dropout, rng, training)
        return SlideTrace(z, head_forward(self.head, z), sel, rem, tau, clusters, scale, p_final)

    def loss(self, bag: PatchBag, training: bool = False, rng=None,
             gate_reference: GateReference | None = None) -> Tensor:
        tr = self.forward(bag, training, rng, gate_reference)
        c = self.config
        return total_loss(self.head, tr.z, bag.time / self.time_scale, bag.censor,
                          c.lambda_ent, c.entropy_sign, out=tr.head)

    def predict(self, bag: PatchBag) -> SurvivalCurve:
        with T.no_grad():
            return self.forward(bag).head.curve(self.time_scale)


def gate_reference(model: SurvivalModel, bag: PatchBag) -> GateReference:
    """Freeze the current selection and gate activations of ``bag``."""
    with T.no_grad():
        tr = model.forward(bag)
    if tr.gate_scale is None:
        raise ValueError("model has no patch scorer")
    return GateReference(tr.selected, tr.remaining, tr.threshold, tr.gate_scale)
