"""The full grounding model and its loss computation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import Batch
from .encoder import Encoder, alignment_loss, clip_positions, positive_clip_mask, saliency_loss
from .lad import DecodeSettings, DecodeTrace, LayerOutput, LengthAwareDecoder
from .metrics import Prediction
from .numerics.nn import MLP, Module
from .numerics.tensor import Tensor
from .objective import LossBreakdown, LossWeights, build_masks, length_cls_loss, moment_loss, quality_scores, total_loss
from .qli import LengthClassifier, LengthPerceiver, generate_rs


@dataclass
class ForwardOutput:
    video_p: Tensor
    text_p: Tensor
    fused: Tensor
    saliency: Tensor
    layers: list[LayerOutput]
    trace: DecodeTrace
    length_token: Tensor | None = None
    length_logits: Tensor | None = None
    length_probs: Tensor | None = None
    quality: Tensor | None = None
    sample_mask: np.ndarray | None = None

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


class LATR(Module):
    """Encoder, length perceiver/classifier, quality evaluator and decoder.

    Every sub-module is built regardless of the component toggles so that two
    configs with the same seed share identical weights for the parts they have
    in common.
    """

    def __init__(self, cfg: RunConfig, d_v: int, d_t: int, anchors: np.ndarray, roles: np.ndarray):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 11])
        dim, ffn = cfg.dim, cfg.ffn_dim or 2 * cfg.dim
        self.encoder = Encoder(d_v, d_t, dim, rng, cfg.heads, cfg.enc_cross_layers, cfg.enc_self_layers, ffn)
        self.perceiver = LengthPerceiver(dim, rng, cfg.heads, cfg.lt_init)
        self.classifier = LengthClassifier(dim, cfg.split, rng, cfg.classifier)
        self.quality = MLP([dim, dim, 1], rng)
        self.decoder = LengthAwareDecoder(dim, anchors, roles, rng, cfg.dec_layers, cfg.heads, ffn)

    @property
    def settings(self) -> DecodeSettings:
        c = self.cfg
        return DecodeSettings(
            tau=c.tau,
            mode=c.mode,
            refine=c.use_lad,
            top_select=c.top_select,
            topk_save=c.topk_save if c.use_topk_save else 0,
        )

    def forward(
        self,
        batch: Batch,
        force_probs: bool = False,
        force_mask: np.ndarray | None = None,
        replay: list[np.ndarray] | None = None,
    ) -> ForwardOutput:
        """``force_probs`` pins every length probability feeding suppression to
        tau; ``force_mask`` overrides the per-sample quality mask; ``replay``
        reapplies the suppression of an earlier trace."""
        c = self.cfg
        vp, tp = self.encoder.project(batch.video, batch.text)
        pos = clip_positions(batch.video_mask, c.dim) if c.use_pe else None
        fused = self.encoder.fuse(vp, tp, batch.video_mask, batch.text_mask, pos)
        sal = self.encoder.saliency_head(fused)
        out = ForwardOutput(vp, tp, fused, sal, [], DecodeTrace())

        settings = self.settings
        memory, group, mask = fused, None, None
        if c.use_lp_rs:
            lt, memory = self.perceiver(fused, pos, batch.video_mask)
            logits, probs = self.classifier(lt)
            p = np.full(probs.shape, c.tau) if force_probs else probs.data
            group = generate_rs(p, c.tau, c.mode)
            settings.forced_probability = c.tau if force_probs else None
            settings.replay = replay
            out.length_token, out.length_logits, out.length_probs = lt, logits, probs
            if c.use_lqm:
                out.quality = quality_scores(self.quality, lt)
                mask = build_masks(out.quality, 1, c.mask_threshold)[:, 0, 0]
            if force_mask is not None:
                mask = np.asarray(force_mask, dtype=np.float64)
        out.sample_mask = mask
        out.layers, out.trace = self.decoder.decode(memory, pos, batch.video_mask, group, settings, mask)
        return out

    __call__ = forward

    def losses(self, out: ForwardOutput, batch: Batch) -> tuple[Tensor, LossBreakdown]:
        c = self.cfg
        l_mo = moment_loss(out.layers, batch.moments)
        l_sal = saliency_loss(out.saliency, batch.saliency, batch.video_mask)
        positives = positive_clip_mask(batch.video_mask, batch.moments)
        l_alig, _ = alignment_loss(
            out.video_p, out.text_p, positives, batch.video_mask, batch.text_mask, c.align_temperature
        )
        if c.use_lp_rs:
            ll = length_cls_loss(
                out.length_logits,
                batch.labels,
                out.quality,
                c.classifier,
                c.loss_mean,
                c.loss_weight,
                c.loss_median,
            )
            l_len, parts = ll.total, (ll.mean.item(), ll.weight.item(), ll.median.item())
        else:
            l_len, parts = Tensor(0.0), (0.0, 0.0, 0.0)
        weights = LossWeights(c.lambda_sal, c.lambda_alig, c.lambda_lencl)
        total = total_loss(l_mo, l_sal, l_alig, l_len, weights)
        breakdown = LossBreakdown(
            moment=l_mo.item(),
            saliency=l_sal.item(),
            alignment=l_alig.item(),
            length=l_len.item(),
            length_mean=parts[0],
            length_weight=parts[1],
            length_median=parts[2],
            total=total.item(),
        )
        return total, breakdown

    def predictions(self, out: ForwardOutput, batch: Batch) -> dict[str, Prediction]:
        spans = out.final.moments()
        conf = out.final.confidences
        return {sid: Prediction.ranked(sid, spans[i], conf[i]) for i, sid in enumerate(batch.ids)}
