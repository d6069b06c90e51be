"""Encoder + mask generator + prototype bank wired into the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder, hem, hmg, losses
from .config import RunConfig
from .numeric import FreezeGroup, ParamStore, Tensor, no_grad


@dataclass
class Forward:
    state: encoder.EncoderState
    mask: Tensor          # (B, c)
    attn: Tensor          # (B, N, D) class-token attention over patches

    @property
    def feature(self) -> Tensor:
        return self.state.final_cls


class DPMModel:
    def __init__(self, cfg: RunConfig, num_classes: int, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.num_classes = num_classes
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        encoder.init_encoder(self.store, cfg.encoder, rng)
        hmg.init_hmg(self.store, cfg.encoder, cfg.hmg, rng)
        c = cfg.encoder.dim
        self.store.add("proto.w", (rng.standard_normal((num_classes, c)) / np.sqrt(c)).astype(np.float32),
                       FreezeGroup.PROTOTYPE)

    @property
    def prototypes(self) -> Tensor:
        return self.store["proto.w"]

    def forward(self, images: np.ndarray, cameras) -> Forward:
        enc = self.cfg.encoder
        state = encoder.encode(self.store, enc, images, cameras)
        mask = hmg.mask_from_state(self.store, enc, self.cfg.hmg, state)
        attn = hem.class_attention(state.q_cls, state.k_img)
        return Forward(state, mask, attn)

    def loss_parts(self, fwd: Forward, labels) -> dict[str, Tensor]:
        w = self.cfg.loss
        m_plain, m_masked = losses.branch_margins(w)
        x = fwd.feature
        return {
            "cls": losses.cls_loss(x, self.prototypes, labels, w.scale_s, m_plain),
            "mcls": losses.masked_cls_loss(x, self.prototypes, fwd.mask, labels, m_masked, w.scale_s,
                                           self.cfg.hmg.mask_variant),
            "hem": hem.hem_loss(fwd.attn),
            "tri": losses.triplet_loss(x, labels, w.triplet_margin),
        }

    def objective(self, images, cameras, labels) -> tuple[Tensor, dict[str, Tensor]]:
        parts = self.loss_parts(self.forward(images, cameras), labels)
        return losses.total_loss(parts, self.cfg.loss), parts

    def extract(self, images: np.ndarray, cameras, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Final class-token features and masks, (n, c) each, without recording a tape."""
        feats, masks = [], []
        cameras = np.asarray(cameras)
        with no_grad():
            for s in range(0, len(images), batch):
                fwd = self.forward(images[s:s + batch], cameras[s:s + batch])
                feats.append(fwd.feature.data)
                masks.append(fwd.mask.data)
        c = self.cfg.encoder.dim
        if not feats:
            return np.zeros((0, c), np.float32), np.zeros((0, c), np.float32)
        return np.concatenate(feats), np.concatenate(masks)

    def attention_maps(self, images: np.ndarray, cameras, batch: int = 64) -> np.ndarray:
        out = []
        cameras = np.asarray(cameras)
        with no_grad():
            for s in range(0, len(images), batch):
                st = encoder.encode(self.store, self.cfg.encoder, images[s:s + batch], cameras[s:s + batch])
                out.append(hem.class_attention(st.q_cls, st.k_img).data)
        return np.concatenate(out)

    def similarity_gaps(self, images: np.ndarray, cameras) -> np.ndarray:
        with no_grad():
            st = encoder.encode(self.store, self.cfg.encoder, images, np.asarray(cameras))
        return encoder.diag_block_similarity_gap(st)


def to_float64(model: DPMModel) -> DPMModel:
    model.store.astype(np.float64)
    return model

