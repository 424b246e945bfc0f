"""Full ranking model: pair tokens -> encoder -> generative head + CTR tower.

Training combines the contrastive next-item loss with binary cross-entropy on
the per-request candidate logits. For ranking, a candidate's score is the CTR
logit plus the temperature-scaled cosine between the shared head's prediction
vector and the candidate's projected pair token, so the generative objective
and the feature towers both contribute to the final ordering.
"""

from dataclasses import dataclass

import numpy as np

from . import objective as obj
from . import tensor as T
from .config import ModelConfig
from .datagen import (
    GROUP_WIDTHS,
    NUM_CONTEXT_FEATURES,
    NUM_REQUEST_FEATURES,
    GeneratorConfig,
    build_request,
)
from .encoder import Encoder, EncoderConfig
from .hfg import FusionTower, HFGAttention, HFGConfig, SharedDNN
from .pairtoken import FeatureEmbed, InputProjection, SemanticEmbedder, build_pair_token


@dataclass
class SessionBatch:
    query_text_ids: np.ndarray    # (B, L)
    item_ids: np.ndarray          # (B, L)
    context_features: np.ndarray  # (B, L, d_raw)
    valid_len: np.ndarray         # (B,)
    req_pos: np.ndarray           # (B,)
    cand_ids: np.ndarray          # (B, C)
    cand_labels: np.ndarray       # (B, C)
    group_feats: list             # per group: (B, C, width)
    request_feats: np.ndarray     # (B, d_req)

    @classmethod
    def from_sessions(cls, sessions, gen_cfg: GeneratorConfig, seed: int):
        reqs = [
            build_request(s, gen_cfg, seed + 7919 * i) for i, s in enumerate(sessions)
        ]
        return cls(
            query_text_ids=np.stack([s.query_text_ids for s in sessions]),
            item_ids=np.stack([s.item_ids for s in sessions]),
            context_features=np.stack([s.context_features for s in sessions]),
            valid_len=np.array([s.valid_len for s in sessions]),
            req_pos=np.array([r.position for r in reqs]),
            cand_ids=np.stack([r.candidate_ids for r in reqs]),
            cand_labels=np.stack([r.labels for r in reqs]),
            group_feats=[
                np.stack([r.group_feats[g] for r in reqs])
                for g in range(len(GROUP_WIDTHS))
            ],
            request_feats=np.stack([r.request_feats for r in reqs]),
        )

    @property
    def size(self):
        return len(self.valid_len)


class QGSModel:
    def __init__(self, cfg: ModelConfig, gen_cfg: GeneratorConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.gen_cfg = gen_cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        self.embedder = SemanticEmbedder(
            gen_cfg.vocab_size, gen_cfg.query_vocab_size, cfg.d_b, rng, dtype
        )
        if cfg.external_embeddings:
            self.embedder.load_external(cfg.external_embeddings)
        self.feature_embed = FeatureEmbed(NUM_CONTEXT_FEATURES, cfg.d_f, rng, dtype)
        self.pair_width = (cfg.d_f if cfg.use_context_features else 0) + cfg.d_b
        self.projection = InputProjection(self.pair_width, cfg.d_h, cfg.l_max, rng, dtype)
        self.encoder = Encoder(
            EncoderConfig(
                num_layers=cfg.num_layers,
                d_h=cfg.d_h,
                dropout_rate=cfg.dropout_rate,
                variant=cfg.encoder_variant,
                gamma_init=cfg.gamma_init,
                per_dim_gamma=cfg.per_dim_gamma,
            ),
            rng,
            dtype,
        )
        head_in = cfg.d_h + (cfg.d_b if cfg.objective == "query_conditioned" else 0)
        self.head = obj.PredictionHead(head_in, cfg.d_h, cfg.d_z, rng, dtype)
        self.target_proj = obj.TargetProjection(self.pair_width, cfg.d_z, rng, dtype)
        self.dnn = SharedDNN(NUM_REQUEST_FEATURES, cfg.dnn_width, rng, dtype)
        self.hfg = None
        if cfg.use_hfg:
            self.hfg = HFGAttention(
                HFGConfig(GROUP_WIDTHS, cfg.d_e, cfg.hfg_heads, cfg.hfg_ffn_mult, cfg.d_o),
                cfg.dnn_width,
                rng,
                dtype,
            )
        tower_in = (
            (cfg.d_o if cfg.use_hfg else 0) + cfg.d_b + cfg.dnn_width + cfg.d_h
        )
        self.tower = FusionTower(tower_in, cfg.tower_width, rng, dtype)

    # ------------------------------------------------------------------

    def params(self):
        p = {}
        p.update(self.embedder.params())
        p.update(self.feature_embed.params())
        p.update(self.projection.params())
        p.update(self.encoder.params())
        p.update(self.head.params())
        p.update(self.target_proj.params())
        p.update(self.dnn.params())
        if self.hfg is not None:
            p.update(self.hfg.params())
        p.update(self.tower.params())
        return p

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params().items()}

    def load_state_dict(self, state):
        params = self.params()
        unknown = set(state) - set(params)
        if unknown:
            raise KeyError(f"unknown parameter names in checkpoint: {sorted(unknown)}")
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def astype(self, dtype):
        for t in self.params().values():
            t.data = t.data.astype(dtype)
        return self

    # ------------------------------------------------------------------
    # forward pieces

    def encode_batch(self, batch: SessionBatch, train_mode=False, rng=None):
        """Run sessions through the pair-token pipeline and the encoder."""
        e_cls, e_sep = self.embedder.embed(batch.query_text_ids, batch.item_ids)
        if self.cfg.use_context_features:
            f_emb = self.feature_embed(
                T.constant(batch.context_features, dtype=self.dtype)
            )
            x = build_pair_token(f_emb, e_cls)
        else:
            x = e_cls
        h0 = self.projection(x)
        h = self.encoder.forward(h0, train_mode, rng)
        return {"h": h, "x": x, "e_sep": e_sep}

    def infonce_loss(self, batch: SessionBatch, enc, train_mode=False, rng=None):
        L = batch.item_ids.shape[1]
        h_prev = T.slice_axis(enc["h"], 1, 0, L - 1)
        if self.cfg.objective == "query_conditioned":
            e_next = T.slice_axis(enc["e_sep"], 1, 1, L)
            z = obj.predict_vector(h_prev, e_next, self.head)
        else:
            z = obj.predict_vector(h_prev, None, self.head)
        v = self.target_proj(T.slice_axis(enc["x"], 1, 1, L))
        t_idx = np.arange(L - 1)[None, :]
        valid = t_idx + 1 < batch.valid_len[:, None]  # (B, L-1)
        target_ids = batch.item_ids[:, 1:]
        return obj.infonce_from_batch(
            z, v, self.cfg.temperature, valid, target_ids
        )

    def ctr_forward(self, batch: SessionBatch, enc, train_mode=False, rng=None):
        """CTR logits and generative similarities for the batch's requests.

        Returns (ctr_loss, ctr_logits (B, C) Tensor, gen_logits (B, C) Tensor).
        History for a request at position r is strictly positions < r.
        """
        cfg = self.cfg
        B, C = batch.cand_ids.shape
        r = batch.req_pos
        if (r < 1).any():
            raise ValueError("request positions must be >= 1 (need history)")

        h_seq = T.gather_positions(enc["h"], r - 1)  # (B, d_h)

        # generative score through the shared head
        if cfg.objective == "query_conditioned":
            e_sep_r = T.gather_positions(enc["e_sep"], r)
            z_req = obj.predict_vector(h_seq, e_sep_r, self.head)
        else:
            z_req = obj.predict_vector(h_seq, None, self.head)
        cand_text = batch.query_text_ids[np.arange(B)[:, None], r[:, None]]
        cand_text = np.broadcast_to(cand_text, (B, C))
        e_cls_cand, _ = self.embedder.embed(cand_text, batch.cand_ids)
        if cfg.use_context_features:
            f_r = self.feature_embed(
                T.constant(
                    batch.context_features[np.arange(B), r], dtype=self.dtype
                )
            )  # (B, d_f)
            f_tiled = T.reshape(T.repeat_rows(f_r, C), (B, C, cfg.d_f))
            x_cand = T.concat([f_tiled, e_cls_cand], axis=-1)
        else:
            x_cand = e_cls_cand
        v_cand = self.target_proj(x_cand)  # (B, C, d_z)
        zb = T.reshape(T.l2_normalize(z_req), (B, 1, cfg.d_z))
        gen_logits = T.scale(
            T.reshape(T.bmm_nt(zb, T.l2_normalize(v_cand)), (B, C)),
            1.0 / cfg.temperature,
        )

        # feature towers
        h_dnn = self.dnn(T.constant(batch.request_feats, dtype=self.dtype))
        h_dnn_c = T.repeat_rows(h_dnn, C)
        cand_emb = T.reshape(
            T.gather_rows(self.embedder.item_table, batch.cand_ids.reshape(-1)),
            (B * C, cfg.d_b),
        )
        parts = []
        if self.hfg is not None:
            groups = [
                T.constant(g.reshape(B * C, g.shape[-1]), dtype=self.dtype)
                for g in batch.group_feats
            ]
            parts.append(self.hfg(groups, h_dnn_c))
        parts.extend([cand_emb, h_dnn_c, T.repeat_rows(h_seq, C)])
        ctr_logits = T.reshape(self.tower(parts), (B, C))
        ctr_loss = T.mean_all(T.sigmoid_ce(ctr_logits, batch.cand_labels))
        return ctr_loss, ctr_logits, gen_logits

    def total_loss(self, batch: SessionBatch, train_mode=False, rng=None):
        enc = self.encode_batch(batch, train_mode, rng)
        nce = self.infonce_loss(batch, enc, train_mode, rng)
        ctr_loss, ctr_logits, gen_logits = self.ctr_forward(batch, enc, train_mode, rng)
        total = T.add(ctr_loss, T.scale(nce, self.cfg.lambda_infonce))
        return total, {
            "infonce": nce,
            "ctr": ctr_loss,
            "ctr_logits": ctr_logits,
            "gen_logits": gen_logits,
        }

    def ranking_scores(self, batch: SessionBatch):
        """Eval-mode candidate scores: CTR logit + weighted generative score."""
        enc = self.encode_batch(batch, train_mode=False)
        _, ctr_logits, gen_logits = self.ctr_forward(batch, enc)
        return ctr_logits.data + self.cfg.gen_score_weight * gen_logits.data
