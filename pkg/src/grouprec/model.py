"""Dual-channel conversion model with group-to-individual injection and gated distillation.

The individual channel embeds the user's ID, own attributes, context and
purchase sequence (target attention); the group channel embeds the fused
group ID, the group attribute prior, the group sequence and the attribute
provenance flags. Both share the item representation. A reliability network
on activity features produces the distillation weight and the logit-fusion
weight.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .features import ATTR_FIELDS, N_CONTEXT, Batch, GroupTable, UserTable
from .priors import GroupIdFusionNet
from .synthworld import CONTINUOUS_FIELDS, DISCRETE_FIELDS

MODES = (
    "full",
    "individual_only",
    "group_only",
    "no_llm_emb",
    "no_id_emb",
    "no_attr_emb",
    "no_seq_emb",
    "no_dual_channel",
    "no_gated_distillation",
    "no_injection",
    "kl_loss",
    "no_margin",
)

# ablation row labels -> mode
ABLATION_ROWS = {
    "Full Model": "full",
    "w/o LLM Emb.": "no_llm_emb",
    "w/o ID Emb.": "no_id_emb",
    "w/o Attr. Emb.": "no_attr_emb",
    "w/o Seq. Emb.": "no_seq_emb",
    "w/o Dual-Channel": "no_dual_channel",
    "w/o Gated Distillation": "no_gated_distillation",
    "w/o Asymmetric Injection": "no_injection",
    "w/ KL Loss": "kl_loss",
    "w/o Margin": "no_margin",
}


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    mode: str = "full"
    temperature: float = 2.0
    margin: float = 0.05
    theta_act: float | None = None  # None -> 70th percentile of training-user activity
    theta_act_percentile: float = 70.0
    theta_conf: float = 0.3
    kd_weight: float = 0.005
    item_dim: int = 8
    category_dim: int = 8
    user_dim: int = 8
    attr_dim: int = 4
    context_dim: int = 4
    hidden: tuple = (64, 32)
    score_hidden: int = 16
    reliability_hidden: int = 16
    group_embed_dim: int = 16
    group_out_dim: int = 32
    max_user_seq: int = 30
    max_group_seq: int = 50
    batch_size: int = 1024
    epochs: int = 4
    base_lr: float = 0.01
    lr_floor: float = 0.001
    adagrad_initial_accumulator: float = 0.0
    init_scale: float = 0.5
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ModelConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.temperature <= 0:
            raise ModelConfigError("temperature must be positive")
        if self.margin < 0:
            raise ModelConfigError("margin must be >= 0")
        if not 0 < self.theta_conf < 0.5:
            raise ModelConfigError("theta_conf must lie in (0, 0.5)")
        if self.kd_weight < 0:
            raise ModelConfigError("kd_weight must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ModelConfigError("batch_size must be >= 1 and epochs >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------- scalar pieces


def margin_distill_loss(z_ind: Tensor, z_group: Tensor, temperature: float, margin: float) -> Tensor:
    """max(0, |sigmoid(z_ind/T) - sigmoid(z_group/T)| - m)^2, elementwise; z_ind is held constant."""
    teacher = ag.sigmoid(ag.scale(ag.detach(z_ind), 1.0 / temperature))
    student = ag.sigmoid(ag.scale(z_group, 1.0 / temperature))
    gap = ag.relu(ag.abs_(teacher - student) - margin)
    return ag.square(gap)


def kl_distill_loss(z_ind: Tensor, z_group: Tensor, temperature: float) -> Tensor:
    """T^2 * KL(Bernoulli(sigmoid(z_ind/T)) || Bernoulli(sigmoid(z_group/T))), teacher held constant."""
    p = ag.sigmoid_np(z_ind.value / temperature)
    p = np.clip(p, 1e-300, 1.0)
    q_logit = ag.scale(z_group, 1.0 / temperature)
    neg_log_q = ag.softplus(-q_logit)  # -log sigmoid(x)
    neg_log_1mq = ag.softplus(q_logit)  # -log (1 - sigmoid(x))
    ent = p * np.log(p) + np.where(p < 1, (1 - p) * np.log(np.clip(1 - p, 1e-300, 1)), 0.0)
    kl = neg_log_q * Tensor(p) + neg_log_1mq * Tensor(1 - p) + Tensor(ent)
    return ag.scale(kl, temperature ** 2)


def qualification_gate(activity, z_ind, theta_act: float, theta_conf: float) -> np.ndarray:
    """1 where activity >= theta_act and |sigmoid(z_ind) - 0.5| > theta_conf, else 0."""
    z = np.asarray(z_ind.value if isinstance(z_ind, Tensor) else z_ind, dtype=np.float64)
    conf = np.abs(ag.sigmoid_np(z) - 0.5)
    return ((np.asarray(activity) >= theta_act) & (conf > theta_conf)).astype(np.float64)


def kd_loss(gate, alpha_distill: Tensor, margin_loss: Tensor) -> Tensor:
    return alpha_distill * margin_loss * Tensor(np.asarray(gate, dtype=np.float64))


def fuse_logits(z_ind: Tensor, z_group: Tensor, alpha_fusion: Tensor) -> Tensor:
    return (1.0 - alpha_fusion) * z_ind + alpha_fusion * z_group


def asymmetric_inject(p: dict, mid_group: Tensor, mid_ind: Tensor) -> Tensor:
    """W2 relu(W1 [mid_group; mid_ind] + b1) + b2, to be added onto the individual tower's later layer."""
    if mid_group.shape[:-1] != mid_ind.shape[:-1] or mid_group.shape[-1] + mid_ind.shape[-1] != p["inj.l1.W"].shape[0]:
        raise ag.ShapeError("asymmetric_inject", mid_group.shape, mid_ind.shape, p["inj.l1.W"].shape)
    h = ag.relu(dense(p, "inj.l1", ag.concat([mid_group, mid_ind], axis=-1)))
    return dense(p, "inj.l2", h)


# ---------------------------------------------------------------- network pieces


class Params(dict):
    def __init__(self, rng: np.random.Generator, scale: float):
        super().__init__()
        self.rng = rng
        self.scale = scale

    def embed(self, name, rows, dim):
        self[name] = ag.parameter(self.rng.normal(0, self.scale, (rows, dim)), name)
        return self[name]

    def linear(self, name, n_in, n_out):
        self[f"{name}.W"] = ag.parameter(self.rng.normal(0, np.sqrt(2.0 / (n_in + n_out)), (n_in, n_out)))
        self[f"{name}.b"] = ag.parameter(np.zeros(n_out))


def dense(p: dict, name: str, x: Tensor) -> Tensor:
    return ag.matmul(x, p[f"{name}.W"]) + p[f"{name}.b"]


class DualChannelModel:
    def __init__(self, config: ModelConfig, n_users: int, n_items: int, n_categories: int,
                 item_categories: np.ndarray, item_log_popularity: np.ndarray, M: int = 3, K: int = 16):
        self.cfg = cfg = config.validate()
        self.n_users, self.n_items, self.M, self.K = n_users, n_items, M, K
        self.item_cat = np.asarray(item_categories, dtype=np.int64)
        self.item_pop = np.asarray(item_log_popularity, dtype=np.float64)[:, None]
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC401]))
        p = self.params = Params(rng, cfg.init_scale)
        self.d_item = cfg.item_dim + cfg.category_dim
        h1, h2 = cfg.hidden

        p.embed("item", n_items, cfg.item_dim)
        p.embed("category", n_categories, cfg.category_dim)

        uses_ind = cfg.mode != "group_only"
        uses_group = cfg.mode != "individual_only"
        self.uses_ind, self.uses_group = uses_ind, uses_group
        self.single_tower = cfg.mode == "no_dual_channel"
        self.group_blocks = {
            "id": cfg.mode != "no_id_emb",
            "attr": cfg.mode != "no_attr_emb",
            "seq": cfg.mode != "no_seq_emb",
        }
        attr_width = len(DISCRETE_FIELDS) * cfg.attr_dim + 2 * len(CONTINUOUS_FIELDS)
        cand_width = self.d_item + 1

        ind_width = 0
        if uses_ind:
            p.embed("ind.user", n_users, cfg.user_dim)
            for f, k in DISCRETE_FIELDS.items():
                p.embed(f"ind.attr.{f}", k + 1, cfg.attr_dim)
            p.embed("ind.context", N_CONTEXT, cfg.context_dim)
            self._attention_params("ind.att")
            ind_width = cfg.user_dim + attr_width + cfg.context_dim + self.d_item + cand_width

        group_width = 0
        if uses_group:
            if self.group_blocks["id"]:
                self.gid = GroupIdFusionNet(M, K, cfg.group_embed_dim, cfg.group_out_dim, rng, prefix="grp.gid")
                p.update(self.gid.params)
                group_width += cfg.group_out_dim
            if self.group_blocks["attr"]:
                for f, k in DISCRETE_FIELDS.items():
                    p.embed(f"grp.attr.{f}", k + 1, cfg.attr_dim)
                group_width += attr_width + 3 * len(ATTR_FIELDS)
            if self.group_blocks["seq"]:
                self._attention_params("grp.att")
                group_width += self.d_item
            group_width += cand_width

        if self.single_tower:
            width = ind_width + group_width - cand_width
            p.linear("ind.l1", width, h1)
            p.linear("ind.l2", h1, h2)
            p.linear("ind.out", h2, 1)
            return
        if uses_ind:
            p.linear("ind.l1", ind_width, h1)
            p.linear("ind.l2", h1, h2)
            p.linear("ind.out", h2, 1)
        if uses_group:
            p.linear("grp.l1", group_width, h1)
            p.linear("grp.l2", h1, h2)
            p.linear("grp.out", h2, 1)
        if uses_ind and uses_group:
            p.linear("inj.l1", 2 * h1, h2)
            p.linear("inj.l2", h2, h2)
            # the injected branch starts as a no-op so early updates cannot swamp h_post
            p["inj.l2.W"].value[:] = 0.0
            p.linear("rel.l1", 3, cfg.reliability_hidden)
            p.linear("rel.distill", cfg.reliability_hidden, 1)
            p.linear("rel.fusion", cfg.reliability_hidden, 1)

    def _attention_params(self, name):
        d, s = self.d_item, self.cfg.score_hidden
        p = self.params
        for part in ("seq", "cand", "prod"):
            p[f"{name}.{part}"] = ag.parameter(p.rng.normal(0, np.sqrt(2.0 / (3 * d + s)), (d, s)))
        p[f"{name}.b"] = ag.parameter(np.zeros(s))
        p.linear(f"{name}.out", s, 1)

    # -------------------------------------------------------------- building blocks

    def item_vectors(self, item_ids) -> Tensor:
        item_ids = np.asarray(item_ids, dtype=np.int64)
        return ag.concat([ag.gather_rows(self.params["item"], item_ids),
                          ag.gather_rows(self.params["category"], self.item_cat[item_ids])], axis=-1)

    def target_attention(self, name: str, seq: Tensor, mask: np.ndarray, cand: Tensor) -> Tensor:
        """Candidate-conditioned softmax pooling of ``seq`` (B, L, d); empty rows pool to zero."""
        p = self.params
        return ag.attention_pool(seq, cand, mask, p[f"{name}.seq"], p[f"{name}.cand"], p[f"{name}.prod"],
                                 p[f"{name}.b"], p[f"{name}.out.W"], p[f"{name}.out.b"])

    def attr_block(self, prefix: str, disc: np.ndarray, cont: np.ndarray) -> list[Tensor]:
        out = [ag.gather_rows(self.params[f"{prefix}.attr.{f}"], disc[:, j]) for j, f in enumerate(DISCRETE_FIELDS)]
        out.append(Tensor(cont))
        return out

    # -------------------------------------------------------------- forward

    def forward(self, batch: Batch, users: UserTable, groups: GroupTable | None) -> dict:
        cfg, p = self.cfg, self.params
        u = batch.users
        cand = self.item_vectors(batch.items)
        cand_feats = [cand, Tensor(self.item_pop[batch.items])]
        out = {}

        ind_inputs = []
        if self.uses_ind:
            seq = self.item_vectors(users.seq_items[u])
            ind_inputs = [ag.gather_rows(p["ind.user"], u),
                          *self.attr_block("ind", users.attr_disc[u], users.attr_cont[u]),
                          ag.gather_rows(p["ind.context"], batch.context),
                          self.target_attention("ind.att", seq, users.seq_mask[u], cand)]

        grp_inputs = []
        if self.uses_group:
            if groups is None:
                raise ValueError(f"mode {cfg.mode!r} needs group priors")
            g = groups.user_group[u]
            if self.group_blocks["id"]:
                grp_inputs.append(self.gid(groups.user_code[u]))
            if self.group_blocks["attr"]:
                grp_inputs += self.attr_block("grp", groups.attr_disc[g], groups.attr_cont[g])
                grp_inputs.append(Tensor(groups.provenance[u]))
            if self.group_blocks["seq"]:
                gseq = self.item_vectors(groups.seq_items[g])
                grp_inputs.append(self.target_attention("grp.att", gseq, groups.seq_mask[g], cand))

        if self.single_tower:
            x = ag.concat(ind_inputs + grp_inputs + cand_feats, axis=-1)
            z = self._tower("ind", x)[2]
            out.update(z_ind=z, z_fused=z)
            return out

        if self.uses_ind:
            mid_i, post_i, _ = self._tower("ind", ag.concat(ind_inputs + cand_feats, axis=-1), final=False)
        if self.uses_group:
            mid_g, post_g, z_g = self._tower("grp", ag.concat(grp_inputs + cand_feats, axis=-1))
            out["z_group"] = z_g
        if not self.uses_group:
            z_i = dense(p, "ind.out", post_i)
            out.update(z_ind=z_i, z_fused=z_i)
            return out
        if not self.uses_ind:
            out["z_fused"] = z_g
            return out

        if cfg.mode != "no_injection":
            post_i = post_i + asymmetric_inject(p, mid_g, mid_i)
        z_i = dense(p, "ind.out", post_i)
        rel = ag.relu(dense(p, "rel.l1", Tensor(self._reliability_features(u, users, groups))))
        a_d = ag.sigmoid(dense(p, "rel.distill", rel))
        a_f = ag.sigmoid(dense(p, "rel.fusion", rel))
        out.update(z_ind=z_i, alpha_distill=a_d, alpha_fusion=a_f, z_fused=fuse_logits(z_i, z_g, a_f))
        return out

    def _reliability_features(self, u, users: UserTable, groups: GroupTable | None):
        f = users.reliability[u].copy()
        if groups is not None:
            f[:, 2] = groups.completeness[u]
        return f

    def _tower(self, name: str, x: Tensor, final: bool = True):
        p = self.params
        mid = ag.relu(dense(p, f"{name}.l1", x))
        post = ag.relu(dense(p, f"{name}.l2", mid))
        z = dense(p, f"{name}.out", post) if final else None
        return mid, post, z

    # -------------------------------------------------------------- loss

    def loss(self, out: dict, batch: Batch, users: UserTable, theta_act: float,
             teacher_logits: np.ndarray | None = None) -> tuple[Tensor, dict]:
        """BCE on the fused logit plus the weighted distillation term.

        ``teacher_logits`` overrides the (already gradient-stopped) teacher; finite-difference
        checks pass the unperturbed z_ind here so the stop-gradient is honoured numerically too.
        """
        cfg = self.cfg
        y = batch.labels[:, None]
        bce = ag.bce_with_logits(out["z_fused"], y)
        stats = {"bce": float(bce.value)}
        distill = "alpha_distill" in out and cfg.mode != "no_gated_distillation" and cfg.kd_weight > 0
        if not distill:
            return bce, stats
        z_i, z_g = out["z_ind"], out["z_group"]
        if teacher_logits is not None:
            z_i = Tensor(np.asarray(teacher_logits, dtype=np.float64).reshape(z_i.shape))
        if cfg.mode == "kl_loss":
            per = kl_distill_loss(z_i, z_g, cfg.temperature)
        else:
            m = 0.0 if cfg.mode == "no_margin" else cfg.margin
            per = margin_distill_loss(z_i, z_g, cfg.temperature, m)
        gate = qualification_gate(users.activity[batch.users][:, None], z_i, theta_act, cfg.theta_conf)
        kd = ag.mean(kd_loss(gate, out["alpha_distill"], per))
        stats.update(kd=float(kd.value), gate_rate=float(gate.mean()))
        return bce + ag.scale(kd, cfg.kd_weight), stats

    # -------------------------------------------------------------- helpers

    def predict(self, batch: Batch, users: UserTable, groups: GroupTable | None, chunk: int = 4096) -> dict:
        keys = ("z_fused", "z_ind", "z_group", "alpha_fusion", "alpha_distill")
        parts = {k: [] for k in keys}
        with ag.no_grad():
            for s in range(0, len(batch), chunk):
                out = self.forward(batch.take(slice(s, s + chunk)), users, groups)
                for k in keys:
                    if k in out:
                        parts[k].append(out[k].value.reshape(-1))
        return {k: np.concatenate(v) for k, v in parts.items() if v}

    def state_dict(self) -> dict:
        return dict(self.params)


# ---------------------------------------------------------------- training


def resolve_theta_act(config: ModelConfig, users: UserTable, train_users) -> float:
    if config.theta_act is not None:
        return float(config.theta_act)
    act = users.activity[np.unique(np.asarray(train_users))]
    return float(np.percentile(act, config.theta_act_percentile))


def train_model(model: DualChannelModel, train: Batch, users: UserTable, groups: GroupTable | None,
                log_every: int = 0, logger=None) -> dict:
    """Shuffled mini-batch Adagrad with the configured linear learning-rate decay."""
    cfg = model.cfg
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    theta_act = resolve_theta_act(cfg, users, train.users)
    n = len(train)
    steps_per_epoch = int(np.ceil(n / cfg.batch_size))
    state = ag.AdagradState(cfg.base_lr, cfg.lr_floor, total_steps=steps_per_epoch * cfg.epochs,
                            initial_accumulator=cfg.adagrad_initial_accumulator)
    params = model.params
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            b = train.take(order[s:s + cfg.batch_size])
            out = model.forward(b, users, groups)
            loss, stats = model.loss(out, b, users, theta_act)
            ag.backward(loss)
            ag.adagrad_step(params, state)
            history.append(stats)
            if log_every and logger and state.step % log_every == 0:
                logger.info("epoch %d step %d loss %.5f", epoch, state.step, float(loss.value))
    return {"theta_act": theta_act, "steps": state.step, "history": history}
