"""Estimator wrapping the encoder, retrieval, analogical reasoning and prediction head."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .amm import ReferenceIndex, episode_words
from .arn import AnalogicalReasoning, pair_batch, pair_indices
from .backbone import TEST, TRAINING, VISUAL, EncoderConfig, MultimodalEncoder, apply_mask_policy, collate, tokenize
from .cce import CompositionHead, topk_words
from .layers import Linear
from .objectives import AdamW, masked_ce_loss, sample_negatives, total_loss, visual_triplet_loss
from .tensor import Tensor, backward, load_params, no_grad, save_params
from .validation import check_episodes
from .world import Vocabulary

VARIANTS = ("artnet", "multimodal-baseline", "text-only-baseline")


class TrainingDiverged(RuntimeError):
    pass


class ARTNet(BaseEstimator):
    """Masked verb-noun acquisition model with retrieval-augmented analogical reasoning.

    ``variant="multimodal-baseline"`` keeps the same encoder and head but feeds
    a zero analogy context; ``"text-only-baseline"`` also drops the visual
    tokens. ``fit`` keeps the training episodes as the reference set used at
    prediction time.
    """

    def __init__(self, vocabulary=None, variant="artnet", n_layers=2, hidden=64, n_heads=4,
                 ff_mult=4, k=3, pool_size=200, nac_layers=2, arn_dropout=0.5, lam=1.0,
                 margin=0.2, n_negatives=5, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-4,
                 weight_decay=0.01, epochs=20, batch_size=32, text_mask_rate=1 / 3,
                 visual_mask_rate=1 / 6, tie_embeddings=False, include_image_token=False,
                 ref_refresh=100, random_state=0, verbose=0):
        self.vocabulary = vocabulary
        self.variant = variant
        self.n_layers = n_layers
        self.hidden = hidden
        self.n_heads = n_heads
        self.ff_mult = ff_mult
        self.k = k
        self.pool_size = pool_size
        self.nac_layers = nac_layers
        self.arn_dropout = arn_dropout
        self.lam = lam
        self.margin = margin
        self.n_negatives = n_negatives
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.text_mask_rate = text_mask_rate
        self.visual_mask_rate = visual_mask_rate
        self.tie_embeddings = tie_embeddings
        self.include_image_token = include_image_token
        self.ref_refresh = ref_refresh
        self.random_state = random_state
        self.verbose = verbose

    # -- construction --------------------------------------------------------
    def _check_params(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not isinstance(self.vocabulary, Vocabulary):
            raise ValueError("vocabulary must be a world.Vocabulary")
        if self.k < 1 or self.k > self.pool_size:
            raise ValueError(f"need 1 <= k <= pool_size, got k={self.k}, pool_size={self.pool_size}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def uses_analogy(self):
        return self.variant == "artnet"

    @property
    def uses_vision(self):
        return self.variant != "text-only-baseline"

    def _build(self, d_vis):
        rng = np.random.default_rng([self.random_state, 0])
        self.d_vis_ = d_vis
        self.config_ = EncoderConfig(self.n_layers, self.hidden, self.n_heads, self.ff_mult,
                                     self.vocabulary.size, 64, d_vis)
        self.encoder_ = MultimodalEncoder(self.config_, rng)
        # built for every variant so parameter initialisation is shared across variants
        self.arn_ = AnalogicalReasoning(self.hidden, rng, nac_layers=self.nac_layers,
                                        p_dropout=self.arn_dropout)
        tied = self.encoder_.word.table if self.tie_embeddings else None
        self.head_ = CompositionHead(self.hidden, self.hidden, self.vocabulary.size, rng, tied)
        self.vis_proj_ = Linear(self.hidden, d_vis, rng)
        self.params_ = {}
        self.params_.update(self.encoder_.named_parameters("encoder."))
        if self.uses_analogy:
            self.params_.update(self.arn_.named_parameters("arn."))
        self.params_.update(self.head_.named_parameters("head."))
        if self.uses_vision:
            self.params_.update(self.vis_proj_.named_parameters("vis_proj."))

    def _set_training(self, mode):
        for m in (self.encoder_, self.arn_, self.head_, self.vis_proj_):
            m.train(mode)

    # -- forward ---------------------------------------------------------------
    def _references(self, seqs, episodes, rng_for):
        """Top-k reference rows per target plus their scores."""
        vocab = self.vocabulary
        rows, scores = [], []
        for seq, e in zip(seqs, episodes):
            masked_sentence = [i - seq.text_start for i in seq.text_targets]
            words = episode_words(e, vocab, masked_sentence)
            regions = [t.vector for t in seq.tokens if t.kind == VISUAL and t.position > 0]
            if not regions:
                regions = list(e.regions)
            pool = self.index_.sample_pool(rng_for(e), self.pool_size, exclude_id=e.id)
            r, s = self.index_.retrieve(words, np.asarray(regions), pool, self.k)
            rows.append(r)
            scores.append(s)
        return np.asarray(rows), np.asarray(scores)

    def _refresh_reference_states(self, batch_size=128):
        """Re-encode every reference episode with the current encoder (no gradient)."""
        chunks, lengths = [], []
        was_training = self.encoder_.training
        self.encoder_.train(False)
        with no_grad():
            for lo in range(0, len(self.index_.episodes), batch_size):
                toks = [tokenize(e) for e in self.index_.episodes[lo:lo + batch_size]]
                states = self.encoder_(collate(toks, self.d_vis_)).data
                for i, t in enumerate(toks):
                    chunks.append(states[i, :len(t)])
                    lengths.append(len(t))
        self.encoder_.train(was_training)
        self.ref_states_ = np.concatenate(chunks)
        self.ref_offsets_ = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        self.ref_lengths_ = np.asarray(lengths, dtype=np.int64)

    def _reference_inputs(self, rows, n_targets):
        """Stacked cached states of the retrieved references and their pair index arrays."""
        spans = [np.arange(self.ref_offsets_[r], self.ref_offsets_[r] + self.ref_lengths_[r]) for r in rows]
        offsets = np.concatenate([[0], np.cumsum([len(x) for x in spans])[:-1]])
        states = Tensor(self.ref_states_[np.concatenate(spans)])
        pairs = pair_batch([self.ref_pairs_[r] for r in rows], offsets, n_targets, self.k)
        return states, pairs

    def _index_references(self, episodes):
        self.index_ = ReferenceIndex(episodes, self.vocabulary, self.include_image_token)
        self.ref_pairs_ = [pair_indices(tokenize(e)) for e in self.index_.episodes]
        if self.uses_analogy:
            self._refresh_reference_states()

    def _forward(self, episodes, mode, mask_rng=None, pool_rng_for=None, drop_rng=None):
        vocab = self.vocabulary
        b = len(episodes)
        toks = [tokenize(e, visual=self.uses_vision) for e in episodes]
        seqs = [apply_mask_policy(t, mode, mask_rng, episode=e, text_rate=self.text_mask_rate,
                                  visual_rate=self.visual_mask_rate, vocab_size=vocab.size,
                                  first_word=vocab.n_special)
                for t, e in zip(toks, episodes)]
        all_tokens = [s.tokens for s in seqs]
        ref_rows = ref_scores = None
        if self.uses_analogy:
            ref_rows, ref_scores = self._references(seqs, episodes, pool_rng_for)
        batch = collate(all_tokens, self.d_vis_)
        t_len = batch.shape[1]
        states = self.encoder_(batch)
        flat = states.reshape(-1, self.hidden)

        text_rows, text_targets, text_owner = [], [], []
        slot = {}
        for i, s in enumerate(seqs):
            for p in s.text_positions:
                slot[(i, p)] = len(text_rows)
                text_rows.append(i * t_len + p)
                text_targets.append(s.text_targets[p])
                text_owner.append(i)
        text_rows = np.asarray(text_rows, dtype=np.int64)
        out = {"seqs": seqs, "slot": slot, "ref_rows": ref_rows, "ref_scores": ref_scores}

        context = None
        if self.uses_analogy and len(text_rows):
            lq = max(len(s.text_targets) for s in seqs)
            q_idx = np.zeros((b, lq), dtype=np.int64)
            q_mask = np.zeros((b, lq), dtype=bool)
            for i, s in enumerate(seqs):
                pos = s.text_positions
                q_idx[i, :len(pos)] = [i * t_len + p for p in pos]
                q_mask[i, :len(pos)] = True
            q = self.arn_.build_query(flat[q_idx], q_mask)
            ref_states, pairs = self._reference_inputs(ref_rows.reshape(-1), b)
            context = self.arn_(ref_states, pairs, q, rng=drop_rng)
            c = context.c
        else:
            c = Tensor(np.zeros((b, self.hidden)))
        out["context"] = context

        if len(text_rows) == 0:
            out["logits"] = None
            out["loss"] = None
            return out
        logits = self.head_(flat[text_rows], c[np.asarray(text_owner)])
        out["logits"] = logits
        l_text = masked_ce_loss(logits, np.asarray(text_targets))
        l_vis = None
        if mode == TRAINING and self.uses_vision and self.lam > 0:
            vis_rows, vis_targets = [], []
            for i, s in enumerate(seqs):
                for p, vec in s.visual_targets.items():
                    vis_rows.append(i * t_len + p)
                    vis_targets.append(vec)
            if len(vis_rows) >= 2:
                vis_targets = np.asarray(vis_targets)
                anchors = self.vis_proj_(flat[np.asarray(vis_rows)])
                negatives = sample_negatives(vis_targets, self.n_negatives, mask_rng)
                l_vis = visual_triplet_loss(anchors, vis_targets, negatives, self.margin)
        out["l_text"], out["l_vis"] = l_text, l_vis
        out["loss"] = total_loss(l_text, l_vis, self.lam)
        return out

    # -- training ----------------------------------------------------------------
    def fit(self, X, y=None, callback=None):
        """Train on episodes ``X`` (``y`` is ignored: targets come from masking).

        ``callback(estimator, epoch, mean_loss)`` runs after every epoch.
        """
        self._check_params()
        episodes = check_episodes(X, self.vocabulary)
        if len(episodes) <= self.k and self.uses_analogy:
            raise ValueError(f"need more than k={self.k} training episodes for retrieval")
        self._build(np.asarray(episodes[0].regions).shape[1])
        self._index_references(episodes)
        self.optimizer_ = AdamW(self.params_, lr=self.lr, betas=(self.beta1, self.beta2),
                                eps=self.eps, weight_decay=self.weight_decay)
        ss = np.random.SeedSequence(self.random_state)
        shuffle_rng, mask_rng, pool_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(4))
        self.history_ = []
        self.step_losses_ = []
        self.seen_ids_ = set()
        for epoch in range(self.epochs):
            self._set_training(True)
            order = shuffle_rng.permutation(len(episodes))
            losses = []
            for lo in range(0, len(order), self.batch_size):
                n_steps = len(self.step_losses_)
                if self.uses_analogy and self.ref_refresh and n_steps and n_steps % self.ref_refresh == 0:
                    self._refresh_reference_states()
                batch = [episodes[i] for i in order[lo:lo + self.batch_size]]
                loss = self._train_step(batch, mask_rng, pool_rng, drop_rng)
                if loss is not None:
                    losses.append(loss)
            mean = float(np.mean(losses)) if losses else float("nan")
            self.history_.append(mean)
            if self.verbose:
                print(f"[{self.variant}] epoch {epoch + 1}/{self.epochs} loss {mean:.4f}", flush=True)
            if callback is not None:
                callback(self, epoch, mean)
        self._set_training(False)
        if self.uses_analogy:
            self._refresh_reference_states()
        return self

    def _train_step(self, batch, mask_rng, pool_rng, drop_rng):
        self.seen_ids_.update(e.id for e in batch)
        out = self._forward(batch, TRAINING, mask_rng, lambda e: pool_rng, drop_rng)
        loss = out["loss"]
        if loss is None:
            return None
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {len(self.step_losses_)}")
        self.optimizer_.zero_grad()
        backward(loss)
        self.optimizer_.step()
        self.step_losses_.append(value)
        return value

    # -- inference -----------------------------------------------------------------
    def _eval_pool_rng(self, episode):
        return np.random.default_rng([self.random_state, 1, int(episode.id)])

    def _eval_forward(self, X, batch_size=64):
        """Logits (n, 2, vocab) for the verb and noun slots of each episode, plus retrieval info."""
        check_is_fitted(self, "params_")
        episodes = check_episodes(X, self.vocabulary, self.d_vis_)
        self._set_training(False)
        logits = np.zeros((len(episodes), 2, self.vocabulary.size))
        ref_ids, ref_scores, alphas = [], [], []
        with no_grad():
            for lo in range(0, len(episodes), batch_size):
                chunk = episodes[lo:lo + batch_size]
                out = self._forward(chunk, TEST, pool_rng_for=self._eval_pool_rng)
                lg = out["logits"].data
                for i, (s, e) in enumerate(zip(out["seqs"], chunk)):
                    logits[lo + i, 0] = lg[out["slot"][(i, s.text_start + e.verb_pos)]]
                    logits[lo + i, 1] = lg[out["slot"][(i, s.text_start + e.noun_pos)]]
                if out["ref_rows"] is not None:
                    ref_ids.extend(self.index_.ids[out["ref_rows"]].tolist())
                    ref_scores.extend(out["ref_scores"].tolist())
                    ctx = out["context"]
                    for i in range(len(chunk)):
                        alphas.append({"textual": ctx.text_alpha[i].tolist(),
                                       "visual": ctx.visual_alpha[i].tolist()})
        return logits, {"ref_ids": ref_ids, "ref_scores": ref_scores, "attention": alphas}

    def decision_function(self, X):
        return self._eval_forward(X)[0]

    def predict_topk(self, X, n=5):
        """(n_episodes, 2, n) word ids: top-``n`` for the verb slot and the noun slot."""
        return topk_words(self.decision_function(X), n)

    def predict(self, X):
        """Top-1 (verb-slot word, noun-slot word) per episode."""
        return self.predict_topk(X, 1)[..., 0]

    def score(self, X, y=None):
        """Top-1 both-word accuracy."""
        episodes = check_episodes(X, self.vocabulary)
        pred = self.predict(episodes)
        gold = np.array([[e.verb, e.noun] for e in episodes])
        return float(np.mean(np.all(pred == gold, axis=1)))

    def retrieval_diagnostics(self, X):
        """Per-episode reference ids, relevance scores and pair attention weights."""
        _, info = self._eval_forward(X)
        return info

    # -- persistence ----------------------------------------------------------------
    def save(self, path):
        check_is_fitted(self, "params_")
        params = {k: v for k, v in self.get_params().items() if k != "vocabulary"}
        v = self.vocabulary
        meta = {"estimator": params, "d_vis": self.d_vis_,
                "vocabulary": [v.n_verbs, v.n_nouns, v.n_context], "history": self.history_}
        save_params(path, self.params_, meta)

    @classmethod
    def load(cls, path, reference_episodes):
        arrays, meta = load_params(path)
        vocab = Vocabulary(*meta["vocabulary"])
        est = cls(vocabulary=vocab, **meta["estimator"])
        est._check_params()
        est._build(int(meta["d_vis"]))
        if list(arrays) != list(est.params_):
            raise ValueError(f"{path}: parameter names do not match a {est.variant} model")
        for name, arr in arrays.items():
            if arr.shape != est.params_[name].shape:
                raise ValueError(f"{path}: parameter {name!r} has shape {arr.shape}, "
                                 f"expected {est.params_[name].shape}")
            est.params_[name].data[...] = arr
        est._index_references(check_episodes(reference_episodes, vocab))
        est.history_ = list(meta.get("history", []))
        est._set_training(False)
        return est
