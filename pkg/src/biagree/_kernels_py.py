"""Pure-numpy inference kernels (fallback for ``_ckernels``).

Both backends expose the same two functions:

``encode(P, src_ids) -> (H, K, s0)``
    encoder states ``H`` (T, hidden), attention keys ``K`` (T, attn) and the
    initial decoder state ``s0`` (hidden,).
``decoder_step(P, H, K, prev_ids, S) -> (logp, S_new)``
    one decoder step for ``n`` rows sharing the same encoder states;
    ``logp`` is (n, n_out) log-probabilities, ``S_new`` is (n, hidden).
"""
import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru(x, h, Wz, bz, Wr, br, Wh, bh):
    xh = np.concatenate([x, h], axis=-1)
    z = _sigmoid(xh @ Wz + bz)
    r = _sigmoid(xh @ Wr + br)
    hc = np.tanh(np.concatenate([x, r * h], axis=-1) @ Wh + bh)
    return (1.0 - z) * h + z * hc


def encode(P, src_ids):
    src_ids = np.asarray(src_ids, dtype=np.intp)
    hidden = P["init_b"].shape[0]
    h = np.zeros(hidden)
    states = np.empty((src_ids.shape[0], hidden))
    emb = P["src_emb"][src_ids]
    for t in range(src_ids.shape[0]):
        h = _gru(emb[t], h, P["enc_Wz"], P["enc_bz"], P["enc_Wr"], P["enc_br"], P["enc_Wh"], P["enc_bh"])
        states[t] = h
    keys = states @ P["att_Wk"]
    s0 = np.tanh(h @ P["init_W"] + P["init_b"])
    return states, keys, s0


def decoder_step(P, H, K, prev_ids, S):
    x = P["tgt_emb"][np.asarray(prev_ids, dtype=np.intp)]
    s = _gru(x, S, P["dec_Wz"], P["dec_bz"], P["dec_Wr"], P["dec_br"], P["dec_Wh"], P["dec_bh"])
    scores = (s @ P["att_Wq"]) @ K.T
    scores -= scores.max(axis=1, keepdims=True)
    alpha = np.exp(scores)
    alpha /= alpha.sum(axis=1, keepdims=True)
    ctx = alpha @ H
    o = np.tanh(np.concatenate([s, ctx], axis=1) @ P["out_Wo"] + P["out_bo"])
    logits = o @ P["out_W"] + P["out_b"]
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return logp, s
