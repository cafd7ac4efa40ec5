"""Independent straight-line numpy oracles used by the test suite.

Everything here is deliberately naive (per-sample loops, quadruple-loop
convolutions, brute-force argmax sweeps) and shares no code with the
package's autograd path. The oracles are the reference side of every
dual-route check.
"""

import numpy as np


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# -- attention blocks (single sample, (C,H,W)) ----------------------------------


def oracle_nsm(z, query_w, key_w, value_w, alpha):
    c, h, w = z.shape
    n = h * w
    zf = z.reshape(c, n)
    q = query_w @ zf
    k = key_w @ zf
    v = value_w @ zf
    affinity = q.T @ k
    att = softmax_rows(affinity)
    att_rev = softmax_rows(1.0 - sigmoid(affinity))
    emb = (alpha * (v @ att.T) + zf).mean(axis=1)
    emb_rev = (alpha * (v @ att_rev.T) + zf).mean(axis=1)
    return emb, emb_rev, att, att_rev


def pooling_bins(n, bins):
    mat = np.zeros((bins, n))
    for i in range(bins):
        lo = int(np.floor(i * n / bins))
        hi = max(int(np.ceil((i + 1) * n / bins)), lo + 1)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def oracle_ncm(z, query_w, query_b, key_w, key_b, value_w, value_b, beta, bins):
    c, h, w = z.shape
    n = h * w
    zf = z.reshape(c, n)
    descriptors = zf @ pooling_bins(n, bins).T
    q = descriptors @ query_w + query_b
    k = descriptors @ key_w + key_b
    v = descriptors @ value_w + value_b
    affinity = q @ k.T
    att = softmax_rows(affinity)
    att_rev = softmax_rows(1.0 - sigmoid(affinity))
    pooled = zf.mean(axis=1)
    emb = beta * (att @ v).ravel() + pooled
    emb_rev = beta * (att_rev @ v).ravel() + pooled
    return emb, emb_rev, att, att_rev


def naive_conv2d(x, weight, bias=None, stride=1, pad=0):
    cin, h, w = x.shape
    fout, _, kh, kw = weight.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    padded = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    padded[:, pad:pad + h, pad:pad + w] = x
    out = np.zeros((fout, oh, ow))
    for f in range(fout):
        for p in range(oh):
            for q in range(ow):
                acc = 0.0
                for cc in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            acc += weight[f, cc, i, j] * padded[cc, p * stride + i, q * stride + j]
                out[f, p, q] = acc + (bias[f] if bias is not None else 0.0)
    return out


def oracle_lsm(z, mask_conv):
    mask = sigmoid(naive_conv2d(z, mask_conv, stride=1, pad=1))[0]
    emb = (z * mask).mean(axis=(1, 2))
    emb_rev = (z * (1.0 - mask)).mean(axis=(1, 2))
    return emb, emb_rev, mask


def oracle_lcm(z, squeeze_w, squeeze_b, excite_w, excite_b):
    pooled = z.mean(axis=(1, 2))
    hidden = np.maximum(pooled @ squeeze_w + squeeze_b, 0.0)
    gate = sigmoid(hidden @ excite_w + excite_b)
    return pooled * gate, pooled * (1.0 - gate), gate


# -- full model (loops over samples) ----------------------------------------------


def oracle_classifier(e, tensors, prefix):
    if f"{prefix}.w" in tensors:
        return e @ tensors[f"{prefix}.w"] + tensors[f"{prefix}.b"]
    hidden = np.maximum(e @ tensors[f"{prefix}.w1"] + tensors[f"{prefix}.b1"], 0.0)
    return hidden @ tensors[f"{prefix}.w2"] + tensors[f"{prefix}.b2"]


def oracle_branch(z, tensors, prefix, kind, bins=4):
    if kind == "nonlocal":
        es, ers, _, _ = oracle_nsm(z, tensors[f"{prefix}.spatial.query"],
                                   tensors[f"{prefix}.spatial.key"],
                                   tensors[f"{prefix}.spatial.value"],
                                   tensors[f"{prefix}.spatial.alpha"])
        ec, erc, _, _ = oracle_ncm(z, tensors[f"{prefix}.channel.query_w"],
                                   tensors[f"{prefix}.channel.query_b"],
                                   tensors[f"{prefix}.channel.key_w"],
                                   tensors[f"{prefix}.channel.key_b"],
                                   tensors[f"{prefix}.channel.value_w"],
                                   tensors[f"{prefix}.channel.value_b"],
                                   tensors[f"{prefix}.channel.beta"], bins)
    elif kind == "local":
        es, ers, _ = oracle_lsm(z, tensors[f"{prefix}.spatial.mask_conv"])
        ec, erc, _ = oracle_lcm(z, tensors[f"{prefix}.channel.squeeze_w"],
                                tensors[f"{prefix}.channel.squeeze_b"],
                                tensors[f"{prefix}.channel.excite_w"],
                                tensors[f"{prefix}.channel.excite_b"])
    else:
        pooled = z.mean(axis=(1, 2))
        e = np.concatenate([pooled, pooled @ tensors[f"{prefix}.bypass_proj"]])
        return e, e
    return np.concatenate([es, ec]), np.concatenate([ers, erc])


def oracle_model_forward(images, tensors, config):
    """Reference forward pass from a {name: array} parameter dict."""
    attr_logits, obj_logits, rev_attr, rev_obj = [], [], [], []
    for sample in images:
        z = sample.astype(np.float64)
        for i, (_, stride) in enumerate(config.encoder):
            z = naive_conv2d(z, tensors[f"encoder.stage{i}.w"],
                             tensors[f"encoder.stage{i}.b"], stride=stride, pad=1)
            z = np.maximum(z, 0.0)
        e_attr, e_attr_rev = oracle_branch(z, tensors, "attr", config.attr_branch)
        e_obj, e_obj_rev = oracle_branch(z, tensors, "obj", config.obj_branch)
        attr_logits.append(oracle_classifier(e_attr, tensors, "cls.attr"))
        obj_logits.append(oracle_classifier(e_obj, tensors, "cls.obj"))
        rev_attr.append(oracle_classifier(e_obj_rev, tensors, "cls.rev_attr"))
        rev_obj.append(oracle_classifier(e_attr_rev, tensors, "cls.rev_obj"))
    return (np.stack(attr_logits), np.stack(obj_logits),
            np.stack(rev_attr), np.stack(rev_obj))


def tensors_of(params):
    return {name: np.asarray(t.data, dtype=np.float64) for name, t in params.named_parameters()}


# -- losses ----------------------------------------------------------------------


def oracle_cross_entropy(logits, targets):
    total = 0.0
    for row, target in zip(np.asarray(logits, dtype=np.float64), targets):
        e = np.exp(row - row.max())
        p = e / e.sum()
        total += -np.log(p[target])
    return total / len(targets)


def oracle_kl(student_logits, teacher_logits):
    terms = []
    for s, t in zip(student_logits, teacher_logits):
        ps = softmax_rows(s[None])[0]
        pt = softmax_rows(t[None])[0]
        terms.append(float(np.sum(ps * (np.log(ps) - np.log(pt)))))
    return float(np.mean(terms))


# -- evaluation protocol ------------------------------------------------------------


def oracle_predictions(scores, seen_mask, bias):
    """Exhaustive argmax of score + bias * is_seen, with infinite biases
    evaluated as the exact limit (argmax restricted to one group)."""
    n = scores.shape[0]
    preds = np.empty(n, dtype=int)
    for i in range(n):
        if np.isposinf(bias):
            cols = np.flatnonzero(seen_mask)
            preds[i] = cols[np.argmax(scores[i, cols])]
        elif np.isneginf(bias):
            cols = np.flatnonzero(~seen_mask)
            preds[i] = cols[np.argmax(scores[i, cols])]
        else:
            preds[i] = int(np.argmax(scores[i] + bias * seen_mask))
    return preds


def oracle_sweep(scores, seen_mask, truth_pairs, biases):
    points = []
    truth_seen = seen_mask[truth_pairs]
    for bias in biases:
        preds = oracle_predictions(scores, seen_mask, bias)
        correct = preds == truth_pairs
        seen_acc = correct[truth_seen].mean() if truth_seen.any() else 0.0
        unseen_acc = correct[~truth_seen].mean() if (~truth_seen).any() else 0.0
        points.append((float(bias), float(seen_acc), float(unseen_acc)))
    return points


# -- finite differences ---------------------------------------------------------------


def finite_difference(f, array, eps=1e-5):
    """Central-difference gradient of scalar f() w.r.t. an array mutated in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        hi = f()
        flat[i] = original - eps
        lo = f()
        flat[i] = original
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_close_grad(analytic, numeric, rtol=1e-4, atol=1e-7, label=""):
    analytic = np.zeros_like(numeric) if analytic is None else np.asarray(analytic)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = diff > (atol + rtol * scale)
    assert not bad.any(), (
        f"gradient mismatch {label}: max abs diff {diff.max():.3e}, "
        f"worst rel {(diff / np.maximum(scale, 1e-12)).max():.3e}"
    )
