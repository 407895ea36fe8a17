import numpy as np
import pytest

from biagree.seq2seq import L2R, R2L, DirectionalModel, ModelConfig, Vocab


def tiny_model(direction=L2R, seed=0, n_tokens=3, emb=3, hidden=4, attn=3, scale=1.0):
    """Small random model over symbols w0..w{n-1}; ``scale`` sharpens its distributions."""
    vocab = Vocab([f"w{i}" for i in range(n_tokens)])
    cfg = ModelConfig(len(vocab), len(vocab), emb, hidden, attn)
    m = DirectionalModel.create(cfg, direction, seed, vocab, vocab)
    if scale != 1.0:
        for k in m.params.names():
            m.params[k] = m.params[k] * scale
    rng = np.random.default_rng(seed + 10_000)
    for k in m.params.names():  # non-zero biases so every code path matters
        if m.params[k].ndim == 1:
            m.params[k] = rng.normal(scale=0.3 * scale, size=m.params[k].shape)
    return m


def random_source(rng, n_tokens=3, lo=1, hi=4):
    return tuple(int(t) for t in rng.integers(3, 3 + n_tokens, size=int(rng.integers(lo, hi + 1))))


@pytest.fixture
def l2r():
    return tiny_model(L2R, 0)


@pytest.fixture
def r2l():
    return tiny_model(R2L, 1)


def history_free_model(direction=L2R, out_bias=(0.0, 0.0, 0.0, 0.0), n_tokens=3, hidden=4):
    """Model whose step distribution is softmax(out_bias) regardless of history.

    Its sequence probabilities do not depend on token order, so an L2R and an
    R2L copy define the same distribution.
    """
    m = tiny_model(direction, 0, n_tokens=n_tokens, hidden=hidden)
    m.params["out_W"] = np.zeros_like(m.params["out_W"])
    m.params["out_b"] = np.asarray(out_bias, dtype=np.float64)
    return m


def copy_model(direction=L2R, n_tokens=3):
    """Hand-wired model that maps a one-token source ``(t,)`` to ``(t,)`` almost surely."""
    n_ids = n_tokens + 3
    m = tiny_model(direction, 0, n_tokens=n_tokens, emb=n_ids, hidden=2 * n_ids, attn=2)
    for k in m.params.names():
        m.params[k] = np.zeros_like(m.params[k])
    eye = np.eye(n_ids)
    m.params["src_emb"] = eye.copy()
    m.params["tgt_emb"] = eye.copy()
    for pre in ("enc", "dec"):
        m.params[f"{pre}_bz"] = np.full(2 * n_ids, 30.0)  # update gate open: h = candidate
        wh = np.zeros((3 * n_ids, 2 * n_ids))
        wh[:n_ids, :n_ids] = 3 * eye                     # candidate = tanh(3 * onehot(input))
        m.params[f"{pre}_Wh"] = wh
    wo = np.zeros((4 * n_ids, 2 * n_ids))
    wo[:n_ids, :n_ids] = 3 * eye                         # o[:n] ~ previous target token
    wo[2 * n_ids:3 * n_ids, n_ids:] = 3 * eye            # o[n:] ~ source token
    m.params["out_Wo"] = wo
    W = np.zeros((2 * n_ids, n_tokens + 1))
    b = np.zeros(n_tokens + 1)
    bos = 0
    b[0] = 10.0
    W[bos, 0] = -20.0                                    # no EOS right after BOS
    for k in range(1, n_tokens + 1):
        W[n_ids + k + 2, k] = 20.0                       # emit the source token ...
        W[bos, k] = 20.0                                 # ... only as the first symbol
        b[k] = -20.0
    m.params["out_W"] = W
    m.params["out_b"] = b
    return m


# --- acceptance reporting -------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary.  They may fill the ``criterion_detail`` dict with a short note.

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.fixture
def criterion_detail(request):
    d = {}
    request.node.criterion_detail = d
    return d


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    detail = getattr(item, "criterion_detail", {})
    note = ", ".join(f"{k}={v}" for k, v in detail.items())
    _CRITERIA[n] = (title, status, f"{note} [{rep.duration:.1f}s]")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, note = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}: {note}")
