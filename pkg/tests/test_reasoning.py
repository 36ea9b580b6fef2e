"""Vote aggregation, probability reading, and reasoner engine tests."""

import http.server
import json
import threading

import numpy as np
import pytest

from lithoflow.perception import ScoredCase
from lithoflow.reasoning import (
    ReasonerFormatError,
    ReasonerRequest,
    ReasonerUnavailable,
    RemoteReasoner,
    StubReasoner,
    aggregate_votes,
    boost_distribution,
    interpret_probs,
    parse_labels_line,
    render_prompt,
    vote_profile,
)


def case(labels, weight, well_id="w", start=0):
    return ScoredCase(well_id=well_id, start_index=start,
                      labels=np.asarray(labels, dtype=int),
                      similarity=weight, weight=weight)


# ---------------------------------------------------------------------------
# neighbor votes
# ---------------------------------------------------------------------------

def test_aggregate_votes_hand_case():
    cases = [case([0, 1], 0.5), case([1, 1], 0.3), case([0, 2], 0.2)]
    np.testing.assert_allclose(aggregate_votes(cases, 0, 3), [0.7, 0.3, 0.0])
    np.testing.assert_allclose(aggregate_votes(cases, 1, 3), [0.0, 0.8, 0.2])


def test_aggregate_votes_matches_bruteforce():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n, L, C = int(rng.integers(1, 8)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
        w = rng.random(n)
        w = w / w.sum()
        labels = rng.integers(0, C, size=(n, L))
        cases = [case(labels[j], w[j]) for j in range(n)]
        for t in range(L):
            want = np.zeros(C)
            for j in range(n):
                want[labels[j, t]] += w[j]
            got = aggregate_votes(cases, t, C)
            np.testing.assert_allclose(got, want, atol=1e-12)
            assert got.sum() == pytest.approx(1.0)


def test_aggregate_votes_empty_is_uniform():
    np.testing.assert_allclose(aggregate_votes([], 0, 4), [0.25] * 4)


def test_vote_profile_shape():
    cases = [case([0, 1, 2], 1.0)]
    prof = vote_profile(cases, 3, 3)
    assert prof.shape == (3, 3)
    np.testing.assert_allclose(prof, np.eye(3))


def test_aggregate_votes_rejects_out_of_range_label():
    with pytest.raises(ValueError, match="outside"):
        aggregate_votes([case([5], 1.0)], 0, 3)


# ---------------------------------------------------------------------------
# probability reading
# ---------------------------------------------------------------------------

def test_interpret_bands():
    assert interpret_probs([0.6, 0.4]).band == "high"
    assert interpret_probs([0.59, 0.41]).band == "moderate"
    assert interpret_probs([0.3, 0.35, 0.35]).band == "moderate"
    assert interpret_probs([0.29, 0.26, 0.2, 0.25]).band == "low"


def test_interpret_uncertain_threshold():
    # uniform-guess mass for 4 classes is 0.25; below twice that is uncertain
    assert interpret_probs([0.45, 0.25, 0.15, 0.15]).uncertain is True
    assert interpret_probs([0.55, 0.15, 0.15, 0.15]).uncertain is False


def test_interpret_text_and_names():
    r = interpret_probs([0.1, 0.8, 0.1], class_names=["shale", "sand", "coal"])
    assert r.top_class == 1
    assert "sand" in r.text and "high" in r.text


def test_interpret_rejects_non_distribution():
    with pytest.raises(ValueError):
        interpret_probs([0.5, 0.6])
    with pytest.raises(ValueError):
        interpret_probs([[0.5, 0.5]])


# ---------------------------------------------------------------------------
# stub engine
# ---------------------------------------------------------------------------

def req(L=1, C=2, nbr=None, nn=None, narrative=""):
    return ReasonerRequest(
        well_id="w", window_start=0, window_len=L, num_classes=C,
        narrative=narrative,
        neighbor_votes=None if nbr is None else np.atleast_2d(nbr),
        nn_probs=None if nn is None else np.atleast_2d(nn),
    )


def test_stub_geometric_pooling_value():
    resp = StubReasoner(alpha=0.5).reason(req(nbr=[0.6, 0.4], nn=[0.8, 0.2]))
    raw = np.sqrt(np.array([0.6 * 0.8, 0.4 * 0.2]))
    np.testing.assert_allclose(resp.probs[0], raw / raw.sum(), atol=1e-12)
    assert resp.labels[0] == 0


def test_stub_single_source_and_none():
    # only the neighbor profile: pooling reduces to nbr^alpha renormalized
    resp = StubReasoner(alpha=0.5).reason(req(nbr=[0.9, 0.1]))
    raw = np.array([0.9, 0.1]) ** 0.5
    np.testing.assert_allclose(resp.probs[0], raw / raw.sum())
    # no signals at all: uniform output
    resp = StubReasoner().reason(req())
    np.testing.assert_allclose(resp.probs[0], [0.5, 0.5])


def test_stub_alpha_extremes():
    r = req(nbr=[0.9, 0.1], nn=[0.2, 0.8])
    np.testing.assert_allclose(StubReasoner(alpha=1.0).reason(r).probs[0], [0.9, 0.1])
    np.testing.assert_allclose(StubReasoner(alpha=0.0).reason(r).probs[0], [0.2, 0.8])


def test_stub_temperature():
    # equal profiles make the geometric pool the identity, isolating the
    # temperature effect
    r = req(nbr=[0.8, 0.2], nn=[0.8, 0.2])
    sharp = StubReasoner(temperature=0.5).reason(r).probs[0]
    raw = np.array([0.8, 0.2]) ** 2
    np.testing.assert_allclose(sharp, raw / raw.sum())
    hard = StubReasoner(temperature=0.0).reason(r).probs[0]
    np.testing.assert_array_equal(hard, [1.0, 0.0])


def test_stub_zero_overlap_falls_back_to_uniform():
    resp = StubReasoner().reason(req(nbr=[1.0, 0.0], nn=[0.0, 1.0]))
    np.testing.assert_allclose(resp.probs[0], [0.5, 0.5])


def test_boost_distribution_value():
    np.testing.assert_allclose(
        boost_distribution(np.array([0.5, 0.5]), 0, 0.3), [0.8, 0.2], atol=1e-12
    )
    out = boost_distribution(np.array([0.2, 0.3, 0.5]), 2, 0.2)
    assert out[2] == pytest.approx(0.7)
    assert out.sum() == pytest.approx(1.0)
    # the untouched classes keep their relative proportions
    assert out[1] / out[0] == pytest.approx(1.5)


def test_stub_boost_requires_narrative():
    eng = StubReasoner(narrative_boost=0.3, boost_class=1)
    plain = eng.reason(req(nbr=[0.6, 0.4], nn=[0.6, 0.4]))
    with_text = eng.reason(req(nbr=[0.6, 0.4], nn=[0.6, 0.4],
                               narrative="falling trend"))
    np.testing.assert_allclose(plain.probs[0], [0.6, 0.4])
    assert with_text.probs[0, 1] == pytest.approx(0.7)


def test_stub_deterministic():
    eng = StubReasoner(alpha=0.3, temperature=0.7)
    r = req(L=4, C=3,
            nbr=np.full((4, 3), 1 / 3),
            nn=np.tile([0.5, 0.3, 0.2], (4, 1)))
    a, b = eng.reason(r), eng.reason(r)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.probs, b.probs)


def test_stub_validation():
    with pytest.raises(ValueError):
        StubReasoner(alpha=1.5)
    with pytest.raises(ValueError):
        StubReasoner(temperature=-1)
    with pytest.raises(ValueError, match="shape"):
        req(L=2, C=2, nn=[0.5, 0.5])  # 1 x 2 profile for a 2-position window


# ---------------------------------------------------------------------------
# reply parsing and prompt rendering
# ---------------------------------------------------------------------------

def test_parse_labels_line_variants():
    np.testing.assert_array_equal(parse_labels_line("LABELS: 1, 0, 2", 3), [1, 0, 2])
    np.testing.assert_array_equal(
        parse_labels_line("thinking...\nlabels: 4,4\ndone", 2), [4, 4]
    )
    with pytest.raises(ReasonerFormatError, match="no LABELS"):
        parse_labels_line("I am not sure.", 2)
    with pytest.raises(ReasonerFormatError, match="expected 3"):
        parse_labels_line("LABELS: 1,2", 3)
    with pytest.raises(ReasonerFormatError, match="non-integer"):
        parse_labels_line("LABELS: one,two", 2)


def test_render_prompt_mentions_signals():
    r = req(L=2, C=3, nn=np.tile([0.7, 0.2, 0.1], (2, 1)), narrative="rising then flat")
    text = render_prompt(r)
    assert "rising then flat" in text
    assert "LABELS" in text
    assert "position 1" in text
    # deterministic
    assert text == render_prompt(r)


# ---------------------------------------------------------------------------
# remote engine against a local HTTP fixture
# ---------------------------------------------------------------------------

class _Handler(http.server.BaseHTTPRequestHandler):
    reply = {"text": "LABELS: 1,0,1"}

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        assert "prompt" in body
        payload = json.dumps(type(self).reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_endpoint():
    server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/"
    server.shutdown()
    thread.join(timeout=5)


def test_remote_reasoner_parses_reply(http_endpoint):
    _Handler.reply = {"text": "LABELS: 1,0,1"}
    eng = RemoteReasoner(endpoint=http_endpoint, timeout=5.0)
    resp = eng.reason(req(L=3, C=2))
    np.testing.assert_array_equal(resp.labels, [1, 0, 1])
    np.testing.assert_allclose(resp.probs, [[0, 1], [1, 0], [0, 1]])


def test_remote_reasoner_out_of_range_label_gets_uniform_row(http_endpoint):
    _Handler.reply = {"text": "LABELS: 0,7"}
    resp = RemoteReasoner(endpoint=http_endpoint, timeout=5.0).reason(req(L=2, C=2))
    np.testing.assert_array_equal(resp.labels, [0, 7])
    np.testing.assert_allclose(resp.probs[1], [0.5, 0.5])


def test_remote_reasoner_format_error(http_endpoint):
    _Handler.reply = {"text": "no idea, sorry"}
    with pytest.raises(ReasonerFormatError):
        RemoteReasoner(endpoint=http_endpoint, timeout=5.0).reason(req(L=2, C=2))


def test_remote_reasoner_unreachable():
    eng = RemoteReasoner(endpoint="http://127.0.0.1:9/", timeout=0.5, retries=1)
    with pytest.raises(ReasonerUnavailable):
        eng.reason(req(L=1, C=2))
