import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from namtde.errors import ContractViolation, ProtocolError, TransportError
from namtde.tde import (
    CaptionRecord,
    CaptionerEndpoint,
    MockCaptionerClient,
    TemplateBank,
    caption_image,
    diversity_report,
    dynamic_instruction,
    load_captions,
    load_template_bank,
    mock_caption,
    save_captions,
    save_template_bank,
    skeleton_fingerprint,
    static_instruction,
)


def test_static_instruction_stable_and_plain():
    a = static_instruction()
    b = static_instruction()
    assert a == b
    assert "{" not in a and "}" not in a
    assert a.startswith("Write a description about the overall appearance")
    assert a.endswith("Do not imagine any contents that are not in the image.")


def test_dynamic_instruction_splices_template_once():
    out = dynamic_instruction("T")
    assert out.count("T") >= 1
    assert "the template: 'T'. If some requirements" in out
    other = dynamic_instruction("U")
    diff = [i for i, (x, y) in enumerate(zip(out, other)) if x != y]
    assert len(diff) == 1  # single-character templates differ in one span only


def test_dynamic_instruction_rejects_empty():
    with pytest.raises(ContractViolation):
        dynamic_instruction("")


def test_builtin_bank_has_46_unique_templates():
    bank = load_template_bank()
    assert len(bank) == 46
    assert len(set(bank.templates)) == 46
    for t in bank.templates:
        for slot in ("{color}", "{garment}", "{shoes}", "{item}"):
            assert slot in t


def test_bank_file_round_trip(tmp_path):
    bank = TemplateBank(("a {color} {garment}", "b {color} {garment}"), bank_id="t", source_note="note")
    path = tmp_path / "bank.txt"
    save_template_bank(path, bank)
    loaded = load_template_bank(path)
    assert loaded.templates == bank.templates
    assert loaded.source_note == "note"


def test_bank_rejects_duplicates_and_empties():
    with pytest.raises(ContractViolation):
        TemplateBank(("x", "x"))
    with pytest.raises(ContractViolation):
        TemplateBank(())


ATTRS = {"color": "red", "garment": "jacket", "shoes": "boots", "item": "umbrella"}
POOLS = {
    "color": ["red", "blue", "green"],
    "garment": ["jacket", "coat"],
    "shoes": ["boots", "heels"],
    "item": ["umbrella", "handbag"],
}


def test_mock_caption_noise_rate_zero_all_clean():
    rec = mock_caption(ATTRS, POOLS, 0.0, np.random.default_rng(0), image_id="im0")
    assert rec.noise_labels is not None and not any(rec.noise_labels)
    assert "red" in rec.text and "jacket" in rec.text


def test_mock_caption_noise_rate_one_all_slots_noisy():
    rec = mock_caption(ATTRS, POOLS, 1.0, np.random.default_rng(0), image_id="im0")
    assert sum(rec.noise_labels) == 4
    assert "red" not in rec.text.split()


def test_mock_caption_monte_carlo_rate():
    rng = np.random.default_rng(3)
    labeled = 0
    slots = 0
    for _ in range(2500):
        rec = mock_caption(ATTRS, POOLS, 0.3, rng, image_id="im0")
        labeled += sum(rec.noise_labels)
        slots += 4
    assert slots == 10_000
    assert 0.28 <= labeled / slots <= 0.32


def test_mock_caption_reproducible():
    bank = load_template_bank()
    a = mock_caption(ATTRS, POOLS, 0.5, np.random.default_rng(9), bank=bank, template_index=3)
    b = mock_caption(ATTRS, POOLS, 0.5, np.random.default_rng(9), bank=bank, template_index=3)
    assert a == b


def test_mock_caption_requires_attributes_and_distractors():
    with pytest.raises(ContractViolation):
        mock_caption({}, POOLS, 0.0, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        mock_caption(ATTRS, {"color": ["red"]}, 1.0, np.random.default_rng(0))


def test_caption_record_invariants():
    with pytest.raises(ContractViolation):
        CaptionRecord(image_id="i", text="x", source="dynamic:mock0")
    with pytest.raises(ContractViolation):
        CaptionRecord(image_id="i", text="a b", source="static:mock0", noise_labels=(True,))


def test_caption_store_round_trip(tmp_path):
    recs = [
        mock_caption(ATTRS, POOLS, 0.3, np.random.default_rng(1), image_id="im0", caption_id="c0"),
        mock_caption(ATTRS, POOLS, 0.3, np.random.default_rng(2), bank=load_template_bank(), template_index=7, image_id="im1", caption_id="c1"),
    ]
    path = tmp_path / "caps.jsonl"
    save_captions(path, recs)
    assert load_captions(path) == recs


def test_skeleton_fingerprint_replaces_attribute_words():
    fp = skeleton_fingerprint("A RED jacket, nice boots!", {"red", "jacket", "boots"})
    assert fp == "a _ _ nice _"


def test_diversity_identical_captions():
    recs = [CaptionRecord(image_id="i", text="same words here", source="static:mock0") for _ in range(5)]
    rep = diversity_report(recs, set())
    assert rep.distinct_skeletons == 1
    assert rep.skeleton_ratio == pytest.approx(1 / 5)


def test_diversity_all_distinct():
    recs = [
        CaptionRecord(image_id="i", text=f"caption number {i} talks differently", source="static:mock0")
        for i in range(4)
    ]
    rep = diversity_report(recs, set())
    assert rep.skeleton_ratio == 1.0


def test_dynamic_mock_strictly_more_diverse_than_static():
    bank = load_template_bank()
    rng = np.random.default_rng(0)
    static = [
        mock_caption(ATTRS, POOLS, 0.0, rng, image_id=f"im{i}", captioner_id=f"mock{i % 2}")
        for i in range(1000)
    ]
    dynamic = [
        mock_caption(
            ATTRS, POOLS, 0.0, rng, bank=bank,
            template_index=int(rng.integers(len(bank))),
            image_id=f"im{i}", captioner_id=f"mock{i % 2}",
        )
        for i in range(1000)
    ]
    vocab = {w for pool in POOLS.values() for w in pool}
    rep_s = diversity_report(static, vocab)
    rep_d = diversity_report(dynamic, vocab)
    assert rep_d.distinct_skeletons > rep_s.distinct_skeletons


class _Flaky(BaseHTTPRequestHandler):
    failures_left = 0
    mode = "ok"

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        cls = type(self)
        if cls.failures_left > 0:
            cls.failures_left -= 1
            self.send_response(500)
            payload = json.dumps({"error": "busy"}).encode()
        elif cls.mode == "garbage":
            self.send_response(200)
            payload = b"not json at all"
        else:
            self.send_response(200)
            payload = json.dumps({"caption": f"seen {body['image_ref']}"}).encode()
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def flaky_server():
    server = HTTPServer(("127.0.0.1", 0), _Flaky)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()


def test_caption_image_retries_then_succeeds(flaky_server):
    _Flaky.failures_left = 2
    _Flaky.mode = "ok"
    endpoint = CaptionerEndpoint(
        base_url=f"http://127.0.0.1:{flaky_server.server_port}", retry_budget=2, backoff=0.01
    )
    rec = caption_image(endpoint, "img7", static_instruction())
    assert rec.text == "seen img7"


def test_caption_image_budget_zero_unreachable():
    endpoint = CaptionerEndpoint(base_url="http://127.0.0.1:9", retry_budget=0, timeout=0.5)
    with pytest.raises(TransportError):
        caption_image(endpoint, "img", "instr")


def test_caption_image_exhausted_budget(flaky_server):
    _Flaky.failures_left = 5
    _Flaky.mode = "ok"
    endpoint = CaptionerEndpoint(
        base_url=f"http://127.0.0.1:{flaky_server.server_port}", retry_budget=1, backoff=0.01
    )
    with pytest.raises(TransportError):
        caption_image(endpoint, "img", "instr")


def test_caption_image_malformed_body_is_protocol_error(flaky_server):
    _Flaky.failures_left = 0
    _Flaky.mode = "garbage"
    endpoint = CaptionerEndpoint(
        base_url=f"http://127.0.0.1:{flaky_server.server_port}", retry_budget=2, backoff=0.01
    )
    with pytest.raises(ProtocolError):
        caption_image(endpoint, "img", "instr")
    _Flaky.mode = "ok"


def test_mock_client_deterministic():
    a = MockCaptionerClient(seed=4).caption("im1", "do it")
    b = MockCaptionerClient(seed=4).caption("im1", "do it")
    assert a == b
    probes = [MockCaptionerClient(seed=4).caption(f"im{i}", "do it").text for i in range(8)]
    other = [MockCaptionerClient(seed=5).caption(f"im{i}", "do it").text for i in range(8)]
    assert probes != other
