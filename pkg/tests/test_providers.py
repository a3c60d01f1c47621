import json

import httpx
import pytest

from specprobe.judgement import SpecDocument, judge
from specprobe.model import Category, Channel, Probe
from specprobe.probes import GraphFact, informalize
from specprobe.providers.base import (ROLES, PromptError, ProviderError, ResponseCache,
                                      RetriableError, RoleBinding, UsageLedger, build_providers,
                                      load_prompt, parse_bindings, render_prompt, with_retries)
from specprobe.providers.http import HttpBackend, _json_block, http_call
from specprobe.providers.simulated import SimulatedBackend
from specprobe.providers.template import TemplateBackend

ENDPOINT = "https://llm.invalid/v1/chat/completions"


def reply(content, status=200, usage=(12, 5)):
    body = {"choices": [{"message": {"content": content}}],
            "usage": {"prompt_tokens": usage[0], "completion_tokens": usage[1]}}
    return httpx.Response(status, json=body)


class Script:
    """MockTransport handler that plays back a fixed list of responses."""

    def __init__(self, *responses):
        self.responses = list(responses)
        self.requests = []

    def __call__(self, request):
        self.requests.append(json.loads(request.content))
        return self.responses.pop(0)


def backend(role, script, ledger=None, cache=None, **kw):
    b = RoleBinding(role, "http", ENDPOINT, "m-1", **kw)
    return HttpBackend(b, ledger, cache, transport=httpx.MockTransport(script))


def probe():
    return Probe("t-1", "When the amount exceeds 1000, what discount applies?",
                 "The discount is 20.", Category.GUARD, Channel.CFG, "CALCDISC")


# ---------------------------------------------------------------- prompts

def test_render_prompt_requires_every_placeholder():
    assert render_prompt("Q: {question}", question="why?") == "Q: why?"
    with pytest.raises(PromptError, match="question"):
        render_prompt("Q: {question} {spec}", spec="x")


@pytest.mark.parametrize("role", ROLES)
def test_bundled_prompts_load(role):
    assert "{" in load_prompt(role)


def test_prompt_from_path(tmp_path):
    p = tmp_path / "mine.md"
    p.write_text("custom {x}")
    assert load_prompt(p) == "custom {x}"


# -------------------------------------------------------------- bindings

def test_parse_bindings_defaults_to_template():
    b = parse_bindings({"roles": {"judge": {"backend": "http", "endpoint": ENDPOINT,
                                            "model": "m", "source_code": "x"}}})
    assert set(b) == set(ROLES)
    assert b["judge"].backend == "http" and b["judge"].params == {"source_code": "x"}
    assert b["reviser"].backend == "template"


def test_binding_validation():
    with pytest.raises(ValueError, match="unknown role"):
        RoleBinding("oracle")
    with pytest.raises(ValueError, match="endpoint"):
        RoleBinding("judge", "http")
    with pytest.raises(ValueError, match="unknown roles"):
        parse_bindings({"roles": {"critic": {}}})


def test_simulated_binding_needs_world():
    b = parse_bindings({"roles": {"judge": {"backend": "simulated"}}})
    with pytest.raises(ValueError, match="no world"):
        build_providers(b)


def test_build_providers_types():
    prov = build_providers(parse_bindings({}))
    assert all(isinstance(prov[r], TemplateBackend) for r in ROLES)


# -------------------------------------------------------------------- http

def test_judge_reply_parsed(calcdisc_spec):
    script = Script(reply('```json\n{"answer": "20%", "evidence": ["REQ-DISC-001"], '
                          '"confidence": "confirmed"}\n```'))
    ledger = UsageLedger()
    be = backend("judge", script, ledger)
    ans = judge(SpecDocument(calcdisc_spec), probe(), be)
    assert ans.answer == "20%" and ans.evidence == ("REQ-DISC-001",)
    sent = script.requests[0]
    assert sent["model"] == "m-1" and sent["temperature"] == 0.0
    assert probe().question in sent["messages"][0]["content"]
    assert ledger.totals() == {"calls": 1, "cached_calls": 0, "input_tokens": 12,
                               "output_tokens": 5, "seconds": pytest.approx(ledger.totals()["seconds"])}


def test_silent_reply(calcdisc_spec):
    be = backend("judge", Script(reply('{"answer": null, "confidence": "not_addressed"}')))
    assert judge(SpecDocument(calcdisc_spec), probe(), be).silent


@pytest.mark.parametrize("status", [429, 500, 503])
def test_transient_status_is_retried(calcdisc_spec, status):
    script = Script(httpx.Response(status), httpx.Response(status),
                    reply('{"answer": "20%", "evidence": [], "confidence": "confirmed"}'))
    ans = judge(SpecDocument(calcdisc_spec), probe(), backend("judge", script), retries=3,
                sleep=lambda s: None)
    assert ans.answer == "20%" and not script.responses


def test_client_error_is_not_retried():
    script = Script(httpx.Response(401, text="bad key"), reply("unused"))
    be = backend("comparator", script)
    with pytest.raises(ProviderError, match="401") as ei:
        with_retries(lambda: be.compare("a", "b"), 3, sleep=lambda s: None)
    assert not isinstance(ei.value, RetriableError)
    assert len(script.responses) == 1


def test_transport_error_is_retriable():
    def boom(request):
        raise httpx.ConnectError("refused")
    be = HttpBackend(RoleBinding("comparator", "http", ENDPOINT, "m"), transport=httpx.MockTransport(boom))
    with pytest.raises(RetriableError):
        be.compare("a", "b")


def test_cache_hit_skips_network(tmp_path):
    cache = ResponseCache(tmp_path)
    ledger = UsageLedger()
    script = Script(reply("Equivalent."))
    be = backend("comparator", script, ledger, cache)
    assert be.compare("a", "b") == "equivalent"

    def offline(request):
        raise AssertionError("network used on a cache hit")
    be2 = HttpBackend(RoleBinding("comparator", "http", ENDPOINT, "m-1"), ledger, cache,
                      transport=httpx.MockTransport(offline))
    assert be2.compare("a", "b") == "equivalent"
    t = ledger.totals()
    assert t["calls"] == 1 and t["cached_calls"] == 1


def test_missing_api_key(monkeypatch):
    monkeypatch.delenv("SPECPROBE_TEST_KEY", raising=False)
    b = RoleBinding("comparator", "http", ENDPOINT, "m", api_key_env="SPECPROBE_TEST_KEY")
    with pytest.raises(ProviderError, match="SPECPROBE_TEST_KEY"):
        http_call(b, "prompt", client=httpx.Client(transport=httpx.MockTransport(Script())))


def test_api_key_header(monkeypatch):
    monkeypatch.setenv("SPECPROBE_TEST_KEY", "sk-1")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return reply("unrelated")
    b = RoleBinding("comparator", "http", ENDPOINT, "m", api_key_env="SPECPROBE_TEST_KEY")
    assert http_call(b, "p", client=httpx.Client(transport=httpx.MockTransport(handler))) == "unrelated"
    assert seen["auth"] == "Bearer sk-1"


def test_generator_reply():
    items = [{"question": "What discount applies above 1000?", "answer": "20%",
              "category": "computation", "difficulty": "easy"},
             {"question": "broken"}]
    be = backend("generator", Script(reply(json.dumps({"questions": items}))),
                 params={"program": "CALCDISC", "source_code": "IDENTIFICATION DIVISION."})
    out = be.generate(2, seed=0)
    assert len(out) == 1 and out[0].channel is Channel.LLM and out[0].program == "CALCDISC"


def test_informalizer_malformed_reply_falls_back():
    f = GraphFact("f1", Channel.CFG, "guard_effect", Category.GUARD, "The discount is 20.",
                  "CALCDISC", "amount is greater than 1000")
    be = backend("informalizer", Script(reply("Sure! Here you go:\nline two")))
    assert informalize(f, be).question == f.template_question()
    be = backend("informalizer", Script(reply('"What discount applies above 1000?"')))
    assert informalize(f, be).question == "What discount applies above 1000?"


def test_json_block_variants():
    assert _json_block('noise {"a": 1} tail') == {"a": 1}
    assert _json_block("[1, 2]") == [1, 2]
    with pytest.raises(ValueError):
        _json_block("no json here")


# ---------------------------------------------------------------- offline

def test_simulated_phrasing_failures_and_flips():
    f = GraphFact("f1", Channel.CFG, "guard_effect", Category.GUARD, "t", "P", "x > 1")
    always_fail = SimulatedBackend(fail_rate=1.0)
    with pytest.raises(RetriableError):
        always_fail.phrase(f)
    flipper = SimulatedBackend(flip_rate=1.0)
    assert flipper.phrase(f, 0) == f.template_question()
    assert flipper.phrase(f, 1) == f.template_question(negate=True)


def test_usage_per_iteration():
    led = UsageLedger()
    led.iteration = 0
    led.record("judge", 10, 2)
    led.iteration = 1
    led.record("judge", 5, 1)
    led.record("judge", 5, 1, cached=True)
    per = led.per_iteration()
    assert per[0]["calls"] == 1 and per[1]["calls"] == 1 and per[1]["input_tokens"] == 10
    assert json.loads(json.dumps(led.to_dict()))["totals"]["cached_calls"] == 1


def test_requirement_sentence_from_guidance():
    from specprobe.judgement import classify_action
    from specprobe.model import JudgeAnswer, Verdict
    from specprobe.providers.template import requirement_sentence, rule_compare
    p = Probe("t-1", "When amount is greater than 1000, what happens?", "The discount is 20.",
              Category.GUARD, Channel.CFG, "CALCDISC")
    act = classify_action(p, Verdict.GAP, JudgeAnswer.silent_answer())
    s = requirement_sentence(act.guidance)
    assert s == "When amount is greater than 1000, the system shall ensure that the discount is 20."
    assert requirement_sentence("Plain text stays.") == "Plain text stays."


def test_rule_revise_skips_duplicate_additions():
    from specprobe.model import Action
    from specprobe.providers.template import rule_revise
    a = Action("Add", (), "New rule.", "", "x")
    once = rule_revise("REQ-A-001 Old.\n", [a])
    assert rule_revise(once, [a]) == once
