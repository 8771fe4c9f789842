import asyncio
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from researchtree.clients import ClientError
from researchtree.policy import (LLMPolicy, ParseError, ScriptedPolicy, decide_depth, evaluate_progress,
                                 load_prompt, parse_policy_response, plan_breadth, render_breadth_prompt)
from researchtree.scenario import scenario_from_dict
from researchtree.tree import Finding, TreeConfig

CFG = TreeConfig()


def run(coro):
    return asyncio.run(coro)


class FakeChat:
    """Stands in for ChatClient: returns canned replies or raises."""

    def __init__(self, *replies):
        self.replies = list(replies)
        self.messages = []

    async def complete(self, messages, temperature=0.0):
        self.messages.append(messages)
        reply = self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]
        if isinstance(reply, Exception):
            raise reply
        return reply


class Constant:
    def __init__(self, subs=None, gain=0.0, scores=(0.0, 0.0), error=None):
        self.subs, self.gain, self.scores, self.error = subs, gain, scores, error

    async def propose_breadth(self, query, findings, config):
        if self.error:
            raise self.error
        return self.subs, 0.7

    async def estimate_gain(self, query, findings, depth, config):
        if self.error:
            raise self.error
        return self.gain

    async def score_progress(self, query, contexts, findings, config):
        if self.error:
            raise self.error
        return self.scores


# -- breadth -------------------------------------------------------------------

def test_scripted_breadth_lookup():
    sc = scenario_from_dict({"schema": 1, "breadth_script": {"root": ["q1", "q2", "q3"]}})
    d = run(plan_breadth("root", [], CFG, ScriptedPolicy(sc)))
    assert (d.breadth, d.subqueries, d.fallback) == (3, ("q1", "q2", "q3"), False)


def test_identity_default_breadth():
    d = run(plan_breadth("some query", [], CFG, ScriptedPolicy(scenario_from_dict({"schema": 1}))))
    assert (d.breadth, d.subqueries) == (1, ("some query",))


def test_llm_nine_subqueries_truncated_to_six():
    reply = json.dumps({"subqueries": [f"sub {i}" for i in range(9)], "utility": 0.6})
    d = run(plan_breadth("root", [], CFG, LLMPolicy(FakeChat(reply), "root")))
    assert d.breadth == 6 and d.subqueries == tuple(f"sub {i}" for i in range(6))


def test_breadth_normalized_dedup():
    d = run(plan_breadth("q", [], CFG, Constant(subs=["Alpha  beta", "alpha beta", " ALPHA BETA ", "gamma"])))
    assert d.subqueries == ("Alpha  beta", "gamma")


@pytest.mark.parametrize("error", [ClientError("down"), ParseError("junk"), RuntimeError("boom")])
def test_breadth_fallback(error):
    d = run(plan_breadth("q", [], CFG, Constant(error=error)))
    assert (d.breadth, d.subqueries, d.fallback) == (1, ("q",), True)


def test_breadth_empty_proposal_falls_back():
    d = run(plan_breadth("q", [], CFG, Constant(subs=["", "  "])))
    assert d.subqueries == ("q",) and d.fallback


def test_breadth_requires_query():
    with pytest.raises(ValueError):
        run(plan_breadth("  ", [], CFG, Constant(subs=["a"])))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.text(max_size=8), max_size=15), st.integers(1, 6), st.integers(0, 3))
def test_breadth_bound_for_any_backend_output(subs, mb, flex):
    cfg = TreeConfig(max_breadth=mb, flex_breadth=flex)
    d = run(plan_breadth("q", [], cfg, Constant(subs=subs)))
    assert 1 <= d.breadth <= mb + flex
    assert d.breadth == len(d.subqueries)
    keys = [" ".join(s.lower().split()) for s in d.subqueries]
    assert len(set(keys)) == len(keys)


# -- depth ---------------------------------------------------------------------

@pytest.mark.parametrize("gain,expect", [(0.25, True), (0.05, False), (0.1, False), (0.1000001, True)])
def test_depth_indicator(gain, expect):
    d = run(decide_depth("q", [], 3, CFG, Constant(gain=gain)))
    assert d.go_deeper is expect and d.marginal_gain == pytest.approx(gain)


def test_depth_cap_ignores_backend():
    backend = Constant(gain=1.0)
    d = run(decide_depth("q", [], 10, CFG, backend))
    assert not d.go_deeper


def test_depth_fallback_stops():
    d = run(decide_depth("q", [], 2, CFG, Constant(error=ClientError("x"))))
    assert (d.go_deeper, d.fallback) == (False, True)


def test_depth_requires_positive_depth():
    with pytest.raises(ValueError):
        run(decide_depth("q", [], 0, CFG, Constant()))


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.integers(1, 15), st.integers(1, 12))
def test_depth_never_deeper_at_cap(gain, depth, max_depth):
    cfg = TreeConfig(max_depth=max_depth)
    d = run(decide_depth("q", [], depth, cfg, Constant(gain=gain)))
    if depth >= max_depth:
        assert not d.go_deeper
    else:
        assert d.go_deeper == (d.marginal_gain > cfg.tau)


# -- orchestration ------------------------------------------------------------

def test_verdict_satisfied():
    v = run(evaluate_progress("q", [], [], CFG, Constant(scores=(0.9, 0.85))))
    assert (v.delta, v.phi, v.psi) == (0, 0.9, 0.85)


def test_verdict_one_threshold_fails():
    v = run(evaluate_progress("q", [], [], CFG, Constant(scores=(0.9, 0.5))))
    assert (v.delta, v.phi, v.psi) == (1, 0.9, 0.5)


def test_verdict_scripted_default_empty():
    v = run(evaluate_progress("q", [], [], CFG, ScriptedPolicy(scenario_from_dict({"schema": 1}))))
    assert (v.delta, v.phi, v.psi) == (1, 0.0, 0.0)


def test_verdict_fallback_continues():
    v = run(evaluate_progress("q", [], [], CFG, Constant(error=ParseError("bad"))))
    assert v.delta == 1 and v.fallback


def test_verdict_bucket_by_findings():
    sc = scenario_from_dict({"schema": 1, "verdict_script": {"q": [{"min_findings": 0, "phi": 0.1, "psi": 0.1},
                                                      {"min_findings": 2, "phi": 0.9, "psi": 0.9}]}})
    pol = ScriptedPolicy(sc)
    fs = [Finding.make("R1", f"f{i}", 1) for i in range(3)]
    assert run(evaluate_progress("q", [], fs[:1], CFG, pol)).delta == 1
    assert run(evaluate_progress("q", [], fs, CFG, pol)).delta == 0


def test_scripted_determinism():
    sc = scenario_from_dict({"schema": 1, "breadth_script": {"r": ["a", "b"]}, "depth_script": {"a": 0.4}})
    pol = ScriptedPolicy(sc)
    first = [run(plan_breadth("r", [], CFG, pol)), run(decide_depth("a", [], 1, CFG, pol))]
    second = [run(plan_breadth("r", [], CFG, pol)), run(decide_depth("a", [], 1, CFG, pol))]
    assert first == second


# -- parsing -------------------------------------------------------------------

def test_parse_verdict_direct():
    assert parse_policy_response('{"phi":0.92,"psi":0.81}', "verdict") == (0.92, 0.81)


def test_parse_verdict_clamped():
    assert parse_policy_response('{"phi":1.7,"psi":-0.2}', "verdict") == (1.0, 0.0)


def test_parse_not_json():
    with pytest.raises(ParseError):
        parse_policy_response("not json", "verdict")


def test_parse_missing_field():
    with pytest.raises(ParseError):
        parse_policy_response('{"phi": 0.5}', "verdict")


def test_parse_json_embedded_in_prose():
    raw = 'Sure! Here you go:\n```json\n{"marginal_gain": 0.3}\n```'
    assert parse_policy_response(raw, "depth") == 0.3


def test_parse_breadth_and_findings():
    subs, u = parse_policy_response('{"subqueries": ["a", "b"], "utility": 3}', "breadth")
    assert subs == ["a", "b"] and u == 1.0
    items = parse_policy_response('{"findings": [{"text": "t", "sources": ["u"]}, "junk"]}', "findings")
    assert items == [("t", ["u"])]
    with pytest.raises(ParseError):
        parse_policy_response('{"subqueries": []}', "breadth")


# -- prompts -------------------------------------------------------------------

def test_breadth_prompt_placeholders_rendered():
    text = render_breadth_prompt("what is X", [Finding.make("R1", "X is Y", 1)], CFG)
    assert "[initial_query]" not in text and "[max_breadth+flex_breadth]" not in text
    assert "what is X" in text and "X is Y" in text and "6" in text


def test_all_prompts_load():
    for name in ("breadth_planner", "orchestration", "depth", "synthesis", "summarize"):
        assert load_prompt(name).strip()


def test_llm_policy_verdict_roundtrip():
    chat = FakeChat('{"phi": 0.85, "psi": 0.9}')
    v = run(evaluate_progress("goal", [], [Finding.make("R1", "fact", 1)], CFG, LLMPolicy(chat, "goal")))
    assert v.delta == 0
    system = chat.messages[0][0]["content"]
    assert system == load_prompt("orchestration")
    assert "fact" in chat.messages[0][1]["content"]


def test_llm_policy_transport_failure_falls_back():
    chat = FakeChat(ClientError("503"))
    pol = LLMPolicy(chat, "q")
    assert run(plan_breadth("q", [], CFG, pol)).fallback
    assert run(decide_depth("q", [], 1, CFG, pol)).fallback
    assert run(evaluate_progress("q", [], [], CFG, pol)).fallback
