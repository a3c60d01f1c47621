import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specprobe.model import Category, Channel, MixtureWeights, Probe, validate_probe_set
from specprobe.probes import (GraphFact, ObservabilityFilter, ObservabilityVerdict,
                              StabilityReport, build_pools, emit_probes, enumerate_facts,
                              humanize, informalize, load_lexicon, observability_filter,
                              sample_mixture, stability_harness)
from specprobe.providers.base import ProviderError, RetriableError
from specprobe.providers.template import TemplateBackend

from conftest import PROGRAMS
from oracles import banned_hits, generated_truths

KINDS = {Channel.CFG: ("guard_effect", Category.GUARD),
         Channel.DFG: ("def_use_transform", Category.DATA),
         Channel.SDG: ("event_successor", Category.FLOW)}


def fact(truth, channel=Channel.CFG, fid="f-1", program="T"):
    kind, cat = KINDS[channel]
    return GraphFact(fid, channel, kind, cat, truth, program, "amount is greater than 1000")


# --------------------------------------------------------------- wording

def test_humanize_strips_prefixes():
    assert humanize("LS-DISCOUNT") == "discount"
    assert humanize("WS-BASE-PCT") == "base pct"
    assert humanize("CDEMO-TO-PROGRAM") == "to program"


def test_calcdisc_facts_read_as_behaviour(calcdisc):
    cfg = enumerate_facts(calcdisc, "cfg")
    assert any(f.truth == "The discount is 20." and "amount is greater than 1000" in f.subject
               for f in cfg)
    dfg = enumerate_facts(calcdisc, Channel.DFG)
    assert any("AUDITDB" in f.truth and "20" in f.truth for f in dfg)
    sdg = enumerate_facts(calcdisc, Channel.SDG)
    assert any(f.truth == "AUDITDB is invoked with the discount." for f in sdg)


@pytest.mark.parametrize("name", PROGRAMS)
def test_fact_ids_unique_and_sorted(bundles, name):
    for ch in ("cfg", "dfg", "sdg"):
        facts = enumerate_facts(bundles[name], ch)
        ids = [f.fact_id for f in facts]
        assert ids == sorted(ids) and len(set(ids)) == len(ids)
        assert all(f.channel.value == ch for f in facts)


def test_fact_kind_must_match_channel():
    with pytest.raises(ValueError):
        GraphFact("x", Channel.CFG, "def_use_transform", Category.GUARD, "t", "P", "s")


# ----------------------------------------------------------- observability

def test_file_status_rejected_on_two_terms():
    v = observability_filter(fact("sets file status 35 on OPEN"))
    assert not v.accepted
    assert set(v.rejected_terms) == {"file", "status code"}


def test_clean_truth_accepted():
    v = observability_filter(fact("The discount is 20."))
    assert v.accepted and v.rejected_terms == ()


def test_hyphenated_compounds_are_not_the_term():
    f = ObservabilityFilter()
    assert f.check_text("The file-name field is blank.").accepted
    assert not f.check_text("The FILE is closed.").accepted


def test_paragraph_names_rejected(programs):
    filt = ObservabilityFilter.for_program(programs["calcdisc.cbl"])
    v = filt.check_text("Control reaches 1000-calc-base-tier.")
    assert v.rejected_terms == ("1000-CALC-BASE-TIER",)


def test_verdict_invariant():
    with pytest.raises(ValueError):
        ObservabilityVerdict(True, ("file",))
    with pytest.raises(ValueError):
        ObservabilityVerdict(False, ())


def test_lexicon_has_core_terms():
    terms = load_lexicon()
    for t in ("file", "status code", "VSAM", "copybook", "paragraph"):
        assert t in terms


@pytest.mark.parametrize("name", PROGRAMS)
def test_fixture_facts_pass_filter(programs, bundles, name):
    filt = ObservabilityFilter.for_program(programs[name])
    for ch in ("cfg", "dfg", "sdg"):
        probes, rejected = emit_probes(enumerate_facts(bundles[name], ch), filt)
        assert rejected == []
        assert validate_probe_set(probes) == []


def filter_property(programs, bundles, n_facts, seed):
    """Emit n_facts generated facts spread over every fixture; return
    (emitted, rejected, violations, disagreements)."""
    rng = np.random.default_rng(seed)
    terms = load_lexicon()
    per = n_facts // len(PROGRAMS)
    emitted = rejected = 0
    violations, disagreements = [], []
    for name in PROGRAMS:
        prog = programs[name]
        names = [p.name for p in prog.paragraphs if not p.implicit]
        real = [f for ch in ("cfg", "dfg", "sdg") for f in enumerate_facts(bundles[name], ch)]
        filt = ObservabilityFilter.for_program(prog, terms)
        facts = []
        for j, truth in enumerate(generated_truths(rng, names, per)):
            base = real[j % len(real)]
            facts.append(GraphFact(f"g-{j:05d}", base.channel, base.fact_kind, base.category,
                                   truth, base.program, base.subject, base.payload))
        probes, rej = emit_probes(facts, filt, TemplateBackend())
        emitted += len(probes)
        rejected += len(rej)
        for p in probes:
            if banned_hits(p.truth, terms, names):
                violations.append(p.truth)
        expected_rejects = {f.fact_id for f in facts if banned_hits(f.truth, terms, names)}
        got_rejects = {f.fact_id for f, _ in rej}
        disagreements += sorted(expected_rejects ^ got_rejects)
    return emitted, rejected, violations, disagreements


def test_filter_property_over_generated_facts(programs, bundles):
    emitted, rejected, violations, disagreements = filter_property(programs, bundles, 10_000, 7)
    assert emitted + rejected == 10_000
    assert emitted > 1000 and rejected > 1000  # both sides exercised
    assert violations == []
    assert disagreements == []


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["the", "file", "status", "code", "codes", "copy", "book",
                                 "return", "record", "layout", "layouts", "amount", "35",
                                 "re-file", "CURSOR", "abend", "Buffer", "x"]),
                min_size=1, max_size=8),
       st.sampled_from([" ", "  ", "\t"]))
def test_filter_agrees_with_token_oracle(words, sep):
    text = sep.join(words)
    terms = load_lexicon()
    v = ObservabilityFilter(terms).check_text(text)
    assert set(v.rejected_terms) == banned_hits(text, terms, [])


# ----------------------------------------------------------- informalizing

class Broken:
    def phrase(self, fact, attempt=0):
        raise ValueError("not json")


class Flaky:
    def __init__(self, fails):
        self.fails = fails

    def phrase(self, fact, attempt=0):
        if self.fails:
            self.fails -= 1
            raise RetriableError("busy")
        return "  If the amount exceeds 1000, what discount applies?  "


def test_informalize_copies_truth_and_category():
    f = fact("The discount is 20.")
    p = informalize(f, Flaky(1), sleep=lambda s: None)
    assert p.question == "If the amount exceeds 1000, what discount applies?"
    assert (p.truth, p.category, p.channel, p.id) == (f.truth, f.category, f.channel, f.fact_id)


def test_informalize_falls_back_to_template_on_malformed_output():
    f = fact("The discount is 20.")
    assert informalize(f, Broken()).question == f.template_question()
    assert informalize(f, None).question == "When amount is greater than 1000, what happens?"


def test_informalize_gives_up_after_retries():
    with pytest.raises(RetriableError):
        informalize(fact("x"), Flaky(5), retries=3, sleep=lambda s: None)


# ---------------------------------------------------------------- sampling

@pytest.fixture(scope="module")
def pools(bundles):
    return build_pools(list(bundles.values()), TemplateBackend(), workers=1)


def test_pools_cover_all_channels(pools):
    for ch in (Channel.CFG, Channel.DFG, Channel.SDG):
        assert pools[ch], ch


def test_sample_mixture_is_deterministic(pools):
    w = MixtureWeights(0.0, 0.4, 0.3, 0.3)
    a = sample_mixture(pools, w, 200, seed=11)
    b = sample_mixture(pools, w, 200, seed=11)
    c = sample_mixture(pools, w, 200, seed=12)
    assert [p.to_dict() for p in a] == [p.to_dict() for p in b]
    assert [p.meta["source_id"] for p in a] != [p.meta["source_id"] for p in c]
    assert a[0].id == "p-00000" and a[-1].id == "p-00199"
    assert [p.meta["draw"] for p in a] == list(range(200))


def test_sample_mixture_proportions(pools):
    w = MixtureWeights(0.25, 0.5, 0.3, 0.2)
    gen = TemplateBackend(probe_pool=pools[Channel.CFG])
    n = 20_000
    out = sample_mixture(pools, w, n, seed=3, generator=gen)
    counts = {ch: sum(p.channel is ch for p in out) for ch in Channel}
    # 4 sd binomial tolerance on each share
    for ch, share in [(Channel.LLM, 0.25), (Channel.CFG, 0.75 * 0.5), (Channel.DFG, 0.75 * 0.3),
                      (Channel.SDG, 0.75 * 0.2)]:
        sd = np.sqrt(share * (1 - share) / n)
        assert abs(counts[ch] / n - share) < 4 * sd, ch


def test_sample_mixture_within_channel_is_uniform(pools):
    w = MixtureWeights(0.0, 0.0, 0.0, 1.0)
    n = 20_000
    out = sample_mixture(pools, w, n, seed=5)
    ids = [p.meta["source_id"] for p in out]
    k = len(pools[Channel.SDG])
    counts = np.array([ids.count(p.id) for p in pools[Channel.SDG]])
    from scipy.stats import chisquare
    assert chisquare(counts, np.full(k, n / k)).pvalue > 1e-3


def test_sample_mixture_errors(pools):
    with pytest.raises(ValueError, match="no observable symbolic facts"):
        sample_mixture({Channel.CFG: [], Channel.DFG: [], Channel.SDG: []},
                       MixtureWeights(0.5), 10, seed=1)
    with pytest.raises(ProviderError):
        sample_mixture(pools, MixtureWeights(1.0), 10, seed=1)
    with pytest.raises(ValueError, match="dfg"):
        sample_mixture({Channel.CFG: pools[Channel.CFG], Channel.DFG: []},
                       MixtureWeights(0.0, 0.5, 0.5), 50, seed=1)


def test_alpha_one_needs_no_symbolic_pool(pools):
    gen = TemplateBackend(probe_pool=pools[Channel.DFG])
    out = sample_mixture({}, MixtureWeights(1.0), 30, seed=2, generator=gen)
    assert len(out) == 30 and all(p.channel is Channel.LLM for p in out)


# --------------------------------------------------------------- stability

def test_stability_from_counts():
    rep = StabilityReport.from_counts({"cfg": (100, 95, 80, 93), "dfg": (200, 188, 150, 187)})
    assert rep.pooled.successful_pairs == 283 and rep.pooled.semantic_equivalent == 280
    assert rep.pooled.wilson_ci == pytest.approx((0.969, 0.996), abs=1e-3)
    assert rep.epsilon == pytest.approx(0.031, abs=1e-3)
    assert rep.channels["cfg"].semantic_equiv_rate == pytest.approx(93 / 95)


def test_stability_harness_with_deterministic_phrasing(calcdisc):
    facts = [f for ch in ("cfg", "dfg", "sdg") for f in enumerate_facts(calcdisc, ch)]
    be = TemplateBackend()
    rep = stability_harness(facts, be, be)
    assert rep.pooled.facts_n == len(facts) == rep.pooled.successful_pairs
    assert rep.pooled.exact_matches == len(facts)
    assert set(rep.to_dict()["channels"]) == {"cfg", "dfg", "sdg"}
