"""Rule-based inverse parser: read the answer back off a rationale.

Used to check that every generated rationale entails its sample's answer
under the closed grammar.
"""

from answercritic.microworld import parse_question


def answer_from_rationale(question, rationale):
    kind, slots = parse_question(tuple(question))
    r = tuple(rationale)
    if kind == "COLOR":
        assert r[:2] == ("because", "the") and r[3] == "is", r
        assert r[2] == slots[0], "rationale names a different shape than the question"
        return (r[4],)
    if kind == "SHAPE":
        assert r[:2] == ("because", "the") and r[3] == "is", r
        assert r[4] == slots[0], "rationale names a different color than the question"
        return (r[2],)
    if kind == "COUNT":
        assert r[:3] == ("because", "there", "are"), r
        assert r[4] == slots[0], "rationale names a different shape than the question"
        return (r[3],)
    if kind == "EXIST":
        if r[:4] == ("because", "there", "is", "a"):
            assert r[4:] == slots, "rationale names a different object than the question"
            return ("yes",)
        assert r[:5] == ("because", "no", "object", "is", "a"), r
        assert r[5:] == slots, "rationale names a different object than the question"
        return ("no",)
    raise AssertionError(f"unhandled kind {kind}")
